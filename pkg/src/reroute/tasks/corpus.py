"""
Synthetic algorithmic domains. One item per record, each ending in ";":

    arithmetic  Q:47+8=A:55;
    copy        C:kxq|kxq;
    reverse     R:kxq|qxk;
    keyvalue    K:a=3,f=7,c=1?f=7;
    sort        S:3817|1378;

The answer of an item is everything after its last delimiter ("=A:", "|", or
"?k="). Corpus files hold one ``domain<TAB>text`` line per item.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

DOMAINS = ("arithmetic", "copy", "reverse", "keyvalue", "sort")
LETTERS = string.ascii_lowercase
DIGITS = string.digits


class CorpusConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    min_len: int
    max_len: int
    alphabet: str
    weight: float = 1.0


DEFAULT_SPECS = (
    DomainSpec("arithmetic", 1, 2, DIGITS),
    DomainSpec("copy", 2, 6, LETTERS),
    DomainSpec("reverse", 2, 6, LETTERS),
    DomainSpec("keyvalue", 2, 4, LETTERS),
    DomainSpec("sort", 2, 6, DIGITS),
)


@dataclass(frozen=True)
class Item:
    domain: str
    prompt: str
    answer: str

    @property
    def text(self) -> str:
        return self.prompt + self.answer


def _word(rng, alphabet, n):
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))


def make_item(spec: DomainSpec, rng: np.random.Generator) -> Item:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    if spec.name == "arithmetic":
        a, b = (int(x) for x in rng.integers(0, 10**n, 2))
        return Item(spec.name, f"Q:{a}+{b}=A:", f"{a + b};")
    if spec.name == "copy":
        w = _word(rng, spec.alphabet, n)
        return Item(spec.name, f"C:{w}|", f"{w};")
    if spec.name == "reverse":
        w = _word(rng, spec.alphabet, n)
        return Item(spec.name, f"R:{w}|", f"{w[::-1]};")
    if spec.name == "keyvalue":
        keys = [spec.alphabet[i] for i in rng.choice(len(spec.alphabet), n, replace=False)]
        vals = [DIGITS[i] for i in rng.integers(0, 10, n)]
        q = int(rng.integers(0, n))
        body = ",".join(f"{k}={v}" for k, v in zip(keys, vals))
        return Item(spec.name, f"K:{body}?{keys[q]}=", f"{vals[q]};")
    if spec.name == "sort":
        w = _word(rng, spec.alphabet, n)
        return Item(spec.name, f"S:{w}|", "".join(sorted(w)) + ";")
    raise CorpusConfigError(f"unknown domain {spec.name!r}")


def mixture(specs) -> tuple[list[DomainSpec], np.ndarray]:
    specs = list(specs)
    if not specs:
        raise CorpusConfigError("empty domain spec list")
    for s in specs:
        if s.name not in DOMAINS:
            raise CorpusConfigError(f"unknown domain {s.name!r}")
        if s.min_len < 1 or s.max_len < s.min_len:
            raise CorpusConfigError(f"{s.name}: bad length bounds [{s.min_len}, {s.max_len}]")
    w = np.array([s.weight for s in specs], dtype=np.float64)
    if (w < 0).any() or w.sum() <= 0:
        raise CorpusConfigError("mixture weights must be nonnegative with positive sum")
    return specs, w / w.sum()


def gen_corpus(specs=DEFAULT_SPECS, size: int = 1000, seed: int = 0) -> list[Item]:
    """``size`` items drawn from the domain mixture, deterministic under ``seed``."""
    if size < 1:
        raise CorpusConfigError("size must be >= 1")
    specs, w = mixture(specs)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(specs), size=size, p=w)
    return [make_item(specs[i], rng) for i in picks]


def items_by_domain(items) -> dict[str, list[Item]]:
    out: dict[str, list[Item]] = {}
    for it in items:
        out.setdefault(it.domain, []).append(it)
    return out


def write_corpus(items, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            fh.write(f"{it.domain}\t{it.text}\n")


def split_answer(domain: str, text: str) -> Item:
    if domain == "arithmetic":
        cut = text.index("=A:") + 3
    elif domain == "keyvalue":
        cut = text.index("?") + 3
    elif domain in ("copy", "reverse", "sort"):
        cut = text.index("|") + 1
    else:
        raise CorpusConfigError(f"unknown domain {domain!r}")
    return Item(domain, text[:cut], text[cut:])


def read_corpus(path) -> list[Item]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                domain, text = line.split("\t")
                items.append(split_answer(domain, text))
            except ValueError as exc:
                raise CorpusConfigError(f"{path}:{n}: malformed corpus line") from exc
    return items

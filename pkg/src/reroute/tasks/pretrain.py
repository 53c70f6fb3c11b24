"""
Toy pretraining on the synthetic mixture.

Training text is a stream of documents, each a run of corpus items followed
by the EOS symbol. With probability ``pure_doc_prob`` a document draws all of
its items from one domain, otherwise each item's domain is drawn separately.
Batches are random windows over the stream. The objective is mean next-token
cross-entropy plus ``aux_coef`` times the load-balancing term.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from reroute import numcore as nc
from reroute.analysis import utilization
from reroute.config import build, parse_kv
from reroute.model import ModelConfig, MoEModel
from reroute.rerouter import AdamState, adam_step
from reroute.tasks.corpus import Item, items_by_domain
from reroute.tasks.tokenizer import EOS, VOCAB_SIZE, tokenize

log = logging.getLogger(__name__)

COLLAPSE_SHARE = 0.9


class DivergenceError(FloatingPointError):
    pass


class ExpertCollapseWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    steps: int = 1200
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 3e-3
    warmup: int = 50
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    aux_coef: float = 0.01
    corpus_size: int = 20000
    corpus_seed: int = 1
    seed: int = 0
    pure_doc_prob: float = 0.5
    doc_min_items: int = 3
    doc_max_items: int = 8
    log_every: int = 100


@dataclass
class Recipe:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_text(cls, text: str) -> "Recipe":
        values = parse_kv(text)
        unknown = [k for k in values if not k.startswith(("model.", "train."))]
        if unknown:
            raise ValueError(f"unknown recipe keys: {unknown}")
        return cls(build(ModelConfig, values, "model."), build(TrainConfig, values, "train."))

    @classmethod
    def from_file(cls, path) -> "Recipe":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def document_stream(items: list[Item], n_tokens: int, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """At least ``n_tokens`` token ids of concatenated documents."""
    pools = items_by_domain(items)
    domains = sorted(pools)
    out: list[int] = []
    while len(out) < n_tokens:
        n = int(rng.integers(cfg.doc_min_items, cfg.doc_max_items + 1))
        if rng.random() < cfg.pure_doc_prob:
            pool = pools[domains[int(rng.integers(len(domains)))]]
            picks = [pool[i] for i in rng.integers(0, len(pool), n)]
        else:
            picks = [items[i] for i in rng.integers(0, len(items), n)]
        out.extend(tokenize("".join(it.text for it in picks) + EOS))
    return np.array(out, dtype=np.int64)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))


def train_step(model: MoEModel, x: np.ndarray, y: np.ndarray, aux_coef: float):
    with nc.Tape() as tape:
        p = {k: tape.watch(v, name=k) for k, v in model.params.items()}
        logits, entries, aux = model.run(x, params=p, aux=True)
        ce = nc.cross_entropy(logits, y.reshape(-1), reduction="mean")
        total = nc.add(ce, nc.scale(aux, aux_coef)) if aux_coef else ce
    grads = nc.backward(total, p)
    return ce.item(), aux.item(), grads, entries


def routing_health(model: MoEModel, tokens: np.ndarray) -> dict:
    """Per-layer usage entropy and largest per-token expert share on a token batch."""
    _, entries, _ = model.run(tokens)
    cfg = model.config
    sel = np.stack([e["selected"] for e in entries], axis=1)
    freq = utilization(sel, cfg.n_experts)
    usage = freq / cfg.k_active
    ent = [float(-(u[u > 0] * np.log(u[u > 0])).sum()) for u in usage]
    return {"usage_entropy": ent, "max_share": [float(r.max()) for r in freq]}


def pretrain_toy(recipe: Recipe, items: list[Item], progress=None):
    """
    Train a fresh model. Returns ``(model, history, health)`` where history rows
    are ``(step, ce, aux)``. Deterministic under the recipe seeds.
    """
    if not items:
        raise ValueError("corpus is empty")
    mcfg, tcfg = recipe.model, recipe.train
    if mcfg.vocab_size != VOCAB_SIZE:
        raise ValueError(f"model vocab_size {mcfg.vocab_size} != tokenizer size {VOCAB_SIZE}")
    if tcfg.seq_len + 1 > mcfg.max_seq + 1:
        raise ValueError("seq_len exceeds max_seq")
    rng = np.random.default_rng(tcfg.seed)
    stream = document_stream(items, tcfg.steps * tcfg.batch_size * 4 + tcfg.seq_len + 1, tcfg, rng)
    model = MoEModel(mcfg)
    params = {k: v.copy() for k, v in model.params.items()}
    state = {k: AdamState(np.zeros_like(v), np.zeros_like(v), 0) for k, v in params.items()}
    history = []
    for step in range(tcfg.steps):
        starts = rng.integers(0, len(stream) - tcfg.seq_len - 1, tcfg.batch_size)
        win = np.stack([stream[s:s + tcfg.seq_len + 1] for s in starts])
        try:
            ce, aux, grads, _ = train_step(model, win[:, :-1], win[:, 1:], tcfg.aux_coef)
        except nc.NonFiniteError as exc:
            raise DivergenceError(f"step {step}: {exc}") from exc
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not np.isfinite(norm):
            raise DivergenceError(f"step {step}: non-finite gradient norm")
        clip = min(1.0, tcfg.grad_clip / (norm + 1e-12))
        lr = lr_at(step, tcfg)
        for k in params:
            params[k], state[k] = adam_step(params[k], grads[k] * clip, state[k], lr, 0.0, 1e-8)
        model = MoEModel(mcfg, params)
        history.append((step, ce, aux))
        if progress is not None and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
            progress(step, ce, aux)

    probe = np.stack([stream[i * tcfg.seq_len:(i + 1) * tcfg.seq_len] for i in range(8)])
    health = routing_health(model, probe)
    for layer, share in enumerate(health["max_share"]):
        if share > COLLAPSE_SHARE:
            warnings.warn(
                f"layer {layer} routes {share:.0%} of tokens to one expert", ExpertCollapseWarning, stacklevel=2
            )
    return model, history, health

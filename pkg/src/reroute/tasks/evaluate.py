"""
Continuation-loss evaluation under aligned and shifted few-shot prefixes.

For a target-domain query, the aligned prompt prepends ``n_shots`` solved
items of the same domain, the shifted prompt prepends items drawn from the
other domains. Baseline scores the query's answer with zero deltas; rerouted
first runs one optimization phase on the prompt. Loss is mean cross-entropy
per answer token; accuracy is teacher-forced argmax agreement.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from reroute import numcore as nc
from reroute.model import MoEModel
from reroute.rerouter import DeltaSet, SessionConfig, optimize_deltas
from reroute.tasks.corpus import DEFAULT_SPECS, Item, gen_corpus, items_by_domain
from reroute.tasks.tokenizer import tokenize

CONDITIONS = ("aligned", "shifted")


@dataclass(frozen=True)
class ShiftPrompt:
    prompt_id: int
    domain: str
    condition: str
    prompt: str
    answer: str


def build_shift_prompts(items: list[Item], n_per_domain: int = 20, n_shots: int = 5, seed: int = 0) -> list[ShiftPrompt]:
    """Paired aligned/shifted prompts per target query, in deterministic order."""
    rng = np.random.default_rng(seed)
    pools = items_by_domain(items)
    domains = sorted(pools)
    if len(domains) < 2:
        raise ValueError("shifted prompts need at least two domains")
    out = []
    for d in domains:
        others = [o for o in domains if o != d]
        for _ in range(n_per_domain):
            query = pools[d][int(rng.integers(len(pools[d])))]
            aligned = [pools[d][int(i)] for i in rng.integers(0, len(pools[d]), n_shots)]
            shifted = []
            for _ in range(n_shots):
                pool = pools[others[int(rng.integers(len(others)))]]
                shifted.append(pool[int(rng.integers(len(pool)))])
            for cond, shots in (("aligned", aligned), ("shifted", shifted)):
                text = "".join(s.text for s in shots) + query.prompt
                out.append(ShiftPrompt(len(out), d, cond, text, query.answer))
    return out


def continuation_scores(model: MoEModel, prompt_ids, answer_ids, deltas=None) -> tuple[float, float]:
    """Mean per-token NLL and teacher-forced accuracy of ``answer_ids`` after ``prompt_ids``."""
    seq = np.concatenate([prompt_ids, answer_ids])
    logits, _ = model.forward(seq[:-1], deltas)
    rows = logits[len(prompt_ids) - 1:]
    loss = nc.cross_entropy(rows, answer_ids, reduction="mean").item()
    acc = float(np.mean(rows.argmax(axis=1) == answer_ids))
    return loss, acc


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    session: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        out = {}
        for cond in CONDITIONS + ("all",):
            rows = [r for r in self.rows if cond == "all" or r["condition"] == cond]
            if not rows:
                continue
            b = np.array([r["baseline_loss"] for r in rows])
            a = np.array([r["rerouted_loss"] for r in rows])
            out[cond] = {
                "n": len(rows),
                "baseline_loss": float(b.mean()),
                "rerouted_loss": float(a.mean()),
                "mean_delta": float((a - b).mean()),
                "win_rate": float(np.mean(a < b)),
                "baseline_acc": float(np.mean([r["baseline_acc"] for r in rows])),
                "rerouted_acc": float(np.mean([r["rerouted_acc"] for r in rows])),
            }
        return out

    def to_json(self) -> str:
        return json.dumps({"session": self.session, "rows": self.rows, "aggregates": self.aggregates()},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["rows"], d.get("session", {}))


def evaluate_prompt(model: MoEModel, sp: ShiftPrompt, config: SessionConfig) -> dict:
    p, a = np.array(tokenize(sp.prompt)), np.array(tokenize(sp.answer))
    b_loss, b_acc = continuation_scores(model, p, a)
    rng = np.random.default_rng([config.rng_seed, sp.prompt_id])
    res = optimize_deltas(model, p, DeltaSet.for_model(model), config, rng=rng)
    r_loss, r_acc = continuation_scores(model, p, a, res.deltas)
    return {
        **asdict(sp),
        "baseline_loss": b_loss,
        "rerouted_loss": r_loss,
        "baseline_acc": b_acc,
        "rerouted_acc": r_acc,
        "context_losses": res.losses,
    }


def eval_shift_suite(model: MoEModel, config: SessionConfig, items: list[Item] | None = None,
                     n_per_domain: int = 20, n_shots: int = 5, seed: int = 0, threads: int = 1) -> EvalReport:
    if items is None:
        items = gen_corpus(DEFAULT_SPECS, 2000, seed=10_000 + seed)
    prompts = build_shift_prompts(items, n_per_domain, n_shots, seed)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(lambda sp: evaluate_prompt(model, sp, config), prompts))
    else:
        rows = [evaluate_prompt(model, sp, config) for sp in prompts]
    return EvalReport(rows, config.to_dict())

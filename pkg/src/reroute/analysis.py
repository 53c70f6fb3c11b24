"""
Routing diagnostics: pathway strings and their edit distance, routing entropy,
expert-utilization shift, and an analytic operation count for sessions.

Pathway strings list the selected experts of each layer in descending router
probability, comma-separated, with layers joined by hyphens ("3,1-5,2").
Edit distance is taken over characters of that string, so a two-digit expert
index costs more to change than a one-digit one.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from reroute.kernels import expert_counts, levenshtein

ENTROPY_BLOCK = 16


class TraceError(ValueError):
    pass


# -- pathways -------------------------------------------------------------------


def pathway_from_selection(selection) -> str:
    """Pathway string from a [layers x k] array of expert indices."""
    return "-".join(",".join(str(int(e)) for e in row) for row in selection)


def pathway_string(trace, token: int, n_layers: int | None = None) -> str:
    sel = np.asarray(trace.selected)
    if not -sel.shape[0] <= token < sel.shape[0]:
        raise TraceError(f"token {token} not in trace of {sel.shape[0]} tokens")
    if n_layers is not None and sel.shape[1] != n_layers:
        raise TraceError(f"trace covers {sel.shape[1]} of {n_layers} layers")
    return pathway_from_selection(sel[token])


def parse_pathway(s: str) -> np.ndarray:
    """Inverse of ``pathway_from_selection`` (equal k per layer)."""
    return np.array([[int(e) for e in seg.split(",")] for seg in s.split("-")], dtype=np.int64)


def pathway_edit_distance(a: str, b: str) -> int:
    return levenshtein(a, b)


def layerwise_edit_distance(before, after) -> np.ndarray:
    """
    Mean per-layer pathway edit distance between two selection arrays
    (tokens x layers x k) at matched token positions. The longer run is cut to
    the shorter one.
    """
    before, after = np.asarray(before), np.asarray(after)
    n = min(len(before), len(after))
    if n == 0:
        raise TraceError("no matched token positions")
    if before.shape[1:] != after.shape[1:]:
        raise TraceError(f"selection shapes differ: {before.shape[1:]} vs {after.shape[1:]}")
    L = before.shape[1]
    out = np.zeros(L)
    for t in range(n):
        for l in range(L):
            out[l] += levenshtein(pathway_from_selection(before[t, l:l + 1]), pathway_from_selection(after[t, l:l + 1]))
    return out / n


def mean_pathway_distance(before, after) -> float:
    """Mean whole-pathway edit distance at matched token positions."""
    n = min(len(before), len(after))
    if n == 0:
        return 0.0
    return float(np.mean([levenshtein(pathway_from_selection(before[t]), pathway_from_selection(after[t])) for t in range(n)]))


# -- entropy ----------------------------------------------------------------------


def routing_entropy(p) -> float:
    """Shannon entropy (nats) of one expert-probability vector; 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("input is not a probability vector")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def block_entropy(entropy, block: int = ENTROPY_BLOCK) -> np.ndarray:
    """
    Average a [tokens x layers] entropy matrix over layers, then over
    consecutive ``block``-token windows (the last window may be short).
    """
    e = np.asarray(entropy, dtype=np.float64)
    if e.ndim == 2:
        e = e.mean(axis=1)
    return np.array([e[i:i + block].mean() for i in range(0, len(e), block)])


# -- utilization --------------------------------------------------------------------


def utilization(selected, n_experts: int, normalize: bool = True) -> np.ndarray:
    """
    Expert activation matrix [layers x experts] from a (tokens, layers, k)
    selection array. Counts rows sum to k * tokens; normalized rows sum to k.
    """
    sel = np.asarray(selected, dtype=np.int64)
    counts = expert_counts(sel, n_experts)
    if not normalize:
        return counts
    if sel.shape[0] == 0:
        raise TraceError("empty token set")
    return counts / sel.shape[0]


def utilization_shift(before, after) -> np.ndarray:
    """Frequency difference (after - before) scaled to max |value| = 1."""
    b, a = np.asarray(before, dtype=np.float64), np.asarray(after, dtype=np.float64)
    if b.shape != a.shape:
        raise ValueError(f"shape mismatch: {b.shape} vs {a.shape}")
    diff = a - b
    peak = np.abs(diff).max() if diff.size else 0.0
    return diff if peak == 0 else diff / peak


# -- operation count ------------------------------------------------------------------


def position_flops(cfg, t: int) -> int:
    """
    Multiply-add count (x2) for one position attending to ``t`` positions:
    q/k/v/o projections, scores and weighted sum, router, k routed plus the
    shared experts, output head. Norms, softmaxes and embeddings are ignored.
    """
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 8 * d * d + 4 * t * d + 2 * d * cfg.n_experts + 4 * (cfg.k_active + cfg.n_shared) * d * f
    return cfg.n_layers * per_layer + 2 * d * cfg.vocab_size


def prefill_flops(cfg, T: int) -> int:
    """Sum of ``position_flops`` over positions 1..T (closed form)."""
    if T <= 0:
        return 0
    d, f = cfg.d_model, cfg.d_ff
    const = cfg.n_layers * (8 * d * d + 2 * d * cfg.n_experts + 4 * (cfg.k_active + cfg.n_shared) * d * f)
    const += 2 * d * cfg.vocab_size
    return T * const + 4 * d * cfg.n_layers * T * (T + 1) // 2


def baseline_flops(cfg, prompt_len: int, generated: int) -> int:
    """KV-cached decoding touches every position once; the last sampled token is never fed."""
    if generated <= 0:
        return 0
    return prefill_flops(cfg, prompt_len + generated - 1)


def rerouting_overhead(cfg, log) -> int:
    """
    Extra work of a rerouted session over plain decoding, from its phase records:
    each forward pass over a context of length T costs ``prefill_flops(T)``,
    each backward pass twice that, and each phase after generation has started
    that changed the deltas re-prefills the cache (``prefill_flops(T - 1)``,
    the newest token would have been fed anyway).
    """
    total = 0
    starts = {e["phase"]: e for e in log.of("phase_start")}
    for end in log.of("phase_end"):
        T = starts[end["phase"]]["context_len"]
        total += (end["forward_passes"] + 2 * end["backward_passes"]) * prefill_flops(cfg, T)
        if end["reprefill"]:
            total += prefill_flops(cfg, T - 1)
    return total


def op_count_estimate(cfg, log) -> int:
    """Total analytic flop count of a session (baseline decoding + rerouting overhead)."""
    start = log.of("session_start")[0]
    end = log.of("session_end")[0]
    return baseline_flops(cfg, start["prompt_len"], end["generated"]) + rerouting_overhead(cfg, log)


# -- export ----------------------------------------------------------------------------


def matrix_csv(matrix, row_label: str = "layer", col_label: str = "expert", value: str = "value") -> str:
    """Long-format CSV: one ``row,col,value`` line per cell."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([row_label, col_label, value])
    for i, row in enumerate(np.atleast_2d(matrix)):
        for j, v in enumerate(row):
            w.writerow([i, j, repr(float(v))])
    return buf.getvalue()


def entropy_jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)

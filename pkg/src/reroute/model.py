"""
Toy decoder-only MoE transformer.

Each block is pre-norm causal multi-head attention followed by a pre-norm MoE
feed-forward layer. The router of layer ``l`` maps the normalized hidden state
to ``N`` logits, an optional additive delta row is applied, the softmax picks
the top-k experts (lower index wins ties), and the selected experts are mixed
with renormalized weights. Shared experts, when configured, run on every
token and are added unweighted.

Renormalizing the full softmax over the selected set is the same as a softmax
over the selected logits alone; the forward pass uses the latter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from reroute import numcore as nc
from reroute.kernels import topk_rows


class CapacityError(ValueError):
    """Context longer than ``max_seq``."""


class DeltaShapeError(ValueError):
    """Delta vector does not match the router width."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 50
    d_model: int = 64
    n_layers: int = 4
    n_experts: int = 8
    k_active: int = 2
    n_shared: int = 0
    d_ff: int = 128
    n_heads: int = 4
    max_seq: int = 256
    rng_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "rng_seed" and getattr(self, f.name) < (0 if f.name == "n_shared" else 1):
                raise ValueError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if not 1 <= self.k_active <= self.n_experts:
            raise ValueError(f"need 1 <= k_active <= n_experts, got k={self.k_active}, N={self.n_experts}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    d, f, N, S = cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.n_shared
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq, d)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d),
            p + "wk": (d, d),
            p + "wv": (d, d),
            p + "wo": (d, d),
            p + "moe_norm": (d,),
            p + "router": (N, d),
            p + "w1": (N, d, f),
            p + "b1": (N, f),
            p + "w2": (N, f, d),
            p + "b2": (N, d),
        })
        if S:
            shapes.update({p + "sw1": (S, d, f), p + "sb1": (S, f), p + "sw2": (S, f, d), p + "sb2": (S, d)})
    shapes.update({"final_norm": (d,), "head": (d, cfg.vocab_size)})
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.rng_seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            out[name] = np.ones(shape)
        elif leaf in ("b1", "b2", "sb1", "sb2"):
            out[name] = np.zeros(shape)
        elif leaf in ("tok_emb", "pos_emb"):
            out[name] = rng.normal(0.0, 0.1, shape)
        else:
            fan_in = shape[-2]
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
    return out


@dataclass
class RouterTrace:
    """
    Routing record for a run of tokens. Arrays are indexed [token, layer, ...].

    ``logits`` are raw router outputs, ``modified`` the logits after the delta,
    ``probs`` the full softmax, ``selected`` the top-k experts in descending
    probability, ``weights`` their renormalized mixing weights and
    ``topk_probs`` their (unrenormalized) softmax probabilities.
    """

    logits: np.ndarray
    modified: np.ndarray
    probs: np.ndarray
    selected: np.ndarray
    weights: np.ndarray

    @property
    def topk_probs(self) -> np.ndarray:
        return np.take_along_axis(self.probs, self.selected, axis=-1)

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]

    @property
    def n_layers(self) -> int:
        return self.selected.shape[1]

    def __getitem__(self, key) -> "RouterTrace":
        if isinstance(key, int):
            key = slice(key, key + 1 if key != -1 else None)
        return RouterTrace(self.logits[key], self.modified[key], self.probs[key], self.selected[key], self.weights[key])

    @classmethod
    def concat(cls, parts: list["RouterTrace"]) -> "RouterTrace":
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))

    @classmethod
    def from_layers(cls, per_layer: list[dict]) -> "RouterTrace":
        return cls(*(np.stack([e[f.name] for e in per_layer], axis=1) for f in fields(cls)))


def _delta_rows(deltas, cfg: ModelConfig):
    """Normalize a DeltaSet / array / per-layer list into a list of rows or None."""
    if deltas is None:
        return None
    if hasattr(deltas, "values"):
        deltas = deltas.values
    if isinstance(deltas, np.ndarray):
        if deltas.ndim != 2 or deltas.shape[0] != cfg.n_layers:
            raise DeltaShapeError(f"expected ({cfg.n_layers}, {cfg.n_experts}) deltas, got {deltas.shape}")
        deltas = list(deltas)
    if len(deltas) != cfg.n_layers:
        raise DeltaShapeError(f"expected {cfg.n_layers} delta rows, got {len(deltas)}")
    for row in deltas:
        n = row.shape[-1] if hasattr(row, "shape") else len(row)
        if n != cfg.n_experts:
            raise DeltaShapeError(f"delta length {n} != n_experts {cfg.n_experts}")
    return deltas


class MoEModel:
    """Frozen weights plus the forward pass. Safe to share read-only across threads."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        if params is None:
            params = init_params(config)
        expected = param_shapes(config)
        if set(params) != set(expected):
            raise ValueError(f"parameter names differ from config: {sorted(set(params) ^ set(expected))}")
        self.params = {}
        for name, shape in expected.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != {shape}")
            arr.setflags(write=False)
            self.params[name] = arr

    # -- routing ------------------------------------------------------------

    def _moe(self, p, layer: int, x, delta):
        """Router + experts on flat hidden states ``x`` (T, d). Returns (out, trace dict, probs)."""
        cfg = self.config
        pre = f"layers.{layer}."
        z = nc.matmul(x, nc.transpose(p[pre + "router"], (1, 0)))
        zt = z if delta is None else nc.add(z, delta)
        probs = nc.softmax(zt)
        idx = topk_rows(probs.data, cfg.k_active)
        gates = nc.softmax(nc.take_cols(zt, idx))
        out = nc.expert_mixture(x, gates, idx, p[pre + "w1"], p[pre + "b1"], p[pre + "w2"], p[pre + "b2"])
        if cfg.n_shared:
            T = x.shape[0]
            shared_idx = np.broadcast_to(np.arange(cfg.n_shared), (T, cfg.n_shared))
            shared = nc.expert_mixture(
                x, np.ones((T, cfg.n_shared)), shared_idx, p[pre + "sw1"], p[pre + "sb1"], p[pre + "sw2"], p[pre + "sb2"]
            )
            out = nc.add(out, shared)
        entry = dict(logits=z.data, modified=zt.data, probs=probs.data, selected=idx, weights=gates.data)
        return out, entry, probs

    def route_tokens(self, hidden, layer: int, deltas=None) -> RouterTrace:
        """Routing of already-normalized hidden state(s) at ``layer`` (one row per token)."""
        return self.moe_layer_forward(hidden, layer, deltas)[1]

    def moe_layer_forward(self, hidden, layer: int, deltas=None):
        """MoE output for hidden state(s) of shape (d,) or (T, d), plus the routing trace."""
        cfg = self.config
        if not 0 <= layer < cfg.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {cfg.n_layers})")
        h = np.asarray(hidden, dtype=np.float64)
        single = h.ndim == 1
        x = h.reshape(-1, cfg.d_model)
        rows = _delta_rows(deltas, cfg)
        delta = None if rows is None else _data_row(rows[layer])
        out, entry, _ = self._moe(self.params, layer, x, delta)
        trace = RouterTrace.from_layers([entry])
        return (out.data[0] if single else out.data), trace

    # -- full pass ----------------------------------------------------------

    def run(self, tokens, params=None, deltas=None, aux: bool = False):
        """
        Batched forward over ``tokens`` (B, T).

        ``params`` may hold tape-watched tensors (training); ``deltas`` is a
        list of per-layer rows (arrays or watched tensors). Returns flat logits
        (B*T, V) as a Tensor, the per-layer trace dicts and, when ``aux`` is
        set, the mean load-balancing term over layers.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, T = tokens.shape
        if T > cfg.max_seq:
            raise CapacityError(f"context length {T} exceeds max_seq {cfg.max_seq}")
        if T == 0:
            raise ValueError("empty context")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise IndexError("token id outside vocabulary")
        p = self.params if params is None else params
        rows = _delta_rows(deltas, cfg)
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

        pos = nc.gather_rows(p["pos_emb"], np.arange(T))
        h = nc.add(nc.gather_rows(p["tok_emb"], tokens), pos)
        entries, aux_terms = [], []
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            a = nc.rmsnorm(h, p[pre + "attn_norm"])
            heads = []
            for w in ("wq", "wk", "wv"):
                t = nc.reshape(nc.matmul(a, p[pre + w]), (B, T, H, dh))
                heads.append(nc.transpose(t, (0, 2, 1, 3)))
            att = nc.causal_attention(*heads)
            att = nc.reshape(nc.transpose(att, (0, 2, 1, 3)), (B, T, cfg.d_model))
            h = nc.add(h, nc.matmul(att, p[pre + "wo"]))
            x = nc.reshape(nc.rmsnorm(h, p[pre + "moe_norm"]), (B * T, cfg.d_model))
            out, entry, probs = self._moe(p, l, x, None if rows is None else rows[l])
            entries.append(entry)
            if aux:
                frac = np.bincount(entry["selected"].ravel(), minlength=cfg.n_experts) / entry["selected"].size
                aux_terms.append(nc.vdot(nc.mean(probs, axis=0), frac * cfg.n_experts))
            h = nc.add(h, nc.reshape(out, (B, T, cfg.d_model)))
        f = nc.rmsnorm(h, p["final_norm"])
        logits = nc.reshape(nc.matmul(f, p["head"]), (B * T, cfg.vocab_size))
        aux_loss = None
        if aux:
            aux_loss = aux_terms[0]
            for t in aux_terms[1:]:
                aux_loss = nc.add(aux_loss, t)
            aux_loss = nc.scale(aux_loss, 1.0 / cfg.n_layers)
        return logits, entries, aux_loss

    def forward(self, context, deltas=None):
        """Next-token logits (T, V) for one sequence and its RouterTrace."""
        logits, entries, _ = self.run(np.asarray(context)[None], deltas=deltas)
        return logits.data, RouterTrace.from_layers(entries)

    def context_loss(self, context, deltas=None) -> float:
        """Summed next-token cross-entropy over the context."""
        context = np.asarray(context, dtype=np.int64)
        logits, _ = self.forward(context[:-1], deltas)
        return nc.cross_entropy(logits, context[1:]).item()

    def decoder(self, deltas=None) -> "Decoder":
        return Decoder(self, deltas)


def _data_row(row):
    return row if isinstance(row, nc.Tensor) else np.asarray(row, dtype=np.float64)


class Decoder:
    """
    KV-cached incremental decoding under fixed deltas.

    ``prefill`` processes a context and returns the logits and routing of its
    last position; ``step`` feeds one more token. Agrees with ``MoEModel.forward``
    to within float rounding (~1e-12).
    """

    def __init__(self, model: MoEModel, deltas=None):
        self.model = model
        rows = _delta_rows(deltas, model.config)
        self.delta_rows = None if rows is None else [
            r.data if isinstance(r, nc.Tensor) else np.asarray(r, dtype=np.float64) for r in rows
        ]
        self.k_cache: list[np.ndarray] = []
        self.v_cache: list[np.ndarray] = []
        self.length = 0

    def prefill(self, context):
        m, cfg, p = self.model, self.model.config, self.model.params
        context = np.asarray(context, dtype=np.int64)
        T = len(context)
        if T > cfg.max_seq:
            raise CapacityError(f"context length {T} exceeds max_seq {cfg.max_seq}")
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        h = p["tok_emb"][context] + p["pos_emb"][:T]
        self.k_cache, self.v_cache = [], []
        entries = []
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            a = nc.rmsnorm(h, p[pre + "attn_norm"]).data
            q, k, v = ((a @ p[pre + w]).reshape(T, H, dh).transpose(1, 0, 2) for w in ("wq", "wk", "wv"))
            self.k_cache.append(k)
            self.v_cache.append(v)
            att = nc.causal_attention(q, k, v).data.transpose(1, 0, 2).reshape(T, cfg.d_model)
            h = h + att @ p[pre + "wo"]
            x = nc.rmsnorm(h, p[pre + "moe_norm"]).data
            out, entry, _ = m._moe(p, l, x, None if self.delta_rows is None else self.delta_rows[l])
            entries.append(entry)
            h = h + out.data
        self.length = T
        logits = nc.matmul(nc.rmsnorm(h[-1:], p["final_norm"]), p["head"]).data[0]
        return logits, RouterTrace.from_layers(entries)[-1]

    def step(self, token: int):
        m, cfg, p = self.model, self.model.config, self.model.params
        t = self.length
        if t + 1 > cfg.max_seq:
            raise CapacityError(f"context length {t + 1} exceeds max_seq {cfg.max_seq}")
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        h = p["tok_emb"][[token]] + p["pos_emb"][[t]]
        entries = []
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            a = nc.rmsnorm(h, p[pre + "attn_norm"]).data
            q, k, v = ((a @ p[pre + w]).reshape(1, H, dh).transpose(1, 0, 2) for w in ("wq", "wk", "wv"))
            K = self.k_cache[l] = np.concatenate([self.k_cache[l], k], axis=1)
            V = self.v_cache[l] = np.concatenate([self.v_cache[l], v], axis=1)
            s = (q @ K.transpose(0, 2, 1)) / np.sqrt(dh)
            w = np.exp(s - s.max(axis=-1, keepdims=True))
            w /= w.sum(axis=-1, keepdims=True)
            att = (w @ V).transpose(1, 0, 2).reshape(1, cfg.d_model)
            h = h + att @ p[pre + "wo"]
            x = nc.rmsnorm(h, p[pre + "moe_norm"]).data
            out, entry, _ = m._moe(p, l, x, None if self.delta_rows is None else self.delta_rows[l])
            entries.append(entry)
            h = h + out.data
        self.length = t + 1
        logits = nc.matmul(nc.rmsnorm(h, p["final_norm"]), p["head"]).data[0]
        return logits, RouterTrace.from_layers(entries)


def sample_token(logits, temperature: float, rng: np.random.Generator) -> int:
    """Greedy (lowest index on ties) at temperature 0, otherwise a categorical draw."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return int(np.argmax(logits))
    p = nc.softmax(logits / temperature).data
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def generate(model: MoEModel, prompt, max_new_tokens: int, temperature: float = 0.0,
             rng: np.random.Generator | None = None, deltas=None, eos: int | None = None):
    """
    Plain decoding. Returns (tokens, trace) where trace row ``i`` is the routing
    of the position whose logits produced generated token ``i``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    budget = min(max_new_tokens, model.config.max_seq - len(prompt) + 1)
    dec = model.decoder(deltas)
    out, traces = [], []
    if budget <= 0:
        return out, None
    logits, tr = dec.prefill(prompt)
    while True:
        tok = sample_token(logits, temperature, rng)
        out.append(tok)
        traces.append(tr)
        if len(out) >= budget or (eos is not None and tok == eos):
            break
        logits, tr = dec.step(tok)
    return out, RouterTrace.concat(traces)

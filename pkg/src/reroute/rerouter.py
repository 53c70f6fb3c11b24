"""
Data-free test-time rerouting.

Per-layer additive router-logit deltas start at zero and are fitted to the
current context by minimizing its summed next-token cross-entropy with Adam.
Which layers move is decided from router confidence (mean negative log top-k
probability per token, averaged over tokens): a hard family of strategies
picks a subset of layers, soft weighting scales every layer's gradient by its
normalized confidence. A session alternates one optimization phase with ``m``
tokens of generation under frozen deltas.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from reroute import numcore as nc
from reroute.analysis import pathway_string, routing_entropy
from reroute.model import MoEModel, RouterTrace, sample_token

STRATEGIES = ("hard", "soft", "random", "reverse", "last_k", "all")
CONFIDENCE_SIGNS = ("as_written", "negated")
PROB_FLOOR = 1e-12
BETA1, BETA2 = 0.9, 0.999


class ConfigError(ValueError):
    pass


class DegenerateContextError(ValueError):
    """Context too short to form a next-token pair."""


class EmptyContextError(ValueError):
    pass


class OptimizationAborted(RuntimeError):
    """Non-finite loss or gradient. ``deltas`` holds the last finite state."""

    def __init__(self, message, deltas=None, losses=()):
        super().__init__(message)
        self.deltas = deltas
        self.losses = list(losses)


# -- parameters and optimizer -------------------------------------------------


class AdamState(NamedTuple):
    m: np.ndarray
    v: np.ndarray
    step: int


@dataclass
class DeltaSet:
    """Router-logit deltas [layers x experts] with per-layer Adam state."""

    values: np.ndarray
    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray

    @classmethod
    def zeros(cls, n_layers: int, n_experts: int) -> "DeltaSet":
        return cls(
            np.zeros((n_layers, n_experts)),
            np.zeros((n_layers, n_experts)),
            np.zeros((n_layers, n_experts)),
            np.zeros(n_layers, dtype=np.int64),
        )

    @classmethod
    def for_model(cls, model: MoEModel) -> "DeltaSet":
        return cls.zeros(model.config.n_layers, model.config.n_experts)

    @property
    def shape(self):
        return self.values.shape

    def copy(self) -> "DeltaSet":
        return DeltaSet(self.values.copy(), self.m.copy(), self.v.copy(), self.steps.copy())

    def state(self, layer: int) -> AdamState:
        return AdamState(self.m[layer], self.v[layer], int(self.steps[layer]))


def adam_step(delta, grad, state: AdamState, lr: float, weight_decay: float, eps: float,
              lr_scale: float = 1.0, scale_target: str = "lr"):
    """
    One Adam update with bias correction and coupled L2 decay.

    ``lr_scale`` multiplies the incoming gradient (``scale_target="gradient"``)
    or the step size (``"lr"``). A zero scale leaves the delta and the moments
    untouched. Returns ``(new_delta, new_state)``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(grad).all():
        raise OptimizationAborted("non-finite gradient")
    if not 0.0 <= lr_scale <= 1.0:
        raise ValueError(f"lr_scale must lie in [0, 1], got {lr_scale}")
    if lr_scale == 0.0:
        return delta, state
    if scale_target == "gradient":
        g = grad * lr_scale
        step_lr = lr
    elif scale_target == "lr":
        g = grad
        step_lr = lr * lr_scale
    else:
        raise ConfigError(f"unknown scale_target {scale_target!r}")
    g = g + weight_decay * delta
    t = state.step + 1
    m = BETA1 * state.m + (1.0 - BETA1) * g
    v = BETA2 * state.v + (1.0 - BETA2) * g * g
    m_hat = m / (1.0 - BETA1**t)
    v_hat = v / (1.0 - BETA2**t)
    new = delta - step_lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# -- confidence and layer selection ---------------------------------------------


def token_confidence(topk_probs, k: int | None = None):
    """``-mean(log p)`` over the last axis (the k top probabilities)."""
    p = np.asarray(topk_probs, dtype=np.float64)
    if k is not None and p.shape[-1] != k:
        raise ValueError(f"expected {k} top-k probabilities, got {p.shape[-1]}")
    return -np.log(np.maximum(p, PROB_FLOOR)).mean(axis=-1)


def layer_confidence(token_conf) -> np.ndarray:
    """Per-layer mean of a [tokens x layers] confidence matrix."""
    c = np.asarray(token_conf, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0:
        raise EmptyContextError("need at least one token row")
    return c.mean(axis=0)


def n_selected(ratio: float, n_layers: int) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    # round first: 0.3 * 10 is 3.0000000000000004 in binary floating point
    return max(1, math.ceil(round(ratio * n_layers, 9)))


@dataclass
class ConfidenceProfile:
    layer_conf: np.ndarray
    strategy: str
    ratio: float
    selected: tuple[int, ...]
    weights: np.ndarray | None = None
    token_conf: np.ndarray | None = None

    def scale(self, layer: int) -> float | None:
        """Update scale for ``layer``; None means the layer is left alone."""
        if self.strategy == "soft":
            return float(self.weights[layer])
        return 1.0 if layer in self.selected else None

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "ratio": self.ratio,
            "layer_conf": [float(c) for c in self.layer_conf],
            "selected": list(self.selected),
            "weights": None if self.weights is None else [float(w) for w in self.weights],
        }


def select_layers(layer_conf, strategy: str, ratio: float = 0.5,
                  rng: np.random.Generator | None = None, token_conf=None) -> ConfidenceProfile:
    c = np.asarray(layer_conf, dtype=np.float64)
    L = c.shape[0]
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    weights = None
    if strategy == "soft":
        total = c.sum()
        weights = np.full(L, 1.0 / L) if total == 0 else c / total
        selected = tuple(range(L))
    elif strategy == "all":
        selected = tuple(range(L))
    else:
        s = n_selected(ratio, L)
        if strategy == "hard":
            order = np.argsort(-c, kind="stable")[:s]
        elif strategy == "reverse":
            order = np.argsort(c, kind="stable")[:s]
        elif strategy == "last_k":
            order = np.arange(L - s, L)
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            order = rng.choice(L, size=s, replace=False)
        selected = tuple(sorted(int(i) for i in order))
    return ConfidenceProfile(c, strategy, ratio, selected, weights, token_conf)


def confidence_profile(trace: RouterTrace, strategy: str, ratio: float, rng=None,
                       confidence_sign: str = "as_written") -> ConfidenceProfile:
    if confidence_sign not in CONFIDENCE_SIGNS:
        raise ConfigError(f"confidence_sign must be one of {CONFIDENCE_SIGNS}")
    tc = token_confidence(trace.topk_probs)
    if confidence_sign == "negated":
        tc = -tc
    return select_layers(layer_confidence(tc), strategy, ratio, rng, token_conf=tc)


# -- session config -------------------------------------------------------------


@dataclass
class SessionConfig:
    opt_steps: int = 5
    regen_interval: int = 32
    lr: float = 0.05
    weight_decay: float = 1e-8
    epsilon: float = 1e-5
    strategy: str = "soft"
    ratio: float = 0.5
    max_new_tokens: int = 64
    temperature: float = 0.0
    rng_seed: int = 0
    continuous: bool = True
    confidence_sign: str = "as_written"
    soft_scaling: str = "lr"
    eos_token: int | None = None

    def __post_init__(self):
        if self.opt_steps < 0:
            raise ConfigError("opt_steps must be >= 0")
        if self.regen_interval < 1:
            raise ConfigError("regen_interval must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.confidence_sign not in CONFIDENCE_SIGNS:
            raise ConfigError(f"unknown confidence_sign {self.confidence_sign!r}")
        if self.soft_scaling not in ("gradient", "lr"):
            raise ConfigError(f"unknown soft_scaling {self.soft_scaling!r}")
        if self.temperature < 0 or self.max_new_tokens < 0:
            raise ConfigError("temperature and max_new_tokens must be >= 0")
        n_selected(self.ratio, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- phase 1 ----------------------------------------------------------------------


@dataclass
class PhaseResult:
    deltas: DeltaSet
    losses: list[float]
    profile: ConfidenceProfile | None
    final_loss: float | None = None
    forward_passes: int = 0
    backward_passes: int = 0


def context_loss_grad(model: MoEModel, context, delta_values):
    """
    Summed next-token cross-entropy of ``context`` under ``delta_values`` and its
    gradient per layer row, plus the routing trace of every context position.
    Top-k membership is treated as fixed when differentiating.
    """
    context = np.asarray(context, dtype=np.int64)
    with nc.Tape() as tape:
        rows = [tape.watch(row, name=f"delta.{l}") for l, row in enumerate(delta_values)]
        # full context forward so confidence sees every token; the last row has no target
        logits, entries, _ = model.run(context, deltas=rows)
        loss = nc.cross_entropy(nc.take_rows(logits, len(context) - 1), context[1:])
    grads = nc.backward(loss, rows)
    return loss.item(), np.stack(grads), RouterTrace.from_layers(entries)


def optimize_deltas(model: MoEModel, context, deltas: DeltaSet, config: SessionConfig,
                    profile: ConfidenceProfile | None = None, rng: np.random.Generator | None = None,
                    eval_final: bool = False) -> PhaseResult:
    """
    Run ``config.opt_steps`` Adam steps on the summed next-token loss of ``context``.

    ``losses[i]`` is the loss before update ``i``. Unless ``profile`` is given,
    layers are selected from the routing of the first forward pass. The input
    DeltaSet is not modified.
    """
    context = np.asarray(context, dtype=np.int64)
    if len(context) < 2:
        raise DegenerateContextError(f"context of length {len(context)} has no next-token pair")
    deltas = deltas.copy()
    L = model.config.n_layers
    losses: list[float] = []
    res = PhaseResult(deltas, losses, profile)
    for _ in range(config.opt_steps):
        try:
            loss, grads, trace = context_loss_grad(model, context, deltas.values)
        except nc.NonFiniteError as exc:
            raise OptimizationAborted(f"forward: {exc}", deltas.copy(), losses) from exc
        res.forward_passes += 1
        res.backward_passes += 1
        losses.append(loss)
        if res.profile is None:
            res.profile = confidence_profile(trace, config.strategy, config.ratio, rng, config.confidence_sign)
        for l in range(L):
            s = res.profile.scale(l)
            if s is None:
                continue
            try:
                new, st = adam_step(
                    deltas.values[l], grads[l], deltas.state(l), config.lr, config.weight_decay,
                    config.epsilon, s, config.soft_scaling,
                )
            except OptimizationAborted as exc:
                raise OptimizationAborted(f"layer {l}: {exc}", deltas.copy(), losses) from exc
            deltas.values[l], deltas.m[l], deltas.v[l], deltas.steps[l] = new, st.m, st.v, st.step
    if eval_final:
        res.final_loss = model.context_loss(context, deltas)
    return res


# -- session log ------------------------------------------------------------------


@dataclass
class SessionLog:
    """Event stream of one session; serializes one JSON object per line."""

    events: list[dict] = field(default_factory=list)
    trace: RouterTrace | None = None

    def emit(self, kind: str, **data) -> None:
        self.events.append({"event": kind, **data})

    def of(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["event"] == kind]

    @property
    def n_phases(self) -> int:
        return len(self.of("phase_start"))

    @property
    def tokens(self) -> list[int]:
        return [e["token"] for e in self.of("token")]

    def entropy_matrix(self) -> np.ndarray:
        """[generated tokens x layers] routing entropy."""
        rows = [e["entropy_per_layer"] for e in self.of("token")]
        return np.array(rows, dtype=np.float64).reshape(len(rows), -1)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "SessionLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    @classmethod
    def read(cls, path) -> "SessionLog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())


# -- phase 2 / full session -------------------------------------------------------


def run_session(model: MoEModel, prompt, config: SessionConfig):
    """
    Alternate context optimization and steered generation.

    Returns ``(generated_tokens, SessionLog)``. Generation stops at
    ``config.eos_token``, after ``max_new_tokens``, or when the context would
    exceed the model's ``max_seq``. With ``opt_steps == 0`` the output equals
    plain decoding under the same seed.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    cfg = model.config
    seq = np.random.SeedSequence(config.rng_seed)
    sample_rng, select_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    deltas = DeltaSet.for_model(model)
    log = SessionLog()
    log.emit("session_start", prompt_len=len(prompt), config=config.to_dict())
    context = list(prompt)
    generated: list[int] = []
    traces: list[RouterTrace] = []
    budget = min(config.max_new_tokens, cfg.max_seq - len(prompt) + 1)
    interval = config.regen_interval if config.continuous else math.inf

    def phase() -> bool:
        nonlocal deltas
        idx = log.n_phases
        log.emit("phase_start", phase=idx, context_len=len(context), position=len(generated))
        status, message, res = "ok", None, None
        before = deltas.values.copy()
        if config.opt_steps > 0:
            try:
                res = optimize_deltas(model, context, deltas, config, rng=select_rng)
                deltas = res.deltas
            except DegenerateContextError as exc:
                status, message = "skipped", str(exc)
            except OptimizationAborted as exc:
                status, message = "aborted", str(exc)
                if exc.deltas is not None:
                    deltas = exc.deltas
        losses = [] if res is None else res.losses
        for i, loss in enumerate(losses):
            log.emit("opt_step", phase=idx, step=i, loss=loss)
        updated = not np.array_equal(before, deltas.values)
        log.emit(
            "phase_end", phase=idx, status=status, message=message, steps=len(losses),
            forward_passes=0 if res is None else res.forward_passes,
            backward_passes=0 if res is None else res.backward_passes,
            reprefill=updated and len(generated) > 0,
            profile=None if res is None or res.profile is None else res.profile.summary(),
            deltas=[[float(x) for x in row] for row in deltas.values],
        )
        return updated

    stop = "max_new_tokens"
    if budget > 0:
        phase()
        dec = model.decoder(deltas)
        logits, tr = dec.prefill(context)
        while True:
            tok = sample_token(logits, config.temperature, sample_rng)
            generated.append(tok)
            context.append(tok)
            traces.append(tr)
            _token_event(log, len(generated) - 1, tok, tr, log.n_phases - 1)
            if config.eos_token is not None and tok == config.eos_token:
                stop = "eos"
                break
            if len(generated) >= budget:
                stop = "max_new_tokens" if budget == config.max_new_tokens else "max_seq"
                break
            if len(generated) % interval == 0 and phase():
                dec = model.decoder(deltas)
                logits, tr = dec.prefill(context)
            else:
                logits, tr = dec.step(tok)
    log.emit("session_end", generated=len(generated), stop_reason=stop)
    log.trace = RouterTrace.concat(traces) if traces else None
    return generated, log


def _token_event(log: SessionLog, index: int, tok: int, tr: RouterTrace, phase: int) -> None:
    log.emit(
        "token", index=index, token=tok, phase=phase,
        entropy_per_layer=[routing_entropy(tr.probs[0, l]) for l in range(tr.n_layers)],
        pathway=pathway_string(tr, 0),
    )


def baseline_log(prompt, tokens, trace: RouterTrace | None, config: SessionConfig, max_seq: int) -> SessionLog:
    """SessionLog for plain decoding (no phases), same schema as ``run_session``."""
    log = SessionLog()
    log.emit("session_start", prompt_len=len(prompt), config={**config.to_dict(), "opt_steps": 0})
    for i, tok in enumerate(tokens):
        _token_event(log, i, int(tok), trace[i], -1)
    budget = min(config.max_new_tokens, max_seq - len(prompt) + 1)
    if tokens and config.eos_token is not None and tokens[-1] == config.eos_token:
        stop = "eos"
    else:
        stop = "max_new_tokens" if budget == config.max_new_tokens else "max_seq"
    log.emit("session_end", generated=len(tokens), stop_reason=stop)
    log.trace = trace
    return log

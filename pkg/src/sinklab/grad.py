"""Analytic gradients of the l2 training loss, Adam, and the training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import LayerHeadParams, ModelParams, forward_batch
from .taskgen import ContentDistribution, SequenceBatch, l2_training_loss, linf_loss, make_rng, sample_batch


@dataclass(frozen=True)
class Gradients:
    """Loss gradients, one array per weight matrix in ``ModelParams.paths()`` order."""

    arrays: tuple[np.ndarray, ...]
    paths: tuple[str, ...]

    def __getitem__(self, path: str) -> np.ndarray:
        return self.arrays[self.paths.index(path)]

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.arrays)))


def _as_batch(batch) -> SequenceBatch:
    if isinstance(batch, SequenceBatch):
        return batch
    return SequenceBatch.from_sequences(list(batch))


def loss_and_grad(params: ModelParams, batch) -> tuple[float, Gradients]:
    """l2 training loss on ``batch`` and its exact gradient.

    Raises ``NonFiniteError`` naming the first parameter path whose gradient
    is not finite.
    """
    batch = _as_batch(batch)
    fwd = forward_batch(params, batch.tokens)
    loss = l2_training_loss(fwd.outputs, batch.targets)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite training loss")
    # d(loss)/d(output); with residuals the output is h_D - x, so it flows to h_D unchanged
    upstream = 2.0 * (fwd.outputs - batch.targets) / len(batch)
    per_layer = []
    for d in range(params.depth - 1, -1, -1):
        h = fwd.activations[d]
        down = upstream.copy() if params.residual else np.zeros_like(upstream)
        head_grads = []
        for k, head in enumerate(params.layers[d]):
            dH, dWq, dWk, dWv, dWo = kernels.attention_backward(
                h, *head.matrices(), params.relu, fwd.trace.alpha[d][k], upstream
            )
            down += dH
            head_grads.append((dWq, dWk, dWv, dWo))
        per_layer.append(head_grads)
        upstream = down
    arrays = tuple(g for layer in reversed(per_layer) for head in layer for g in head)
    paths = tuple(params.paths())
    for path, g in zip(paths, arrays):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", where=path)
    return loss, Gradients(arrays, paths)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 128
    stop_linf: float = 1e-2
    max_steps: int = 200_000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1 or self.eval_every < 1 or self.max_steps < 0:
            raise ConfigError("batch_size and eval_every must be >= 1, max_steps >= 0")
        if not (self.stop_linf > 0 and self.learning_rate > 0 and self.eps > 0):
            raise ConfigError("stop_linf, learning_rate and eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(tuple(np.zeros_like(w) for w in params.flat()), tuple(np.zeros_like(w) for w in params.flat()), 0)


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, config: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_w, new_m, new_v = [], [], []
    for path, w, g, m, v in zip(grads.paths, params.flat(), grads.arrays, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w = w - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("non-finite parameter update", where=path)
        new_w.append(w)
        new_m.append(m)
        new_v.append(v)
    return params.replace_flat(new_w), AdamState(tuple(new_m), tuple(new_v), t)


def init_params(seed: int, shape: Sequence[int], n: int, kind: str = "softmax", residual: bool = False, scale: float = 0.1) -> ModelParams:
    """i.i.d. N(0, scale^2) weights; ``shape`` lists the head count of each layer."""
    if not scale > 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    rng = make_rng(seed, 0xC0FFEE)
    layers = tuple(tuple(LayerHeadParams(*(scale * rng.standard_normal((n, n)) for _ in range(4))) for _ in range(heads)) for heads in shape)
    return ModelParams(layers, kind, residual)


# streams keep training and evaluation draws disjoint
TRAIN_STREAM = 1
EVAL_STREAM = 2


@dataclass
class TrainHistory:
    """Evaluation records plus the per-step l2 losses.

    ``records`` hold only deterministic quantities; wall-clock times live in
    ``wall_times`` so two identical runs produce identical records.
    """

    records: list[dict] = field(default_factory=list)
    step_l2: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    converged: bool = False
    steps: int = 0

    def write_jsonl(self, path) -> None:
        Path(path).write_text("".join(json.dumps(r) + "\n" for r in self.records))

    def write_timing(self, path) -> None:
        doc = [{"step": r["step"], "wall_time": t} for r, t in zip(self.records, self.wall_times)]
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def train(
    arch: ModelParams,
    config: TrainConfig,
    task: ContentDistribution | None = None,
    L: int = 16,
    n: int | None = None,
    on_eval: Callable[[dict], None] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Adam on fresh batches until the eval-batch linf loss drops below ``stop_linf``.

    ``arch`` supplies both the architecture and the starting weights. The
    stopping check runs at step 0 and every ``eval_every`` steps on a fresh
    batch of ``batch_size`` sequences. Reaching ``max_steps`` returns with
    ``history.converged`` False. A non-finite loss raises ``DivergenceError``
    carrying the last finite parameters.
    """
    task = task or ContentDistribution()
    n = arch.n if n is None else n
    params, state = arch, AdamState.zeros(arch)
    history = TrainHistory()
    start = time.perf_counter()
    step = 0
    while True:
        if step % config.eval_every == 0 or step == config.max_steps:
            ev = sample_batch(config.seed, config.batch_size, L, n, task, stream=(EVAL_STREAM, step))
            try:
                out = forward_batch(params, ev.tokens).outputs
            except NonFiniteError as exc:
                raise DivergenceError(f"forward pass diverged at step {step}: {exc}", snapshot=params) from exc
            linf = linf_loss(out, ev.targets)
            recent = history.step_l2[-config.eval_every :]
            record = {
                "step": step,
                "l2": l2_training_loss(out, ev.targets),
                "linf": linf,
                "train_l2_mean": float(np.mean(recent)) if recent else None,
                "eval_size": config.batch_size,
            }
            history.records.append(record)
            history.wall_times.append(time.perf_counter() - start)
            if on_eval is not None:
                on_eval(record)
            if linf < config.stop_linf:
                history.converged = True
                break
            if step >= config.max_steps:
                break
        batch = sample_batch(config.seed, config.batch_size, L, n, task, stream=(TRAIN_STREAM, step))
        try:
            loss, grads = loss_and_grad(params, batch)
            params, state = adam_step(params, grads, state, config)
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}", snapshot=params) from exc
        history.step_l2.append(loss)
        step += 1
    history.steps = step
    return params, history

"""Sink-free ReLU construction and executable checks of the sink lemmas.

Every check returns a ``CheckRecord`` with the measured left- and right-hand
sides, so failures come with numbers and a witness rather than a bare bool.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError
from .model import AttentionTrace, ModelParams, composed_value_map, forward_batch, value_map
from .taskgen import BOS, CONTENT, MIN_LENGTH, PLAIN, TRIGGER, ContentDistribution, SequenceBatch, batch_targets, linf_loss, make_rng, sample_batch

SLACK = 1e-9
SCOPES = ("single_layer_all_positions", "multilayer_exists")


@dataclass
class CheckRecord:
    """One inequality check. ``lhs relation rhs`` must hold for ``passed``."""

    name: str
    passed: bool
    lhs: float
    rhs: float
    relation: str = "<="
    count: int = 1
    witness: dict | None = None
    note: str = ""

    def __bool__(self) -> bool:
        return bool(self.passed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConsequenceReport:
    measured_eta: float
    eval_size: int
    records: list[CheckRecord] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    eta: float | None = None  # bound actually used when it differs from measured_eta

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def record(self, name: str) -> CheckRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def failures(self) -> list[CheckRecord]:
        return [r for r in self.records if not r.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "measured_eta": self.measured_eta,
            "eta_used": self.measured_eta if self.eta is None else self.eta,
            "eval_size": self.eval_size,
            "slack": SLACK,
            "records": [r.to_dict() for r in self.records],
            "skipped": self.skipped,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


@dataclass(frozen=True)
class SinkCriteria:
    epsilon: float = 0.1
    delta: float = 0.05
    sample_count: int = 1000

    def __post_init__(self):
        if not (0 < self.epsilon < 1 and 0 < self.delta < 1):
            raise ValueError("epsilon and delta must lie in (0, 1)")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


# -- explicit ReLU construction ---------------------------------------------


def build_relu_construction(L: int, n: int) -> ModelParams:
    """One-layer ReLU model that solves the task with zero attention on BOS.

    The query reads the trigger indicator and the key reads the trigger and
    plain indicators, so only the trigger row gets positive scores, each equal
    to one on positions 2..j. Key, value and output maps are the identity.
    """
    if L < MIN_LENGTH:
        raise DimensionError(f"sequence length L={L} is below the minimum {MIN_LENGTH}")
    if n < CONTENT:
        raise DimensionError(f"token dimension n={n} is below the minimum {CONTENT}")
    W_Q = np.zeros((n, n))
    W_Q[TRIGGER, TRIGGER] = W_Q[TRIGGER, PLAIN] = 1.0
    eye = np.eye(n)
    return ModelParams.single(W_Q, eye, eye, eye, kind="relu")


def _witness(batch: SequenceBatch, b: int, **extra) -> dict:
    return {"example": int(b), "trigger_pos": int(batch.trigger_pos[b]), "tokens": batch.tokens[b].tolist(), **extra}


def verify_relu_construction(params: ModelParams, test_set: SequenceBatch, tol: float = 1e-12) -> ConsequenceReport:
    """Zero loss (within ``tol``) and exactly zero attention on BOS at every position."""
    fwd = forward_batch(params, test_set.tokens)
    errors = np.sqrt(np.max(np.sum((fwd.outputs - test_set.targets) ** 2, axis=-1), axis=-1))
    bos = np.max(np.stack([a[:, :, 0] for _, _, a in fwd.trace.heads()]), axis=(0, 2))
    eta = float(errors.max())
    report = ConsequenceReport(eta, len(test_set))
    worst = int(np.argmax(errors))
    report.records.append(
        CheckRecord("zero-loss", eta <= tol, eta, tol, count=len(test_set), witness=None if eta <= tol else _witness(test_set, worst))
    )
    worst = int(np.argmax(bos))
    report.records.append(
        CheckRecord(
            "bos-attention-zero",
            bool(np.all(bos == 0.0)),
            float(bos.max()),
            0.0,
            relation="==",
            count=len(test_set),
            witness=None if bos.max() == 0.0 else _witness(test_set, worst),
        )
    )
    return report


def construction_test_set(seed: int, count: int, L: int, n: int, dist: ContentDistribution | None = None) -> SequenceBatch:
    """Random sequences plus support-boundary content, valid for any ``n >= 3``."""
    batch = sample_batch(seed, count, L, n, dist, min_dim=CONTENT)
    if n == CONTENT:
        return batch
    lo, hi = (dist or ContentDistribution()).support
    rng = make_rng(seed, 7)
    extremes = np.where(rng.random((count, L - 1, n - CONTENT)) < 0.5, lo, hi)
    tokens = batch.tokens.copy()
    half = count // 2
    tokens[:half, 1:, CONTENT:] = extremes[:half]
    return SequenceBatch(tokens, batch.trigger_pos, batch_targets(tokens, batch.trigger_pos))


# -- multi-layer unrolling --------------------------------------------------


@dataclass(frozen=True)
class UnrollCoefficients:
    """End-to-end weights ``beta[i, k]``; arrays may carry a leading example axis."""

    beta: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.beta.sum(axis=-1)


def _single_head_alphas(trace: AttentionTrace, tol: float) -> list[np.ndarray]:
    if trace.kind != "softmax":
        raise ValueError("unrolling needs softmax traces")
    if any(len(layer) != 1 for layer in trace.alpha):
        raise ValueError("unrolling is defined for single-head layers")
    alphas = [layer[0] for layer in trace.alpha]
    for d, a in enumerate(alphas):
        if np.any(a < 0) or np.max(np.abs(a.sum(axis=-1) - 1.0)) > tol:
            raise ValueError(f"layer {d} attention rows are not probability vectors")
    return alphas


def unroll_coefficients(trace: AttentionTrace, tol: float = 1e-10) -> UnrollCoefficients:
    """``beta^(1) = alpha^(1)`` and ``beta^(d) = alpha^(d) @ beta^(d-1)``."""
    alphas = _single_head_alphas(trace, tol)
    beta = alphas[0]
    for a in alphas[1:]:
        beta = a @ beta
    return UnrollCoefficients(beta)


def unrolled_outputs(params: ModelParams, tokens) -> np.ndarray:
    """``sum_k beta[i, k] V x_k`` for a no-residual single-head softmax model."""
    if params.residual:
        raise ValueError("unrolling does not apply to residual models")
    x = np.asarray(tokens, dtype=float)
    single = x.ndim == 2
    xb = x[None] if single else x
    beta = unroll_coefficients(forward_batch(params, xb).trace).beta
    out = beta @ xb @ composed_value_map(params).T
    return out[0] if single else out


def check_beta22_product(trace: AttentionTrace, tol: float = 1e-12) -> CheckRecord:
    """Second-row self weight of the unrolled map equals the product over layers."""
    alphas = _single_head_alphas(trace, 1e-10)
    beta22 = unroll_coefficients(trace).beta[..., 1, 1]
    product = np.prod([a[..., 1, 1] for a in alphas], axis=0)
    diff = float(np.max(np.abs(beta22 - product)))
    return CheckRecord("beta22-product", diff <= tol, diff, tol, count=int(np.size(beta22)))


# -- softmax monotonicity and reductions ------------------------------------


def _softmax_over(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    s = keys @ query
    e = np.exp(s - s.max())
    return e / e.sum()


def check_softmax_monotonicity(query, keys_S, keys_T, tol: float = 1e-12) -> CheckRecord:
    """Adding keys never raises the softmax mass of an existing key."""
    q = np.asarray(query, dtype=float)
    S = np.atleast_2d(np.asarray(keys_S, dtype=float))
    T = np.atleast_2d(np.asarray(keys_T, dtype=float))
    # position of each S key inside T; the superset must contain it exactly
    idx = []
    for key in S:
        hits = np.flatnonzero(np.all(T == key, axis=1))
        if hits.size == 0:
            raise ValueError("keys_S is not a subset of keys_T")
        idx.append(hits[0])
    pS = _softmax_over(q, S)
    pT = _softmax_over(q, T)[idx]
    # duplicate keys in T share mass; compare the per-copy probability
    excess = float(np.max(pT - pS))
    return CheckRecord("softmax-monotone", excess <= tol, float(np.max(pT)), float(np.max(pS)), count=len(S), note=f"max excess {excess:.3e}")


def _head_scores_matrix(params: ModelParams) -> np.ndarray:
    if params.kind != "softmax" or params.shape != (1,):
        raise ValueError("reduction checks need a one-layer one-head softmax model")
    head = params.layers[0][0]
    return head.W_Q @ head.W_K.T


def _row_weights(bilinear: np.ndarray, x: np.ndarray, i: int) -> np.ndarray:
    # softmax weights of 1-based row i over keys 1..i
    return _softmax_over(bilinear.T @ x[i - 1], x[:i])


def check_reduction_lemma(params: ModelParams, tokens, i: int, h: int | None = None, tol: float = 1e-12) -> CheckRecord:
    """Compare a weight on the full sequence with the same weight on a short prefix.

    Self (``h is None``): ``alpha[i, i]`` on ``x`` vs the second-row self weight
    on ``(BOS, x_i)``. Pairwise: ``alpha[h, i]`` on ``x`` vs the weight of row 3
    on key 2 in ``(BOS, x_i, x_h)``. Positions are 1-based.
    """
    bilinear = _head_scores_matrix(params)
    x = np.asarray(tokens, dtype=float)
    L = x.shape[0]
    bos = x[0]
    if h is None:
        if not 1 < i <= L:
            raise ValueError(f"self reduction needs 1 < i <= L, got i={i}")
        full = _row_weights(bilinear, x, i)[i - 1]
        reduced = _row_weights(bilinear, np.stack([bos, x[i - 1]]), 2)[1]
        name = "self-reduction"
    else:
        if not 1 < i < h <= L:
            raise ValueError(f"pairwise reduction needs 1 < i < h <= L, got i={i}, h={h}")
        full = _row_weights(bilinear, x, h)[i - 1]
        reduced = _row_weights(bilinear, np.stack([bos, x[i - 1], x[h - 1]]), 3)[1]
        name = "pairwise-reduction"
    return CheckRecord(name, full <= reduced + tol, float(full), float(reduced))


# -- consequences of small loss ---------------------------------------------


def lemma_evaluation_set(seed: int, count: int, L: int, n: int, dist: ContentDistribution | None = None) -> SequenceBatch:
    """``count`` uniform-trigger sequences followed by ``count`` with the trigger at 2."""
    a = sample_batch(seed, count, L, n, dist, stream=(11,))
    b = sample_batch(seed, count, L, n, dist, stream=(12,), trigger_pos=2)
    return SequenceBatch(
        np.concatenate([a.tokens, b.tokens]), np.concatenate([a.trigger_pos, b.trigger_pos]), np.concatenate([a.targets, b.targets])
    )


def _front_loaded(x: np.ndarray, j: int, front: Sequence[int]) -> tuple[np.ndarray, int]:
    # same tokens, with the given non-trigger rows moved to positions 2.. and the trigger last
    L = x.shape[0]
    rest = [r for r in range(1, L) if r not in front and r != j - 1]
    order = [0, *front, *rest, j - 1]
    return x[order], L


def _transplants(batch: SequenceBatch, configs: list[tuple[int, int, int]]) -> SequenceBatch:
    """Sequences that start with ``x_i`` or ``(x_i, x_h)`` taken from each config."""
    toks, js = [], []
    for b, i, h in configs:
        x, j = batch.tokens[b], int(batch.trigger_pos[b])
        for front in ((i - 1,), (h - 1,), (i - 1, h - 1)):
            t, jj = _front_loaded(x, j, front)
            toks.append(t)
            js.append(jj)
    tokens = np.stack(toks)
    js = np.array(js, dtype=np.int64)
    return SequenceBatch(tokens, js, batch_targets(tokens, js))


def _sample_pairs(batch: SequenceBatch, count: int, seed: int) -> list[tuple[int, int, int]]:
    # (example, i, h) with 1 < i < h and neither at the trigger
    rng = make_rng(seed, 13)
    L = batch.tokens.shape[1]
    candidates = [b for b in range(len(batch)) if L - 2 >= 2]
    configs = []
    while len(configs) < count:
        b = int(rng.choice(candidates))
        j = int(batch.trigger_pos[b])
        free = [p for p in range(2, L + 1) if p != j]
        i, h = sorted(int(v) for v in rng.choice(free, size=2, replace=False))
        configs.append((b, i, h))
    return configs


def _norms(M: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(M * M, axis=-1))


def _aggregate(name: str, lhs: np.ndarray, rhs: float, relation: str, batch: SequenceBatch, rows: Sequence[int], extra=None) -> CheckRecord:
    lhs = np.asarray(lhs, dtype=float)
    if relation == "<=":
        ok = lhs <= rhs + SLACK
        worst = int(np.argmax(lhs))
    else:
        ok = lhs >= rhs - SLACK
        worst = int(np.argmin(lhs))
    witness = None
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        witness = _witness(batch, rows[bad], measured=float(lhs[bad]), **(extra[bad] if extra else {}))
    return CheckRecord(name, bool(np.all(ok)), float(lhs[worst]), float(rhs), relation, count=len(lhs), witness=witness)


def consequence_checks(
    params: ModelParams,
    evaluation_set: SequenceBatch,
    criteria: SinkCriteria | None = None,
    *,
    configs: int = 200,
    seed: int = 0,
    eta: float | None = None,
) -> ConsequenceReport:
    """Check the inequalities a model with loss at most eta must satisfy.

    ``measured_eta`` is the linf loss over the evaluation set together with
    the transplanted prefixes each bound is derived from, so for an honest
    model every check is guaranteed up to float slack. Passing ``eta``
    asserts a claimed bound instead; a model that does not meet it can then
    fail with a witness.

    ``criteria`` is accepted for interface symmetry with the sink checks and
    is unused.
    """
    del criteria
    if params.kind != "softmax":
        report = ConsequenceReport(float(linf_loss(forward_batch(params, evaluation_set.tokens).outputs, evaluation_set.targets)), len(evaluation_set))
        report.skipped.append({"suite": "softmax lemmas", "reason": f"model kind is {params.kind}"})
        return report
    if params.depth == 1:
        return _single_layer_checks(params, evaluation_set, configs, seed, eta)
    return _multilayer_checks(params, evaluation_set, eta)


def _single_layer_checks(params, batch, configs, seed, eta):
    if len(params.layers[0]) != 1:
        report = ConsequenceReport(float(linf_loss(forward_batch(params, batch.tokens).outputs, batch.targets)), len(batch))
        report.skipped.append({"suite": "single-layer lemmas", "reason": "multi-head layer"})
        return report
    at_two = np.flatnonzero(batch.trigger_pos == 2)
    if at_two.size == 0:
        raise ValueError("evaluation set has no sequence with the trigger at position 2")
    if batch.tokens.shape[1] < 4:
        raise ValueError("evaluation set sequences are too short for pairwise configurations")
    pairs = _sample_pairs(batch, configs, seed)
    extra = _transplants(batch, pairs)

    fwd = forward_batch(params, batch.tokens)
    fwd_extra = forward_batch(params, extra.tokens)
    measured = max(linf_loss(fwd.outputs, batch.targets), linf_loss(fwd_extra.outputs, extra.targets))
    bound = measured if eta is None else float(eta)
    report = ConsequenceReport(measured, len(batch) + len(extra), eta=eta)

    V = value_map(params.layers[0][0])
    alpha = fwd.trace.alpha[0][0]
    bos_norm = float(np.linalg.norm(V[:, BOS]))
    report.records.append(
        CheckRecord("bos-small", bos_norm <= bound + SLACK, bos_norm, bound, witness=None if bos_norm <= bound + SLACK else {"V_e1": V[:, BOS].tolist()})
    )

    b_idx = np.array([b for b, _, _ in pairs])
    i_idx = np.array([i for _, i, _ in pairs])
    h_idx = np.array([h for _, _, h in pairs])
    Vx_i = batch.tokens[b_idx, i_idx - 1] @ V.T
    self_lhs = alpha[b_idx, i_idx - 1, i_idx - 1] * _norms(Vx_i)
    pair_lhs = alpha[b_idx, h_idx - 1, i_idx - 1] * _norms(Vx_i)
    info = [{"i": int(i), "h": int(h)} for _, i, h in pairs]
    report.records.append(_aggregate("self-O-eta", self_lhs, 2 * bound, "<=", batch, b_idx, info))
    report.records.append(_aggregate("pairwise-O-eta", pair_lhs, 4 * bound, "<=", batch, b_idx, info))

    trig = _norms(batch.tokens[at_two, 1] @ V.T)
    report.records.append(_aggregate("trigger-large", trig, 1 - 2 * bound, ">=", batch, at_two))
    return report


def _multilayer_checks(params, batch, eta):
    measured = float(linf_loss(forward_batch(params, batch.tokens).outputs, batch.targets))
    report = ConsequenceReport(measured, len(batch), eta=eta)
    if params.residual or any(len(heads) != 1 for heads in params.layers):
        report.skipped.append({"suite": "multi-layer lemmas", "reason": "needs a no-residual model with one head per layer"})
        return report
    late = np.flatnonzero(batch.trigger_pos >= 3)
    if late.size == 0:
        raise ValueError("evaluation set has no sequence with the trigger at position 3 or later")
    bound = measured if eta is None else float(eta)
    V = composed_value_map(params)
    bos_norm = float(np.linalg.norm(V[:, BOS]))
    report.records.append(
        CheckRecord(
            "bos-small-multilayer",
            bos_norm <= bound + SLACK,
            bos_norm,
            bound,
            witness=None if bos_norm <= bound + SLACK else {"V_e1": V[:, BOS].tolist()},
        )
    )
    sub = batch.tokens[late]
    beta22 = unroll_coefficients(forward_batch(params, sub).trace).beta[:, 1, 1]
    lhs = beta22 * _norms(sub[:, 1] @ V.T)
    report.records.append(_aggregate("beta22-O-eta", lhs, 2 * bound, "<=", batch, late))
    return report


# -- sink predicates --------------------------------------------------------


@dataclass
class SinkVerdict:
    scope: str
    passed: bool
    fraction: float
    count: int
    criteria: dict
    per_head: dict = field(default_factory=dict)
    per_layer: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _non_trigger_mask(L: int, trigger_pos: np.ndarray) -> np.ndarray:
    # (B, L) mask of rows i >= 2 with i != j
    rows = np.arange(1, L + 1)[None, :]
    return (rows >= 2) & (rows != trigger_pos[:, None])


def sink_predicate(trace: AttentionTrace, trigger_pos, criteria: SinkCriteria, scope: str = "single_layer_all_positions") -> SinkVerdict:
    """Fraction of examples meeting the BOS-sink condition, and whether it reaches ``1 - delta``.

    ``trace`` holds ``(B, L, L)`` arrays. Per-head fractions are always
    reported; the verdict is true when any head qualifies.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    trigger_pos = np.asarray(trigger_pos)
    if trigger_pos.size == 0 or trace.alpha[0][0].shape[0] == 0:
        raise ValueError("empty trace set")
    if trace.alpha[0][0].shape[0] != trigger_pos.size:
        raise ValueError("traces and trigger positions are misaligned")
    L = trace.alpha[0][0].shape[-1]
    threshold = 1.0 - criteria.epsilon
    mask = _non_trigger_mask(L, trigger_pos)
    crit = asdict(criteria)
    if scope == "single_layer_all_positions":
        per_head = {}
        for d, h, a in trace.heads():
            ok = np.all((a[:, :, BOS] >= threshold) | ~mask, axis=1)
            per_head[f"{d}.{h}"] = float(ok.mean())
        best = max(per_head.values())
        return SinkVerdict(scope, best >= 1 - criteria.delta, best, int(trigger_pos.size), crit, per_head)

    keep = trigger_pos >= 3
    if not np.any(keep):
        raise ValueError("no example with trigger position >= 3")
    mask = mask[keep]
    any_sink = np.zeros(int(keep.sum()), dtype=bool)
    per_head, per_layer = {}, {}
    for d, h, a in trace.heads():
        hit = np.any((a[keep][:, :, BOS] >= threshold) & mask, axis=1)
        per_head[f"{d}.{h}"] = float(hit.mean())
        per_layer[str(d)] = max(per_layer.get(str(d), 0.0), per_head[f"{d}.{h}"])
        any_sink |= hit
    frac = float(any_sink.mean())
    return SinkVerdict(scope, frac >= 1 - criteria.delta, frac, int(keep.sum()), crit, per_head, per_layer)


# -- axis-separated pairs ---------------------------------------------------


def monte_carlo_axis_separated(samples, m: int, epsilon_prime: float, tol: float = 1e-6):
    """Find two samples equal (to ``tol``) off coordinate ``m`` and ``epsilon_prime`` apart on it.

    ``m`` is 1-based. Returns ``(x, y)`` or ``None``; ``None`` refutes nothing.
    """
    X = np.asarray(samples, dtype=float)
    if X.size == 0:
        return None
    if not CONTENT + 1 <= m <= X.shape[1]:
        raise ValueError(f"coordinate m={m} must be a content coordinate")
    others = np.delete(X, m - 1, axis=1)
    keys = np.round(others / tol).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    groups = inverse[order]
    starts = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
    vals = X[order, m - 1]
    lo = np.minimum.reduceat(vals, starts)
    hi = np.maximum.reduceat(vals, starts)
    spread = hi - lo
    g = int(np.argmax(spread))
    if spread[g] < epsilon_prime:
        return None
    seg = order[starts[g] : (starts[g + 1] if g + 1 < len(starts) else len(order))]
    a = seg[np.argmin(X[seg, m - 1])]
    b = seg[np.argmax(X[seg, m - 1])]
    return X[a].copy(), X[b].copy()


def fiber_samples(
    event: Callable[[np.ndarray], np.ndarray],
    seed: int,
    bases: int,
    per_fiber: int,
    n: int,
    m: int,
    dist: ContentDistribution | None = None,
) -> np.ndarray:
    """Members of ``event`` drawn along axis-``m`` lines through random plain tokens.

    Independent draws almost never share all other coordinates, so each base
    token is repeated ``per_fiber`` times with coordinate ``m`` redrawn.
    ``event`` maps an ``(N, n)`` token array to a boolean mask.
    """
    dist = dist or ContentDistribution()
    rng = make_rng(seed, 17, m)
    base = np.zeros((bases, n))
    base[:, PLAIN] = 1.0
    base[:, CONTENT:] = dist.sample(rng, (bases, n - CONTENT))
    X = np.repeat(base, per_fiber, axis=0)
    X[:, m - 1] = dist.sample(rng, bases * per_fiber)
    return X[np.asarray(event(X), dtype=bool)]

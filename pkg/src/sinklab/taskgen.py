"""Trigger-conditional task: input distribution, targets and losses.

Token layout (coordinates are 1-based in prose, 0-based in arrays):

* coordinate 1 marks BOS, coordinate 2 marks the trigger, coordinate 3 marks
  every other non-BOS token;
* coordinates 4..n carry content drawn i.i.d. from a ``ContentDistribution``.

Positions are 1-based wherever they appear in a public signature
(``trigger_pos`` is in ``{2, ..., L}``), matching the task definition.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError

BOS, TRIGGER, PLAIN = 0, 1, 2
CONTENT = 3

MIN_LENGTH = 4
MIN_DIM = 5


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *stream)``.

    Distinct stream tuples give independent Philox keys, so batches indexed by
    step number can be generated in any order and still agree bit for bit.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class ContentDistribution:
    """Distribution of a single content coordinate.

    ``kind="uniform"`` uses ``low``/``high``. ``kind="histogram"`` is a
    piecewise-constant density over ``edges`` with relative ``weights``; it
    covers any bounded density up to discretisation.
    """

    kind: str = "uniform"
    low: float = -1.0
    high: float = 1.0
    edges: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if self.kind == "uniform":
            if not self.high > self.low:
                raise ValueError(f"uniform bounds must satisfy low < high, got ({self.low}, {self.high})")
        elif self.kind == "histogram":
            edges = np.asarray(self.edges, dtype=float)
            weights = np.asarray(self.weights, dtype=float)
            if edges.ndim != 1 or len(edges) != len(weights) + 1 or len(weights) == 0:
                raise ValueError("histogram needs len(edges) == len(weights) + 1 >= 2")
            if np.any(np.diff(edges) <= 0) or np.any(weights < 0) or weights.sum() <= 0:
                raise ValueError("histogram edges must increase and weights must be nonnegative")
            object.__setattr__(self, "edges", tuple(edges.tolist()))
            object.__setattr__(self, "weights", tuple(weights.tolist()))
        else:
            raise ValueError(f"unknown content distribution kind {self.kind!r}")

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "uniform":
            return (self.low, self.high)
        return (self.edges[0], self.edges[-1])

    @property
    def density_bound(self) -> float:
        """Supremum ``M`` of the density."""
        if self.kind == "uniform":
            return 1.0 / (self.high - self.low)
        widths = np.diff(self.edges)
        probs = np.asarray(self.weights) / np.sum(self.weights)
        return float(np.max(probs / widths))

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, size=shape)
        edges = np.asarray(self.edges)
        probs = np.asarray(self.weights) / np.sum(self.weights)
        u = rng.random(size=shape)
        # inverse CDF of the piecewise-constant density
        cdf = np.concatenate([[0.0], np.cumsum(probs)])
        cdf[-1] = 1.0
        b = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(probs) - 1)
        frac = (u - cdf[b]) / np.where(probs[b] > 0, probs[b], 1.0)
        return edges[b] + np.clip(frac, 0.0, 1.0) * (edges[b + 1] - edges[b])

    def contains(self, values) -> np.ndarray:
        lo, hi = self.support
        values = np.asarray(values)
        return (values >= lo) & (values <= hi)

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "low": self.low, "high": self.high}
        return {"kind": "histogram", "edges": list(self.edges), "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "ContentDistribution":
        d = dict(d)
        kind = d.pop("kind", "uniform")
        if kind == "uniform":
            return cls("uniform", float(d.get("low", -1.0)), float(d.get("high", 1.0)))
        return cls("histogram", edges=tuple(d["edges"]), weights=tuple(d["weights"]))


@dataclass(frozen=True)
class LabeledSequence:
    tokens: np.ndarray
    trigger_pos: int
    targets: np.ndarray

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class SequenceBatch:
    """A stack of labeled sequences sharing ``L`` and ``n``."""

    tokens: np.ndarray  # (B, L, n)
    trigger_pos: np.ndarray  # (B,) 1-based
    targets: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __getitem__(self, b: int) -> LabeledSequence:
        return LabeledSequence(self.tokens[b], int(self.trigger_pos[b]), self.targets[b])

    def __iter__(self) -> Iterator[LabeledSequence]:
        for b in range(len(self)):
            yield self[b]

    @classmethod
    def from_sequences(cls, seqs: Sequence[LabeledSequence]) -> "SequenceBatch":
        if not seqs:
            raise ValueError("empty sequence list")
        return cls(
            np.stack([s.tokens for s in seqs]),
            np.array([s.trigger_pos for s in seqs], dtype=np.int64),
            np.stack([s.targets for s in seqs]),
        )


def _check_dims(L: int, n: int, min_dim: int = MIN_DIM) -> None:
    if L < MIN_LENGTH:
        raise DimensionError(f"sequence length L={L} is below the minimum {MIN_LENGTH}")
    if n < min_dim:
        raise DimensionError(f"token dimension n={n} is below the minimum {min_dim}")


def _assemble(trigger_pos: np.ndarray, content: np.ndarray, L: int, n: int) -> np.ndarray:
    count = len(trigger_pos)
    tokens = np.zeros((count, L, n))
    tokens[:, 0, BOS] = 1.0
    tokens[:, 1:, CONTENT:] = content
    is_trig = np.arange(L)[None, :] == (trigger_pos[:, None] - 1)
    tokens[:, 1:, TRIGGER] = is_trig[:, 1:]
    tokens[:, 1:, PLAIN] = ~is_trig[:, 1:]
    return tokens


def batch_targets(tokens: np.ndarray, trigger_pos: np.ndarray) -> np.ndarray:
    """Targets for a stack of sequences; see ``target_outputs``."""
    count, L, _ = tokens.shape
    trigger_pos = np.asarray(trigger_pos)
    if np.any(trigger_pos < 2) or np.any(trigger_pos > L):
        raise ValueError(f"trigger positions must lie in 2..{L}")
    rows = np.arange(count)
    prefix = np.cumsum(tokens[:, 1:, :], axis=1)  # prefix[:, k] = sum of rows 2..k+2
    targets = np.zeros_like(tokens)
    targets[rows, trigger_pos - 1] = prefix[rows, trigger_pos - 2] / (trigger_pos - 1)[:, None]
    return targets


def target_outputs(tokens: np.ndarray, trigger_pos: int) -> np.ndarray:
    """Zero everywhere except row ``trigger_pos``, which holds the mean of rows 2..trigger_pos."""
    tokens = np.asarray(tokens, dtype=float)
    L = tokens.shape[0]
    if not 2 <= trigger_pos <= L:
        raise ValueError(f"trigger_pos={trigger_pos} outside 2..{L}")
    return batch_targets(tokens[None], np.array([trigger_pos]))[0]


def sample_batch(
    seed: int,
    count: int,
    L: int,
    n: int,
    dist: ContentDistribution | None = None,
    *,
    stream: Sequence[int] = (),
    trigger_pos: int | None = None,
    min_dim: int = MIN_DIM,
) -> SequenceBatch:
    """Draw ``count`` labeled sequences from the stream ``(seed, *stream)``.

    ``trigger_pos`` pins the trigger instead of drawing it uniformly from 2..L.
    ``min_dim`` may be lowered to 3 for content-free layouts.
    """
    if min_dim < CONTENT:
        raise ValueError(f"min_dim must be at least {CONTENT}")
    _check_dims(L, n, min_dim)
    dist = dist or ContentDistribution()
    rng = make_rng(seed, *stream)
    if trigger_pos is None:
        js = rng.integers(2, L + 1, size=count)
    else:
        if not 2 <= trigger_pos <= L:
            raise ValueError(f"trigger_pos={trigger_pos} outside 2..{L}")
        js = np.full(count, trigger_pos, dtype=np.int64)
    content = dist.sample(rng, (count, L - 1, n - CONTENT))
    tokens = _assemble(js, content, L, n)
    return SequenceBatch(tokens, js.astype(np.int64), batch_targets(tokens, js))


def sample_sequence(seed: int, L: int, n: int, dist: ContentDistribution | None = None) -> LabeledSequence:
    return sample_batch(seed, 1, L, n, dist)[0]


def check_sequence(seq: LabeledSequence, dist: ContentDistribution | None = None) -> None:
    """Raise ``ValueError`` naming the first broken layout invariant."""
    x, j = seq.tokens, seq.trigger_pos
    L, n = x.shape
    _check_dims(L, n)
    if not 2 <= j <= L:
        raise ValueError(f"trigger_pos={j} outside 2..{L}")
    indicators = x[:, :CONTENT]
    if not np.all(np.isin(indicators, (0.0, 1.0))) or not np.all(indicators.sum(axis=1) == 1.0):
        raise ValueError("each token needs exactly one indicator coordinate set to 1")
    if x[0, BOS] != 1.0 or np.any(x[0, CONTENT:] != 0.0):
        raise ValueError("row 1 must be the bare BOS token")
    if np.any(x[1:, BOS] != 0.0):
        raise ValueError("BOS indicator set after row 1")
    if x[j - 1, TRIGGER] != 1.0 or x[:, TRIGGER].sum() != 1.0:
        raise ValueError(f"trigger indicator must be set at row {j} only")
    if dist is not None and not np.all(dist.contains(x[1:, CONTENT:])):
        raise ValueError("content coordinates outside the distribution support")
    if not np.array_equal(seq.targets, target_outputs(x, j)):
        raise ValueError("targets do not match the trigger-conditional mean")


def shift_trigger_to_end(seq: LabeledSequence) -> LabeledSequence:
    """Move the trigger token to position L, shifting later tokens left by one."""
    x, j = seq.tokens, seq.trigger_pos
    L = x.shape[0]
    order = [*range(j - 1), *range(j, L), j - 1]
    shifted = x[order].copy()
    return LabeledSequence(shifted, L, target_outputs(shifted, L))


def _stack(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    return arr[None] if arr.ndim == 2 else arr


def linf_loss(predictions, targets) -> float:
    """Max over examples and positions of the Euclidean row error.

    Finite-sample stand-in for the supremum over the support; callers should
    report the evaluation-set size alongside it.
    """
    p, t = _stack(predictions), _stack(targets)
    if p.shape != t.shape or p.size == 0:
        raise DimensionError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.sqrt(np.max(np.sum((t - p) ** 2, axis=-1))))


def l2_training_loss(predictions, targets) -> float:
    """Mean over examples of the summed squared row errors."""
    p, t = _stack(predictions), _stack(targets)
    if p.shape != t.shape or p.size == 0:
        raise DimensionError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.sum((p - t) ** 2) / p.shape[0])


# -- serialisation ----------------------------------------------------------

SEQ_MAGIC = b"SNKS"
SEQ_VERSION = 1
_SEQ_HEADER = struct.Struct("<4sHHIII")


def write_binary(path, batch: SequenceBatch) -> None:
    """Little-endian container: header, then per sequence ``j`` and L*n doubles."""
    count, L, n = batch.tokens.shape
    with open(path, "wb") as fh:
        fh.write(_SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, 0, count, L, n))
        for b in range(count):
            fh.write(struct.pack("<I", int(batch.trigger_pos[b])))
            fh.write(np.ascontiguousarray(batch.tokens[b], dtype="<f8").tobytes())


def read_binary(path) -> SequenceBatch:
    data = Path(path).read_bytes()
    magic, version, _, count, L, n = _SEQ_HEADER.unpack_from(data)
    if magic != SEQ_MAGIC:
        raise ValueError(f"{path}: not a sequence container")
    if version != SEQ_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _SEQ_HEADER.size
    stride = 4 + 8 * L * n
    if len(data) != off + count * stride:
        raise ValueError(f"{path}: truncated container")
    js = np.empty(count, dtype=np.int64)
    tokens = np.empty((count, L, n))
    for b in range(count):
        js[b] = struct.unpack_from("<I", data, off)[0]
        tokens[b] = np.frombuffer(data, dtype="<f8", count=L * n, offset=off + 4).reshape(L, n)
        off += stride
    return SequenceBatch(tokens, js, batch_targets(tokens, js))


def write_csv(path, batch: SequenceBatch) -> None:
    """Column-major CSV: one line per (sequence, coordinate), positions across."""
    count, L, n = batch.tokens.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# sinklab sequences v{SEQ_VERSION}\n# count={count} L={L} n={n}\n")
        w = csv.writer(fh)
        w.writerow(["seq", "trigger_pos", "coord", *(f"p{i}" for i in range(1, L + 1))])
        for b in range(count):
            for c in range(n):
                w.writerow([b, int(batch.trigger_pos[b]), c + 1, *map(repr, batch.tokens[b, :, c].tolist())])


def read_csv(path) -> SequenceBatch:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    L = len(header) - 3
    n = max(int(r[2]) for r in body)
    count = max(int(r[0]) for r in body) + 1
    tokens = np.zeros((count, L, n))
    js = np.zeros(count, dtype=np.int64)
    for r in body:
        b, c = int(r[0]), int(r[2]) - 1
        js[b] = int(r[1])
        tokens[b, :, c] = [float(v) for v in r[3:]]
    return SequenceBatch(tokens, js, batch_targets(tokens, js))

"""Attention statistics over test sets, sink classification and heatmap export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, composed_value_map, forward_batch
from .taskgen import BOS, TRIGGER, ContentDistribution, sample_batch
from .theory import SinkCriteria

STD_CONVENTION = "population (ddof=0)"


@dataclass(frozen=True)
class HeatmapStats:
    """Entrywise mean and std of attention weights, ``mean[layer][head]`` is ``L x L``."""

    mean: tuple[tuple[np.ndarray, ...], ...]
    std: tuple[tuple[np.ndarray, ...], ...]
    sample_count: int
    trigger_pos: int | str  # pinned position or "mixed"
    kind: str = "softmax"

    def heads(self):
        for d, layer in enumerate(self.mean):
            for h, m in enumerate(layer):
                yield d, h, m, self.std[d][h]

    def metadata(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "trigger_pos": self.trigger_pos,
            "kind": self.kind,
            "std": STD_CONVENTION,
        }


def attention_stats(
    params: ModelParams,
    count: int,
    trigger_pos: int | None = None,
    seed: int = 0,
    L: int = 16,
    dist: ContentDistribution | None = None,
) -> HeatmapStats:
    """Mean and population std of every attention map over ``count`` fresh sequences.

    ``trigger_pos`` pins the trigger; ``None`` draws it uniformly.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    batch = sample_batch(seed, count, L, params.n, dist, stream=(21,), trigger_pos=trigger_pos)
    trace = forward_batch(params, batch.tokens).trace
    mean = tuple(tuple(a.mean(axis=0) for a in layer) for layer in trace.alpha)
    std = tuple(tuple(a.std(axis=0) for a in layer) for layer in trace.alpha)
    return HeatmapStats(mean, std, count, "mixed" if trigger_pos is None else int(trigger_pos), params.kind)


@dataclass
class SinkReport:
    """Per-head BOS attention profile and classification.

    ``bos_mean[key]`` lists mean attention on BOS at positions 1..L for the
    head ``key = "layer.head"``; ``classes`` maps each head to ``sink``,
    ``sink-free`` or ``mixed``.
    """

    criteria: dict
    trigger_pos: int | str
    bos_mean: dict = field(default_factory=dict)
    classes: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)

    def heads_of(self, cls: str) -> list[str]:
        return [k for k, v in self.classes.items() if v == cls]

    @property
    def sink_heads(self) -> list[str]:
        return self.heads_of("sink")

    @property
    def sink_free_heads(self) -> list[str]:
        return self.heads_of("sink-free")

    def layers_with_sink(self) -> dict:
        out = {}
        for key, cls in self.classes.items():
            layer = key.split(".")[0]
            out[layer] = out.get(layer, False) or cls == "sink"
        return out

    def to_dict(self) -> dict:
        return {
            "criteria": self.criteria,
            "trigger_pos": self.trigger_pos,
            "classes": self.classes,
            "sink_heads": self.sink_heads,
            "sink_free_heads": self.sink_free_heads,
            "layers_with_sink": self.layers_with_sink(),
            "bos_mean": self.bos_mean,
            "witnesses": self.witnesses,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def sink_report(stats: HeatmapStats, criteria: SinkCriteria) -> SinkReport:
    """Classify each head from its mean attention on BOS.

    A head is a sink when the mean is at least ``1 - epsilon`` at every
    position ``i >= 2`` other than a pinned trigger, and sink-free when it is
    at most ``epsilon`` at every position ``i >= 2``.
    """
    if not isinstance(criteria, SinkCriteria):
        raise TypeError("criteria must be a SinkCriteria")
    eps = criteria.epsilon
    report = SinkReport({"epsilon": eps, "delta": criteria.delta}, stats.trigger_pos)
    for d, h, mean, _ in stats.heads():
        key = f"{d}.{h}"
        col = mean[:, BOS]
        report.bos_mean[key] = col.tolist()
        positions = np.arange(2, len(col) + 1)
        non_trig = positions[positions != stats.trigger_pos] if stats.trigger_pos != "mixed" else positions
        sink_vals = col[non_trig - 1]
        free_vals = col[positions - 1]
        if np.all(sink_vals >= 1 - eps):
            report.classes[key] = "sink"
        elif np.all(free_vals <= eps):
            report.classes[key] = "sink-free"
        else:
            report.classes[key] = "mixed"
        weakest = int(non_trig[np.argmin(sink_vals)])
        strongest = int(positions[np.argmax(free_vals)])
        report.witnesses[key] = {
            "min_bos_position": weakest,
            "min_bos_mean": float(col[weakest - 1]),
            "max_bos_position": strongest,
            "max_bos_mean": float(col[strongest - 1]),
        }
    return report


def value_norm_diagnostics(params: ModelParams, probes) -> dict:
    """Norms of the value map on BOS, plain tokens and trigger tokens."""
    if params.residual:
        raise ValueError("value-map diagnostics need a model without residual connections")
    V = composed_value_map(params)
    tokens = probes.tokens
    rows = np.arange(1, tokens.shape[1] + 1)[None, :]
    is_trig = rows == probes.trigger_pos[:, None]
    norms = np.sqrt(np.sum((tokens @ V.T) ** 2, axis=-1))
    plain = norms[(rows >= 2) & ~is_trig]
    trig = norms[is_trig]
    return {
        "bos_value_norm": float(np.linalg.norm(V[:, BOS])),
        "plain_value_norm_min": float(plain.min()) if plain.size else float("nan"),
        "plain_value_norm_max": float(plain.max()) if plain.size else float("nan"),
        "trigger_value_norm_min": float(trig.min()),
        "trigger_value_norm_max": float(trig.max()),
        "trigger_indicator_gain": float(np.linalg.norm(V[:, TRIGGER])),
    }


# -- export -----------------------------------------------------------------


def write_heatmap_csv(path, matrix, metadata: dict | None = None) -> None:
    """Matrix rows as CSV, preceded by ``# key: value`` metadata lines."""
    matrix = np.asarray(matrix, dtype=float)
    with open(path, "w", newline="") as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_heatmap_csv(path) -> tuple[np.ndarray, dict]:
    meta, rows = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(": ")
                meta[key] = value
            elif line.strip():
                rows.append([float(v) for v in line.strip().split(",")])
    return np.array(rows), meta


def write_pgm(path, matrix, lo: float | None = None, hi: float | None = None) -> tuple[float, float]:
    """8-bit binary PGM scaled linearly from ``lo`` (black) to ``hi`` (white).

    The scale is written into a header comment and returned.
    """
    matrix = np.asarray(matrix, dtype=float)
    lo = float(matrix.min()) if lo is None else float(lo)
    hi = float(matrix.max()) if hi is None else float(hi)
    span = hi - lo
    scaled = np.zeros_like(matrix) if span <= 0 else np.clip((matrix - lo) / span, 0.0, 1.0)
    pixels = np.round(scaled * 255).astype(np.uint8)
    rows, cols = matrix.shape
    header = f"P5\n# min={lo!r} max={hi!r}\n{cols} {rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
    return lo, hi


def read_pgm(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    tokens, meta, pos = [], {}, 0
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            for part in line[1:].split():
                key, _, value = part.partition("=")
                meta[key] = float(value)
        else:
            tokens += line.split()
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw, dtype=np.uint8, count=rows * cols, offset=pos).reshape(rows, cols), meta


def export_stats(stats: HeatmapStats, out_dir, prefix: str = "attn") -> list[Path]:
    """Write mean and std heatmaps of every head as CSV and PGM; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for d, h, mean, std in stats.heads():
        for label, mat, scale in (("mean", mean, (0.0, 1.0) if stats.kind == "softmax" else (None, None)), ("std", std, (None, None))):
            stem = f"{prefix}_L{d}_H{h}_{label}"
            csv_path = out_dir / f"{stem}.csv"
            pgm_path = out_dir / f"{stem}.pgm"
            lo, hi = write_pgm(pgm_path, mat, *scale)
            meta = {**stats.metadata(), "layer": d, "head": h, "statistic": label, "pgm_min": lo, "pgm_max": hi}
            write_heatmap_csv(csv_path, mat, meta)
            written += [csv_path, pgm_path]
    return written

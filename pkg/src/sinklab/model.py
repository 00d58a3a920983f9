"""Softmax and ReLU attention models with full attention tracing.

A model is a stack of layers, each a list of heads. A head maps the token
matrix ``H`` (rows are tokens) to ``W_O sum_k alpha[i, k] W_V h_k`` with
scores ``h_i W_Q W_K^T h_k``; the heads of a layer are summed.

With ``residual=True`` every layer adds its input back,
``h_d = h_{d-1} + sum_heads attn(h_{d-1})``, and the model output is the total
written to the residual stream, ``h_D - x``. Without residuals the output is
simply ``h_D``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, NonFiniteError

KINDS = ("softmax", "relu")
WEIGHT_NAMES = ("W_Q", "W_K", "W_V", "W_O")


def _frozen(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite weight", where=name)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayerHeadParams:
    """The four ``n x n`` matrices of one attention head (stored read-only)."""

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray

    def __post_init__(self):
        for name in WEIGHT_NAMES:
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        shapes = {getattr(self, name).shape for name in WEIGHT_NAMES}
        if len(shapes) != 1:
            raise DimensionError(f"head matrices disagree in shape: {sorted(shapes)}")

    @property
    def n(self) -> int:
        return self.W_Q.shape[0]

    def matrices(self) -> tuple[np.ndarray, ...]:
        return (self.W_Q, self.W_K, self.W_V, self.W_O)


@dataclass(frozen=True)
class ModelParams:
    layers: tuple[tuple[LayerHeadParams, ...], ...]
    kind: str = "softmax"
    residual: bool = False

    def __post_init__(self):
        layers = tuple(tuple(heads) for heads in self.layers)
        if not layers or any(len(heads) == 0 for heads in layers):
            raise DimensionError("a model needs at least one layer and one head per layer")
        if self.kind not in KINDS:
            raise ValueError(f"attention kind must be one of {KINDS}, got {self.kind!r}")
        dims = {head.n for heads in layers for head in heads}
        if len(dims) != 1:
            raise DimensionError(f"heads disagree on n: {sorted(dims)}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "residual", bool(self.residual))

    @property
    def n(self) -> int:
        return self.layers[0][0].n

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> tuple[int, ...]:
        """Number of heads in each layer."""
        return tuple(len(heads) for heads in self.layers)

    @property
    def relu(self) -> bool:
        return self.kind == "relu"

    def paths(self) -> list[str]:
        return [f"layers[{d}][{h}].{name}" for d, heads in enumerate(self.layers) for h in range(len(heads)) for name in WEIGHT_NAMES]

    def flat(self) -> list[np.ndarray]:
        """All weight matrices in ``paths()`` order."""
        return [m for heads in self.layers for head in heads for m in head.matrices()]

    def replace_flat(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        """Same architecture with new weight matrices in ``paths()`` order."""
        it = iter(arrays)
        layers = tuple(tuple(LayerHeadParams(*(next(it) for _ in WEIGHT_NAMES)) for _ in heads) for heads in self.layers)
        return ModelParams(layers, self.kind, self.residual)

    @classmethod
    def single(cls, W_Q, W_K, W_V, W_O, kind="softmax", residual=False) -> "ModelParams":
        return cls(((LayerHeadParams(W_Q, W_K, W_V, W_O),),), kind, residual)


@dataclass(frozen=True)
class AttentionTrace:
    """Attention weights ``alpha[layer][head]``, each an ``L x L`` lower-triangular matrix.

    For a batch the arrays carry a leading example axis.
    """

    alpha: tuple[tuple[np.ndarray, ...], ...]
    kind: str = "softmax"

    def head(self, layer: int, head: int) -> np.ndarray:
        return self.alpha[layer][head]

    def heads(self) -> Iterator[tuple[int, int, np.ndarray]]:
        for d, layer in enumerate(self.alpha):
            for h, a in enumerate(layer):
                yield d, h, a

    @property
    def depth(self) -> int:
        return len(self.alpha)

    def example(self, b: int) -> "AttentionTrace":
        return AttentionTrace(tuple(tuple(a[b] for a in layer) for layer in self.alpha), self.kind)


@dataclass(frozen=True)
class ForwardResult:
    """Model outputs, the attention trace and the residual-stream activations.

    ``activations[0]`` is the input and ``activations[d]`` the output of layer ``d``.
    """

    outputs: np.ndarray
    trace: AttentionTrace
    activations: list[np.ndarray] = field(repr=False)

    def example(self, b: int) -> "ForwardResult":
        return ForwardResult(self.outputs[b], self.trace.example(b), [h[b] for h in self.activations])


def _check_row(scores_row) -> np.ndarray:
    s = np.asarray(scores_row, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise DimensionError("scores must be a non-empty vector")
    if not np.all(np.isfinite(s)):
        bad = int(np.flatnonzero(~np.isfinite(s))[0])
        raise NonFiniteError("non-finite attention score", where=f"key {bad + 1}")
    return s


def softmax_weights(scores_row) -> np.ndarray:
    """Softmax of one causal score row, shifted by its max for stability."""
    s = _check_row(scores_row)
    e = np.exp(s - s.max())
    return e / e.sum()


def relu_weights(scores_row, position: int) -> np.ndarray:
    """``max(s, 0) / max(position - 1, 1)`` for a row at 1-based ``position``."""
    s = _check_row(scores_row)
    if position < 1:
        raise ValueError(f"position must be >= 1, got {position}")
    return np.maximum(s, 0.0) / max(position - 1, 1)


def _locate_nonfinite(arr: np.ndarray, layer: int, head: int, what: str):
    b, i = np.argwhere(~np.isfinite(arr))[0][:2]
    raise NonFiniteError(f"non-finite {what}", where=f"example {b} layer {layer} head {head} position {i + 1}")


def forward_batch(params: ModelParams, tokens) -> ForwardResult:
    """Forward pass over a ``(B, L, n)`` stack; trace arrays are ``(B, L, L)``."""
    x = np.ascontiguousarray(tokens, dtype=float)
    if x.ndim != 3 or x.shape[2] != params.n:
        raise DimensionError(f"expected tokens of shape (B, L, {params.n}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        b, i = np.argwhere(~np.isfinite(x))[0][:2]
        raise NonFiniteError("non-finite input token", where=f"example {b} position {i + 1}")
    h = x
    activations = [x]
    alpha = []
    for d, heads in enumerate(params.layers):
        total = h.copy() if params.residual else np.zeros_like(h)
        layer_alpha = []
        for k, head in enumerate(heads):
            y, a = kernels.attention_forward(h, *head.matrices(), params.relu)
            if not np.all(np.isfinite(a)):
                _locate_nonfinite(a, d, k, "attention weight")
            if not np.all(np.isfinite(y)):
                _locate_nonfinite(y, d, k, "head output")
            total += y
            layer_alpha.append(a)
        h = total
        activations.append(h)
        alpha.append(tuple(layer_alpha))
    outputs = h - x if params.residual else h
    return ForwardResult(outputs, AttentionTrace(tuple(alpha), params.kind), activations)


def forward(params: ModelParams, tokens) -> ForwardResult:
    """Forward pass over one ``(L, n)`` token matrix."""
    x = np.asarray(tokens, dtype=float)
    if x.ndim != 2:
        raise DimensionError(f"expected an (L, n) token matrix, got shape {x.shape}")
    return forward_batch(params, x[None]).example(0)


def value_map(head: LayerHeadParams) -> np.ndarray:
    """``W_O @ W_V``: the linear map applied to attended tokens."""
    return head.W_O @ head.W_V


def composed_value_map(params: ModelParams) -> np.ndarray:
    """Product of per-layer value maps, last layer leftmost (single-head layers only)."""
    if any(len(heads) != 1 for heads in params.layers):
        raise ValueError("the composed value map is defined for single-head layers")
    V = np.eye(params.n)
    for (head,) in params.layers:
        V = value_map(head) @ V
    return V


def relu_unnormalised_sum(head: LayerHeadParams, tokens) -> np.ndarray:
    """``W_O sum_k relu(s_ik) W_V x_k`` for each row, without the ``n_i`` divisor."""
    x = np.asarray(tokens, dtype=float)
    scores = np.tril(x @ head.W_Q @ head.W_K.T @ x.T)
    return np.maximum(scores, 0.0) @ (x @ head.W_V.T) @ head.W_O.T


# -- checkpoints ------------------------------------------------------------

MODEL_FORMAT = "sinklab.model"
MODEL_VERSION = 1
MODEL_MAGIC = b"SNKM"
_MODEL_HEADER = struct.Struct("<4sHBBII")  # magic, version, relu, residual, n, depth


def params_to_dict(params: ModelParams, metadata: dict | None = None) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": params.kind,
        "residual": params.residual,
        "n": params.n,
        "layers": [[{name: getattr(head, name).tolist() for name in WEIGHT_NAMES} for head in heads] for heads in params.layers],
        "metadata": metadata or {},
    }


def params_from_dict(doc: dict) -> ModelParams:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    layers = tuple(tuple(LayerHeadParams(*(np.array(h[name], dtype=float) for name in WEIGHT_NAMES)) for h in heads) for heads in doc["layers"])
    params = ModelParams(layers, doc["kind"], doc["residual"])
    if params.n != doc["n"]:
        raise DimensionError(f"declared n={doc['n']} but matrices are {params.n}x{params.n}")
    return params


def save_json(params: ModelParams, path, metadata: dict | None = None) -> None:
    # repr-exact floats, so a JSON round trip is lossless
    Path(path).write_text(json.dumps(params_to_dict(params, metadata), indent=1) + "\n")


def load_json(path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))


def save_binary(params: ModelParams, path) -> None:
    """Header, one u32 head count per layer, then row-major little-endian doubles."""
    parts = [
        _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, int(params.relu), int(params.residual), params.n, params.depth),
        struct.pack(f"<{params.depth}I", *params.shape),
    ]
    parts += [np.ascontiguousarray(m, dtype="<f8").tobytes() for m in params.flat()]
    Path(path).write_bytes(b"".join(parts))


def load_binary(path) -> ModelParams:
    raw = Path(path).read_bytes()
    magic, version, relu, residual, n, depth = _MODEL_HEADER.unpack_from(raw, 0)
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    offset = _MODEL_HEADER.size
    shape = struct.unpack_from(f"<{depth}I", raw, offset)
    offset += 4 * depth
    count = 4 * sum(shape)
    data = np.frombuffer(raw, dtype="<f8", count=count * n * n, offset=offset).reshape(count, n, n)
    if offset + data.nbytes != len(raw):
        raise ValueError("trailing or missing bytes in model file")
    layers = []
    it = iter(data)
    for heads in shape:
        layers.append(tuple(LayerHeadParams(*(next(it) for _ in WEIGHT_NAMES)) for _ in range(heads)))
    return ModelParams(tuple(layers), KINDS[relu], bool(residual))


def save_model(params: ModelParams, path, metadata: dict | None = None) -> None:
    """Write JSON for ``.json`` paths, the binary format otherwise."""
    if Path(path).suffix == ".json":
        save_json(params, path, metadata)
    else:
        save_binary(params, path)


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return load_binary(path) if head == MODEL_MAGIC else load_json(path)


def load_metadata(path) -> dict:
    """Metadata block of a JSON checkpoint; binary checkpoints carry none."""
    with open(path, "rb") as fh:
        if fh.read(4) == MODEL_MAGIC:
            return {}
    return dict(json.loads(Path(path).read_text()).get("metadata", {}))

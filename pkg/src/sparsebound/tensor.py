"""Forward evaluation and reverse-mode gradients of layered-DAG ReLU networks.

Tensors are plain float64 numpy arrays.  A batch of inputs has shape
``(B, c_0, d_0)``; internally each layer's activations are kept as
``(B, d_l, c_l)``.  Layer ``l`` gathers its predecessors' (ReLU'd) vectors
slot by slot into ``(B, d_l, k_l * c_{l-1})`` and multiplies by its weight
matrices, either one shared ``(c_l, cols)`` matrix or a ``(d_l, c_l, cols)``
stack.  Layer 1 reads the raw input; no ReLU follows the output layer.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import ArchGraph


class ShapeError(ValueError):
    pass


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains NaN or Inf")


@dataclass
class WeightSet:
    """Per-layer weights; ``layers[l - 1]`` belongs to layer ``l``."""

    layers: list[np.ndarray]

    def copy(self) -> "WeightSet":
        return WeightSet([w.copy() for w in self.layers])

    def scaled(self, factors) -> "WeightSet":
        return WeightSet([w * f for w, f in zip(self.layers, factors)])

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])

    def with_flat(self, v: np.ndarray) -> "WeightSet":
        out, at = [], 0
        for w in self.layers:
            out.append(np.asarray(v[at : at + w.size], dtype=np.float64).reshape(w.shape))
            at += w.size
        return WeightSet(out)


def neuron_matrix(g: ArchGraph, w: WeightSet, l: int, j: int) -> np.ndarray:
    """The matrix w^l_j, trimmed to the neuron's live columns."""
    full = w.layers[l - 1] if g.shared else w.layers[l - 1][j]
    mask = g.column_mask(l)
    if mask is None:
        return full
    return full[:, mask[j]]


def check_weights(g: ArchGraph, w: WeightSet) -> None:
    if len(w.layers) != g.L:
        raise ShapeError(f"expected {g.L} weight layers, got {len(w.layers)}")
    for l, a in enumerate(w.layers, start=1):
        if a.shape != g.weight_shape(l):
            raise ShapeError(f"layer {l}: weight shape {a.shape} != {g.weight_shape(l)}")
        _check_finite(a, f"layer {l} weights")
        mask = g.column_mask(l)
        if mask is not None and np.any(a.transpose(0, 2, 1)[~mask]):
            raise ShapeError(f"layer {l}: non-zero weights in unused columns")


def zero_weights(g: ArchGraph) -> WeightSet:
    return WeightSet([np.zeros(g.weight_shape(l)) for l in range(1, g.L + 1)])


def random_weights(g: ArchGraph, rng: np.random.Generator, scale: float = 1.0) -> WeightSet:
    """Standard-normal weights (times ``scale``) with unused columns zeroed."""
    return mask_weights(
        g, WeightSet([scale * rng.standard_normal(g.weight_shape(l)) for l in range(1, g.L + 1)])
    )


def mask_weights(g: ArchGraph, w: WeightSet) -> WeightSet:
    """Zero the columns ragged unshared layers do not use (in place)."""
    for l in range(1, g.L + 1):
        mask = g.column_mask(l)
        if mask is not None:
            w.layers[l - 1] *= mask[:, None, :]
    return w


def live_mask(g: ArchGraph) -> np.ndarray:
    """Flat boolean mask of the weight entries that are real parameters."""
    parts = []
    for l in range(1, g.L + 1):
        m = np.ones(g.weight_shape(l), dtype=bool)
        cm = g.column_mask(l)
        if cm is not None:
            m &= cm[:, None, :]
        parts.append(m.ravel())
    return np.concatenate(parts)


def unshare(g: ArchGraph, w: WeightSet) -> tuple[ArchGraph, WeightSet]:
    """The equivalent unshared graph with the shared matrices copied per neuron."""
    if not g.shared:
        return g, w
    import dataclasses

    g2 = dataclasses.replace(g, shared=False)
    w2 = WeightSet(
        [np.broadcast_to(a, (g.widths[l],) + a.shape).copy() for l, a in enumerate(w.layers, 1)]
    )
    return g2, w2


@dataclass
class ActivationTrace:
    """Intermediates of one batched forward pass.

    ``pre[l]`` is z^l with shape (B, d_l, c_l) for l = 0..L (``pre[0]`` is the
    input); ``post[l]`` is sigma(z^l) for 1 <= l < L; ``gathered[l - 1]`` is the
    column input layer l multiplied its weights with.
    """

    pre: list[np.ndarray] = field(default_factory=list)
    post: list[Optional[np.ndarray]] = field(default_factory=list)
    gathered: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0)


def mse_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of the squared Euclidean distance to the targets."""
    logits = np.atleast_2d(logits)
    targets = np.atleast_2d(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    return float(np.mean(np.sum((logits - targets) ** 2, axis=1)))


def mse_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(logits)
    return 2.0 * (logits - np.atleast_2d(targets)) / logits.shape[0]


def _as_batch(g: ArchGraph, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (g.channels[0], g.widths[0]):
        raise ShapeError(
            f"input shape {x.shape} does not match (B, c_0={g.channels[0]}, d_0={g.widths[0]})"
        )
    _check_finite(x, "input")
    return x, single


def _gather(g: ArchGraph, l: int, act: np.ndarray) -> np.ndarray:
    B, below, c = act.shape
    padded = np.concatenate([act, np.zeros((B, 1, c))], axis=1)
    idx = g.gather_index(l)
    cols = padded[:, idx, :].reshape(B, idx.shape[0], idx.shape[1] * c)
    if g.bias[l - 1]:
        cols = np.concatenate([cols, np.ones(cols.shape[:2] + (1,))], axis=2)
    return cols


def forward(g: ArchGraph, w: WeightSet, x: np.ndarray) -> tuple[np.ndarray, ActivationTrace]:
    """Evaluate the network on one input (c_0, d_0) or a batch (B, c_0, d_0).

    Returns the output z^L_1 (shape (c_L,) or (B, c_L)) and the trace.
    """
    check_weights(g, w)
    xb, single = _as_batch(g, x)
    act = xb.transpose(0, 2, 1)
    trace = ActivationTrace(pre=[act], post=[None], single=single)
    for l in range(1, g.L + 1):
        cols = _gather(g, l, act)
        W = w.layers[l - 1]
        if g.shared:
            z = cols @ W.T
        else:
            z = np.einsum("bdk,dck->bdc", cols, W, optimize=True)
        trace.gathered.append(cols)
        trace.pre.append(z)
        if l < g.L:
            act = relu(z)
            trace.post.append(act)
        else:
            trace.post.append(None)
    out = trace.pre[-1][:, 0, :]
    return (out[0] if single else out), trace


def backward(
    g: ArchGraph, w: WeightSet, trace: ActivationTrace, upstream: np.ndarray
) -> WeightSet:
    """Gradient of ``sum(upstream * output)`` with respect to every weight.

    ReLU'(0) is taken as 0.
    """
    dz = np.asarray(upstream, dtype=np.float64)
    if trace.single:
        dz = dz[None]
    B = trace.pre[0].shape[0]
    if dz.shape != (B, g.channels[-1]):
        raise ShapeError(f"upstream gradient shape {dz.shape} != {(B, g.channels[-1])}")
    dz = dz[:, None, :]
    grads: list[np.ndarray] = [None] * g.L
    for l in range(g.L, 0, -1):
        cols = trace.gathered[l - 1]
        W = w.layers[l - 1]
        if g.shared:
            grads[l - 1] = np.einsum("bdc,bdk->ck", dz, cols, optimize=True)
            dcols = dz @ W
        else:
            gw = np.einsum("bdc,bdk->dck", dz, cols, optimize=True)
            mask = g.column_mask(l)
            if mask is not None:
                gw *= mask[:, None, :]
            grads[l - 1] = gw
            dcols = np.einsum("bdc,dck->bdk", dz, W, optimize=True)
        if l == 1:
            break
        c_in = g.channels[l - 1]
        if g.bias[l - 1]:
            dcols = dcols[:, :, :-1]
        d_l, k = g.gather_index(l).shape
        # (d_l * k, B * c_in) -> scatter-add onto layer l-1 neurons
        flat = dcols.reshape(B, d_l * k, c_in).transpose(1, 0, 2).reshape(d_l * k, B * c_in)
        dact = (g.scatter_matrix(l) @ flat).reshape(g.widths[l - 1], B, c_in).transpose(1, 0, 2)
        dz = dact * (trace.pre[l - 1] > 0)
    return WeightSet(grads)


def loss_and_grad(
    g: ArchGraph, w: WeightSet, x: np.ndarray, targets: np.ndarray
) -> tuple[float, WeightSet, np.ndarray]:
    out, trace = forward(g, w, x)
    loss = mse_loss(out, targets)
    grad = backward(g, w, trace, mse_grad(out, targets).reshape(np.shape(out)))
    return loss, grad, out


# -- weight container -------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic    8 bytes  b"SPBWGT\x00\x01"
#   version  uint32   (=1)
#   nlayers  uint32
#   per layer: ndim uint32, then ndim x uint32 extents
#   payload: every layer's entries as little-endian float64, row-major,
#            layers in order
# A JSON manifest with the same shapes is written next to it (<path>.json).

WEIGHTS_MAGIC = b"SPBWGT\x00\x01"
WEIGHTS_VERSION = 1


def dump_weights(w: WeightSet) -> bytes:
    head = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(w.layers))]
    for a in w.layers:
        head.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in w.layers]
    return b"".join(head + body)


def parse_weights(buf: bytes) -> WeightSet:
    if buf[:8] != WEIGHTS_MAGIC:
        raise ValueError("not a weight container (bad magic)")
    at = 8
    try:
        version, n = struct.unpack_from("<II", buf, at)
        at += 8
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weight container version {version}")
        shapes = []
        for _ in range(n):
            (nd,) = struct.unpack_from("<I", buf, at)
            at += 4
            shapes.append(struct.unpack_from(f"<{nd}I", buf, at))
            at += 4 * nd
    except struct.error as e:
        raise ValueError(f"truncated weight container header: {e}") from None
    layers = []
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        if at + size > len(buf):
            raise ValueError("truncated weight container payload")
        layers.append(np.frombuffer(buf, dtype="<f8", count=size // 8, offset=at).reshape(shape).astype(np.float64))
        at += size
    if at != len(buf):
        raise ValueError("trailing bytes after weight container payload")
    return WeightSet(layers)


def save_weights(path, w: WeightSet, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.write_bytes(dump_weights(w))
    manifest = {
        "format": "sparsebound-weights",
        "version": WEIGHTS_VERSION,
        "shapes": [list(a.shape) for a in w.layers],
        "dtype": "float64-le",
    }
    if extra:
        manifest.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_weights(path, g: Optional[ArchGraph] = None) -> WeightSet:
    w = parse_weights(Path(path).read_bytes())
    if g is not None:
        check_weights(g, w)
    return w

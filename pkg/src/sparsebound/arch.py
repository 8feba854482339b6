"""Layered-DAG network architectures.

A network of depth ``L`` has layers ``0..L``; layer ``l`` holds ``widths[l]``
neurons, each computing a vector of ``channels[l]`` entries.  Neuron ``j`` of
layer ``l >= 1`` reads the neurons ``pred[l - 1][j]`` of layer ``l - 1``.

Convolutional layers are *windowed*: every neuron owns ``window[l - 1]`` kernel
slots and ``slots[l - 1][j]`` records which slot each predecessor occupies.
Slots that fall outside the image (zero padding) have no predecessor and feed
zeros.  The fan of a neuron (the quantity entering ``deg(G)`` and the path
product) is its slot count, so a padded border neuron still counts as a full
kernel.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT_NAME = "sparsebound-arch"
FORMAT_VERSION = 1


class ArchError(ValueError):
    """Raised for an ill-formed architecture."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a convolutional stack.

    ``kind`` is ``"conv"`` or ``"fc"``.  Spatial quantities are (rows, cols).
    A fully-connected layer reads every spatial position of its input and
    produces a single 1x1 position.
    """

    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    out_channels: int = 1
    bias: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ArchError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ArchError("kernel and stride must be positive")
        if min(self.padding) < 0:
            raise ArchError("padding must be non-negative")
        if self.out_channels < 1:
            raise ArchError("out_channels must be positive")

    def output_extent(self, rows: int, cols: int) -> tuple[int, int]:
        if self.kind == "fc":
            return 1, 1
        out = []
        for n, k, s, p in zip((rows, cols), self.kernel, self.stride, self.padding):
            if s > n + 2 * p:
                raise ArchError(f"stride {s} exceeds padded extent {n + 2 * p}")
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ArchError(
                    f"kernel {k} collapses extent {n} (padding {p}) below 1"
                )
            out.append(o)
        return out[0], out[1]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "out_channels": self.out_channels,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            kernel=tuple(d.get("kernel", (1, 1))),
            stride=tuple(d.get("stride", (1, 1))),
            padding=tuple(d.get("padding", (0, 0))),
            out_channels=int(d.get("out_channels", 1)),
            bias=bool(d.get("bias", False)),
        )


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


@dataclass(frozen=True)
class ArchGraph:
    widths: tuple[int, ...]
    channels: tuple[int, ...]
    pred: tuple[tuple[tuple[int, ...], ...], ...]
    shared: bool = False
    window: tuple[Optional[int], ...] = ()
    slots: tuple[Optional[tuple[tuple[int, ...], ...]], ...] = ()
    bias: tuple[bool, ...] = ()
    allow_dead: bool = field(default=False, compare=False)

    def __post_init__(self):
        L = len(self.widths) - 1
        if not self.window:
            object.__setattr__(self, "window", (None,) * L)
        if not self.slots:
            object.__setattr__(self, "slots", (None,) * L)
        if not self.bias:
            object.__setattr__(self, "bias", (False,) * L)
        self._validate()

    # -- validation ---------------------------------------------------------

    def _validate(self):
        L = len(self.widths) - 1
        if L < 1:
            raise ArchError("need at least one layer")
        if len(self.channels) != L + 1:
            raise ArchError("channels must have one entry per layer (c_0..c_L)")
        if len(self.pred) != L or len(self.window) != L or len(self.slots) != L:
            raise ArchError("pred/window/slots must have one entry per layer 1..L")
        if len(self.bias) != L:
            raise ArchError("bias must have one entry per layer 1..L")
        if any(d < 1 for d in self.widths) or any(c < 1 for c in self.channels):
            raise ArchError("widths and channels must be positive")
        if self.widths[-1] != 1:
            raise ArchError("the output layer must hold exactly one neuron (d_L = 1)")
        for l in range(1, L + 1):
            preds = self.pred[l - 1]
            below = self.widths[l - 1]
            if len(preds) != self.widths[l]:
                raise ArchError(f"layer {l}: expected {self.widths[l]} pred lists")
            used = np.zeros(below, dtype=bool)
            for j, p in enumerate(preds):
                if len(p) == 0:
                    raise ArchError(f"pred({l},{j}) is empty")
                if any(b <= a for a, b in zip(p, p[1:])):
                    raise ArchError(f"pred({l},{j}) must be sorted and duplicate-free")
                if p[0] < 0 or p[-1] >= below:
                    raise ArchError(
                        f"pred({l},{j}) has an index outside [0, {below})"
                    )
                used[list(p)] = True
            k = self.window[l - 1]
            sl = self.slots[l - 1]
            if k is None:
                if sl is not None:
                    raise ArchError(f"layer {l}: slots given without a window size")
            else:
                if sl is None or len(sl) != len(preds):
                    raise ArchError(f"layer {l}: windowed layer needs one slot list per neuron")
                for j, (p, s) in enumerate(zip(preds, sl)):
                    if len(s) != len(p):
                        raise ArchError(f"layer {l}, neuron {j}: slot/pred length mismatch")
                    if len(set(s)) != len(s) or min(s) < 0 or max(s) >= k:
                        raise ArchError(f"layer {l}, neuron {j}: bad kernel slots")
            if self.shared and k is None and len({len(p) for p in preds}) != 1:
                raise ArchError(
                    f"layer {l}: weight sharing needs the same |pred| for every neuron"
                )
            if not self.allow_dead and not used.all():
                dead = np.flatnonzero(~used)[:5].tolist()
                raise ArchError(
                    f"layer {l - 1} neurons {dead} feed nothing (pass allow_dead=True "
                    "for a deliberately pruned graph)"
                )

    # -- queries ------------------------------------------------------------

    @property
    def L(self) -> int:
        return len(self.widths) - 1

    def fan(self, l: int) -> np.ndarray:
        """Slot count of every neuron of layer ``l`` (1-based)."""
        return self._fans[l - 1]

    def kernel_size(self, l: int) -> int:
        """Number of input slots of the weight matrices of layer ``l``."""
        return int(self._fans[l - 1].max())

    def in_columns(self, l: int) -> int:
        return self.kernel_size(l) * self.channels[l - 1] + int(self.bias[l - 1])

    def weight_shape(self, l: int) -> tuple[int, ...]:
        if self.shared:
            return (self.channels[l], self.in_columns(l))
        return (self.widths[l], self.channels[l], self.in_columns(l))

    def gather_index(self, l: int) -> np.ndarray:
        """(d_l, k_l) indices into layer l-1; ``widths[l-1]`` marks a zero slot."""
        return self._gather[l - 1]

    def column_mask(self, l: int) -> Optional[np.ndarray]:
        """(d_l, columns) mask of live weight columns, or None when all are live."""
        return self._masks[l - 1]

    def scatter_matrix(self, l: int):
        """Sparse (d_{l-1}, d_l * k_l) matrix summing slot gradients onto neurons."""
        return self._scatters[l - 1]

    @cached_property
    def _scatters(self) -> list:
        import scipy.sparse as sp

        out = []
        for l in range(1, self.L + 1):
            idx = self.gather_index(l).ravel()
            below = self.widths[l - 1]
            keep = idx < below
            out.append(
                sp.csr_matrix(
                    (np.ones(int(keep.sum())), (idx[keep], np.flatnonzero(keep))),
                    shape=(below, idx.size),
                )
            )
        return out

    @cached_property
    def _fans(self) -> list[np.ndarray]:
        out = []
        for l in range(1, self.L + 1):
            k = self.window[l - 1]
            if k is None:
                out.append(np.array([len(p) for p in self.pred[l - 1]], dtype=np.int64))
            else:
                out.append(np.full(self.widths[l], k, dtype=np.int64))
        return out

    @cached_property
    def _gather(self) -> list[np.ndarray]:
        out = []
        for l in range(1, self.L + 1):
            k = self.kernel_size(l)
            idx = np.full((self.widths[l], k), self.widths[l - 1], dtype=np.int64)
            sl = self.slots[l - 1]
            for j, p in enumerate(self.pred[l - 1]):
                pos = range(len(p)) if sl is None else sl[j]
                idx[j, list(pos)] = p
            idx.setflags(write=False)
            out.append(idx)
        return out

    @cached_property
    def _masks(self) -> list[Optional[np.ndarray]]:
        out = []
        for l in range(1, self.L + 1):
            fans = self.fan(l)
            if self.window[l - 1] is not None or (fans == fans[0]).all():
                out.append(None)
                continue
            c = self.channels[l - 1]
            cols = self.in_columns(l)
            mask = np.zeros((self.widths[l], cols), dtype=bool)
            for j, f in enumerate(fans):
                mask[j, : f * c] = True
            if self.bias[l - 1]:
                mask[:, -1] = True
            mask.setflags(write=False)
            out.append(mask)
        return out

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "layers": self.L,
            "widths": list(self.widths),
            "channels": list(self.channels),
            "shared": self.shared,
            "bias": list(self.bias),
            "allow_dead": self.allow_dead,
            "pred": [[list(p) for p in layer] for layer in self.pred],
            "window": list(self.window),
            "slots": [
                None if s is None else [list(x) for x in s] for s in self.slots
            ],
        }


def build_dag(
    widths: Sequence[int],
    channels: Sequence[int],
    pred: Sequence[Sequence[Sequence[int]]],
    shared: bool = False,
    *,
    bias: Optional[Sequence[bool]] = None,
    window: Optional[Sequence[Optional[int]]] = None,
    slots=None,
    allow_dead: bool = False,
) -> ArchGraph:
    """Build and validate a layered DAG.

    ``pred[l - 1][j]`` lists the layer ``l - 1`` predecessors of neuron ``j`` in
    layer ``l``.  Raises :class:`ArchError` on any invariant violation.
    """
    L = len(widths) - 1
    return ArchGraph(
        widths=tuple(int(d) for d in widths),
        channels=tuple(int(c) for c in channels),
        pred=tuple(tuple(tuple(int(i) for i in p) for p in layer) for layer in pred),
        shared=bool(shared),
        window=tuple(window) if window is not None else (None,) * L,
        slots=tuple(
            None if s is None else tuple(tuple(int(i) for i in x) for x in s)
            for s in slots
        )
        if slots is not None
        else (None,) * L,
        bias=tuple(bool(b) for b in bias) if bias is not None else (False,) * L,
        allow_dead=allow_dead,
    )


def from_dict(d: dict) -> ArchGraph:
    if d.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise ArchError(f"not an architecture file: format={d.get('format')!r}")
    if "conv" in d:
        return conv_arch(
            tuple(d["input"]),
            [LayerSpec.from_dict(s) for s in d["conv"]],
            shared=d.get("shared", True),
            allow_dead=d.get("allow_dead", False),
        )
    g = build_dag(
        d["widths"],
        d["channels"],
        d["pred"],
        d.get("shared", False),
        bias=d.get("bias"),
        window=d.get("window"),
        slots=d.get("slots"),
        allow_dead=d.get("allow_dead", False),
    )
    if "layers" in d and d["layers"] != g.L:
        raise ArchError(f"'layers' is {d['layers']} but widths imply {g.L}")
    return g


def save_arch(g: ArchGraph, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1) + "\n")


def load_arch(path) -> ArchGraph:
    return from_dict(json.loads(Path(path).read_text()))


# -- constructors -----------------------------------------------------------


def conv_arch(
    input_shape: tuple[int, int, int],
    specs: Sequence[LayerSpec],
    shared: bool = True,
    *,
    allow_dead: bool = False,
) -> ArchGraph:
    """Unroll a convolutional stack into an ArchGraph.

    Neurons index spatial positions in row-major order; channels live inside
    each neuron's vector.  The last spec must be fully connected.
    """
    if not specs:
        raise ArchError("need at least one layer")
    if specs[-1].kind != "fc":
        raise ArchError("the final layer must be fully connected")
    c, rows, cols = (int(v) for v in input_shape)
    widths, channels = [rows * cols], [c]
    preds, slots, windows, biases = [], [], [], []
    seen_fc = False
    for spec in specs:
        if spec.kind == "conv" and seen_fc:
            raise ArchError("a conv layer cannot follow a fully-connected layer")
        if spec.kind == "fc":
            seen_fc = True
            n = rows * cols
            preds.append([list(range(n))])
            slots.append([list(range(n))])
            windows.append(n)
            orows, ocols = 1, 1
        else:
            orows, ocols = spec.output_extent(rows, cols)
            (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
            layer_p, layer_s = [], []
            for oi in range(orows):
                for oj in range(ocols):
                    p, s = [], []
                    for a in range(kh):
                        r = oi * sh - ph + a
                        if not 0 <= r < rows:
                            continue
                        for b in range(kw):
                            q = oj * sw - pw + b
                            if 0 <= q < cols:
                                p.append(r * cols + q)
                                s.append(a * kw + b)
                    if not p:
                        raise ArchError("a window lies entirely inside the padding")
                    layer_p.append(p)
                    layer_s.append(s)
            preds.append(layer_p)
            slots.append(layer_s)
            windows.append(kh * kw)
        rows, cols = orows, ocols
        widths.append(rows * cols)
        channels.append(spec.out_channels)
        biases.append(spec.bias)
    return build_dag(
        widths,
        channels,
        preds,
        shared,
        bias=biases,
        window=windows,
        slots=slots,
        allow_dead=allow_dead,
    )


def binary_tree(L: int, channels: Optional[Sequence[int]] = None, shared: bool = True) -> ArchGraph:
    """Depth-L binary tree: d_l = 2^(L-l), pred(l, j) = [2j, 2j+1]."""
    widths = [2 ** (L - l) for l in range(L + 1)]
    if channels is None:
        channels = [1] * (L + 1)
    pred = [[[2 * j, 2 * j + 1] for j in range(widths[l])] for l in range(1, L + 1)]
    return build_dag(widths, channels, pred, shared)


def conv_l_h(
    L: int,
    H: int,
    input_shape: tuple[int, int, int] = (1, 28, 28),
    num_classes: int = 10,
    counting: str = "conv",
) -> tuple[ArchGraph, list[LayerSpec]]:
    """The CONV-L-H family: two 2x2/stride-2 convs, 3x3/stride-1/pad-1 convs, FC.

    ``counting="conv"`` reads L as the number of conv layers (L + 1 parametric
    layers in total); ``counting="total"`` reads L as the number of parametric
    layers including the final FC layer.
    """
    if counting == "conv":
        n33 = L - 2
    elif counting == "total":
        n33 = L - 3
    else:
        raise ValueError(f"counting must be 'conv' or 'total', not {counting!r}")
    if n33 < 0:
        raise ArchError(f"CONV-{L}-{H} is too shallow under counting={counting!r}")
    specs = [LayerSpec("conv", 2, 2, 0, H), LayerSpec("conv", 2, 2, 0, H)]
    specs += [LayerSpec("conv", 3, 1, 1, H) for _ in range(n33)]
    specs.append(LayerSpec("fc", out_channels=num_classes))
    return conv_arch(input_shape, specs), specs


def reference_conv_specs(hidden_fc: bool = False, strides=(2, 1, 1, 2)) -> list[LayerSpec]:
    """The 3x3 conv stack with 32/64/128/128 channels on 3x32x32 inputs.

    The default strides (2, 1, 1, 2) leave a 5x5x128 = 3200-dimensional feature
    map, the FC fan-in the reference model states; strides of 2 throughout
    leave 1x1x128.  The output layer carries a bias.
    """
    specs = [
        LayerSpec("conv", 3, s, 0, c) for s, c in zip(strides, (32, 64, 128, 128))
    ]
    if hidden_fc:
        specs.append(LayerSpec("fc", out_channels=128))
    specs.append(LayerSpec("fc", out_channels=2, bias=True))
    return specs


def reference_conv_model(hidden_fc: bool = False, strides=(2, 1, 1, 2)) -> ArchGraph:
    """The reference 5-layer (or, with ``hidden_fc``, 6-layer) model on 3x32x32.

    A 3x3/pad-0 window sliding with stride 2 over 32 positions never reaches
    the last row and column, so the graph is built with ``allow_dead=True``.
    """
    return conv_arch((3, 32, 32), reference_conv_specs(hidden_fc, strides), allow_dead=True)


# -- combinatorial queries --------------------------------------------------


def degree(g: ArchGraph) -> int:
    """deg(G): the largest fan over all neurons."""
    return max(int(g.fan(l).max()) for l in range(1, g.L + 1))


def max_path_pred_product(
    g: ArchGraph, patch_norms: Optional[Sequence[float]] = None
) -> tuple[float, list[int]]:
    """Max over output-to-input chains of the product of fans along the chain.

    With ``patch_norms`` (one non-negative weight per input neuron) the chain
    product is multiplied by the weight of its input endpoint.  Returns the
    value and the witness chain ``[j_0, j_1, ..., j_L]`` (j_0 is the output
    neuron, j_L an input neuron); ties go to the smallest index.
    """
    if patch_norms is not None:
        w = np.asarray(patch_norms, dtype=np.float64)
        if w.shape != (g.widths[0],):
            raise ArchError(f"patch_norms must have length d_0 = {g.widths[0]}")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ArchError("patch_norms must be finite and non-negative")
    best = np.ones(1)
    parents = []
    for l in range(g.L, 0, -1):
        below = g.widths[l - 1]
        vals = best * g.fan(l)
        idx = g.gather_index(l)
        child = np.repeat(np.arange(g.widths[l]), idx.shape[1])
        par = idx.ravel()
        keep = par < below
        child, par = child[keep], par[keep]
        v = vals[child]
        # best value per parent, smallest child index among ties
        order = np.lexsort((child, -v, par))
        par_s = par[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = par_s[1:] != par_s[:-1]
        nb = np.full(below, -np.inf)
        arg = np.full(below, -1, dtype=np.int64)
        nb[par_s[first]] = v[order][first]
        arg[par_s[first]] = child[order][first]
        best = nb
        parents.append(arg)
    score = best if patch_norms is None else best * w
    score = np.where(np.isfinite(score), score, -np.inf)
    j = int(np.argmax(score))
    value = float(score[j])
    path = [j]
    for arg in reversed(parents):
        j = int(arg[j])
        path.append(j)
    path.reverse()
    return value, path


def parameter_count(g: ArchGraph, weight_norm_layers: int = 0) -> int:
    """Trainable scalars of ``g``.

    Shared layers count their kernel once; unshared layers count every
    neuron's matrix (pad slots included, unused slots of ragged layers not).
    ``weight_norm_layers`` adds one magnitude scalar per weight-normalized
    layer.
    """
    total = 0
    for l in range(1, g.L + 1):
        c_out, c_in, b = g.channels[l], g.channels[l - 1], int(g.bias[l - 1])
        if g.shared:
            total += c_out * (g.kernel_size(l) * c_in + b)
        else:
            total += int(sum(c_out * (f * c_in + b) for f in g.fan(l)))
    return total + int(weight_norm_layers)


def random_dag(
    rng: np.random.Generator,
    L: int,
    max_width: int = 8,
    max_deg: int = 3,
    channels: Optional[Sequence[int]] = None,
    shared: bool = False,
    d0: Optional[int] = None,
) -> ArchGraph:
    """A random layered DAG with no dead neurons.

    Every neuron draws 1..max_deg predecessors; any neuron left uncovered is
    attached to a random consumer, so some fans may exceed ``max_deg``.  With
    ``shared=True`` every neuron of a layer reads a fixed number of inputs.
    """
    widths = [int(d0) if d0 is not None else int(rng.integers(1, max_width + 1))]
    for l in range(1, L):
        widths.append(int(rng.integers(1, max_width + 1)))
    widths.append(1)
    if channels is None:
        channels = [int(rng.integers(1, 4)) for _ in range(L)] + [1]
    pred = []
    for l in range(1, L + 1):
        below, here = widths[l - 1], widths[l]
        if l == L:
            pred.append([list(range(below))])
            continue
        if shared:
            k = int(rng.integers(1, min(max_deg, below) + 1))
            # cover the layer below with k-sized windows
            here = max(here, math.ceil(below / k))
            widths[l] = here
            layer = []
            for j in range(here):
                start = (j * k) % below
                sel = sorted({(start + t) % below for t in range(k)})
                if len(sel) < k:
                    extra = [i for i in range(below) if i not in sel]
                    sel = sorted(sel + extra[: k - len(sel)])
                layer.append(sel)
            pred.append(layer)
            continue
        layer = []
        for _ in range(here):
            k = int(rng.integers(1, min(max_deg, below) + 1))
            layer.append(set(rng.choice(below, size=k, replace=False).tolist()))
        covered = set().union(*layer)
        for i in range(below):
            if i not in covered:
                layer[int(rng.integers(here))].add(i)
        pred.append([sorted(s) for s in layer])
    return build_dag(widths, channels, pred, shared)

"""Weight-normalized SGD training with momentum and a cosine or step schedule.

Hidden layers are trained as ``w^l = rho^l * v^l`` with unit-norm directions
``v^l`` and fixed magnitudes ``rho^l``; the output layer is trained directly
with weight decay.  In ``normalization="all"`` mode every layer, the output
included, is weight normalized with a trainable magnitude and the decay acts
on the magnitudes.

Shared layers normalize their single kernel.  Unshared layers normalize each
neuron's matrix separately, so every neuron has Frobenius norm ``rho^l``.
"""
from __future__ import annotations

import ast
import configparser
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .arch import ArchGraph
from .bounds import rho as rho_of
from .data import Dataset
from .metrics import classification_error
from .tensor import WeightSet, backward, forward, mse_grad, mse_loss


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss or weights; ``batch`` is -1 for end-of-epoch checks."""

    def __init__(self, epoch: int, batch: int, loss: float, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch} (loss {loss!r})")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


@dataclass
class TrainConfig:
    learning_rate: float = 0.03
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 200
    weight_decay: float = 1e-3
    layer_scale: float = 0.1
    scheduler: str = "cosine"
    milestones: tuple[int, ...] = (60, 100, 300)
    step_factor: float = 0.1
    normalization: str = "hidden"
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need batch_size >= 1 and epochs >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not self.layer_scale > 0:
            raise ValueError("layer_scale must be positive")
        if self.scheduler not in ("cosine", "step"):
            raise ValueError("scheduler must be 'cosine' or 'step'")
        if self.normalization not in ("hidden", "all"):
            raise ValueError("normalization must be 'hidden' or 'all'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _literal(v: str):
    try:
        return ast.literal_eval(v)
    except (ValueError, SyntaxError):
        return v


def read_flat_config(path) -> dict:
    """Read ``key = value`` lines (or a JSON object) into a dict.

    Values are Python literals where possible (``0.03``, ``(60, 100)``) and
    plain strings otherwise; ``#`` starts a comment line.
    """
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string("[config]\n" + text)
    return {k: _literal(v) for k, v in cp["config"].items()}


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(read_flat_config(path))


# -- schedules --------------------------------------------------------------


def cosine_lr(t: float, T: float, mu: float) -> float:
    """mu (1 + cos(pi t / T)) / 2 for 0 <= t <= T."""
    if T <= 0:
        return mu
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return mu * (1.0 + math.cos(math.pi * t / T)) / 2.0


def step_lr(t: int, mu: float, milestones: Sequence[int], factor: float) -> float:
    return mu * factor ** sum(1 for m in milestones if t >= m)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.scheduler == "cosine":
        return cosine_lr(epoch, cfg.epochs, cfg.learning_rate)
    return step_lr(epoch, cfg.learning_rate, cfg.milestones, cfg.step_factor)


# -- parametrization ----------------------------------------------------------


def _norm_axes(g: ArchGraph) -> tuple[int, ...]:
    return (0, 1) if g.shared else (1, 2)


def _group_norms(g: ArchGraph, a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=_norm_axes(g), keepdims=True))


def _unit(g: ArchGraph, a: np.ndarray) -> np.ndarray:
    n = _group_norms(g, a)
    return a / np.where(n > 0, n, 1.0)


@dataclass
class NormalizedWeights:
    """Directions (or raw weights) per layer plus per-layer magnitudes.

    ``scales[l]`` is None for a layer trained without normalization.
    """

    params: list[np.ndarray]
    scales: list[Optional[float]]

    def weights(self) -> WeightSet:
        return WeightSet([p if s is None else s * p for p, s in zip(self.params, self.scales)])

    def copy(self) -> "NormalizedWeights":
        return NormalizedWeights([p.copy() for p in self.params], list(self.scales))


def init_weights(g: ArchGraph, cfg: TrainConfig, seed: Optional[int] = None) -> NormalizedWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws, hidden directions set to unit norm."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params, scales = [], []
    for l in range(1, g.L + 1):
        bound = 1.0 / math.sqrt(g.kernel_size(l) * g.channels[l - 1])
        a = rng.uniform(-bound, bound, size=g.weight_shape(l))
        mask = g.column_mask(l)
        if mask is not None:
            a *= mask[:, None, :]
        if l < g.L:
            params.append(_unit(g, a))
            scales.append(cfg.layer_scale)
        elif cfg.normalization == "all":
            # start the output magnitude at the drawn norm
            params.append(_unit(g, a))
            scales.append(float(_group_norms(g, a).max()))
        else:
            params.append(a)
            scales.append(None)
    return NormalizedWeights(params, scales)


# -- training -----------------------------------------------------------------


@dataclass
class TrainState:
    weights: NormalizedWeights
    buffers: list[np.ndarray]
    scale_buffers: list[float]
    epoch: int = 0

    @classmethod
    def fresh(cls, nw: NormalizedWeights) -> "TrainState":
        return cls(nw, [np.zeros_like(p) for p in nw.params], [0.0] * len(nw.params))


def targets_for(g: ArchGraph, ds: Dataset) -> np.ndarray:
    """One-hot targets for two logits, the +-1 labels for a single output."""
    if g.channels[-1] == 2:
        return ds.onehot
    if g.channels[-1] == 1:
        return ds.labels[:, None]
    raise ValueError("training supports one or two output channels")


def scalar_output(out: np.ndarray) -> np.ndarray:
    """f = logit_1 - logit_2 for two logits; the output itself for one."""
    out = np.atleast_2d(out)
    if out.shape[1] == 2:
        return out[:, 0] - out[:, 1]
    return out[:, 0]


def sgd_step(g: ArchGraph, state: TrainState, x: np.ndarray, t: np.ndarray, lr: float, cfg: TrainConfig) -> float:
    nw = state.weights
    w = nw.weights()
    out, trace = forward(g, w, x)
    loss = mse_loss(out, t)
    if not math.isfinite(loss):
        return loss
    grads = backward(g, w, trace, mse_grad(out, t))
    mom = cfg.momentum
    for l, (p, s, gw) in enumerate(zip(nw.params, nw.scales, grads.layers)):
        if s is None:
            step = gw + cfg.weight_decay * p
        else:
            radial = np.sum(gw * p, axis=_norm_axes(g), keepdims=True)
            step = s * (gw - radial * p)
            if cfg.normalization == "all":
                gs = float(radial.sum()) + cfg.weight_decay * s
                state.scale_buffers[l] = mom * state.scale_buffers[l] + gs
                nw.scales[l] = s - lr * state.scale_buffers[l]
        buf = state.buffers[l]
        buf *= mom
        buf += step
        p -= lr * buf
        if s is not None:
            nw.params[l] = _unit(g, p)
    return loss


def sgd_epoch(g: ArchGraph, state: TrainState, ds: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> float:
    """One pass over ``ds`` in shuffled mini-batches; returns the mean batch loss."""
    targets = targets_for(g, ds)
    lr = learning_rate(cfg, state.epoch)
    order = rng.permutation(ds.m)
    total = 0.0
    for b, start in enumerate(range(0, ds.m, cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        loss = sgd_step(g, state, ds.images[idx], targets[idx], lr, cfg)
        if not math.isfinite(loss):
            raise TrainingDiverged(state.epoch, b, loss)
        total += loss * len(idx)
    state.epoch += 1
    return total / ds.m


def evaluate_split(g: ArchGraph, w: WeightSet, ds: Dataset, batch: int = 2048) -> tuple[float, float, np.ndarray]:
    """(mean loss, classification error, scalar outputs) on a dataset."""
    targets = targets_for(g, ds)
    outs = []
    for s in range(0, ds.m, batch):
        outs.append(np.atleast_2d(forward(g, w, ds.images[s : s + batch])[0]))
    out = np.concatenate(outs)
    f = scalar_output(out)
    return mse_loss(out, targets), classification_error(f, ds.labels), f


HISTORY_KEYS = ("lr", "train_loss", "train_error", "test_loss", "test_error", "rho")


@dataclass
class TrainResult:
    weights: NormalizedWeights
    history: dict[str, list[float]] = field(default_factory=dict)

    def trailing(self, window: int) -> dict[str, float]:
        return trailing_average(self.history, window)


def trailing_average(history: dict[str, list[float]], window: int) -> dict[str, float]:
    """Mean of each history series over its last ``window`` entries."""
    if window < 1:
        raise ValueError("window must be at least 1")
    out = {}
    for k, v in history.items():
        tail = v[-window:]
        out[k] = float(np.mean(tail)) if tail else float("nan")
    return out


def train(
    g: ArchGraph,
    train_set: Dataset,
    cfg: TrainConfig,
    test_set: Optional[Dataset] = None,
    init: Optional[NormalizedWeights] = None,
    eval_window: Optional[int] = None,
) -> TrainResult:
    """Full training loop; history holds one entry per epoch for each key.

    With ``eval_window`` set, errors and losses are only evaluated during the
    last ``eval_window`` epochs and recorded as NaN before that.
    """
    nw = init.copy() if init is not None else init_weights(g, cfg)
    state = TrainState.fresh(nw)
    rng = np.random.default_rng(cfg.seed)
    hist: dict[str, list[float]] = {k: [] for k in HISTORY_KEYS}
    first_eval = 0 if eval_window is None else cfg.epochs - eval_window
    nan = float("nan")
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, state.epoch)
        sgd_epoch(g, state, train_set, cfg, rng)
        w = state.weights.weights()
        if not all(np.isfinite(a).all() for a in w.layers):
            raise TrainingDiverged(epoch, -1, float("nan"), "weights")
        hist["lr"].append(lr)
        hist["rho"].append(rho_of(g, w))
        if not math.isfinite(hist["rho"][-1]):
            raise TrainingDiverged(epoch, -1, hist["rho"][-1])
        if epoch < first_eval:
            for k in ("train_loss", "train_error", "test_loss", "test_error"):
                hist[k].append(nan)
            continue
        tr_loss, tr_err, _ = evaluate_split(g, w, train_set)
        if not math.isfinite(tr_loss):
            raise TrainingDiverged(epoch, -1, tr_loss)
        hist["train_loss"].append(tr_loss)
        hist["train_error"].append(tr_err)
        if test_set is not None:
            te_loss, te_err, _ = evaluate_split(g, w, test_set)
        else:
            te_loss = te_err = float("nan")
        hist["test_loss"].append(te_loss)
        hist["test_error"].append(te_err)
    return TrainResult(state.weights, hist)

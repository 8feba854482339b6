"""Sample-size sweeps and the bound comparison report."""
from __future__ import annotations

import csv
import io
import json
import math
import platform
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .arch import ArchGraph, LayerSpec, conv_arch, degree, from_dict, load_arch
from .bounds import (
    layer_spectral_norms,
    long_bound,
    naive_bound,
    path_factor_ratio,
    rademacher_bound,
    rho,
    scalar_head,
    beta_balance,
)
from .data import Dataset, binary_subset, load_dataset, load_idx_pair, synth_dataset
from .metrics import CSV_COLUMNS, ramp_loss
from .train import TrainConfig, TrainingDiverged, scalar_output, train
from .tensor import WeightSet, forward

RECORD_FIELDS = CSV_COLUMNS[1:]


def default_sweep_arch() -> dict:
    """Four 2x2/stride-2 convs with 16 channels on 1x16x16, then a biased 2-logit layer."""
    specs = [LayerSpec("conv", 2, 2, 0, 16) for _ in range(4)]
    specs.append(LayerSpec("fc", out_channels=2, bias=True))
    return {"input": [1, 16, 16], "conv": [s.to_dict() for s in specs], "shared": True}


def default_sweep_train() -> TrainConfig:
    return TrainConfig(
        learning_rate=0.03,
        momentum=0.9,
        batch_size=32,
        epochs=200,
        weight_decay=1e-3,
        layer_scale=1.5,
    )


@dataclass
class SweepConfig:
    """One sweep over training-set sizes.

    ``data`` selects the source: ``{"kind": "synth", "seed", "noise", ...}``
    (extra keys go to :func:`~sparsebound.data.synth_dataset`),
    ``{"kind": "idx", "path", "classes": [a, b]}`` for an MNIST-style
    directory, or ``{"kind": "dir", "path", "test_path"}`` for saved datasets.
    ``arch`` is an architecture dict or a path to an architecture file.
    """

    m_values: list[int] = field(default_factory=lambda: [500, 1000, 2000, 4000])
    seeds: int = 3
    train: TrainConfig = field(default_factory=default_sweep_train)
    arch: object = field(default_factory=default_sweep_arch)
    data: dict = field(default_factory=lambda: {"kind": "synth", "seed": 12345, "noise": 1.0})
    test_size: int = 1000
    window: int = 100
    delta: float = 0.01
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.m_values = [int(m) for m in self.m_values]
        if not self.m_values or any(m < 1 for m in self.m_values):
            raise ValueError("m values must be positive")
        if any(b <= a for a, b in zip(self.m_values, self.m_values[1:])):
            raise ValueError("m values must be strictly ascending")
        if self.seeds < 1 or self.window < 1 or self.test_size < 1:
            raise ValueError("need seeds >= 1, window >= 1 and test_size >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        return cls(**d)

    def graph(self) -> ArchGraph:
        if isinstance(self.arch, (str, Path)):
            return load_arch(self.arch)
        return from_dict(self.arch)


@dataclass
class RunRecord:
    m: int
    seed: int
    rho: float
    train_error: float
    test_error: float
    train_loss: float
    test_loss: float
    gen_gap: float
    rho_over_sqrt_m: float
    interpolating: bool
    bound: float
    wall_time: float
    status: str = "ok"
    message: str = ""


# -- data -----------------------------------------------------------------------


def _balanced_pick(labels: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    pos = np.flatnonzero(labels > 0)
    neg = np.flatnonzero(labels < 0)
    n_pos, n_neg = (m + 1) // 2, m // 2
    if len(pos) < n_pos or len(neg) < n_neg:
        raise ValueError(f"pool holds {len(pos)}/{len(neg)} samples, need {n_pos}/{n_neg}")
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return pick[rng.permutation(m)]


def sweep_pools(cfg: SweepConfig) -> tuple[Dataset, Dataset]:
    """(training pool, test set) for a sweep."""
    d = dict(cfg.data)
    kind = d.pop("kind")
    m_max = max(cfg.m_values)
    if kind == "synth":
        seed = int(d.pop("seed", 0))
        pool = synth_dataset(seed, m_max + 1, **d)
        test = synth_dataset(seed + 1, cfg.test_size, **d)
        return pool, test
    if kind == "idx":
        a, b = d["classes"]
        x, y = load_idx_pair(d["path"], "train")
        pool = binary_subset(x, y, a, b, m_max, seed=int(d.get("seed", 0)), source=str(d["path"]))
        xt, yt = load_idx_pair(d["path"], "test")
        test = binary_subset(xt, yt, a, b, cfg.test_size, seed=int(d.get("seed", 0)), source=str(d["path"]))
        return pool, test
    if kind == "dir":
        return load_dataset(d["path"]), load_dataset(d["test_path"])
    raise ValueError(f"unknown data kind {kind!r}")


# -- cells ------------------------------------------------------------------------


def run_cell(cfg: SweepConfig, g: ArchGraph, pool: Dataset, test: Dataset, m: int, seed: int) -> RunRecord:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, m])
    tr = pool.subset(_balanced_pick(pool.labels, m, rng))
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    nan = float("nan")
    try:
        res = train(g, tr, tcfg, test, eval_window=min(cfg.window, tcfg.epochs))
    except TrainingDiverged as e:
        return RunRecord(m, seed, nan, nan, nan, nan, nan, nan, nan, False, nan,
                         time.perf_counter() - t0, "failed", str(e))
    avg = res.trailing(cfg.window)
    w = res.weights.weights()
    g1, w1 = scalar_head(g, w)
    f = scalar_output(forward(g, w, tr.images)[0])
    interp = bool(np.all(ramp_loss(tr.labels, f) == 0.0))
    r = avg["rho"] if tcfg.epochs else rho(g, w)
    return RunRecord(
        m=m,
        seed=seed,
        rho=r,
        train_error=avg["train_error"],
        test_error=avg["test_error"],
        train_loss=avg["train_loss"],
        test_loss=avg["test_loss"],
        gen_gap=abs(avg["test_error"] - avg["train_error"]),
        rho_over_sqrt_m=r / math.sqrt(m),
        interpolating=interp,
        bound=rademacher_bound(g1, rho(g1, w1), tr),
        wall_time=time.perf_counter() - t0,
    )


def _cell_job(args):
    cfg_dict, m, seed = args
    cfg = SweepConfig.from_dict(cfg_dict)
    pool, test = sweep_pools(cfg)
    return run_cell(cfg, cfg.graph(), pool, test, m, seed)


def run_sweep(cfg: SweepConfig, out: Optional[Path] = None) -> dict:
    """Train every (m, seed) cell, average per m, and optionally write outputs.

    Returns ``{"rows": [...], "records": [...]}``.  Failed cells are kept in
    the records and left out of the averages.
    """
    cells = [(m, s) for m in cfg.m_values for s in range(cfg.seeds)]
    if cfg.workers > 1:
        jobs = [(cfg.to_dict(), m, s) for m, s in cells]
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            records = list(ex.map(_cell_job, jobs))
    else:
        g = cfg.graph()
        pool, test = sweep_pools(cfg)
        records = [run_cell(cfg, g, pool, test, m, s) for m, s in cells]
    rows = aggregate(records)
    result = {"rows": rows, "records": [asdict(r) for r in records]}
    if out is not None:
        write_outputs(cfg, result, Path(out))
    return result


def aggregate(records: list[RunRecord]) -> list[dict]:
    """Per-m mean and standard deviation over the successful cells."""
    rows = []
    for m in sorted({r.m for r in records}):
        ok = [r for r in records if r.m == m and r.status == "ok"]
        row = {"m": m, "n_ok": len(ok), "n_failed": sum(1 for r in records if r.m == m) - len(ok)}
        mean, std = {}, {}
        for k in ("rho", "train_error", "test_error", "train_loss", "test_loss", "rho_over_sqrt_m", "bound"):
            v = np.array([getattr(r, k) for r in ok], dtype=np.float64)
            mean[k] = float(v.mean()) if v.size else float("nan")
            std[k] = float(v.std()) if v.size else float("nan")
        gaps = np.array([r.gen_gap for r in ok])
        mean["gen_gap"] = abs(mean["test_error"] - mean["train_error"])
        std["gen_gap"] = float(gaps.std()) if gaps.size else float("nan")
        row["mean"], row["std"] = mean, std
        rows.append(row)
    return rows


def csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for row in rows:
        wr.writerow([row["m"]] + [repr(float(row["mean"][k])) for k in RECORD_FIELDS])
    return buf.getvalue()


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            cwd=Path(__file__).resolve().parent,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_outputs(cfg: SweepConfig, result: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(csv_text(result["rows"]))
    (out / "sweep.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    manifest = {
        "version": version_string(),
        "config": cfg.to_dict(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- comparison report ---------------------------------------------------------------


def windows_disjoint(g: ArchGraph) -> bool:
    """True when, in every layer, no two neurons share a predecessor."""
    for l in range(1, g.L + 1):
        seen = set()
        for p in g.pred[l - 1]:
            if seen.intersection(p):
                return False
            seen.update(p)
    return True


def comparison(g: ArchGraph, w: WeightSet, data, delta: float, gamma: Optional[float], weight_norm_layers: int = 0) -> dict:
    """Our Rademacher bound next to the dense-expansion and parameter-counting bounds."""
    if gamma is None:
        raise ValueError(
            "a margin gamma is required for the parameter-counting bound (pass --gamma, e.g. --gamma 0.1)"
        )
    from .arch import parameter_count

    g1, w1 = scalar_head(g, w)
    x = np.asarray(getattr(data, "images", data), dtype=np.float64)
    m = x.shape[0]
    r = rho(g1, w1)
    ours = rademacher_bound(g1, r, x)
    naive = naive_bound(g1, w1, x)
    n_params = parameter_count(g, weight_norm_layers)
    lb = long_bound(n_params, layer_spectral_norms(g1, w1), gamma, delta, m)
    beta = beta_balance(x)
    return {
        "m": m,
        "rho": r,
        "deg": degree(g1),
        "ours": ours,
        "naive": naive,
        "long": lb,
        "naive_over_ours": naive / ours if ours > 0 else float("inf"),
        "long_over_ours": lb / ours if ours > 0 else float("inf"),
        "path_factor_ratio": path_factor_ratio(g1, x),
        "beta": beta,
        "beta_balanced": beta is not None,
        "windows_disjoint": windows_disjoint(g1),
        "parameters": n_params,
    }


def format_comparison(c: dict) -> str:
    lines = [
        f"m = {c['m']}   rho = {c['rho']:.6g}   deg = {c['deg']}   parameters = {c['parameters']}",
        "",
        f"{'bound':<28}{'value':>14}{'ratio to ours':>16}",
        f"{'ours (path-weighted)':<28}{c['ours']:>14.6g}{1.0:>16.3f}",
        f"{'dense expansion':<28}{c['naive']:>14.6g}{c['naive_over_ours']:>16.3f}",
        f"{'parameter counting':<28}{c['long']:>14.6g}{c['long_over_ours']:>16.3f}",
        "",
        f"path-factor ratio (dense / ours): {c['path_factor_ratio']:.6g}",
        f"beta-balance: {'beta = %.4g' % c['beta'] if c['beta_balanced'] else 'undefined (all-zero data)'}",
        f"non-overlapping windows: {'yes' if c['windows_disjoint'] else 'no'}",
    ]
    return "\n".join(lines) + "\n"

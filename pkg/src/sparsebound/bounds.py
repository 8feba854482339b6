"""Norm-based capacity measures and generalization bounds for sparse networks.

Every function taking a dataset accepts either a :class:`~sparsebound.data.Dataset`
or a raw image array of shape ``(m, c_0, d_0)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import extract_patches
from .arch import ArchGraph, degree, max_path_pred_product, parameter_count
from .tensor import WeightSet, check_weights, forward, neuron_matrix


class NonConvergenceWarning(RuntimeWarning):
    pass


def _images(data) -> np.ndarray:
    x = getattr(data, "images", data)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected images of shape (m, c_0, d_0), got {x.shape}")
    return x


# -- spectral norm ----------------------------------------------------------


@dataclass(frozen=True)
class PowerIterationResult:
    value: float
    converged: bool
    iterations: int


def _top_eig_2x2(a: float, b: float, d: float) -> float:
    # largest eigenvalue of [[a, b], [b, d]]
    return 0.5 * (a + d) + math.hypot(0.5 * (a - d), b)


def power_iteration(
    M, tol: float = 1e-9, max_iter: int = 1000, seed: int = 0
) -> PowerIterationResult:
    """Largest singular value of ``M`` by power iteration on the Gram matrix.

    Starts from the normalized all-ones vector and stops once the Rayleigh
    quotient changes by less than ``tol`` relative.  If the iterate stagnates on
    a vector with no component along the top singular vector, one restart from
    a seeded random vector is made.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("spectral norm needs a matrix")
    if not np.isfinite(M).all():
        raise ValueError("matrix contains NaN or Inf")
    if M.size == 0 or not M.any():
        return PowerIterationResult(0.0, True, 0)
    if min(M.shape) == 1:
        return PowerIterationResult(float(np.linalg.norm(M)), True, 0)
    G = M.T @ M if M.shape[1] <= M.shape[0] else M @ M.T
    if G.shape == (2, 2):
        lam = _top_eig_2x2(G[0, 0], G[0, 1], G[1, 1])
        return PowerIterationResult(math.sqrt(max(lam, 0.0)), True, 0)

    def run(v):
        lam = prev = 0.0
        for it in range(1, max_iter + 1):
            u = G @ v
            lam = float(v @ u)
            nu = np.linalg.norm(u)
            if nu == 0.0:
                return 0.0, it, True, v
            if it > 1 and abs(lam - prev) <= tol * abs(lam):
                return lam, it, True, v
            prev = lam
            v = u / nu
        return lam, max_iter, False, v

    n = G.shape[0]
    lam, it, ok, v = run(np.full(n, 1.0 / math.sqrt(n)))
    if not ok or lam < 1e-12 * np.trace(G):
        rng = np.random.default_rng(seed)
        r = rng.standard_normal(n)
        lam2, it2, ok2, _ = run(r / np.linalg.norm(r))
        if lam2 > lam or not ok:
            lam, ok = lam2, ok2
        it += it2
    return PowerIterationResult(math.sqrt(max(lam, 0.0)), ok, it)


def spectral_norm(M, tol: float = 1e-9, max_iter: int = 1000) -> float:
    res = power_iteration(M, tol, max_iter)
    if not res.converged:
        warnings.warn(
            f"power iteration did not converge in {res.iterations} iterations; "
            f"returning last iterate {res.value:.6g}",
            NonConvergenceWarning,
            stacklevel=2,
        )
    return res.value


# -- norms of a network -----------------------------------------------------


def layer_frobenius(g: ArchGraph, w: WeightSet, l: int) -> np.ndarray:
    """Frobenius norm of every neuron matrix w^l_j (length d_l)."""
    a = w.layers[l - 1]
    if g.shared:
        return np.full(g.widths[l], np.linalg.norm(a))
    return np.sqrt(np.sum(a * a, axis=(1, 2)))


def rho(g: ArchGraph, w: WeightSet) -> float:
    """||w^L_1||_2 times the product over hidden layers of max_j ||w^l_j||_F."""
    check_weights(g, w)
    out = spectral_norm(neuron_matrix(g, w, g.L, 0))
    for l in range(1, g.L):
        out *= float(layer_frobenius(g, w, l).max())
    return out


def rho_tilde(g: ArchGraph, w: WeightSet) -> float:
    """Product over layers of the root-sum-square of all neuron Frobenius norms."""
    check_weights(g, w)
    out = 1.0
    for l in range(1, g.L + 1):
        out *= math.sqrt(float(np.sum(layer_frobenius(g, w, l) ** 2)))
    return out


def layer_spectral_norms(g: ArchGraph, w: WeightSet) -> list[float]:
    """Spectral norm of each layer's kernel (largest over neurons if unshared)."""
    out = []
    for l in range(1, g.L + 1):
        n = 1 if g.shared else g.widths[l]
        out.append(max(spectral_norm(neuron_matrix(g, w, l, j)) for j in range(n)))
    return out


def scalar_head(g: ArchGraph, w: WeightSet) -> tuple[ArchGraph, WeightSet]:
    """Collapse a 2-logit network into the scalar network f = logit_1 - logit_2."""
    import dataclasses

    if g.channels[-1] == 1:
        return g, w
    if g.channels[-1] != 2:
        raise ValueError("scalar_head needs one or two output channels")
    g1 = dataclasses.replace(g, channels=g.channels[:-1] + (1,))
    top = w.layers[-1]
    diff = top[..., 0:1, :] - top[..., 1:2, :]
    return g1, WeightSet(w.layers[:-1] + [diff])


# -- data terms ------------------------------------------------------------


def input_patch_norms(g: ArchGraph, data) -> np.ndarray:
    """sum_i ||z^0_j(x_i)||^2 for every input neuron j."""
    return extract_patches(_images(data), g)


def patch_term(g: ArchGraph, data) -> tuple[float, list[int]]:
    """Joint max over chains of (fan product) x (endpoint patch norm), with witness."""
    return max_path_pred_product(g, input_patch_norms(g, data))


def _log_factor(L: int, deg: int) -> float:
    return 1.0 + math.sqrt(2.0 * L * math.log(2.0 * deg))


def rademacher_bound(g: ArchGraph, rho_value: float, data) -> float:
    """(rho/m) (1 + sqrt(2 L log(2 deg))) sqrt(patch term)."""
    x = _images(data)
    m = x.shape[0]
    if m < 1:
        raise ValueError("need at least one sample")
    if rho_value < 0:
        raise ValueError("rho must be non-negative")
    pt, _ = patch_term(g, x)
    return rho_value / m * _log_factor(g.L, degree(g)) * math.sqrt(pt)


def rademacher_bound_from_terms(rho_value: float, m: int, L: int, deg: int, patch: float) -> float:
    return rho_value / m * _log_factor(L, deg) * math.sqrt(patch)


def gen_bound_from_terms(
    rho_value: float, m: int, L: int, deg: int, patch: float, delta: float
) -> float:
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    first = (rho_value + 1.0) / m * _log_factor(L, deg) * math.sqrt(patch)
    second = 3.0 * math.sqrt(math.log(2.0 * (rho_value + 2.0) ** 2 / delta) / (2.0 * m))
    return first + second


@dataclass(frozen=True)
class GenBound:
    value: float
    interpolating: bool


def gen_bound(g: ArchGraph, w: WeightSet, data, labels, delta: float) -> GenBound:
    """Test-error bound for a network fitting its training set.

    The value is reported whether or not the network interpolates; the flag
    tells whether every training ramp loss is zero (y_i f(x_i) >= 1), the
    condition the bound assumes.  ``g`` must have a scalar output; use
    :func:`scalar_head` for two-logit networks.
    """
    if g.channels[-1] != 1:
        raise ValueError("gen_bound needs a scalar-output network (see scalar_head)")
    x = _images(data)
    pt, _ = patch_term(g, x)
    value = gen_bound_from_terms(rho(g, w), x.shape[0], g.L, degree(g), pt, delta)
    f, _ = forward(g, w, x)
    y = np.asarray(labels, dtype=np.float64).ravel()
    return GenBound(value, bool(np.all(y * f[:, 0] >= 1.0)))


def convnet_bound(g: ArchGraph, rho_value: float, data) -> Optional[float]:
    """The shared-kernel form: uses prod of kernel sizes times max_j patch norm.

    Returns None unless every layer is shared with a uniform fan.
    """
    if not g.shared:
        return None
    fans = [g.fan(l) for l in range(1, g.L + 1)]
    if any((f != f[0]).any() for f in fans):
        return None
    x = _images(data)
    k = [int(f[0]) for f in fans]
    patch = float(np.prod(k, dtype=np.float64)) * float(input_patch_norms(g, x).max())
    return rho_value / x.shape[0] * _log_factor(g.L, max(k)) * math.sqrt(patch)


def beta_balance(data) -> Optional[float]:
    """max over samples of max_j ||x_ij||^2 / avg_j ||x_ij||^2.

    All-zero samples satisfy the balance condition for any beta and are
    skipped; a dataset with no nonzero pixel returns None.
    """
    x = _images(data)
    px = np.einsum("icj,icj->ij", x, x)
    avg = px.mean(axis=1)
    live = avg > 0
    if not live.any():
        return None
    return float(np.max(px[live].max(axis=1) / avg[live]))


def simplified_bound(rho_value: float, m: int, L: int, deg: int, beta: float, avg_sq_norm: float) -> float:
    """rho/sqrt(m) * sqrt(L beta log(deg) avg||x||^2), hidden constants set to 1."""
    return rho_value / math.sqrt(m) * math.sqrt(L * beta * math.log(deg) * avg_sq_norm)


def naive_bound(g: ArchGraph, w: WeightSet, data) -> float:
    """Dense-network bound after expanding every layer to its full matrix.

    (rho_tilde / m) sqrt(L sum_i ||x_i||^2); for shared kernels with a
    single-row output rho_tilde = rho sqrt(prod_l d_l).
    """
    x = _images(data)
    return rho_tilde(g, w) / x.shape[0] * math.sqrt(g.L * float(np.sum(x * x)))


def naive_path_factor(g: ArchGraph, data) -> float:
    """prod_{l=1..L} d_l * sum_i ||x_i||^2, the naive counterpart of the patch term."""
    x = _images(data)
    return float(np.prod(g.widths[1:], dtype=np.float64)) * float(np.sum(x * x))


def path_factor_ratio(g: ArchGraph, data) -> float:
    """sqrt(naive path factor / patch term)."""
    pt, _ = patch_term(g, data)
    return math.sqrt(naive_path_factor(g, data) / pt)


def long_bound(N: int, spectral_norms: Sequence[float], gamma: float, delta: float, m: int) -> float:
    """sqrt((N (sum_l ||w^l||_2 + log(1/gamma)) + log(1/delta)) / m), constants set to 1."""
    if gamma is None:
        raise ValueError("the parameter-counting bound needs an explicit margin gamma")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if N < 0 or m < 1:
        raise ValueError("need N >= 0 and m >= 1")
    s = float(sum(spectral_norms))
    return math.sqrt((N * (s + math.log(1.0 / gamma)) + math.log(1.0 / delta)) / m)


# -- report -----------------------------------------------------------------


@dataclass
class BoundReport:
    rho: float
    rho_tilde: float
    deg: int
    L: int
    m: int
    path_product: float
    patch_term: float
    rademacher_bound: float
    gen_bound: float
    interpolating: bool
    convnet_bound: Optional[float]
    beta: Optional[float]
    simplified_bound: Optional[float]
    naive_bound: float
    long_bound: Optional[float]
    rho_over_sqrt_m: float
    delta: float
    gamma: Optional[float] = None
    parameters: int = 0
    witness_path: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(
    g: ArchGraph,
    w: WeightSet,
    data,
    labels,
    delta: float = 0.01,
    gamma: Optional[float] = None,
    weight_norm_layers: int = 0,
) -> BoundReport:
    """Every capacity quantity for one (architecture, weights, dataset) triple.

    ``g`` must have a scalar output (see :func:`scalar_head`).  The Long-style
    parameter-counting bound is only computed when ``gamma`` is given.
    """
    x = _images(data)
    m = x.shape[0]
    r = rho(g, w)
    rt = rho_tilde(g, w)
    deg = degree(g)
    pp, _ = max_path_pred_product(g)
    pt, witness = patch_term(g, x)
    gb = gen_bound(g, w, x, labels, delta)
    beta = beta_balance(x)
    avg = float(np.sum(x * x)) / m
    n_params = parameter_count(g, weight_norm_layers)
    return BoundReport(
        rho=r,
        rho_tilde=rt,
        deg=deg,
        L=g.L,
        m=m,
        path_product=pp,
        patch_term=pt,
        rademacher_bound=rademacher_bound_from_terms(r, m, g.L, deg, pt),
        gen_bound=gb.value,
        interpolating=gb.interpolating,
        convnet_bound=convnet_bound(g, r, x),
        beta=beta,
        simplified_bound=None if beta is None else simplified_bound(r, m, g.L, deg, beta, avg),
        naive_bound=naive_bound(g, w, x),
        long_bound=None
        if gamma is None
        else long_bound(n_params, layer_spectral_norms(g, w), gamma, delta, m),
        rho_over_sqrt_m=r / math.sqrt(m),
        delta=delta,
        gamma=gamma,
        parameters=n_params,
        witness_path=witness,
    )

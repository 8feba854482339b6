"""Numerical checks of the inequalities behind the Rademacher bound.

* peeling: removing one ReLU layer from inside a Rademacher supremum costs a
  factor 2 and the layer's norm cap;
* dominance: the closed-form Rademacher bound exceeds a certified lower bound
  on the empirical Rademacher complexity of the norm-constrained class;
* concentration: the moment generating bound for Rademacher sums of vectors;
* the closed-form lambda that balances the log-moment chain.

Expectations over signs are exact (all 2^m sign vectors) for small m and
Monte Carlo otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .arch import ArchGraph
from .tensor import WeightSet, backward, forward, random_weights

MAX_EXHAUSTIVE_M = 12
EXP_GUARD = 30.0


# -- sign vectors -------------------------------------------------------------


def sign_vectors(m: int, half: bool = False) -> np.ndarray:
    """All 2^m vectors in {-1, +1}^m as rows (last coordinate fixed to +1 if ``half``)."""
    if not 0 <= m <= MAX_EXHAUSTIVE_M + 8:
        raise ValueError(f"m = {m} is too large to enumerate")
    n = 2 ** (m - 1) if half and m > 0 else 2**m
    bits = (np.arange(n)[:, None] >> np.arange(m)[None, :]) & 1
    xi = 1.0 - 2.0 * bits
    return xi


def sign_expectation(
    fn: Callable[[np.ndarray], np.ndarray],
    m: int,
    draws: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    chunk: int = 8192,
) -> tuple[float, float]:
    """E_xi fn(xi) and its standard error (0 when exact).

    ``fn`` maps an (n, m) block of sign vectors to n values.  With ``draws``
    unset the expectation is exact over all 2^m vectors.
    """
    if draws is None:
        return float(np.mean(fn(sign_vectors(m)))), 0.0
    rng = rng or np.random.default_rng(0)
    vals = []
    left = draws
    while left > 0:
        n = min(chunk, left)
        vals.append(fn(rng.choice((-1.0, 1.0), size=(n, m))))
        left -= n
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


# -- peeling ------------------------------------------------------------------


@dataclass
class PeelingInstance:
    """q branches f_j evaluated on m samples, stored as f[j, i] in R^p.

    Layer matrices W_j are h x p with ||W_j||_F <= R; ``g`` is ``"identity"``
    or ``"exp"`` (t -> exp(lam t)).
    """

    f: np.ndarray
    R: float
    h: int
    g: str = "identity"
    lam: float = 1.0

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        if self.f.ndim != 3:
            raise ValueError("f must have shape (q, m, p)")
        if self.m > MAX_EXHAUSTIVE_M:
            raise ValueError(f"m = {self.m} exceeds the exhaustive limit {MAX_EXHAUSTIVE_M}")
        if not self.R > 0 or self.h < 1:
            raise ValueError("need R > 0 and h >= 1")
        if self.g not in ("identity", "exp"):
            raise ValueError("g must be 'identity' or 'exp'")
        if self.g == "exp":
            worst = self.lam * self.R * math.sqrt(self.q) * float(
                np.abs(self.f).sum(axis=1).max(initial=0.0) * math.sqrt(self.p)
            )
            if worst > EXP_GUARD:
                raise ValueError(f"lam * scale = {worst:.3g} exceeds the overflow guard {EXP_GUARD}")

    @property
    def q(self) -> int:
        return self.f.shape[0]

    @property
    def m(self) -> int:
        return self.f.shape[1]

    @property
    def p(self) -> int:
        return self.f.shape[2]

    def apply_g(self, t):
        t = np.asarray(t, dtype=np.float64)
        return t if self.g == "identity" else np.exp(self.lam * t)


def random_peeling_instance(rng: np.random.Generator, max_q=3, max_m=8, max_p=3, max_h=3) -> PeelingInstance:
    q = int(rng.integers(1, max_q + 1))
    m = int(rng.integers(1, max_m + 1))
    p = int(rng.integers(1, max_p + 1))
    h = int(rng.integers(1, max_h + 1))
    f = rng.standard_normal((q, m, p)) * rng.uniform(0.2, 2.0)
    if rng.random() < 0.3:
        f = np.abs(f)
    R = float(rng.uniform(0.3, 3.0))
    if rng.random() < 0.5:
        return PeelingInstance(f, R, h, "identity")
    scale = R * math.sqrt(q) * float(np.abs(f).sum(axis=1).max()) * math.sqrt(p)
    lam = float(min(rng.uniform(0.05, 1.0), 0.9 * EXP_GUARD / max(scale, 1e-12)))
    return PeelingInstance(f, R, h, "exp", lam)


def peeling_objective(inst: PeelingInstance, xi: np.ndarray, W: np.ndarray) -> np.ndarray:
    """g(sqrt(sum_j ||sum_i xi_i relu(W_j f_j(x_i))||^2)) for explicit W of shape (q, h, p)."""
    xi = np.atleast_2d(xi)
    pre = np.einsum("jrp,jip->jir", W, inst.f)
    s = np.einsum("ni,jir->njr", xi, np.maximum(pre, 0.0))
    return inst.apply_g(np.sqrt(np.sum(s * s, axis=(1, 2))))


def _branch_sup_sq(
    xi: np.ndarray, fj: np.ndarray, R: float, h: int, restarts: int, steps: int, rng, polish: int = 8
) -> np.ndarray:
    """max over ||W||_F <= R of ||sum_i xi_i relu(W f_i)||^2, for every row of xi.

    Candidates: the rank-one matrices R e_1 u^T with u along each +-f_i and
    +-sum_i xi_i f_i, and projected gradient ascent over full h x p matrices
    from ``restarts`` random starts.  The rank-one candidates and the ascent
    endpoints are then refined by an active-set fixed point (see :func:`_polish`).  Every candidate is feasible,
    so the result is a lower bound on the supremum.
    """
    n, m = xi.shape
    p = fj.shape[1]

    def value(W):  # W: (n, k, h, p)
        pre = np.einsum("nkrp,ip->nkir", W, fj)
        a = np.einsum("ni,nkir->nkr", xi, np.maximum(pre, 0.0))
        return np.sum(a * a, axis=2), pre, a

    dirs = [fj, -fj]
    v = xi @ fj
    dirs = np.concatenate([np.broadcast_to(d, (n, m, p)) for d in dirs] + [v[:, None], -v[:, None]], axis=1)
    nrm = np.linalg.norm(dirs, axis=2, keepdims=True)
    dirs = np.where(nrm > 0, dirs / np.where(nrm > 0, nrm, 1.0), 0.0)
    Wc = np.zeros((n, dirs.shape[1], h, p))
    Wc[:, :, 0, :] = R * dirs
    best = _polish(value, xi, fj, Wc, R, polish)

    W = rng.standard_normal((n, restarts, h, p))
    W *= R / np.linalg.norm(W, axis=(2, 3), keepdims=True)
    step = 0.5 * R
    for _ in range(steps):
        val, pre, a = value(W)
        best = np.maximum(best, val.max(axis=1))
        # d/dW_r of sum_r a_r^2 = 2 a_r sum_i xi_i 1[pre_ir > 0] f_i
        act = (pre > 0) * xi[:, None, :, None]
        grad = 2.0 * np.einsum("nkr,nkir,ip->nkrp", a, act, fj)
        gn = np.linalg.norm(grad, axis=(2, 3), keepdims=True)
        W = W + step * grad / np.where(gn > 0, gn, 1.0)
        wn = np.linalg.norm(W, axis=(2, 3), keepdims=True)
        W *= R / np.where(wn > 0, wn, 1.0)
        step *= 0.95
    return np.maximum(best, _polish(value, xi, fj, W, R, polish))


def _polish(value, xi: np.ndarray, fj: np.ndarray, W: np.ndarray, R: float, iters: int) -> np.ndarray:
    """Active-set fixed point from every start in W; returns the best value per sign row.

    With the active sets S_r frozen the objective is sum_r (w_r . v_r)^2,
    v_r = sum_{i in S_r} xi_i f_i, maximized by putting all of R on the row
    with the largest ||v_r||, with either sign.  Maxima also sit on kinks
    w . f_k = 0, so v_r projected onto each such hyperplane is a candidate too,
    as are the stationary points of the m neighbouring active sets.  A start
    only moves when a candidate improves on it.
    """
    n, k, h, p = W.shape
    fn = np.linalg.norm(fj, axis=1, keepdims=True)
    fhat = fj / np.where(fn > 0, fn, 1.0)
    cur, pre, _ = value(W)
    best = cur.max(axis=1)
    for _ in range(iters):
        on = (pre > 0).astype(np.float64)
        v = np.einsum("ni,nkir,ip->nkrp", xi, on, fj)
        r = np.linalg.norm(v, axis=3).argmax(axis=2)
        v = np.take_along_axis(v, r[:, :, None, None], axis=2)[:, :, 0]  # (n, k, p)
        on = np.take_along_axis(on, r[:, :, None, None], axis=3)[..., 0]  # (n, k, m)
        # neighbouring regions: toggle one sample in or out of the active set
        flip = v[:, :, None, :] + ((1.0 - 2.0 * on) * xi[:, None, :])[..., None] * fj
        proj = v[:, :, None, :] - np.einsum("nkp,ip->nki", v, fhat)[..., None] * fhat
        cand = np.concatenate([v[:, :, None, :], proj, flip], axis=2)
        cand = np.concatenate([cand, -cand], axis=2)
        cn = np.linalg.norm(cand, axis=3, keepdims=True)
        cand = np.where(cn > 0, cand / np.where(cn > 0, cn, 1.0), 0.0)
        c = cand.shape[2]
        Wc = np.zeros((n, k * c, h, p))
        Wc[:, :, 0, :] = R * cand.reshape(n, -1, p)
        cv = value(Wc)[0].reshape(n, k, c)
        pick = cv.argmax(axis=2)
        newv = np.take_along_axis(cv, pick[..., None], axis=2)[..., 0]
        better = newv > cur
        if not better.any():
            break
        Wn = np.take_along_axis(Wc.reshape(n, k, c, h, p), pick[:, :, None, None, None], axis=2)[:, :, 0]
        W = np.where(better[..., None, None], Wn, W)
        cur, pre, _ = value(W)
        best = np.maximum(best, cur.max(axis=1))
    return best


def peeling_lhs(inst: PeelingInstance, restarts: int = 16, steps: int = 60, seed: int = 0) -> float:
    """Exact-over-signs expectation of the supremum side (supremum from below)."""
    if restarts < 16:
        raise ValueError("use at least 16 ascent restarts")
    rng = np.random.default_rng(seed)
    xi = sign_vectors(inst.m)
    total = np.zeros(len(xi))
    # the supremum separates over the branches j
    for j in range(inst.q):
        total += _branch_sup_sq(xi, inst.f[j], inst.R, inst.h, restarts, steps, rng)
    return float(np.mean(inst.apply_g(np.sqrt(total))))


def peeling_rhs(inst: PeelingInstance, draws: Optional[int] = None, seed: int = 0) -> float:
    """2 E_xi max_j g(sqrt(q) R ||sum_i xi_i f_j(x_i)||)."""

    def fn(xi):
        s = np.einsum("ni,jip->njp", xi, inst.f)
        r = math.sqrt(inst.q) * inst.R * np.linalg.norm(s, axis=2).max(axis=1)
        return 2.0 * inst.apply_g(r)

    return sign_expectation(fn, inst.m, draws, np.random.default_rng(seed))[0]


# -- empirical Rademacher complexity -------------------------------------------


def project_to_class(g: ArchGraph, w: WeightSet, rho_value: float) -> WeightSet:
    """Map w into the class rho(w) <= rho_value, landing on its boundary.

    Hidden neurons are shrunk to Frobenius norm at most 1, and the single-row
    output layer is rescaled to norm ``rho_value``.
    """
    out = []
    for l, a in enumerate(w.layers, start=1):
        if l < g.L:
            if g.shared:
                out.append(a / max(1.0, float(np.linalg.norm(a))))
            else:
                n = np.sqrt(np.sum(a * a, axis=(1, 2), keepdims=True))
                out.append(a / np.maximum(1.0, n))
        else:
            n = float(np.linalg.norm(a))
            out.append(a * (rho_value / n) if n > 0 else a)
    return WeightSet(out)


def _boundary_sample(g: ArchGraph, rng: np.random.Generator, rho_value: float) -> WeightSet:
    w = random_weights(g, rng)
    layers = []
    for l, a in enumerate(w.layers, start=1):
        if l < g.L:
            if g.shared:
                a = a / np.linalg.norm(a)
            else:
                n = np.sqrt(np.sum(a * a, axis=(1, 2), keepdims=True))
                # random per-neuron norms in (0, 1], at least one neuron at 1
                r = rng.uniform(0.2, 1.0, size=n.shape)
                r.flat[int(rng.integers(r.size))] = 1.0
                a = a / np.where(n > 0, n, 1.0) * r
        layers.append(a)
    return project_to_class(g, WeightSet(layers), rho_value)


@dataclass(frozen=True)
class RademacherEstimate:
    value: float
    exact_signs: bool
    samples: int
    draws: int


def empirical_rademacher(
    g: ArchGraph,
    rho_value: float,
    X,
    samples: int = 512,
    restarts: int = 2,
    steps: int = 25,
    draws: Optional[int] = None,
    seed: int = 0,
) -> RademacherEstimate:
    """Lower bound on (1/m) E_xi sup_{rho(w) <= rho} |sum_i xi_i f_w(x_i)|.

    The supremum is taken over ``samples`` random networks on the class
    boundary, then refined for each sign vector by projected gradient ascent
    from its ``restarts`` best samples.  Every evaluated network lies in the
    class, so the estimate never exceeds the true value.  Signs are
    enumerated exactly for m <= 10 (using the xi -> -xi symmetry) and drawn
    ``draws`` times (default 10^4) otherwise; gradient ascent is skipped when
    more than 1024 sign vectors are in play.
    """
    if g.channels[-1] != 1:
        raise ValueError("the class needs a scalar output (c_L = 1)")
    X = np.asarray(getattr(X, "images", X), dtype=np.float64)
    m = X.shape[0]
    if rho_value == 0:
        return RademacherEstimate(0.0, m <= 10, 0, 0)
    rng = np.random.default_rng(seed)
    exact = m <= 10 and draws is None
    if exact:
        xi = sign_vectors(m, half=True)
    else:
        xi = rng.choice((-1.0, 1.0), size=(draws or 10_000, m))
    pool = [_boundary_sample(g, rng, rho_value) for _ in range(samples)]
    F = np.stack([forward(g, w, X)[0][:, 0] for w in pool])  # (samples, m)
    corr = xi @ F.T  # (n_xi, samples)
    best = np.abs(corr).max(axis=1)
    if len(xi) <= 1024 and steps > 0 and restarts > 0:
        top = np.argsort(-np.abs(corr), axis=1)[:, :restarts]
        for n in range(len(xi)):
            for k in top[n]:
                sgn = 1.0 if corr[n, k] >= 0 else -1.0
                best[n] = max(best[n], _ascend(g, pool[k], X, sgn * xi[n], rho_value, steps))
    return RademacherEstimate(float(best.mean()) / m, exact, samples, len(xi))


def _ascend(g: ArchGraph, w: WeightSet, X: np.ndarray, xi: np.ndarray, rho_value: float, steps: int) -> float:
    """Projected gradient ascent of xi . f_w(X) over the class; returns the best |value|."""
    best = -np.inf
    lr = 0.1
    for _ in range(steps):
        out, trace = forward(g, w, X)
        val = float(xi @ out[:, 0])
        best = max(best, abs(val))
        grad = backward(g, w, trace, xi[:, None])
        layers = []
        for a, d in zip(w.layers, grad.layers):
            na, nd = np.linalg.norm(a), np.linalg.norm(d)
            layers.append(a + (lr * na / nd) * d if nd > 0 else a)
        w = project_to_class(g, WeightSet(layers), rho_value)
    out, _ = forward(g, w, X)
    return max(best, abs(float(xi @ out[:, 0])))


# -- concentration -------------------------------------------------------------


@dataclass(frozen=True)
class ConcentrationResult:
    holds: bool
    lhs_log: float
    rhs_log: float

    @property
    def slack(self) -> float:
        """rhs - lhs on the log scale."""
        return self.rhs_log - self.lhs_log


def concentration_check(z, alpha: float, draws: Optional[int] = None, seed: int = 0) -> ConcentrationResult:
    """log E_xi exp(alpha ||sum_i xi_i z_i||) against alpha^2 S / 2 + alpha sqrt(S), S = sum ||z_i||^2.

    ``z`` has one row per sample.  Exact over all signs when ``draws`` is
    None (m <= 12).
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m = z.shape[0]
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    S = float(np.sum(z * z))
    rhs = alpha * alpha * S / 2.0 + alpha * math.sqrt(S)
    if draws is None:
        if m > MAX_EXHAUSTIVE_M:
            raise ValueError(f"m = {m} is too large for exact enumeration")
        xi = sign_vectors(m)
        a = alpha * np.linalg.norm(xi @ z, axis=1)
        lhs = float(logsumexp(a) - m * math.log(2.0))
    else:
        rng = np.random.default_rng(seed)
        xi = rng.choice((-1.0, 1.0), size=(draws, m))
        a = alpha * np.linalg.norm(xi @ z, axis=1)
        lhs = float(logsumexp(a) - math.log(draws))
    return ConcentrationResult(lhs <= rhs + 1e-12, lhs, rhs)


# -- lambda balancing -------------------------------------------------------------


def lambda_objective(lam, L: int, deg: int, rho_value: float, path_patch: float):
    """L log(2 deg) / lam + lam rho^2 P / 2 + rho sqrt(P), with P the patch term."""
    lam = np.asarray(lam, dtype=np.float64)
    return (
        L * math.log(2.0 * deg) / lam
        + lam * rho_value**2 * path_patch / 2.0
        + rho_value * math.sqrt(path_patch)
    )


def lambda_star(L: int, deg: int, rho_value: float, path_patch: float) -> float:
    """sqrt(2 L log(2 deg) / (rho^2 P)), the minimizer of :func:`lambda_objective`."""
    if rho_value <= 0 or path_patch <= 0:
        raise ValueError("need rho > 0 and a positive patch term")
    return math.sqrt(2.0 * L * math.log(2.0 * deg) / (rho_value**2 * path_patch))

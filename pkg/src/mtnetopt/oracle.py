"""Reference solutions for the moving targets and tracking-error metrics.

Inner problem. For fixed rates the power problem at one receiver minimises a
linear cost over the set {received powers s : s(S) >= exp(c(S)) - 1 for every
subset S}. The right-hand side is supermodular, so the greedy rule that
serves the weakest channel first at its minimum and the stronger ones on top
(successive decoding) is exact. Its dual is supported on the nested chain of
subsets, which gives the multipliers in closed form. A projected primal-dual
polish then certifies the fixed-point residual.

Outer problem. Because the greedy dual depends on the channel only through
the decoding order, the sample-average outer objective collapses to
``sum log r - sum_i nu_i (exp(N_i r) - 1)`` with averaged chain weights
``nu``. It is smooth and strictly concave and is solved by damped Newton.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import LinkCsi, standard_complex_normal
from .errors import OracleError
from .network import R_FLOOR, PrimalDualPoint, RelayProblem


@dataclass(frozen=True)
class OracleConfig:
    inner_tol: float = 1e-10
    outer_samples: int = 4096
    outer_tol: float = 1e-10
    max_iter: int = 20000
    cache_tol: float = 1e-4
    burn_in_frac: float = 0.1
    seed: int = 12345

    def __post_init__(self) -> None:
        if self.inner_tol <= 0 or self.outer_tol <= 0 or self.cache_tol < 0:
            raise ValueError("tolerances must be positive")
        if self.outer_samples < 1:
            raise ValueError("outer_samples must be >= 1")
        if not 0 <= self.burn_in_frac < 1:
            raise ValueError("burn_in_frac must lie in [0, 1)")


# --------------------------------------------------------------------------
# Inner solve
# --------------------------------------------------------------------------


def chain_weights(q: np.ndarray, problem: RelayProblem) -> tuple[np.ndarray, list[np.ndarray]]:
    """Dual weights of the greedy solution for a batch of gain vectors.

    Parameters
    ----------
    q : (M, L) array of positive gains.

    Returns
    -------
    nu : (M, W) array. Lagrange multipliers of the received-power form of the
        constraints; nonzero only on the decoding chain.
    orders : per receiver, an (M, n) array of positions into the link vector
        sorted from weakest to strongest channel.
    """
    q = np.atleast_2d(q)
    M = q.shape[0]
    nu = np.zeros((M, problem.W))
    rows = np.arange(M)[:, None]
    orders = []
    for rc in problem.receivers:
        idx = np.asarray(rc.links)
        sub = q[:, idx]
        local = np.argsort(sub, axis=1, kind="stable")
        weight = problem.V / np.take_along_axis(sub, local, axis=1)
        step = weight.copy()
        step[:, :-1] -= weight[:, 1:]
        masks = np.cumsum(1 << local, axis=1)
        nu[rows, rc.mask_to_constraint[masks]] = step
        orders.append(idx[local])
    return nu, orders


def _greedy_point(r: np.ndarray, q: np.ndarray, problem: RelayProblem) -> PrimalDualPoint:
    c = problem.R @ r
    nu, orders = chain_weights(q[None, :], problem)
    p = np.zeros(problem.n_links)
    for order in orders:
        order = order[0]
        c_sorted = c[order]
        before = np.concatenate([[0.0], np.cumsum(c_sorted)[:-1]])
        level = np.exp(before) * np.expm1(c_sorted)
        p[order] = level / q[order]
    lam = nu[0] * np.exp(problem.N @ r)
    return PrimalDualPoint(p, lam, r.copy())


def inner_residual(point: PrimalDualPoint, h, problem: RelayProblem) -> float:
    """|x - P[x + G(x)]| for the unit-step projected primal-dual map."""
    q = problem.gains(h)
    u = problem.B @ (q * point.p)
    grad_p = q * (problem.B.T @ (point.lam / (1.0 + u))) - problem.V
    g = problem.N @ point.r - np.log1p(u)
    dp = point.p - np.maximum(point.p + grad_p, 0.0)
    dl = point.lam - np.maximum(point.lam + g, 0.0)
    return float(np.sqrt(dp @ dp + dl @ dl))


def solve_inner(
    r, h, problem: RelayProblem, cfg: OracleConfig | None = None, start: PrimalDualPoint | None = None
) -> PrimalDualPoint:
    """Stationary (p, lam) for fixed rates ``r`` and channel ``h``.

    Raises :class:`OracleError` when the damped primal-dual polish cannot
    reach ``cfg.inner_tol``, which includes channels too weak to carry ``r``.
    """
    cfg = cfg or OracleConfig()
    r = np.asarray(r, dtype=float)
    q = problem.gains(h)
    if start is not None:
        point = start.copy()
        point.r = r.copy()
    elif np.all(q > 0) and np.all(np.isfinite(q)):
        point = _greedy_point(r, q, problem)
    else:
        point = PrimalDualPoint(np.zeros(problem.n_links), np.zeros(problem.W), r.copy())
    res = inner_residual(point, h, problem)
    if res <= cfg.inner_tol:
        return point
    # damped projected primal-dual polish
    p, lam = point.p, point.lam
    Nr = problem.N @ r
    step, damping = 0.2, 0.5
    for _ in range(cfg.max_iter):
        u = problem.B @ (q * p)
        grad_p = q * (problem.B.T @ (lam / (1.0 + u))) - problem.V
        g = Nr - np.log1p(u)
        p = (1 - damping) * p + damping * np.maximum(p + step * grad_p, 0.0)
        lam = (1 - damping) * lam + damping * np.maximum(lam + step * g, 0.0)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(lam))):
            break
        point = PrimalDualPoint(p, lam, r.copy())
        res = inner_residual(point, h, problem)
        if res <= cfg.inner_tol:
            return point
    raise OracleError("inner solve exceeded max_iter", res)


# --------------------------------------------------------------------------
# Outer solve
# --------------------------------------------------------------------------


def stationary_fading_samples(n_links: int, M: int, seed: int) -> np.ndarray:
    """M independent stationary fading vectors from a fixed seed."""
    return standard_complex_normal(np.random.default_rng(seed), (M, n_links))


def saa_weights(h_l, h_s_samples: np.ndarray, problem: RelayProblem) -> np.ndarray:
    """Averaged chain weights over fading samples at path loss ``h_l``."""
    mag = np.maximum(np.abs(h_s_samples), problem.fade_floor)
    q = problem.snr_gain * np.asarray(h_l) ** 2 * mag**2
    if not np.all(q > 0):
        raise OracleError("a sampled channel gain is zero; expectation undefined", np.inf)
    nu, _ = chain_weights(q, problem)
    return nu.mean(axis=0)


def saa_gradient(r: np.ndarray, nu_bar: np.ndarray, problem: RelayProblem) -> np.ndarray:
    """Sample average of dL/dr at the inner stationary points."""
    return 1.0 / r - problem.N.T @ (nu_bar * np.exp(problem.N @ r))


def saa_multipliers(r: np.ndarray, nu_bar: np.ndarray, problem: RelayProblem) -> np.ndarray:
    return nu_bar * np.exp(problem.N @ r)


def _outer_value(r: np.ndarray, nu_bar: np.ndarray, problem: RelayProblem) -> float:
    return float(np.sum(np.log(r)) - nu_bar @ np.expm1(problem.N @ r))


def outer_residual(r: np.ndarray, nu_bar: np.ndarray, problem: RelayProblem) -> float:
    k = saa_gradient(r, nu_bar, problem)
    return float(np.linalg.norm(r - np.maximum(r + k, R_FLOOR)))


def solve_outer_weights(
    nu_bar: np.ndarray, problem: RelayProblem, cfg: OracleConfig | None = None, r0=None
) -> np.ndarray:
    """Maximise the sample-average outer objective for given chain weights."""
    cfg = cfg or OracleConfig()
    N = problem.N
    r = np.full(problem.n_flows, 0.5) if r0 is None else np.maximum(np.asarray(r0, float), R_FLOOR)
    val = _outer_value(r, nu_bar, problem)
    for _ in range(cfg.max_iter):
        res = outer_residual(r, nu_bar, problem)
        if res <= cfg.outer_tol:
            return r
        lam = nu_bar * np.exp(N @ r)
        grad = 1.0 / r - N.T @ lam
        hess = -np.diag(1.0 / r**2) - (N.T * lam) @ N
        d = -np.linalg.solve(hess, grad)
        t = 1.0
        neg = d < 0
        if np.any(neg):
            t = min(1.0, 0.99 * float(np.min((r[neg] - R_FLOOR) / -d[neg])))
        slope = grad @ d
        if np.linalg.norm(grad) < 1e-6 and t == 1.0:
            # quadratic-convergence region: value differences sit at roundoff
            r = r + d
            val = _outer_value(r, nu_bar, problem)
            continue
        while True:
            trial = r + t * d
            tv = _outer_value(trial, nu_bar, problem)
            if tv >= val + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12:
            break
        r, val = trial, tv
    res = outer_residual(r, nu_bar, problem)
    if res <= cfg.outer_tol:
        return r
    raise OracleError("outer solve exceeded max_iter", res)


def solve_outer(
    h_l,
    problem: RelayProblem,
    cfg: OracleConfig | None = None,
    seed: int | None = None,
    h_s_samples: np.ndarray | None = None,
) -> np.ndarray:
    """Rates maximising the expected objective given path loss ``h_l``.

    The expectation over fading is a sample average over ``cfg.outer_samples``
    stationary draws from ``seed`` (default ``cfg.seed``), or over explicitly
    supplied ``h_s_samples`` of shape (M, L).
    """
    cfg = cfg or OracleConfig()
    if h_s_samples is None:
        h_s_samples = stationary_fading_samples(
            problem.n_links, cfg.outer_samples, cfg.seed if seed is None else seed
        )
    nu_bar = saa_weights(h_l, np.atleast_2d(h_s_samples), problem)
    return solve_outer_weights(nu_bar, problem, cfg)


class OuterOracle:
    """y*(h_l) with fixed common fading samples and a path-loss keyed cache.

    The cached value is reused while the path loss stays within
    ``cfg.cache_tol`` (Euclidean) of the last solve.
    """

    def __init__(self, problem: RelayProblem, cfg: OracleConfig | None = None, seed: int | None = None,
                 h_s_samples: np.ndarray | None = None) -> None:
        self.problem = problem
        self.cfg = cfg or OracleConfig()
        if h_s_samples is None:
            h_s_samples = stationary_fading_samples(
                problem.n_links, self.cfg.outer_samples, self.cfg.seed if seed is None else seed
            )
        self.samples = np.atleast_2d(h_s_samples)
        self._key: np.ndarray | None = None
        self._value: np.ndarray | None = None
        self.solves = 0

    def weights(self, h_l) -> np.ndarray:
        return saa_weights(h_l, self.samples, self.problem)

    def solve(self, h_l) -> np.ndarray:
        return solve_outer_weights(self.weights(h_l), self.problem, self.cfg, r0=self._value)

    def __call__(self, h_l) -> np.ndarray:
        h_l = np.asarray(h_l, dtype=float)
        if self._key is None or np.linalg.norm(h_l - self._key) > self.cfg.cache_tol:
            self._value = self.solve(h_l)
            self._key = h_l.copy()
            self.solves += 1
        return self._value.copy()

    def gradient(self, r, h_l) -> np.ndarray:
        return saa_gradient(np.asarray(r, float), self.weights(h_l), self.problem)


# --------------------------------------------------------------------------
# Tracking errors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameSample:
    """Iterate and CSI at one frame boundary."""

    p: np.ndarray
    lam: np.ndarray
    r: np.ndarray
    csi: LinkCsi


def instantaneous_errors(
    samples: Sequence[FrameSample], problem: RelayProblem, cfg: OracleConfig | None = None,
    outer: OuterOracle | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame |x - x_hat(y, h)|^2 and |y - y*(h_l)|^2."""
    cfg = cfg or OracleConfig()
    outer = outer or OuterOracle(problem, cfg)
    ex = np.empty(len(samples))
    ey = np.empty(len(samples))
    for i, s in enumerate(samples):
        target = solve_inner(s.r, s.csi, problem, cfg)
        dx = np.concatenate([s.p - target.p, s.lam - target.lam])
        ex[i] = dx @ dx
        dy = s.r - outer(s.csi.h_l)
        ey[i] = dy @ dy
    return ex, ey


def burn_in_count(n: int, frac: float) -> int:
    return int(np.floor(frac * n))


def tracking_errors(
    samples: Sequence[FrameSample],
    problem: RelayProblem,
    cfg: OracleConfig | None = None,
    outer: OuterOracle | None = None,
    burn_in: int | None = None,
) -> tuple[float, float]:
    """Time-averaged squared tracking errors after discarding a burn-in."""
    cfg = cfg or OracleConfig()
    n = len(samples)
    skip = burn_in_count(n, cfg.burn_in_frac) if burn_in is None else burn_in
    if n <= skip:
        raise ValueError("trajectory shorter than the burn-in")
    ex, ey = instantaneous_errors(samples[skip:], problem, cfg, outer)
    return float(ex.mean()), float(ey.mean())


# --------------------------------------------------------------------------
# Finite-difference sensitivities
# --------------------------------------------------------------------------


def fd_sensitivity(
    target: str,
    problem: RelayProblem,
    r,
    csi: LinkCsi,
    direction,
    step: float = 1e-5,
    wrt: str = "hs",
    cfg: OracleConfig | None = None,
    outer: OuterOracle | None = None,
) -> np.ndarray:
    """Central difference of x_hat (stacked p, lam) or y* along a direction.

    ``wrt`` selects fading magnitudes ("hs"), path loss ("hl") or rates
    ("r", inner target only). The outer target only moves with path loss.
    """
    cfg = cfg or OracleConfig()
    d = np.asarray(direction, dtype=float)
    r = np.asarray(r, dtype=float)
    if not np.any(d):
        size = problem.n_flows if target == "outer" else problem.n_x
        return np.zeros(size)

    def shifted(sign: float):
        if wrt == "hs":
            return r, csi.with_magnitude(csi.magnitude + sign * step * d)
        if wrt == "hl":
            return r, csi.with_path_loss(csi.h_l + sign * step * d)
        if wrt == "r":
            return r + sign * step * d, csi
        raise ValueError(f"unknown wrt {wrt!r}")

    if target == "inner":
        vals = []
        for sign in (1.0, -1.0):
            rr, cc = shifted(sign)
            pt = solve_inner(rr, cc, problem, cfg)
            vals.append(pt.x)
        return (vals[0] - vals[1]) / (2 * step)
    if target == "outer":
        if wrt != "hl":
            raise ValueError("the outer target depends on path loss only")
        outer = outer or OuterOracle(problem, cfg)
        plus = outer.solve(csi.h_l + step * d)
        minus = outer.solve(csi.h_l - step * d)
        return (plus - minus) / (2 * step)
    raise ValueError(f"unknown target {target!r}")

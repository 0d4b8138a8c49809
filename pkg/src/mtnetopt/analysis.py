"""Stability and tracking-error analysis of the two-timescale iteration.

Local convergence rates, the Lyapunov drift matrix and its stability test,
the resulting tracking-error bound, and integrators for the mean
continuous-time dynamics (MCTS) and the virtual stochastic error dynamics
(VSDS).

Two definitions of the convergence rates are available. ``"symmetric"``
takes minus the largest eigenvalue of the symmetric part of the Jacobian.
For the primal-dual map the multiplier block of that symmetric part is zero,
so this rate is never positive. ``"active"`` (the default) restricts the
Jacobian to positive powers and active multipliers and takes minus its
spectral abscissa, which is what actually governs local convergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .channel import LinkCsi
from .errors import NumericalError, StabilityError
from .network import R_FLOOR, PrimalDualPoint, RelayProblem, dual_ascent_jacobian
from .oracle import OracleConfig, OuterOracle, chain_weights, saa_weights, solve_inner
from .solver import CompensationConfig, sensitivities

RATE_DEFINITIONS = ("active", "symmetric")


# --------------------------------------------------------------------------
# Local rates
# --------------------------------------------------------------------------


def _active_coords(point: PrimalDualPoint, tol: float) -> np.ndarray:
    return np.concatenate([point.p > tol, point.lam > tol])


def _rate(J: np.ndarray, keep: np.ndarray | None, definition: str) -> float:
    if definition == "symmetric":
        return float(-np.linalg.eigvalsh(0.5 * (J + J.T)).max())
    if definition == "active":
        if keep is not None:
            J = J[np.ix_(keep, keep)]
        if J.size == 0:
            return 0.0
        return float(-np.linalg.eigvals(J).real.max())
    raise ValueError(f"unknown rate definition {definition!r}")


def local_rates(
    point: PrimalDualPoint,
    h,
    problem: RelayProblem,
    definition: str = "active",
    tol: float = 1e-6,
) -> tuple[float, float]:
    """(alpha_x, alpha_y) at one point.

    ``alpha_y`` is minus the largest eigenvalue of d2L/dr2 = -diag(1/r^2),
    i.e. min 1/r^2, under either definition.
    """
    M_L, _ = dual_ascent_jacobian(point, h, problem)
    keep = _active_coords(point, tol)
    alpha_x = _rate(M_L, keep, definition)
    alpha_y = float(-np.linalg.eigvalsh(np.diag(-1.0 / point.r**2)).max())
    return alpha_x, alpha_y


def joint_jacobian(point: PrimalDualPoint, h, problem: RelayProblem, N_s: int) -> np.ndarray:
    """Jacobian of (G, K / N_s) in (x, r) for the primal-dual map."""
    M_L, G_r = dual_ascent_jacobian(point, h, problem)
    K_x = np.hstack([np.zeros((problem.n_flows, problem.n_links)), -problem.N.T])
    K_y = np.diag(-1.0 / point.r**2)
    return np.block([[M_L, G_r], [K_x / N_s, K_y / N_s]])


def joint_rate(
    point: PrimalDualPoint, h, problem: RelayProblem, N_s: int, definition: str = "active", tol: float = 1e-6
) -> float:
    """alpha with x^T J x <= -alpha / N_s |x|^2 (or its spectral analogue)."""
    J = joint_jacobian(point, h, problem, N_s)
    keep = np.concatenate([_active_coords(point, tol), np.ones(problem.n_flows, dtype=bool)])
    return N_s * _rate(J, keep, definition)


# --------------------------------------------------------------------------
# Parameter estimation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityParams:
    """Constants entering the stability test and the error bound."""

    alpha_x: float
    alpha_y: float
    alpha: float
    l_x: float
    l_y: float
    v_H: float
    v_y: float
    varpi: float
    sigma_bar: float
    N: int

    def __post_init__(self) -> None:
        values = (self.alpha_x, self.alpha_y, self.alpha, self.l_x, self.l_y, self.v_H,
                  self.v_y, self.varpi, self.sigma_bar)
        if not all(np.isfinite(values)):
            raise ValueError("stability parameters must be finite")
        if self.N < 0:
            raise ValueError("N must be >= 0")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def rate_gradient(lam: np.ndarray, r: np.ndarray, problem: RelayProblem) -> np.ndarray:
    """K = dL/dr = 1/r - N^T lam."""
    return 1.0 / r - problem.N.T @ lam


def _fd_jacobian(fn, z: np.ndarray, step: float) -> np.ndarray:
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((fn(z + e) - fn(z - e)) / (2 * step))
    return np.column_stack(cols)


def estimator_covariance(
    r: np.ndarray, h_l, problem: RelayProblem, h_s_samples: np.ndarray
) -> np.ndarray:
    """Covariance of K(x_hat(r, h), r; h) over fading draws at path loss h_l."""
    mag = np.maximum(np.abs(h_s_samples), problem.fade_floor)
    q = problem.snr_gain * np.asarray(h_l) ** 2 * mag**2
    nu, _ = chain_weights(q, problem)
    lam = nu * np.exp(problem.N @ r)
    K = 1.0 / r - lam @ problem.N
    if K.shape[0] < 2:
        return np.zeros((problem.n_flows, problem.n_flows))
    return np.atleast_2d(np.cov(K, rowvar=False))


def covariance_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped at zero."""
    sym = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(sym)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def path_loss_sensitivity(
    h_l, problem: RelayProblem, outer: OuterOracle, step: float = 1e-5
) -> np.ndarray:
    """d y*/d h_l by central differences with common fading samples."""
    h_l = np.asarray(h_l, dtype=float)
    cols = []
    for j in range(h_l.size):
        e = np.zeros_like(h_l)
        e[j] = step
        cols.append((outer.solve(h_l + e) - outer.solve(h_l - e)) / (2 * step))
    return np.column_stack(cols)


def estimate_params(
    problem: RelayProblem,
    states: Sequence[tuple[PrimalDualPoint, LinkCsi]],
    N_s: int = 30,
    definition: str = "active",
    cfg: OracleConfig | None = None,
    outer: OuterOracle | None = None,
    comp: CompensationConfig | None = None,
    sigma_samples: int = 2048,
    seed: int = 0,
    fd_step: float = 1e-5,
    varpi_step: float = 1e-3,
    with_varpi: bool = True,
) -> StabilityParams:
    """Infima of the rates and suprema of the sensitivities over ``states``.

    Each state is an iterate with its CSI. Rates are taken at the iterate;
    sensitivities at the inner stationary point for the iterate's rates.
    The covariance term averages tr(Sigma) at y*(h_l) over the states.
    """
    if not states:
        raise ValueError("need at least one state")
    cfg = cfg or OracleConfig()
    outer = outer or OuterOracle(problem, cfg)
    comp = comp or CompensationConfig()
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((sigma_samples, problem.n_links, 2)) @ np.array([1.0, 1j]) / np.sqrt(2.0)

    ax, ay, a, lx, ly, vh, vy, traces, varpis = [], [], [], [], [], [], [], [], []
    for point, csi in states:
        rx, ry = local_rates(point, csi, problem, definition, comp.active_set_tol)
        ax.append(rx)
        ay.append(ry)
        a.append(joint_rate(point, csi, problem, N_s, definition, comp.active_set_tol))
        x_hat = solve_inner(point.r, csi, problem, cfg)
        sens = sensitivities(x_hat, csi, problem, comp)
        vh.append(np.linalg.norm(sens.dx_dhs, 2))
        vy.append(np.linalg.norm(sens.dx_dy, 2))
        n = problem.n_links
        K_of_x = lambda z: rate_gradient(z[n:], point.r, problem)  # noqa: E731
        K_of_y = lambda z: rate_gradient(point.lam, z, problem)  # noqa: E731
        lx.append(np.linalg.norm(_fd_jacobian(K_of_x, point.x, fd_step), 2))
        ly.append(np.linalg.norm(_fd_jacobian(K_of_y, point.r, fd_step * np.min(point.r)), 2))
        y_star = outer(csi.h_l)
        traces.append(np.trace(estimator_covariance(y_star, csi.h_l, problem, draws)))
        if with_varpi:
            psi0 = path_loss_sensitivity(csi.h_l, problem, outer)
            d = rng.standard_normal(problem.n_links)
            d /= np.linalg.norm(d)
            psi1 = path_loss_sensitivity(csi.h_l + varpi_step * d, problem, outer)
            varpis.append(np.linalg.norm(psi1 - psi0, 2) / varpi_step)
    return StabilityParams(
        alpha_x=float(min(ax)),
        alpha_y=float(min(ay)),
        alpha=float(min(a)),
        l_x=float(max(lx)),
        l_y=float(max(ly)),
        v_H=float(max(vh)),
        v_y=float(max(vy)),
        varpi=float(max(varpis)) if varpis else 0.0,
        sigma_bar=float(np.mean(traces)),
        N=problem.n_links,
    )


# --------------------------------------------------------------------------
# Stability test, drift matrix and error bound
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityVerdict:
    """Outcome of the stability test.

    ``margin`` is the operative sufficient-condition expression, whose sign
    matches positive definiteness of the drift matrix. ``margin_literal``
    uses 2 l_y^2 v_y^2 in place of 2 (alpha / alpha_y) l_y^2 v_y^2; the two
    coincide when alpha == alpha_y.
    """

    stable: bool
    margin: float
    margin_literal: float


def stability_condition(params: StabilityParams, a_H: float, tau: float, N_s: int, gamma: float) -> StabilityVerdict:
    p = params
    fast = a_H * tau / (N_s * gamma)
    head = p.alpha * N_s * (8 * p.alpha_x - fast * p.v_H**2) - 2 * p.l_x**2
    literal = head - 2 * p.l_y**2 * p.v_y**2
    if p.alpha_y > 0:
        margin = head - 2 * (p.alpha / p.alpha_y) * p.l_y**2 * p.v_y**2
    else:
        margin = -np.inf
    stable = bool(p.alpha > 0 and p.alpha_y > 0 and margin > 0)
    return StabilityVerdict(stable, float(margin), float(literal))


@dataclass(frozen=True)
class DriftMatrix:
    """The 5x5 coefficient matrix of the quadratic drift bound, and b."""

    A: np.ndarray
    b: np.ndarray

    def leading_minors(self) -> np.ndarray:
        return np.array([np.linalg.det(self.A[:k, :k]) for k in range(1, self.A.shape[0] + 1)])

    def effective(self) -> "DriftMatrix":
        """Drop the fading row and column when their coefficient vanishes."""
        if self.A[4, 4] == 0.0:
            return DriftMatrix(self.A[:4, :4].copy(), self.b[:4].copy())
        return self


def drift_matrix(
    params: StabilityParams, a_H: float, tau: float, N_s: int, gamma: float, epsilon: float = 0.0
) -> DriftMatrix:
    p = params
    fast = a_H * tau / (N_s * gamma)
    A = np.diag([p.alpha / N_s, p.alpha / N_s, p.alpha_x, p.alpha_y / N_s, 0.5 * fast])
    A[1, 2] = A[2, 1] = -p.l_x / (2 * N_s)
    A[2, 3] = A[3, 2] = -p.v_y * p.l_y / (2 * N_s)
    A[2, 4] = A[4, 2] = -p.v_H * fast / 4
    b = np.array([0.0, 0.0, 0.0, epsilon * p.varpi * tau / (N_s * gamma), 0.0])
    return DriftMatrix(A, b)


def rho_closed_form(params: StabilityParams, a_H: float, tau: float, N_s: int, gamma: float) -> float:
    """Determinant of N_s A expanded by hand."""
    p = params
    slow = a_H * tau / gamma
    return (p.alpha * a_H * tau / (16 * gamma)) * (
        8 * N_s * p.alpha * p.alpha_x * p.alpha_y
        - p.alpha * p.alpha_y * slow * p.v_H**2
        - 2 * p.alpha_y * p.l_x**2
        - 2 * p.alpha * p.l_y**2 * p.v_y**2
    )


@dataclass(frozen=True)
class ErrorBound:
    rho: float
    eta: float
    C_b: float
    C: float
    bound: float
    lambda_min: float
    extra: dict = field(default_factory=dict)


def error_bound(
    params: StabilityParams, a_H: float, epsilon: float, tau: float, N_s: int, gamma: float
) -> ErrorBound:
    """Bound on e_x + e_y from the quadratic drift inequality.

    rho = |det(N_s A)|, eta = 2^(n/2 - 1) |N_s A|_F with n the size of the
    effective drift matrix, C_b = b^T A^{-1} b / 4 and
    C = (a_H tau / gamma) N (1 + v_H^2) + 4 N_s C_b.
    """
    verdict = stability_condition(params, a_H, tau, N_s, gamma)
    drift = drift_matrix(params, a_H, tau, N_s, gamma, epsilon).effective()
    A0 = N_s * drift.A
    minors = drift.leading_minors()
    if not (verdict.stable or (a_H == 0 and np.all(minors > 0))):
        raise StabilityError(
            f"stability margin {verdict.margin:.3g} <= 0; see stability_condition for the failing terms"
        )
    n = A0.shape[0]
    rho = abs(float(np.linalg.det(A0)))
    eta = 2 ** (n / 2 - 1) * float(np.linalg.norm(A0, "fro"))
    C_b = 0.25 * float(drift.b @ np.linalg.solve(drift.A, drift.b))
    C = (a_H * tau / gamma) * params.N * (1 + params.v_H**2) + 4 * N_s * C_b
    bound = (eta / rho) * (tau * params.sigma_bar + C)
    return ErrorBound(
        rho=rho,
        eta=eta,
        C_b=C_b,
        C=C,
        bound=bound,
        lambda_min=float(np.linalg.eigvalsh(drift.A).min()),
        extra={"margin": verdict.margin, "margin_literal": verdict.margin_literal},
    )


# --------------------------------------------------------------------------
# Mean continuous-time dynamics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    labels: tuple[str, ...]

    def block(self, name: str) -> np.ndarray:
        """Columns of one named block; labels read ``name:size``."""
        start = 0
        for label in self.labels:
            kind, size = label.split(":")
            if kind == name:
                return self.states[:, start : start + int(size)]
            start += int(size)
        raise KeyError(name)


def _primal_dual_drift(point: PrimalDualPoint, h, problem: RelayProblem) -> np.ndarray:
    q = problem.gains(h)
    u = problem.B @ (q * point.p)
    grad_p = q * (problem.B.T @ (point.lam / (1.0 + u))) - problem.V
    g = problem.N @ point.r - np.log1p(u)
    return np.concatenate([grad_p, g])


def integrate_mcts(
    x0: PrimalDualPoint,
    channel: LinkCsi | Sequence[LinkCsi],
    problem: RelayProblem,
    dt: float,
    n_steps: int | None = None,
    outer: OuterOracle | None = None,
) -> Trajectory:
    """Projected Euler integration of dx/dt = G(x, y, h), dy/dt = k(y, h_l).

    ``channel`` is one CSI (held fixed) or one CSI per step. ``k`` is the
    sample-average rate gradient at the inner stationary points.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if isinstance(channel, LinkCsi):
        if n_steps is None:
            raise ValueError("n_steps is required with a fixed channel")
        seq = [channel] * n_steps
    else:
        seq = list(channel)
    outer = outer or OuterOracle(problem)
    n = problem.n_links
    x = x0.x.copy()
    y = x0.r.copy()
    rows = [np.concatenate([x, y])]
    weights_key, nu_bar = None, None
    for csi in seq:
        if weights_key is None or not np.array_equal(weights_key, csi.h_l):
            nu_bar = saa_weights(csi.h_l, outer.samples, problem)
            weights_key = csi.h_l.copy()
        point = PrimalDualPoint(x[:n], x[n:], y)
        G = _primal_dual_drift(point, csi, problem)
        k = 1.0 / y - problem.N.T @ (nu_bar * np.exp(problem.N @ y))
        x = np.maximum(x + dt * G, 0.0)
        y = np.maximum(y + dt * k, R_FLOOR)
        rows.append(np.concatenate([x, y]))
    states = np.array(rows)
    times = dt * np.arange(len(rows))
    return Trajectory(times, states, (f"x:{problem.n_x}", f"y:{problem.n_flows}"))


# --------------------------------------------------------------------------
# Virtual stochastic dynamics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VsdsSetup:
    """Timescale and CSI inputs of the virtual error dynamics.

    ``h_l`` is the initial path loss and ``H_L`` the per-link drift rate
    of the virtual path loss (zero for static path loss).
    """

    a_H: float
    tau: float
    N_s: int
    gamma: float
    h_l: np.ndarray
    H_L: np.ndarray | None = None
    diffusion: bool = True
    scheme: str = "euler"

    def __post_init__(self) -> None:
        if self.scheme not in ("euler", "exponential"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def fading_rate(self) -> float:
        return self.a_H * self.tau / (self.N_s * self.gamma)


def vsds_labels(problem: RelayProblem) -> tuple[str, ...]:
    nx, ny, N = problem.n_x, problem.n_flows, problem.n_links
    return (f"x_gap:{nx}", f"y_gap:{ny}", f"x_err:{nx}", f"y_err:{ny}", f"h_s:{N}")


def integrate_vsds(
    u0: np.ndarray,
    setup: VsdsSetup,
    problem: RelayProblem,
    dt: float,
    n_steps: int,
    rng: np.random.Generator,
    outer: OuterOracle | None = None,
    comp: CompensationConfig | None = None,
    sigma_samples: int = 2048,
) -> Trajectory:
    """Euler-Maruyama integration of the virtual error dynamics.

    The state stacks the iterate-to-mean gaps (x_gap, y_gap), the
    mean-to-target gaps (x_err, y_err) and a real virtual fading state whose
    magnitude, floored like the physical channel, drives the gains. Targets
    x_hat and y* are recomputed by the oracle along the path. With
    ``scheme="exponential"`` the linear (x_gap, y_gap) block is advanced by
    its matrix exponential instead of an Euler step.
    """
    if dt <= 0 or n_steps < 0:
        raise ValueError("need dt > 0 and n_steps >= 0")
    outer = outer or OuterOracle(problem)
    comp = comp or CompensationConfig()
    nx, ny, N = problem.n_x, problem.n_flows, problem.n_links
    size = 2 * nx + 2 * ny + N
    u = np.asarray(u0, dtype=float).copy()
    if u.shape != (size,):
        raise ValueError(f"state must have length {size}")
    cut = np.cumsum([nx, ny, nx, ny])
    c = setup.fading_rate
    H_L = np.zeros(N) if setup.H_L is None else np.asarray(setup.H_L, dtype=float)
    h_l = np.asarray(setup.h_l, dtype=float).copy()
    path_rate = setup.tau / (setup.N_s * setup.gamma)
    inv_ns = 1.0 / setup.N_s
    K_x = np.hstack([np.zeros((ny, problem.n_links)), -problem.N.T])
    draws = np.random.default_rng(0).standard_normal((sigma_samples, N, 2)) @ np.array([1.0, 1j]) / np.sqrt(2.0)

    cache: dict = {}

    def slow_terms(h_l_now: np.ndarray):
        key = cache.get("key")
        if key is None or np.linalg.norm(h_l_now - key) > outer.cfg.cache_tol:
            y_star = outer.solve(h_l_now)
            nu_bar = saa_weights(h_l_now, outer.samples, problem)
            sig = covariance_sqrt(estimator_covariance(y_star, h_l_now, problem, draws))
            # no diffusion on rate coordinates pinned at the floor with outward drift
            k_star = 1.0 / y_star - problem.N.T @ (nu_bar * np.exp(problem.N @ y_star))
            pinned = (y_star <= R_FLOOR * (1 + 1e-9)) & (k_star < 0)
            sig[pinned, :] = 0.0
            sig[:, pinned] = 0.0
            psi = path_loss_sensitivity(h_l_now, problem, outer) if np.any(H_L) else np.zeros((ny, N))
            cache.update(key=h_l_now.copy(), y_star=y_star, nu_bar=nu_bar, sig=sig, psi=psi)
        return cache["y_star"], cache["nu_bar"], cache["sig"], cache["psi"]

    rows = [u.copy()]
    for _ in range(n_steps):
        x_gap, y_gap, x_err, y_err, hs = np.split(u, cut)
        y_star, nu_bar, sig, psi = slow_terms(h_l)
        csi = LinkCsi(hs.astype(complex), h_l)
        y_c = np.maximum(y_star + y_err, R_FLOOR)
        x_hat = solve_inner(y_c, csi, problem, outer.cfg)
        x_c = np.maximum(x_hat.x + x_err, 0.0)
        point_c = PrimalDualPoint(x_c[: problem.n_links], x_c[problem.n_links:], y_c)
        M_L, G_r = dual_ascent_jacobian(point_c, csi, problem)
        G_c = _primal_dual_drift(point_c, csi, problem)
        # coordinates resting at zero and pushed outward follow the boundary:
        # their gap moves with the (constant) outward drift until reflected
        frozen = (x_c <= comp.active_set_tol) & (G_c < 0)
        M_L[frozen, :] = 0.0
        G_r = G_r.copy()
        G_r[frozen, :] = 0.0
        K_y = np.diag(-1.0 / y_c**2)
        sens = sensitivities(x_hat, csi, problem, comp)
        S_h, S_y = sens.dx_dhs, sens.dx_dy
        k = 1.0 / y_c - problem.N.T @ (nu_bar * np.exp(problem.N @ y_c))

        lin = np.block([[M_L, G_r], [inv_ns * K_x, inv_ns * K_y]])
        gap_push = np.where(frozen, G_c, 0.0)
        forcing = np.concatenate([gap_push, inv_ns * (K_x @ x_err)])
        G_c[frozen] = 0.0
        z = np.concatenate([x_gap, y_gap])
        if setup.scheme == "exponential":
            z_new = expm(dt * lin) @ z + dt * forcing
        else:
            z_new = z + dt * (lin @ z + forcing)
        d_x_err = G_c + 0.5 * c * (S_h @ hs) - inv_ns * (S_y @ k)
        d_y_err = inv_ns * k + path_rate * (psi @ H_L)
        d_hs = -0.5 * c * hs

        x_err_new = x_err + dt * d_x_err
        y_err_new = y_err + dt * d_y_err
        hs_new = hs + dt * d_hs
        if setup.diffusion:
            sq = np.sqrt(dt)
            w_y = rng.standard_normal(ny)
            w_h = rng.standard_normal(N)
            z_new[nx:] += np.sqrt(setup.tau * inv_ns) * sq * (sig @ w_y)
            x_err_new -= np.sqrt(c) * sq * (S_h @ w_h)
            hs_new += np.sqrt(c) * sq * w_h
        h_l = h_l - dt * path_rate * H_L

        # reflection onto the domains of every underlying state
        y_star_new = slow_terms(h_l)[0]
        y_err_new = np.maximum(y_err_new, R_FLOOR - y_star_new)
        x_err_new = np.maximum(x_err_new, -x_hat.x)
        x_c_new = x_hat.x + x_err_new
        y_c_new = y_star_new + y_err_new
        z_new[:nx] = np.maximum(z_new[:nx], -x_c_new)
        z_new[nx:] = np.maximum(z_new[nx:], R_FLOOR - y_c_new)
        u = np.concatenate([z_new, x_err_new, y_err_new, hs_new])
        if not np.all(np.isfinite(u)):
            raise NumericalError("virtual dynamics diverged")
        rows.append(u.copy())
    states = np.array(rows)
    return Trajectory(dt * np.arange(len(rows)), states, vsds_labels(problem))


def vsds_initial_state(
    problem: RelayProblem, csi: LinkCsi, x_gap=None, y_gap=None, x_err=None, y_err=None
) -> np.ndarray:
    """Stack a VSDS state; unspecified blocks are zero and the fading block is |h_s|."""
    nx, ny = problem.n_x, problem.n_flows
    parts = [
        np.zeros(nx) if x_gap is None else np.asarray(x_gap, float),
        np.zeros(ny) if y_gap is None else np.asarray(y_gap, float),
        np.zeros(nx) if x_err is None else np.asarray(x_err, float),
        np.zeros(ny) if y_err is None else np.asarray(y_err, float),
        np.abs(csi.h_s).astype(float),
    ]
    return np.concatenate(parts)

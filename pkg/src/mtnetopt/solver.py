"""Two-timescale iteration engine with frame-boundary compensation.

Within a frame the short-term variable x = (p, lam) takes ``N_s`` projected
primal-dual steps against the CSI acquired at the frame boundary. Once per
frame the rates r take one projected ascent step. At each boundary, optional
compensation terms shift x and r by first-order estimates of how their
targets moved with the new CSI.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channel import LinkCsi
from .errors import CompensationError, ProjectionError
from .network import R_FLOOR, PrimalDualPoint, RelayProblem, second_derivatives

log = logging.getLogger(__name__)

ALGORITHMS = ("primal_dual", "projected_gradient")


@dataclass(frozen=True)
class StepSchedule:
    """Inner step ``gamma``; outer step ``mu0`` (constant) or ``mu0 / (n + mu_offset)``.

    The offset keeps the harmonic decay while capping the first outer steps,
    which would otherwise throw the rates onto their floor.
    """

    kind: str = "constant"
    gamma: float = 0.1
    mu0: float = 0.01
    mu_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "diminishing"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.gamma < 0 or self.mu0 < 0:
            raise ValueError("step sizes must be >= 0")
        if self.mu_offset < 0:
            raise ValueError("mu_offset must be >= 0")

    def mu(self, n_f: int) -> float:
        if self.kind == "constant":
            return self.mu0
        return self.mu0 / max(n_f + self.mu_offset, 1.0)


@dataclass(frozen=True)
class FrameClock:
    tau: float = 1e-3
    N_s: int = 30

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.N_s < 1:
            raise ValueError("need tau > 0 and N_s >= 1")

    def frame_of(self, n_s: int) -> int:
        return n_s // self.N_s


@dataclass(frozen=True)
class CompensationConfig:
    enabled: bool = True
    tikhonov_delta: float = 1e-8
    active_set_tol: float = 1e-6
    # a first-order correction larger than this multiple of the iterate scale
    # is rejected as untrustworthy
    max_step_ratio: float = 1.0

    def __post_init__(self) -> None:
        if self.tikhonov_delta < 0:
            raise ValueError("tikhonov_delta must be >= 0")
        if self.max_step_ratio <= 0:
            raise ValueError("max_step_ratio must be > 0")


@dataclass(frozen=True)
class Scaling:
    """Diagonal preconditioners for the inner (p, lam) and outer (r) steps."""

    x: np.ndarray
    y: np.ndarray

    @classmethod
    def identity(cls, problem: RelayProblem) -> "Scaling":
        return cls(np.ones(problem.n_x), np.ones(problem.n_flows))


# --------------------------------------------------------------------------
# Projections
# --------------------------------------------------------------------------


def project_nonneg(v, floor: float = 0.0) -> np.ndarray:
    """Componentwise max(v, floor)."""
    return np.maximum(np.asarray(v, dtype=float), floor)


def project_rates(v) -> np.ndarray:
    return project_nonneg(v, R_FLOOR)


ConstraintFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LinearConstraints:
    """The polytope {x : A x <= b} as a residual callback."""

    A: np.ndarray
    b: np.ndarray

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.A @ x - self.b, self.A


def _hildreth(
    v: np.ndarray, J: np.ndarray, b: np.ndarray, mu: np.ndarray, tol: float, max_sweeps: int
) -> tuple[np.ndarray, np.ndarray]:
    """Dual coordinate ascent for min 0.5 |z - v|^2 s.t. J z <= b."""
    norms = np.einsum("ij,ij->i", J, J)
    mu = mu.copy()
    z = v - J.T @ mu
    rows = [i for i in range(len(b)) if norms[i] > 0]
    for _ in range(max_sweeps):
        for i in rows:
            new = max(0.0, mu[i] + (J[i] @ z - b[i]) / norms[i])
            if new != mu[i]:
                z -= J[i] * (new - mu[i])
                mu[i] = new
        slack = J @ z - b
        if np.all(slack <= tol) and np.all(np.abs(mu * slack) <= tol):
            break
        # exact solve on the current support, accepted only if it is optimal
        support = mu > 0
        if np.any(support):
            Js = J[support]
            try:
                mu_s = np.linalg.solve(Js @ Js.T, Js @ v - b[support])
            except np.linalg.LinAlgError:
                continue
            if np.all(mu_s >= 0):
                trial_mu = np.zeros_like(mu)
                trial_mu[support] = mu_s
                trial_z = v - Js.T @ mu_s
                if np.all(J @ trial_z - b <= tol):
                    return trial_z, trial_mu
    return z, mu


def project_convex(
    v,
    constraints: ConstraintFn,
    tol: float = 1e-9,
    max_iter: int = 200,
    max_sweeps: int = 20000,
) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean projection onto {x : w(x) <= 0} for convex residuals ``w``.

    ``constraints(x)`` returns the residual vector and its Jacobian. Each
    outer pass linearises the constraints at the current point and solves the
    linearised projection by dual coordinate ascent. Returns the projected
    point and the constraint multipliers.
    """
    v = np.asarray(v, dtype=float)
    w, J = constraints(v)
    if np.all(w <= 0):
        return v.copy(), np.zeros(len(w))
    x = v.copy()
    mu = np.zeros(len(w))
    kkt = np.inf
    for _ in range(max_iter):
        w, J = constraints(x)
        x, mu = _hildreth(v, J, J @ x - w, mu, 0.1 * tol, max_sweeps)
        w, J = constraints(x)
        kkt = max(
            float(np.max(np.abs(x - v + J.T @ mu))),
            float(np.max(w, initial=0.0)),
            float(np.max(np.abs(mu * w))),
        )
        if kkt <= tol:
            return x, mu
    raise ProjectionError("projection did not converge", x, kkt)


def feasible_power_constraints(r: np.ndarray, q: np.ndarray, problem: RelayProblem) -> ConstraintFn:
    """Residual callback for X(r) = {p >= 0 : MAC residuals <= 0}."""
    Nr = problem.N @ r
    Q = problem.B * q
    eye = np.eye(problem.n_links)

    def fn(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = Q @ p
        w = np.concatenate([Nr - np.log1p(np.maximum(u, -0.5)), -p])
        J = np.vstack([-Q / (1.0 + u)[:, None], -eye])
        return w, J

    return fn


# --------------------------------------------------------------------------
# Inner and outer updates
# --------------------------------------------------------------------------


def _pd_slot(
    p: np.ndarray,
    lam: np.ndarray,
    Nr: np.ndarray,
    q: np.ndarray,
    problem: RelayProblem,
    gamma: float,
    sx: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    u = problem.B @ (q * p)
    grad_p = q * (problem.B.T @ (lam / (1.0 + u))) - problem.V
    g = Nr - np.log1p(u)
    if sx is None:
        return np.maximum(p + gamma * grad_p, 0.0), np.maximum(lam + gamma * g, 0.0)
    n = problem.n_links
    return (
        np.maximum(p + gamma * sx[:n] * grad_p, 0.0),
        np.maximum(lam + gamma * sx[n:] * g, 0.0),
    )


def _pg_slot(
    p: np.ndarray,
    r: np.ndarray,
    q: np.ndarray,
    problem: RelayProblem,
    gamma: float,
    sx: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Projected gradient on the power-cost inner problem.

    Multipliers are recovered from the projection: at a fixed point the
    projection multipliers equal gamma times the Lagrange multipliers.
    """
    scale = 1.0 if sx is None else sx[: problem.n_links]
    step = p - gamma * scale * problem.V
    if gamma == 0:
        return p.copy(), np.zeros(problem.W)
    p_new, mu = project_convex(step, feasible_power_constraints(r, q, problem))
    # convert multipliers of the log residuals to the Lagrangian's scale
    return p_new, mu[: problem.W] / gamma


def inner_step(
    point: PrimalDualPoint,
    h,
    problem: RelayProblem,
    schedule: StepSchedule,
    comp: CompensationConfig | None = None,
    d_hs=None,
    d_y=None,
    algorithm: str = "primal_dual",
    scaling: Scaling | None = None,
) -> PrimalDualPoint:
    """One short-term update of (p, lam) at fixed rates.

    Compensation is added before the projection when ``comp.enabled`` and
    either delta is given.
    """
    q = problem.gains(h)
    sx = None if scaling is None else scaling.x
    if algorithm == "primal_dual":
        p, lam = _pd_slot(point.p, point.lam, problem.N @ point.r, q, problem, schedule.gamma, sx)
    elif algorithm == "projected_gradient":
        p, lam = _pg_slot(point.p, point.r, q, problem, schedule.gamma, sx)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if comp is not None and comp.enabled and (d_hs is not None or d_y is not None):
        psi_p, psi_lam = compensation_x(point, h, d_hs, d_y, problem, comp)
        p = np.maximum(p + psi_p, 0.0)
        lam = np.maximum(lam + psi_lam, 0.0)
    return PrimalDualPoint(p, lam, point.r.copy())


def outer_gradient(point: PrimalDualPoint, problem: RelayProblem) -> np.ndarray:
    """dL/dr at the current inner iterate; the biased outer estimator."""
    return 1.0 / point.r - problem.N.T @ point.lam


def outer_step(
    point: PrimalDualPoint,
    h,
    problem: RelayProblem,
    schedule: StepSchedule,
    n_f: int,
    comp: CompensationConfig | None = None,
    d_hl=None,
    scaling: Scaling | None = None,
    gradient: np.ndarray | None = None,
) -> np.ndarray:
    """r' = max(r + mu_n * dL/dr + Psi_r, r_floor).

    ``gradient`` overrides the estimator (used to model delayed signalling).
    """
    k = outer_gradient(point, problem) if gradient is None else gradient
    if scaling is not None:
        k = scaling.y * k
    r = point.r + schedule.mu(n_f) * k
    if comp is not None and comp.enabled and d_hl is not None:
        r = r + compensation_y(point, h, d_hl, problem, comp)
    return project_rates(r)


# --------------------------------------------------------------------------
# Compensation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Sensitivities:
    """First-order response of the inner stationary point.

    ``dx_dhs``, ``dx_dhl`` and ``dx_dy`` stack (p, lam) rows against fading
    magnitudes, path loss and rates respectively.
    """

    dx_dhs: np.ndarray
    dx_dhl: np.ndarray
    dx_dy: np.ndarray
    active: np.ndarray


def masked_kkt_jacobian(
    point: PrimalDualPoint, h, problem: RelayProblem, comp: CompensationConfig
):
    """KKT Jacobian with pinned rows for inactive multipliers and zero powers.

    Returns the blocks from :func:`second_derivatives` with ``Gx`` replaced
    by the masked, damped matrix and the right-hand sides zeroed on pinned
    rows.
    """
    sd = second_derivatives(point, h, problem)
    n = problem.n_links
    # off-chain multipliers are transients of the iteration, not part of any
    # optimum; letting them in makes the solve degenerate
    active = (point.lam > comp.active_set_tol) & problem.decoding_chain(h)
    Gx = sd.Gx.copy()
    G_hs, G_hl, G_y = sd.G_hs.copy(), sd.G_hl.copy(), sd.G_y.copy()
    # powers resting on p = 0 and multipliers of inactive constraints stay put
    at_bound = point.p <= comp.active_set_tol
    pinned = np.concatenate([np.flatnonzero(at_bound), n + np.flatnonzero(~active)])
    Gx[pinned, :] = 0.0
    Gx[pinned, pinned] = 1.0
    G_hs[pinned] = 0.0
    G_hl[pinned] = 0.0
    G_y[pinned] = 0.0
    Gx = Gx + comp.tikhonov_delta * np.eye(Gx.shape[0])
    return Gx, G_hs, G_hl, G_y, active, sd


def _check_step(step: np.ndarray, scale: np.ndarray, comp: CompensationConfig) -> None:
    limit = comp.max_step_ratio * max(1.0, float(np.max(np.abs(scale))))
    size = float(np.max(np.abs(step), initial=0.0))
    if size > limit:
        raise CompensationError(f"compensation step {size:.3g} exceeds trust limit {limit:.3g}")


def _solve_checked(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise CompensationError(f"KKT Jacobian singular after damping: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise CompensationError("KKT Jacobian solve produced non-finite values")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise CompensationError(f"KKT Jacobian ill-conditioned (cond {cond:.2e})")
    return sol


def sensitivities(
    point: PrimalDualPoint, h, problem: RelayProblem, comp: CompensationConfig | None = None
) -> Sensitivities:
    """Implicit-function derivatives of (p, lam) in fading, path loss and rates."""
    comp = comp or CompensationConfig()
    Gx, G_hs, G_hl, G_y, active, _ = masked_kkt_jacobian(point, h, problem, comp)
    sol = _solve_checked(Gx, -np.hstack([G_hs, G_hl, G_y]))
    L = problem.n_links
    return Sensitivities(sol[:, :L], sol[:, L : 2 * L], sol[:, 2 * L :], active)


def compensation_x(
    point: PrimalDualPoint,
    h,
    d_hs,
    d_y,
    problem: RelayProblem,
    comp: CompensationConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve (Gx + delta I) u = -(G_hs d_hs + G_y d_y) and split u into (p, lam)."""
    n = problem.n_links
    if not comp.enabled:
        return np.zeros(n), np.zeros(problem.W)
    d_hs = np.zeros(n) if d_hs is None else np.asarray(d_hs, dtype=float)
    d_y = np.zeros(problem.n_flows) if d_y is None else np.asarray(d_y, dtype=float)
    if not (np.any(d_hs) or np.any(d_y)):
        return np.zeros(n), np.zeros(problem.W)
    Gx, G_hs, _, G_y, _, _ = masked_kkt_jacobian(point, h, problem, comp)
    u = _solve_checked(Gx, -(G_hs @ d_hs + G_y @ d_y))
    _check_step(u, point.x, comp)
    return u[:n], u[n:]


def reduced_outer_jacobians(
    point: PrimalDualPoint, h, problem: RelayProblem, comp: CompensationConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Total derivatives of dL/dr in r and h_l with (p, lam) following the KKT point.

    With the inner variables held fixed dL/dr does not depend on h_l at all,
    so the useful estimator differentiates through the multipliers:
    T_y = -diag(1/r^2) - N^T dlam/dr and T_hl = -N^T dlam/dh_l.
    """
    sens = sensitivities(point, h, problem, comp)
    n = problem.n_links
    T_y = np.diag(-1.0 / point.r**2) - problem.N.T @ sens.dx_dy[n:]
    T_hl = -problem.N.T @ sens.dx_dhl[n:]
    return T_y, T_hl


def compensation_y(
    point: PrimalDualPoint, h, d_hl, problem: RelayProblem, comp: CompensationConfig
) -> np.ndarray:
    """Psi_r = -(T_y + delta I)^{-1} T_hl d_hl."""
    d_hl = np.asarray(d_hl, dtype=float)
    if not comp.enabled or not np.any(d_hl):
        return np.zeros(problem.n_flows)
    T_y, T_hl = reduced_outer_jacobians(point, h, problem, comp)
    A = T_y + comp.tikhonov_delta * np.eye(problem.n_flows)
    psi = -_solve_checked(A, T_hl @ d_hl)
    _check_step(psi, point.r, comp)
    return psi


# --------------------------------------------------------------------------
# Frame state machine
# --------------------------------------------------------------------------


@dataclass
class TrackerState:
    """Iterate plus the bookkeeping needed for frame-boundary differences."""

    point: PrimalDualPoint
    csi: LinkCsi
    n_f: int = 0
    prev_r: np.ndarray | None = None
    n_inner: int = 0
    n_outer: int = 0
    # route prices N^T lam of recent frames, oldest first
    price_history: deque = field(default_factory=deque)

    @classmethod
    def start(cls, point: PrimalDualPoint, csi: LinkCsi) -> "TrackerState":
        return cls(point.copy(), csi, 0, point.r.copy())


@dataclass(frozen=True)
class FrameRecord:
    """What one frame produced.

    ``p`` and ``lam`` are sampled after the first slot of the frame, the
    moment the frame's decisions are first applied; ``r`` is the rate in
    force during the frame.
    """

    n_f: int
    p: np.ndarray
    lam: np.ndarray
    r: np.ndarray
    max_residual: float
    comp_fallback: bool


def run_frame(
    state: TrackerState,
    csi: LinkCsi,
    problem: RelayProblem,
    schedule: StepSchedule,
    clock: FrameClock,
    comp: CompensationConfig | None = None,
    algorithm: str = "primal_dual",
    scaling: Scaling | None = None,
    outer_delay: int = 0,
) -> tuple[TrackerState, FrameRecord]:
    """Advance one frame with freshly acquired CSI.

    Order at the boundary: the rate update (with path-loss compensation),
    then the inner compensation for the fading and rate changes, folded into
    the first of ``N_s`` inner slots.
    """
    comp = comp or CompensationConfig(enabled=False)
    n_f = state.n_f + 1
    point = state.point
    prev = state.csi
    fallback = False

    # rate update; with signalling delay each source sees a stale route
    # price but its own current rate
    state.price_history.append(problem.N.T @ point.lam)
    while len(state.price_history) > outer_delay + 1:
        state.price_history.popleft()
    k_used = 1.0 / point.r - state.price_history[0]
    d_hl = csi.h_l - prev.h_l
    try:
        r_new = outer_step(point, csi, problem, schedule, n_f, comp, d_hl, scaling, k_used)
    except CompensationError as exc:
        log.debug("frame %d: rate compensation skipped: %s", n_f, exc)
        fallback = True
        r_new = outer_step(point, csi, problem, schedule, n_f, None, None, scaling, k_used)
    d_y = r_new - point.r
    point = PrimalDualPoint(point.p, point.lam, r_new)

    d_hs = np.abs(csi.h_s) - np.abs(prev.h_s)
    q = problem.gains(csi)
    Nr = problem.N @ r_new
    sx = None if scaling is None else scaling.x
    psi_p = psi_lam = None
    if comp.enabled:
        try:
            psi_p, psi_lam = compensation_x(point, prev, d_hs, d_y, problem, comp)
        except CompensationError as exc:
            log.debug("frame %d: inner compensation skipped: %s", n_f, exc)
            fallback = True

    p, lam = point.p, point.lam
    sample = None
    for slot in range(clock.N_s):
        if algorithm == "primal_dual":
            p, lam = _pd_slot(p, lam, Nr, q, problem, schedule.gamma, sx)
        else:
            p, lam = _pg_slot(p, r_new, q, problem, schedule.gamma, sx)
        if slot == 0 and psi_p is not None:
            p = np.maximum(p + psi_p, 0.0)
            lam = np.maximum(lam + psi_lam, 0.0)
        if slot == 0:
            sample = (p.copy(), lam.copy())
    new_point = PrimalDualPoint(p, lam, r_new)
    residual = Nr - np.log1p(problem.B @ (q * sample[0]))
    record = FrameRecord(
        n_f=n_f,
        p=sample[0],
        lam=sample[1],
        r=r_new.copy(),
        max_residual=float(np.max(residual)),
        comp_fallback=fallback,
    )
    new_state = TrackerState(
        point=new_point,
        csi=csi,
        n_f=n_f,
        prev_r=point.r,
        n_inner=state.n_inner + clock.N_s,
        n_outer=state.n_outer + 1,
        price_history=state.price_history,
    )
    return new_state, record


def run_trajectory(
    state: TrackerState,
    csis: Sequence[LinkCsi],
    problem: RelayProblem,
    schedule: StepSchedule,
    clock: FrameClock,
    comp: CompensationConfig | None = None,
    **kwargs,
) -> tuple[TrackerState, list[FrameRecord]]:
    records = []
    for csi in csis:
        state, rec = run_frame(state, csi, problem, schedule, clock, comp, **kwargs)
        records.append(rec)
    return state, records

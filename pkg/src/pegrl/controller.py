"""Adaptive robust hybrid motion/force controller.

The control law tracks motion setpoints on the x-y (and rotation) axes while
regulating contact force along z.  It combines:

* a first-order internal state ``z`` whose gains are chosen so that driving
  the switching function ``s = xerr_dot + F1 xerr + F2 z`` to zero enforces
  the desired closed-loop impedance
  ``Lambda_d xerr_dd + D_d xerr_d + K_d xerr = -K_f ferr``,
* adjustable model compensation with an online uncertainty estimate D_hat,
* linear (-K_s s) and nonlinear robust (-h^2/(4 eta) s) feedback,
* a projection-type adaptation law that keeps |D_hat| <= D_hat_max.

All gain matrices are diagonal; the z-axis stiffness can be rescaled online
through :func:`regulate_stiffness` (the "alpha" action of the second policy
stage).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics
from .errors import ConfigError

STIFFNESS_Z_MIN = 100.0
STIFFNESS_Z_MAX = 500.0


def _diag(values) -> np.ndarray:
    a = np.asarray(values, dtype=float)
    return np.diag(a) if a.ndim == 1 else a.copy()


def damping_from_stiffness(K_d: np.ndarray, Lambda_d: np.ndarray) -> np.ndarray:
    """Critically damped target: D_d = 2 sqrt(K_d Lambda_d^-1) Lambda_d."""
    kd = np.diag(K_d)
    ld = np.diag(Lambda_d)
    return np.diag(2.0 * np.sqrt(kd * ld))


@dataclass
class DesiredDynamics:
    """Target impedance matrices (all diagonal 6x6)."""

    Lambda_d: np.ndarray
    D_d: np.ndarray
    K_d: np.ndarray
    K_f: np.ndarray

    def __post_init__(self):
        for name in ("Lambda_d", "D_d", "K_d", "K_f"):
            setattr(self, name, _diag(getattr(self, name)))
        if np.any(np.diag(self.Lambda_d) <= 0) or np.any(np.diag(self.K_d) <= 0):
            raise ConfigError("Lambda_d and K_d need strictly positive diagonals")

    @classmethod
    def default(cls) -> "DesiredDynamics":
        Lambda_d = np.diag([1.0, 1.0, 1.0, 0.01, 0.01, 0.01])
        K_d = np.diag([500.0, 500.0, 100.0, 1.0, 1.0, 1.0])
        return cls(
            Lambda_d=Lambda_d,
            D_d=damping_from_stiffness(K_d, Lambda_d),
            K_d=K_d,
            K_f=np.diag([0.0, 0.0, -0.5, 0.0, 0.0, 0.0]),
        )


def regulate_stiffness(base: DesiredDynamics, alpha: float) -> DesiredDynamics:
    """Rescale z-axis stiffness: K_d[z] = 100 + alpha (500 - 100), alpha in [0,1];
    the damping matrix is recomputed for critical damping."""
    alpha = float(np.clip(alpha, 0.0, 1.0))
    K_d = base.K_d.copy()
    K_d[2, 2] = STIFFNESS_Z_MIN + alpha * (STIFFNESS_Z_MAX - STIFFNESS_Z_MIN)
    return replace(
        base, K_d=K_d, D_d=damping_from_stiffness(K_d, base.Lambda_d)
    )


@dataclass
class HybridSplit:
    """Partition of the six operational axes into motion- and force-controlled."""

    motion_axes: tuple = (0, 1, 3, 4, 5)
    force_axes: tuple = (2,)

    def __post_init__(self):
        axes = sorted(self.motion_axes) + sorted(self.force_axes)
        if sorted(axes) != list(range(6)):
            raise ConfigError("motion/force axes must partition {0..5}")

    def force_mask(self) -> np.ndarray:
        m = np.zeros(6)
        m[list(self.force_axes)] = 1.0
        return m


@dataclass
class ControllerGains:
    """Feedback, robust, and adaptation gains (diagonal matrices)."""

    F1: np.ndarray = field(default_factory=lambda: np.diag(np.full(6, 10.0)))
    F2: np.ndarray = field(default_factory=lambda: np.diag(np.full(6, 10.0)))
    A: np.ndarray = field(default_factory=lambda: np.diag(np.full(6, 5.0)))
    K_s: np.ndarray = field(
        default_factory=lambda: np.diag([50.0, 50.0, 50.0, 1.0, 1.0, 1.0])
    )
    gamma_d: np.ndarray = field(default_factory=lambda: np.diag(np.full(6, 100.0)))
    eta: float = 1.0
    h: float | None = None  # None -> 2 * max(D_hat_max)
    D_hat_max: np.ndarray = field(
        default_factory=lambda: np.array([10.0, 10.0, 10.0, 2.0, 2.0, 2.0])
    )

    def __post_init__(self):
        for name in ("F1", "F2", "A", "K_s", "gamma_d"):
            m = _diag(getattr(self, name))
            if np.any(np.diag(m) <= 0):
                raise ConfigError(f"{name} must have strictly positive diagonal")
            setattr(self, name, m)
        self.D_hat_max = np.asarray(self.D_hat_max, dtype=float)
        if self.h is None:
            self.h = 2.0 * float(np.max(np.abs(self.D_hat_max)))
        if self.h <= 0 or self.eta <= 0:
            raise ConfigError("h and eta must be positive")

    @property
    def robust_gain(self) -> float:
        """Coefficient of the nonlinear robust term, h^2 / (4 eta)."""
        return self.h**2 / (4.0 * self.eta)


@dataclass
class ControllerState:
    """Per-episode mutable internals: z vector and uncertainty estimate."""

    z: np.ndarray = field(default_factory=lambda: np.zeros(6))
    D_hat: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def copy(self) -> "ControllerState":
        return ControllerState(self.z.copy(), self.D_hat.copy())


@dataclass
class Setpoint:
    """Desired motion trajectory plus force target.

    Force-axis entries of ``x_d`` hold the nominal contact position (where the
    peg bottom would rest on its current support); ``f_d`` is zero on motion
    axes.
    """

    x_d: np.ndarray
    xdot_d: np.ndarray = field(default_factory=lambda: np.zeros(6))
    xddot_d: np.ndarray = field(default_factory=lambda: np.zeros(6))
    f_d: np.ndarray = field(default_factory=lambda: np.zeros(6))


@dataclass
class TrackingErrors:
    x_err: np.ndarray
    xdot_err: np.ndarray
    f_err: np.ndarray


def tracking_errors(
    x: np.ndarray,
    xdot: np.ndarray,
    f_ext: np.ndarray,
    setpoint: Setpoint,
    split: HybridSplit,
) -> TrackingErrors:
    """x_err = x - x_d, f_err = (F_ext - F_d) masked to the force axes."""
    f_err = (f_ext - setpoint.f_d) * split.force_mask()
    return TrackingErrors(
        x_err=x - setpoint.x_d, xdot_err=xdot - setpoint.xdot_d, f_err=f_err
    )


def z_gains(desired: DesiredDynamics, gains: ControllerGains):
    """Gains of the z-state dynamics.

    K_vz = F2^-1 (Lambda_d^-1 D_d - F1 - A)
    K_pz = F2^-1 (Lambda_d^-1 K_d - A F1)
    K_fz = F2^-1 Lambda_d^-1 K_f
    """
    ld = np.diag(desired.Lambda_d)
    if np.any(ld == 0) or np.any(np.diag(gains.F2) == 0):
        raise ConfigError("Lambda_d and F2 must be invertible")
    Li = np.diag(1.0 / ld)
    F2i = np.diag(1.0 / np.diag(gains.F2))
    K_vz = F2i @ (Li @ desired.D_d - gains.F1 - gains.A)
    K_pz = F2i @ (Li @ desired.K_d - gains.A @ gains.F1)
    K_fz = F2i @ Li @ desired.K_f
    return K_vz, K_pz, K_fz


def update_internal_state(
    state: ControllerState,
    errors: TrackingErrors,
    zg,
    A: np.ndarray,
    dt: float,
) -> tuple[ControllerState, np.ndarray]:
    """One explicit-Euler step of
    zdot = -A z + K_pz x_err + K_vz xdot_err + K_fz f_err.

    Returns the advanced state and the zdot used (needed downstream for the
    equivalent acceleration).
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    K_vz, K_pz, K_fz = zg
    zdot = (
        -A @ state.z
        + K_pz @ errors.x_err
        + K_vz @ errors.xdot_err
        + K_fz @ errors.f_err
    )
    return ControllerState(state.z + zdot * dt, state.D_hat.copy()), zdot


def switching_function(
    errors: TrackingErrors, z: np.ndarray, gains: ControllerGains
) -> np.ndarray:
    """s = xdot_err + F1 x_err + F2 z."""
    return errors.xdot_err + gains.F1 @ errors.x_err + gains.F2 @ z


def sliding_init_z(errors: TrackingErrors, gains: ControllerGains) -> np.ndarray:
    """z that places the system on the sliding surface (s = 0) initially."""
    return -np.diag(1.0 / np.diag(gains.F2)) @ (
        errors.xdot_err + gains.F1 @ errors.x_err
    )


def control_wrench(
    op_terms: dynamics.OperationalTerms,
    setpoint: Setpoint,
    errors: TrackingErrors,
    s: np.ndarray,
    z: np.ndarray,
    zdot: np.ndarray,
    D_hat: np.ndarray,
    f_ext: np.ndarray,
    gains: ControllerGains,
) -> dict:
    """Operational-space control wrench and its three components.

    F_tau_m  = Lambda xdd_eq + mu xd_eq + Fg + D_hat - F_ext
    F_tau_s1 = -K_s s
    F_tau_s2 = -(h^2 / 4 eta) s
    """
    xd_eq = setpoint.xdot_d - gains.F1 @ errors.x_err - gains.F2 @ z
    xdd_eq = setpoint.xddot_d - gains.F1 @ errors.xdot_err - gains.F2 @ zdot
    F_tau_m = (
        op_terms.Lambda @ xdd_eq + op_terms.mu @ xd_eq + op_terms.Fg + D_hat - f_ext
    )
    F_tau_s1 = -gains.K_s @ s
    F_tau_s2 = -gains.robust_gain * s
    return {
        "F_tau_m": F_tau_m,
        "F_tau_s1": F_tau_s1,
        "F_tau_s2": F_tau_s2,
        "F_tau": F_tau_m + F_tau_s1 + F_tau_s2,
        "xd_eq": xd_eq,
        "xdd_eq": xdd_eq,
    }


def adapt_uncertainty(
    state: ControllerState,
    s: np.ndarray,
    gamma_d: np.ndarray,
    D_hat_max: np.ndarray,
    dt: float,
) -> ControllerState:
    """Projection-type adaptation: D_hat <- Proj(D_hat - gamma_d s dt).

    Componentwise clamp: a component sitting at its bound with an outward
    update stays frozen, so |D_hat_i| <= D_hat_max_i holds exactly for all t.
    """
    cand = state.D_hat - (np.diag(gamma_d) if gamma_d.ndim == 2 else gamma_d) * s * dt
    D_new = np.clip(cand, -D_hat_max, D_hat_max)
    return ControllerState(state.z.copy(), D_new)


def joint_torque(
    model,
    q: np.ndarray,
    qdot: np.ndarray,
    xdd_eq: np.ndarray,
    xd_eq: np.ndarray,
    D_hat: np.ndarray,
    f_ext: np.ndarray,
    s: np.ndarray,
    gains: ControllerGains,
    lambda_damp: float = dynamics.DEFAULT_PINV_DAMPING,
) -> np.ndarray:
    """Joint-space realization of the operational-space law:

    tau = M qdd_eq + C qd_eq + G + J^T (D_hat - F_ext - K_s s - (h^2/4 eta) s)
    with qd_eq = Jd xd_eq and qdd_eq = Jd (xdd_eq - Jdot qd_eq).
    """
    J = model.jacobian(q)
    dynamics._check_row_rank(J)
    Jd = dynamics.damped_pseudo_inverse(J, lambda_damp)
    qd_eq = Jd @ xd_eq
    qdd_eq = Jd @ (xdd_eq - model.jacobian_dot(q, qdot) @ qd_eq)
    wrench_fb = D_hat - f_ext - gains.K_s @ s - gains.robust_gain * s
    return (
        model.mass_matrix(q) @ qdd_eq
        + model.coriolis_matrix(q, qdot) @ qd_eq
        + model.gravity_vector(q)
        + J.T @ wrench_fb
    )


def controller_substep(
    op_terms: dynamics.OperationalTerms,
    x: np.ndarray,
    xdot: np.ndarray,
    f_ext: np.ndarray,
    setpoint: Setpoint,
    split: HybridSplit,
    state: ControllerState,
    zg,
    gains: ControllerGains,
    dt: float,
) -> tuple[np.ndarray, ControllerState, dict]:
    """One full control update at the inner rate.

    Returns (wrench F_tau, advanced controller state, diagnostics).  The
    wrench is computed with the pre-update D_hat; z and D_hat are then
    advanced one Euler step for the next call.
    """
    errors = tracking_errors(x, xdot, f_ext, setpoint, split)
    new_state, zdot = update_internal_state(state, errors, zg, gains.A, dt)
    s = switching_function(errors, state.z, gains)
    parts = control_wrench(
        op_terms, setpoint, errors, s, state.z, zdot, state.D_hat, f_ext, gains
    )
    new_state = adapt_uncertainty(
        ControllerState(new_state.z, state.D_hat), s, gains.gamma_d,
        gains.D_hat_max, dt,
    )
    diag = {"s": s, "errors": errors, **parts}
    return parts["F_tau"], new_state, diag

"""Rigid-body manipulator models, operational-space terms, and integrators.

Two concrete models:

* :class:`CartesianGantry6` -- six decoupled prismatic/rotary joints that map
  one-to-one onto the operational coordinates ``[px, py, pz, rx, ry, rz]``.
  J is the identity, C = 0, gravity acts on the z joint only.  This is the
  model the contact environment runs on.
* :class:`PlanarArm3` -- a three-revolute-link planar arm (task space
  ``[px, py, yaw]``) with analytic M, C, G derived from link Jacobians and
  Christoffel symbols.  It exercises the pseudo-inverse / joint-space mapping
  machinery in tests.

Orientation coordinates are fixed-axis small-angle deviations from the
nominal tool-down pose; the environment keeps roll/pitch clamped near zero,
so no quaternion handling is needed in the 6-vector controller math.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelStateError, SimulationDiverged, SingularityError

DEFAULT_PINV_DAMPING = 1e-6

# rank tolerance: smallest singular value below this aborts instead of letting
# the damping silently distort the dynamics
SINGULARITY_TOL = 1e-8


@dataclass
class JointState:
    """Joint positions and velocities (rad or m per joint)."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.q.shape != self.qdot.shape:
            raise ModelStateError("q and qdot dimensions differ")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise SimulationDiverged("non-finite joint state")

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.qdot.copy())


@dataclass
class OperationalState:
    """End-effector coordinates [px, py, pz, rx, ry, rz] and their rates."""

    x: np.ndarray
    xdot: np.ndarray


@dataclass
class OperationalTerms:
    """End-effector inertia, Coriolis matrix, and gravity wrench."""

    Lambda: np.ndarray
    mu: np.ndarray
    Fg: np.ndarray


@dataclass
class DisturbanceSignal:
    """Constant-plus-sinusoid joint-space disturbance for test injection."""

    const: np.ndarray
    amplitude: np.ndarray
    freq_hz: float = 0.0

    @classmethod
    def zero(cls, n: int) -> "DisturbanceSignal":
        return cls(np.zeros(n), np.zeros(n), 0.0)

    def __call__(self, t: float) -> np.ndarray:
        if self.freq_hz == 0.0:
            return self.const.copy()
        return self.const + self.amplitude * np.sin(2.0 * np.pi * self.freq_hz * t)


class CartesianGantry6:
    """Six decoupled joints; J = I, M = diag(masses), C = 0, G on z only."""

    joint_count = 6
    task_dim = 6

    def __init__(self, masses=(1.5, 1.5, 1.5, 0.5, 0.5, 0.5), gravity: float = 9.81):
        masses = np.asarray(masses, dtype=float)
        if masses.shape != (6,) or np.any(masses <= 0):
            raise ModelStateError("gantry needs 6 positive masses/inertias")
        self.masses = masses
        self.gravity = float(gravity)
        self.disturbance = DisturbanceSignal.zero(6)
        self._M = np.diag(masses)
        self._G = np.zeros(6)
        self._G[2] = masses[2] * self.gravity

    def mass_matrix(self, q):
        return self._M.copy()

    def coriolis_matrix(self, q, qdot):
        return np.zeros((6, 6))

    def gravity_vector(self, q):
        return self._G.copy()

    def jacobian(self, q):
        return np.eye(6)

    def jacobian_dot(self, q, qdot):
        return np.zeros((6, 6))

    def forward_kinematics(self, q):
        return np.asarray(q, dtype=float).copy()


class PlanarArm3:
    """Three-revolute-link planar arm (vertical plane), task space [px, py, yaw].

    M is assembled from the link COM Jacobians, C from the Christoffel
    symbols of the analytic dM/dq, and G from the potential gradient, so
    that dM/dt - 2C is exactly skew-symmetric.
    """

    joint_count = 3
    task_dim = 3

    def __init__(
        self,
        lengths=(0.4, 0.3, 0.2),
        masses=(2.0, 1.5, 0.8),
        com=None,
        inertias=None,
        gravity: float = 9.81,
    ):
        self.lengths = np.asarray(lengths, dtype=float)
        self.masses = np.asarray(masses, dtype=float)
        self.com = (
            np.asarray(com, dtype=float) if com is not None else self.lengths / 2.0
        )
        # uniform slender rods by default
        self.inertias = (
            np.asarray(inertias, dtype=float)
            if inertias is not None
            else self.masses * self.lengths**2 / 12.0
        )
        self.gravity = float(gravity)
        self.disturbance = DisturbanceSignal.zero(3)

    # --- internal geometry helpers -------------------------------------
    # The COM of link i sits at sum_{j<i} l_j e(T_j) + r_i e(T_i) with
    # T_j = q_1 + ... + q_{j+1} (cumulative angles) and e(t) = [cos t, sin t].

    def _angles(self, q):
        return np.cumsum(q)

    def _com_jacobians(self, q):
        """Linear COM Jacobians, shape (3 links, 2, 3)."""
        T = self._angles(q)
        ep = np.stack([-np.sin(T), np.cos(T)], axis=0)  # e'(T_j), shape (2,3)
        J = np.zeros((3, 2, 3))
        for i in range(3):
            for k in range(i + 1):
                for j in range(k, i):
                    J[i, :, k] += self.lengths[j] * ep[:, j]
                J[i, :, k] += self.com[i] * ep[:, i]
        return J

    def _com_jacobian_derivs(self, q):
        """d(COM Jacobian)/dq_m, shape (3 links, 3 m, 2, 3 k)."""
        T = self._angles(q)
        epp = np.stack([-np.cos(T), -np.sin(T)], axis=0)  # e''(T_j)
        dJ = np.zeros((3, 3, 2, 3))
        for i in range(3):
            for k in range(i + 1):
                for m in range(i + 1):
                    lo = max(k, m)
                    for j in range(lo, i):
                        dJ[i, m, :, k] += self.lengths[j] * epp[:, j]
                    dJ[i, m, :, k] += self.com[i] * epp[:, i]
        return dJ

    def mass_matrix(self, q):
        Jc = self._com_jacobians(q)
        M = np.zeros((3, 3))
        for i in range(3):
            M += self.masses[i] * Jc[i].T @ Jc[i]
            # angular part: omega_i = sum of qdot_0..i
            w = np.zeros(3)
            w[: i + 1] = 1.0
            M += self.inertias[i] * np.outer(w, w)
        return M

    def _mass_matrix_derivs(self, q):
        Jc = self._com_jacobians(q)
        dJc = self._com_jacobian_derivs(q)
        dM = np.zeros((3, 3, 3))  # dM[m] = dM/dq_m
        for m in range(3):
            for i in range(3):
                dM[m] += self.masses[i] * (dJc[i, m].T @ Jc[i] + Jc[i].T @ dJc[i, m])
        return dM

    def coriolis_matrix(self, q, qdot):
        dM = self._mass_matrix_derivs(q)
        C = np.zeros((3, 3))
        for k in range(3):
            for j in range(3):
                c = 0.0
                for m in range(3):
                    c += 0.5 * (dM[m, k, j] + dM[j, k, m] - dM[k, j, m]) * qdot[m]
                C[k, j] = c
        return C

    def gravity_vector(self, q):
        Jc = self._com_jacobians(q)
        G = np.zeros(3)
        for i in range(3):
            G += self.masses[i] * self.gravity * Jc[i, 1, :]
        return G

    def forward_kinematics(self, q):
        T = self._angles(q)
        px = float(np.sum(self.lengths * np.cos(T)))
        py = float(np.sum(self.lengths * np.sin(T)))
        return np.array([px, py, T[2]])

    def jacobian(self, q):
        T = self._angles(q)
        J = np.zeros((3, 3))
        for k in range(3):
            for j in range(k, 3):
                J[0, k] += -self.lengths[j] * np.sin(T[j])
                J[1, k] += self.lengths[j] * np.cos(T[j])
            J[2, k] = 1.0
        return J

    def jacobian_dot(self, q, qdot):
        T = self._angles(q)
        Tdot = np.cumsum(qdot)
        Jd = np.zeros((3, 3))
        for k in range(3):
            for j in range(k, 3):
                Jd[0, k] += -self.lengths[j] * np.cos(T[j]) * Tdot[j]
                Jd[1, k] += -self.lengths[j] * np.sin(T[j]) * Tdot[j]
        return Jd


def damped_pseudo_inverse(J: np.ndarray, lambda_damp: float = 0.0) -> np.ndarray:
    """J^T (J J^T + lambda^2 I)^-1; exact right inverse for full-row-rank J."""
    J = np.asarray(J, dtype=float)
    m = J.shape[0]
    JJt = J @ J.T + (lambda_damp**2) * np.eye(m)
    return J.T @ np.linalg.solve(JJt, np.eye(m))


def _check_row_rank(J: np.ndarray) -> None:
    sv = np.linalg.svd(J, compute_uv=False)
    if sv.size < J.shape[0] or sv[J.shape[0] - 1] < SINGULARITY_TOL:
        raise SingularityError(
            f"Jacobian row rank deficient (sigma_min={sv[-1]:.3e})"
        )


def forward_dynamics(model, state: JointState, tau, f_ext, d=None) -> np.ndarray:
    """qdd = M^-1 (tau + J^T F_ext - C qdot - G - d)."""
    q, qdot = state.q, state.qdot
    tau = np.asarray(tau, dtype=float)
    f_ext = np.asarray(f_ext, dtype=float)
    if tau.shape != (model.joint_count,):
        raise ModelStateError("tau dimension mismatch")
    M = model.mass_matrix(q)
    # symmetric PD check; cheap at these sizes
    if not np.allclose(M, M.T, atol=1e-9):
        raise ModelStateError("mass matrix not symmetric")
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as e:
        raise ModelStateError("mass matrix not positive definite") from e
    rhs = (
        tau
        + model.jacobian(q).T @ f_ext
        - model.coriolis_matrix(q, qdot) @ qdot
        - model.gravity_vector(q)
        - (np.zeros(model.joint_count) if d is None else np.asarray(d, dtype=float))
    )
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def operational_terms(
    model, state: JointState, lambda_damp: float = DEFAULT_PINV_DAMPING
) -> OperationalTerms:
    """Lambda = Jd^T M Jd, mu = Jd^T (C - M Jd Jdot) Jd, Fg = Jd^T G,
    with Jd the damped pseudo-inverse of J."""
    q, qdot = state.q, state.qdot
    J = model.jacobian(q)
    _check_row_rank(J)
    Jd = damped_pseudo_inverse(J, lambda_damp)
    M = model.mass_matrix(q)
    C = model.coriolis_matrix(q, qdot)
    Jdot = model.jacobian_dot(q, qdot)
    Lambda = Jd.T @ M @ Jd
    mu = Jd.T @ (C - M @ Jd @ Jdot) @ Jd
    Fg = Jd.T @ model.gravity_vector(q)
    return OperationalTerms(Lambda=Lambda, mu=mu, Fg=Fg)


def step(model, state: JointState, tau, f_ext, dt: float, d=None) -> JointState:
    """One semi-implicit Euler step: qdot' = qdot + qdd dt, q' = q + qdot' dt."""
    if dt <= 0:
        raise ModelStateError("dt must be positive")
    qdd = forward_dynamics(model, state, tau, f_ext, d)
    if not np.all(np.isfinite(qdd)):
        raise SimulationDiverged("non-finite joint acceleration")
    qdot = state.qdot + qdd * dt
    q = state.q + qdot * dt
    return JointState(q, qdot)


def forward_kinematics(model, q) -> np.ndarray:
    return model.forward_kinematics(np.asarray(q, dtype=float))

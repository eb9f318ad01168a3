import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pegrl.dynamics import (
    CartesianGantry6,
    DisturbanceSignal,
    JointState,
    PlanarArm3,
    damped_pseudo_inverse,
    forward_dynamics,
    forward_kinematics,
    operational_terms,
    step,
)
from pegrl.errors import ModelStateError


def test_forward_dynamics_1dof_direct():
    # feed a 6-dof gantry torque on x only; m=2 -> qdd = 2 m/s^2
    model = CartesianGantry6(masses=(2, 2, 2, 1, 1, 1), gravity=0.0)
    st0 = JointState(np.zeros(6), np.zeros(6))
    tau = np.array([4.0, 0, 0, 0, 0, 0])
    qdd = forward_dynamics(model, st0, tau, np.zeros(6))
    assert qdd[0] == pytest.approx(2.0)
    assert np.allclose(qdd[1:], 0.0)


def test_forward_dynamics_gravity_fall():
    model = CartesianGantry6()
    st0 = JointState(np.zeros(6), np.zeros(6))
    qdd = forward_dynamics(model, st0, np.zeros(6), np.zeros(6))
    assert qdd[2] == pytest.approx(-9.81)
    assert np.allclose(np.delete(qdd, 2), 0.0)


def test_forward_dynamics_checks_tau_dim():
    model = CartesianGantry6()
    st0 = JointState(np.zeros(6), np.zeros(6))
    with pytest.raises(ModelStateError):
        forward_dynamics(model, st0, np.zeros(3), np.zeros(6))


def test_arm_energy_conservation():
    # zero torque, zero gravity, zero disturbance: kinetic energy constant
    model = PlanarArm3(gravity=0.0)
    state = JointState(np.array([0.3, -0.5, 0.8]), np.array([0.7, -0.4, 0.3]))
    dt = 1e-4

    def ke(s):
        return 0.5 * s.qdot @ model.mass_matrix(s.q) @ s.qdot

    e0 = ke(state)
    for _ in range(10000):  # 1 s
        state = step(model, state, np.zeros(3), np.zeros(3), dt)
    assert abs(ke(state) - e0) / e0 < 1e-3


def test_gantry_operational_terms_identity():
    model = CartesianGantry6(masses=(2, 2, 2, 0.5, 0.5, 0.5))
    terms = operational_terms(model, JointState(np.zeros(6), np.zeros(6)))
    assert np.allclose(terms.Lambda, np.diag([2, 2, 2, 0.5, 0.5, 0.5]), atol=1e-8)
    assert np.allclose(terms.mu, 0.0)
    assert np.allclose(terms.Fg, [0, 0, 2 * 9.81, 0, 0, 0], atol=1e-8)


def test_arm_lambda_positive_definite():
    model = PlanarArm3()
    terms = operational_terms(model, JointState(np.array([0.4, 0.7, -0.3]), np.zeros(3)))
    assert np.allclose(terms.Lambda, terms.Lambda.T, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(terms.Lambda)) > 0


def test_arm_lambda_matches_dense_linear_algebra():
    # independent computation of Jd and Lambda with plain dense algebra
    model = PlanarArm3()
    q = np.array([0.25, 0.9, -0.6])
    s = JointState(q, np.array([0.1, 0.2, -0.1]))
    terms = operational_terms(model, s, lambda_damp=0.0)
    J = model.jacobian(q)
    M = model.mass_matrix(q)
    Jd_ref = J.T @ np.linalg.inv(J @ J.T)
    assert np.allclose(terms.Lambda, Jd_ref.T @ M @ Jd_ref, atol=1e-9)


def test_damped_pinv_identity_and_scaling():
    assert np.allclose(damped_pseudo_inverse(np.eye(6), 0.0), np.eye(6))
    assert np.allclose(damped_pseudo_inverse(2 * np.eye(6), 0.0), 0.5 * np.eye(6))


def test_damped_pinv_right_inverse_random_wide():
    rng = np.random.default_rng(7)
    for _ in range(20):
        Jt = rng.normal(size=(6, 3))  # J^T full column rank w.p. 1
        J = Jt.T
        Jd = damped_pseudo_inverse(J, 0.0)
        assert np.linalg.norm(J @ Jd - np.eye(3)) < 1e-10


def test_step_trivial_advection():
    model = CartesianGantry6(gravity=0.0)
    s = JointState(np.zeros(6), np.ones(6))
    s2 = step(model, s, np.zeros(6), np.zeros(6), 1e-3)
    assert np.allclose(s2.q, 1e-3)


def test_step_constant_acceleration_exact():
    model = CartesianGantry6(masses=np.ones(6), gravity=0.0)
    s = JointState(np.zeros(6), np.zeros(6))
    tau = np.zeros(6)
    tau[0] = 1.0
    for _ in range(1000):
        s = step(model, s, tau, np.zeros(6), 1e-3)
    assert abs(s.qdot[0] - 1.0) < 1e-12


def test_step_mass_spring_analytic():
    # 1-dof mass-spring via external force F = -k q on the x axis
    model = CartesianGantry6(masses=np.ones(6), gravity=0.0)
    k = 25.0
    s = JointState(np.zeros(6), np.zeros(6))
    s.q[0] = 0.1
    dt = 1e-4
    for _ in range(10000):
        f = np.zeros(6)
        f[0] = -k * s.q[0]
        s = step(model, s, np.zeros(6), f, dt)
    expected = 0.1 * np.cos(np.sqrt(k) * 1.0)
    assert abs(s.q[0] - expected) < 0.01 * abs(0.1)


def test_gantry_fk_identity():
    model = CartesianGantry6()
    q = np.array([0.1, -0.2, 0.3, 0.01, -0.02, 0.5])
    assert np.allclose(forward_kinematics(model, q), q)


def test_arm_fk_stretched():
    model = PlanarArm3(lengths=(0.4, 0.3, 0.2))
    x = forward_kinematics(model, np.zeros(3))
    assert np.allclose(x[:2], [0.9, 0.0])
    assert x[2] == pytest.approx(0.0)


def test_arm_jacobian_finite_difference():
    model = PlanarArm3()
    rng = np.random.default_rng(3)
    eps = 1e-6
    for _ in range(10):
        q = rng.uniform(-1.5, 1.5, size=3)
        J = model.jacobian(q)
        for i in range(3):
            dq = np.zeros(3)
            dq[i] = eps
            fd = (forward_kinematics(model, q + dq) - forward_kinematics(model, q)) / eps
            assert np.linalg.norm(fd - J[:, i]) < 1e-4


def test_arm_jacobian_dot_finite_difference():
    model = PlanarArm3()
    q = np.array([0.2, -0.7, 1.1])
    qdot = np.array([0.5, 0.3, -0.8])
    eps = 1e-7
    Jd = model.jacobian_dot(q, qdot)
    fd = (model.jacobian(q + qdot * eps) - model.jacobian(q)) / eps
    assert np.max(np.abs(Jd - fd)) < 1e-5


def test_arm_mass_matrix_vs_independent_assembly():
    # oracle: assemble M from numerically differentiated link COM positions
    model = PlanarArm3()
    rng = np.random.default_rng(11)
    eps = 1e-7

    def com_positions(q):
        T = np.cumsum(q)
        pts = []
        base = np.zeros(2)
        for i in range(3):
            c = base + model.com[i] * np.array([np.cos(T[i]), np.sin(T[i])])
            pts.append(c)
            base = base + model.lengths[i] * np.array([np.cos(T[i]), np.sin(T[i])])
        return np.array(pts)

    for _ in range(5):
        q = rng.uniform(-2, 2, size=3)
        Jc = np.zeros((3, 2, 3))
        p0 = com_positions(q)
        for k in range(3):
            dq = np.zeros(3)
            dq[k] = eps
            Jc[:, :, k] = (com_positions(q + dq) - p0) / eps
        M_ref = np.zeros((3, 3))
        for i in range(3):
            M_ref += model.masses[i] * Jc[i].T @ Jc[i]
            w = np.zeros(3)
            w[: i + 1] = 1.0
            M_ref += model.inertias[i] * np.outer(w, w)
        assert np.allclose(model.mass_matrix(q), M_ref, atol=1e-5)


def test_arm_coriolis_skew_symmetry():
    # dM/dt - 2C skew-symmetric along arbitrary (q, qdot)
    model = PlanarArm3()
    rng = np.random.default_rng(5)
    eps = 1e-7
    for _ in range(10):
        q = rng.uniform(-2, 2, size=3)
        qdot = rng.uniform(-1, 1, size=3)
        C = model.coriolis_matrix(q, qdot)
        Mdot = (model.mass_matrix(q + qdot * eps) - model.mass_matrix(q)) / eps
        S = Mdot - 2 * C
        assert np.max(np.abs(S + S.T)) < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mass_matrices_positive_definite(seed):
    rng = np.random.default_rng(seed)
    arm = PlanarArm3()
    q3 = rng.uniform(-np.pi, np.pi, size=3)
    assert np.min(np.linalg.eigvalsh(arm.mass_matrix(q3))) > 0
    gantry = CartesianGantry6()
    q6 = rng.uniform(-1, 1, size=6)
    assert np.min(np.linalg.eigvalsh(gantry.mass_matrix(q6))) > 0


def test_gantry_joint_equals_operational_step():
    model = CartesianGantry6()
    terms = operational_terms(model, JointState(np.zeros(6), np.zeros(6)))
    assert np.allclose(terms.Lambda, model.mass_matrix(np.zeros(6)))
    # identical joint-space and operational-space integration under same wrench
    s = JointState(np.zeros(6), np.zeros(6))
    f = np.array([1.0, -2.0, 3.0, 0.1, 0.0, -0.2])
    s_joint = step(model, s, f, np.zeros(6), 1e-3)  # tau = F since J = I
    s_op = step(model, s, np.zeros(6), f, 1e-3)  # same wrench as external force
    # gravity enters both equally; the two step paths coincide
    assert np.allclose(s_joint.q, s_op.q)
    assert np.allclose(s_joint.qdot, s_op.qdot)


def test_disturbance_signal():
    d = DisturbanceSignal(np.array([1.0, 0, 0]), np.array([0.5, 0, 0]), freq_hz=2.0)
    assert d(0.0)[0] == pytest.approx(1.0)
    assert d(0.125)[0] == pytest.approx(1.5)
    z = DisturbanceSignal.zero(6)
    assert np.all(z(3.7) == 0)

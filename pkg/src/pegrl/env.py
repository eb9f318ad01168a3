"""Peg-in-hole contact environment.

Geometry: a rigid peg (prism with one of seven cross-sections) welded to the
gantry end-effector, a table plane at ``plane_z`` with a shaft-shaped opening
(the peg polygon dilated by the clearance), and a hole bottom ``depth`` below
the plane.  Contact is a penalty model over sampled boundary points of the
peg bottom face: plane/lip support, inward wall forces, hole-bottom support,
each with spring-damper normal force and regularized Coulomb friction.

The per-step action is mapped to controller setpoints relative to the
current pose (object-frame displacement and yaw increment).  The
force-controlled z axis is anchored to the nominal contact position of the
current support (table plane, or hole bottom once the peg can descend), which
is what lets the impedance law both regulate a 0.5 N press and drive the
insertion without a scripted z trajectory.

Roll/pitch stay regulated near zero, so the contact geometry treats the peg
as an upright prism (yaw only); wall forces are applied at the bottom-ring
sample points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernel
from .controller import (
    ControllerGains,
    ControllerState,
    DesiredDynamics,
    HybridSplit,
    Setpoint,
    controller_substep,
    regulate_stiffness,
    z_gains,
)
from .dynamics import CartesianGantry6, JointState, operational_terms
from .dynamics import step as dynamics_step
from .errors import ConfigError, PegrlError
from .shapes import (
    HoleSpec,
    boundary_points,
    distance_to_boundary,
    fold_angle,
    make_shape,
    points_in_polygon,
    rot2d,
    wrap_angle,
)


class Stage(enum.IntEnum):
    STAGE1 = 1
    STAGE2 = 2
    FLAT = 3  # stage-2 spaces and rewards, trained from scratch

    @property
    def action_dim(self) -> int:
        return 3 if self is Stage.STAGE1 else 5

    def obs_dim(self, feature_dim: int) -> int:
        return feature_dim if self is Stage.STAGE1 else feature_dim + 12


@dataclass
class ContactParams:
    k_c: float = 1.0e4  # N/m per sampled point
    c_c: float = 50.0  # N s/m
    mu: float = 0.3
    v_eps: float = 1.0e-3  # m/s friction regularization
    n_boundary: int = 48  # boundary samples; corners always included

    def __post_init__(self):
        if min(self.k_c, self.c_c, self.mu, self.v_eps) <= 0:
            raise ConfigError("contact parameters must be positive")
        if self.n_boundary < 16:
            raise ConfigError("n_boundary must be >= 16")


@dataclass
class EpisodeConfig:
    """Task, offsets, contact, controller, and observation parameters."""

    shape: str = "square"
    clearance: float = 1.0e-3  # radial, metres
    d_ins: float = 0.010
    hole_depth_margin: float = 0.001  # shaft extends past the success depth

    # reset offset ranges (uniform sampling)
    max_xy_offset: float = 0.04
    max_z_offset: float = 0.05
    max_yaw_offset: float = np.deg2rad(60.0)
    hole_xy_range: float = 0.02
    randomize_hole_yaw: bool = True

    horizon: int = 200
    dt_policy: float = 0.02
    n_substeps: int = 20
    contact: ContactParams = field(default_factory=ContactParams)
    off_plane_radius: float = 0.08
    f_d: float = 0.5  # desired press force, N
    plane_z: float = 0.0

    masses: tuple = (1.5, 1.5, 1.5, 0.5, 0.5, 0.5)
    gravity: float = 9.81

    # per-step action bounds
    dxy_max: float = 0.005
    dz_max: float = 0.005
    dtheta_max: float = np.deg2rad(5.0)

    # observation conditioning
    feature_dim: int = 128
    oracle_noise: float = 0.005  # std on normalized oracle features
    force_scale: float = 10.0
    velocity_scale: float = 0.5
    force_lowpass_hz: float = 0.0  # 0 disables the first-order filter

    # controller gains (diagonal scalars; lin = x/y/z, rot = rx/ry/rz)
    gain_f1: float = 10.0
    gain_f2: float = 10.0
    gain_a: float = 5.0
    gain_ks_lin: float = 50.0
    gain_ks_rot: float = 1.0
    gain_gamma: float = 100.0
    eta: float = 1.0
    d_hat_max_lin: float = 10.0
    d_hat_max_rot: float = 2.0

    rigid_position: bool = False  # ablation: z motion-controlled, no force term
    use_fast_kernel: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        for name in ("max_xy_offset", "max_z_offset", "max_yaw_offset",
                     "hole_xy_range", "clearance", "dt_policy"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if isinstance(self.contact, dict):
            self.contact = ContactParams(**self.contact)

    def controller_gains(self) -> ControllerGains:
        return ControllerGains(
            F1=np.diag(np.full(6, self.gain_f1)),
            F2=np.diag(np.full(6, self.gain_f2)),
            A=np.diag(np.full(6, self.gain_a)),
            K_s=np.diag([self.gain_ks_lin] * 3 + [self.gain_ks_rot] * 3),
            gamma_d=np.diag(np.full(6, self.gain_gamma)),
            eta=self.eta,
            D_hat_max=np.array([self.d_hat_max_lin] * 3 + [self.d_hat_max_rot] * 3),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["masses"] = list(self.masses)
        return d


@dataclass
class EnvState:
    """Full simulator truth for one episode."""

    joint: JointState
    ctl: ControllerState
    hole: HoleSpec
    boundary_pts: np.ndarray  # peg-frame samples of the bottom boundary
    step_count: int = 0
    half_in_latch: bool = False
    alpha: float = 0.0
    f_ext: np.ndarray = field(default_factory=lambda: np.zeros(6))
    diverged: bool = False


# ---------------------------------------------------------------------------
# geometry predicates
# ---------------------------------------------------------------------------

def _pts_in_hole_frame(state: EnvState) -> np.ndarray:
    q = state.joint.q
    world = state.boundary_pts @ rot2d(q[5]).T + q[:2]
    return state.hole.world_to_hole(world)


def insertion_depth(state: EnvState) -> float:
    return state.hole.plane_z - state.joint.q[2]


def containment(state: EnvState) -> bool:
    ph = _pts_in_hole_frame(state)
    return bool(np.all(points_in_polygon(ph, state.hole.opening)))


def success(state: EnvState) -> bool:
    return insertion_depth(state) >= state.hole.shape.d_ins and containment(state)


def half_in(state: EnvState) -> bool:
    return insertion_depth(state) >= 0.5 * state.hole.shape.d_ins and containment(state)


def support_height(state: EnvState) -> float:
    """z of the nominal contact position for the peg bottom.

    Table plane while any boundary point sits over solid material; the hole
    bottom once the footprint fits the opening (or the peg is already
    physically inside -- hysteresis against containment flicker during wall
    contact)."""
    depth = insertion_depth(state)
    if depth > 5e-4 or containment(state):
        return state.hole.bottom_z
    return state.hole.plane_z


# ---------------------------------------------------------------------------
# contact model (reference path; the JIT kernel mirrors this exactly)
# ---------------------------------------------------------------------------

def contact_wrench(state: EnvState, params: ContactParams) -> np.ndarray:
    """Penalty contact wrench about the end-effector origin (world frame)."""
    q = state.joint.q
    qd = state.joint.qdot
    hole = state.hole
    F = np.zeros(6)
    if q[2] >= hole.plane_z:
        return F
    r = state.boundary_pts @ rot2d(q[5]).T  # world-frame offsets from EE
    world = r + q[:2]
    vpx = qd[0] - qd[5] * r[:, 1]
    vpy = qd[1] + qd[5] * r[:, 0]
    vpz = qd[2] + qd[3] * r[:, 1] - qd[4] * r[:, 0]
    vp = np.stack([vpx, vpy, vpz], axis=1)
    ph = hole.world_to_hole(world)
    inside = points_in_polygon(ph, hole.opening)
    dist, closest = distance_to_boundary(ph, hole.opening)
    pen_z = hole.plane_z - q[2]

    n = np.zeros((len(r), 3))
    pen = np.zeros(len(r))
    plane_case = (~inside) & (pen_z <= dist)
    wall_case = (~inside) & (pen_z > dist) & (dist >= 1e-12)
    bottom_case = inside & (q[2] < hole.bottom_z)
    n[plane_case | bottom_case, 2] = 1.0
    pen[plane_case] = pen_z
    pen[bottom_case] = hole.bottom_z - q[2]
    if np.any(wall_case):
        n_hole = (closest[wall_case] - ph[wall_case]) / dist[wall_case][:, None]
        n[wall_case, :2] = n_hole @ rot2d(hole.pose[2]).T  # hole frame -> world
        pen[wall_case] = dist[wall_case]
    active = plane_case | wall_case | bottom_case
    if not np.any(active):
        return F
    vn = np.sum(vp * n, axis=1)
    fn = params.k_c * pen + params.c_c * (-vn)
    fn = np.where(active, np.maximum(fn, 0.0), 0.0)
    f = fn[:, None] * n
    vt = vp - vn[:, None] * n
    vt_norm = np.linalg.norm(vt, axis=1)
    slip = vt_norm > 1e-12
    ff = np.zeros_like(f)
    ff[slip] = (
        -params.mu
        * fn[slip, None]
        * np.tanh(vt_norm[slip, None] / params.v_eps)
        * vt[slip]
        / vt_norm[slip, None]
    )
    f = f + ff
    F[:3] = f.sum(axis=0)
    F[3] = np.sum(r[:, 1] * f[:, 2])
    F[4] = np.sum(-r[:, 0] * f[:, 2])
    F[5] = np.sum(r[:, 0] * f[:, 1] - r[:, 1] * f[:, 0])
    return F


# ---------------------------------------------------------------------------
# action mapping
# ---------------------------------------------------------------------------

def action_to_setpoint(
    action: np.ndarray, x: np.ndarray, support_z: float, f_d_z: float
) -> Setpoint:
    """Object-frame displacement command -> absolute setpoint.

    pos_d = pos_c + R(yaw) * [dx, dy];  yaw_d = yaw + dtheta;
    z_d = nominal contact position (+ dz for five-component actions);
    roll/pitch regulate to zero."""
    dz = float(action[3]) if len(action) > 3 else 0.0
    x_d = np.zeros(6)
    x_d[:2] = x[:2] + rot2d(x[5]) @ np.asarray(action[:2], dtype=float)
    x_d[2] = support_z + dz
    x_d[5] = x[5] + float(action[2])
    f_d = np.zeros(6)
    f_d[2] = f_d_z
    return Setpoint(x_d=x_d, f_d=f_d)


def reward_stage1(state: EnvState, succeeded: bool, off_plane: bool) -> float:
    if succeeded:
        return 1.0
    if off_plane:
        return -1.0
    return 0.0


def reward_stage2(
    state: EnvState, succeeded: bool, newly_half_in: bool, terminal_failure: bool
) -> float:
    r = 0.0
    if newly_half_in:
        r += 0.5
    if succeeded:
        r += 1.0
    if terminal_failure and state.half_in_latch:
        r -= 0.1
    return r


class PegInHoleEnv:
    """MDP wrapper around the contact simulation and hybrid controller.

    ``feature_fn(env) -> (feature_dim,)`` supplies the visual feature vector;
    when omitted, the oracle feature mode emits the normalized ground-truth
    displacements plus noise, zero-padded to ``feature_dim``.
    """

    def __init__(self, config: EpisodeConfig, stage: Stage = Stage.STAGE1,
                 feature_fn=None):
        self.cfg = config
        self.stage = Stage(stage)
        self.feature_fn = feature_fn
        self.shape = make_shape(config.shape, d_ins=config.d_ins)
        self.model = CartesianGantry6(masses=config.masses, gravity=config.gravity)
        self.split = HybridSplit()
        self.gains = config.controller_gains()
        self.base_desired = DesiredDynamics.default()
        if config.rigid_position:
            K_d = self.base_desired.K_d.copy()
            K_d[2, 2] = 500.0
            from .controller import damping_from_stiffness

            self.base_desired = DesiredDynamics(
                Lambda_d=self.base_desired.Lambda_d,
                D_d=damping_from_stiffness(K_d, self.base_desired.Lambda_d),
                K_d=K_d,
                K_f=np.zeros((6, 6)),
            )
        self._boundary = np.ascontiguousarray(
            boundary_points(self.shape.cross_section, config.contact.n_boundary)
        )
        self._force_mask = self.split.force_mask()
        self._m_diag = np.asarray(config.masses, dtype=float)
        self._g_vec = self.model.gravity_vector(np.zeros(6))
        self._d_zero = np.zeros(6)
        self._gain_diags = tuple(
            np.ascontiguousarray(np.diag(m))
            for m in (self.gains.F1, self.gains.F2, self.gains.A,
                      self.gains.K_s, self.gains.gamma_d)
        )
        self._episode_idx = 0
        self.state: EnvState | None = None
        self._done = True
        self._force_obs = np.zeros(6)
        self._zg_cache = None  # (alpha, desired, K_vz, K_pz, K_fz diagonals)
        self.trace: list | None = None

    # -- helpers ---------------------------------------------------------

    def _desired_for(self, alpha: float) -> DesiredDynamics:
        if self.cfg.rigid_position:
            return self.base_desired
        return regulate_stiffness(self.base_desired, alpha)

    def _zgains_for(self, alpha: float):
        if self._zg_cache is None or self._zg_cache[0] != alpha:
            desired = self._desired_for(alpha)
            zg = z_gains(desired, self.gains)
            zg_diag = tuple(np.ascontiguousarray(np.diag(m)) for m in zg)
            self._zg_cache = (alpha, desired, zg, zg_diag)
        return self._zg_cache[1:]

    def relative_pose(self) -> tuple[float, float, float, float]:
        """(dx, dy, dtheta_folded, dtheta_raw): hole frame in the peg frame."""
        q = self.state.joint.q
        hole = self.state.hole
        dxy = rot2d(-q[5]) @ (hole.pose[:2] - q[:2])
        draw = wrap_angle(hole.pose[2] - q[5])
        return (
            float(dxy[0]),
            float(dxy[1]),
            fold_angle(draw, self.shape.symmetry_order),
            float(draw),
        )

    def oracle_features(self, rng: np.random.Generator) -> np.ndarray:
        dx, dy, dth, _ = self.relative_pose()
        feat = np.zeros(self.cfg.feature_dim, dtype=np.float32)
        scale_ang = np.pi / self.shape.symmetry_order
        vals = np.array([dx / 0.05, dy / 0.05, dth / scale_ang])
        vals = vals + rng.normal(0.0, self.cfg.oracle_noise, size=3)
        feat[:3] = vals
        return feat

    def _features(self) -> np.ndarray:
        if self.feature_fn is not None:
            return np.asarray(self.feature_fn(self), dtype=np.float32)
        return self.oracle_features(self._rng)

    def _ee_frame(self, vec6: np.ndarray) -> np.ndarray:
        R = rot2d(-self.state.joint.q[5])
        out = vec6.copy()
        out[:2] = R @ vec6[:2]
        out[3:5] = R @ vec6[3:5]
        return out

    def observation(self) -> np.ndarray:
        feat = self._features()
        if self.stage is Stage.STAGE1:
            return feat
        f_obs = self._ee_frame(self._force_obs) / self.cfg.force_scale
        v_obs = self._ee_frame(self.state.joint.qdot) / self.cfg.velocity_scale
        return np.concatenate([feat, f_obs, v_obs]).astype(np.float32)

    # -- MDP interface ---------------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        cfg = self.cfg
        if seed is None:
            seed_seq = np.random.SeedSequence((cfg.seed, self._episode_idx))
        else:
            seed_seq = np.random.SeedSequence(seed)
        self._episode_idx += 1
        self._rng = np.random.Generator(np.random.PCG64(seed_seq))
        rng = self._rng

        hx = rng.uniform(-cfg.hole_xy_range, cfg.hole_xy_range)
        hy = rng.uniform(-cfg.hole_xy_range, cfg.hole_xy_range)
        hyaw = rng.uniform(-np.pi, np.pi) if cfg.randomize_hole_yaw else 0.0
        off_x = rng.uniform(-cfg.max_xy_offset, cfg.max_xy_offset)
        off_y = rng.uniform(-cfg.max_xy_offset, cfg.max_xy_offset)
        off_z = rng.uniform(0.0, cfg.max_z_offset)
        off_yaw = rng.uniform(-cfg.max_yaw_offset, cfg.max_yaw_offset)

        hole = HoleSpec(
            shape=self.shape,
            clearance=cfg.clearance,
            pose=np.array([hx, hy, hyaw]),
            plane_z=cfg.plane_z,
            depth=cfg.d_ins + cfg.hole_depth_margin,
        )
        q = np.zeros(6)
        q[0] = hx + off_x
        q[1] = hy + off_y
        q[2] = cfg.plane_z + off_z
        q[5] = wrap_angle(hyaw + off_yaw)
        self.state = EnvState(
            joint=JointState(q, np.zeros(6)),
            ctl=ControllerState(),
            hole=hole,
            boundary_pts=self._boundary,
        )
        self._done = False
        self._force_obs = np.zeros(6)
        self._zg_cache = None
        if self.trace is not None:
            self.trace = []
        return self.observation()

    def step(self, action: np.ndarray):
        if self._done:
            raise PegrlError("episode is done; call reset()")
        cfg = self.cfg
        state = self.state
        action = np.asarray(action, dtype=float)
        expected = self.stage.action_dim
        if action.shape != (expected,):
            raise ConfigError(f"stage {self.stage} expects action shape ({expected},)")
        act = np.empty_like(action)
        act[0] = np.clip(action[0], -cfg.dxy_max, cfg.dxy_max)
        act[1] = np.clip(action[1], -cfg.dxy_max, cfg.dxy_max)
        act[2] = np.clip(action[2], -cfg.dtheta_max, cfg.dtheta_max)
        if expected == 5:
            act[3] = np.clip(action[3], -cfg.dz_max, cfg.dz_max)
            act[4] = np.clip(action[4], 0.0, 1.0)
            state.alpha = float(act[4]) if not cfg.rigid_position else 0.0

        was_half_in = state.half_in_latch
        desired, zg, zg_diag = self._zgains_for(state.alpha)
        sp = action_to_setpoint(
            act, state.joint.q, support_height(state),
            0.0 if cfg.rigid_position else cfg.f_d,
        )
        dt = cfg.dt_policy / cfg.n_substeps

        if cfg.use_fast_kernel:
            f_ext = np.zeros(6)
            flag = _kernel.run_policy_step(
                state.joint.q, state.joint.qdot, state.ctl.z, state.ctl.D_hat,
                sp.x_d, sp.f_d,
                zg_diag[0], zg_diag[1], zg_diag[2],
                *self._gain_diags, self.gains.D_hat_max,
                self.gains.robust_gain,
                self._force_mask,
                self._m_diag, self._g_vec, self._d_zero,
                cfg.n_substeps, dt,
                self._boundary, state.hole.opening,
                state.hole.pose[0], state.hole.pose[1],
                np.cos(state.hole.pose[2]), np.sin(state.hole.pose[2]),
                state.hole.plane_z, state.hole.bottom_z,
                cfg.contact.k_c, cfg.contact.c_c, cfg.contact.mu,
                cfg.contact.v_eps,
                f_ext,
            )
            state.f_ext = f_ext
            if flag != 0:
                state.diverged = True
        else:
            terms = operational_terms(self.model, state.joint)
            try:
                for _ in range(cfg.n_substeps):
                    f_ext = contact_wrench(state, cfg.contact)
                    tau, state.ctl, _diag = controller_substep(
                        terms, state.joint.q, state.joint.qdot, f_ext, sp,
                        self.split, state.ctl, zg, self.gains, dt,
                    )
                    state.joint = dynamics_step(
                        self.model, state.joint, tau, f_ext, dt
                    )
                state.f_ext = f_ext
            except PegrlError:
                state.diverged = True

        state.step_count += 1

        if state.diverged:
            succeeded = False
            off_plane = False
        else:
            succeeded = success(state)
            off_plane = (
                np.linalg.norm(state.joint.q[:2] - state.hole.pose[:2])
                > cfg.off_plane_radius
            )
            if half_in(state):
                state.half_in_latch = True
        newly_half_in = state.half_in_latch and not was_half_in
        done = (
            succeeded
            or off_plane
            or state.diverged
            or state.step_count >= cfg.horizon
        )
        terminal_failure = done and not succeeded
        if self.stage is Stage.STAGE1:
            reward = reward_stage1(state, succeeded, off_plane)
        else:
            reward = reward_stage2(state, succeeded, newly_half_in, terminal_failure)
        self._done = done
        self._force_obs = self._lowpass(state.f_ext)

        dx, dy, dth, draw = self.relative_pose() if not state.diverged else (
            0.0, 0.0, 0.0, 0.0,
        )
        info = {
            "delta_x": dx,
            "delta_y": dy,
            "delta_z": state.hole.plane_z - state.joint.q[2],
            "delta_theta": dth,
            "delta_theta_raw": draw,
            "depth": insertion_depth(state),
            "f_ext": state.f_ext.copy(),
            "success": succeeded,
            "half_in": state.half_in_latch,
            "off_plane": off_plane,
            "diverged": state.diverged,
            "alpha": state.alpha,
        }
        obs = (
            np.zeros(self.stage.obs_dim(cfg.feature_dim), dtype=np.float32)
            if state.diverged
            else self.observation()
        )
        if self.trace is not None:
            self.trace.append(
                {
                    "t": state.step_count * cfg.dt_policy,
                    "x": state.joint.q.copy(),
                    "f_ext": state.f_ext.copy(),
                    "reward": reward,
                    "action": act.copy(),
                }
            )
        return obs, reward, done, info

    def _lowpass(self, f_new: np.ndarray) -> np.ndarray:
        fc = self.cfg.force_lowpass_hz
        if fc <= 0:
            return f_new.copy()
        beta = 1.0 - np.exp(-2.0 * np.pi * fc * self.cfg.dt_policy)
        return self._force_obs + beta * (f_new - self._force_obs)

"""PPO with GAE and the two-stage hierarchical training procedure.

Policies are Gaussian over a normalized [-1, 1] action space with a
state-independent learned log-std; sampled actions are clamped to the bounds
(log-probs are evaluated at the stored clamped action, so the first-epoch
ratio is exactly 1).  The environment maps normalized actions to physical
displacement bounds; the stiffness-factor dimension maps through
clip(a, 0, 1) so a zero mean output starts at the soft base stiffness.

Rollout collection is episode-parallel: episodes are seeded by a global
counter and whole episodes are collected until the step budget is met, so
the resulting buffer is bit-identical for any worker count.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import nn, vision
from .env import EpisodeConfig, PegInHoleEnv, Stage
from .errors import ConfigError, TrainingDiverged

LOG_STD_MIN = float(np.log(1e-3))
LOG_STD_MAX = 0.0
_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# stage layouts
# ---------------------------------------------------------------------------

@dataclass
class StageSpec:
    """Observation/action layout plus feature source for one training stage."""

    stage: Stage
    feature_dim: int = 128
    use_force: bool = True
    use_velocity: bool = True
    feature_source: str = "oracle"  # "oracle" | "encoder"

    @property
    def obs_dim(self) -> int:
        if self.stage is Stage.STAGE1:
            return self.feature_dim
        return self.feature_dim + 6 * self.use_force + 6 * self.use_velocity

    @property
    def act_dim(self) -> int:
        return self.stage.action_dim

    def assemble(self, obs_env: np.ndarray) -> np.ndarray:
        """Select the enabled modality segments from the env observation."""
        if self.stage is Stage.STAGE1 or (self.use_force and self.use_velocity):
            return obs_env
        parts = [obs_env[: self.feature_dim]]
        if self.use_force:
            parts.append(obs_env[self.feature_dim : self.feature_dim + 6])
        if self.use_velocity:
            parts.append(obs_env[self.feature_dim + 6 : self.feature_dim + 12])
        return np.concatenate(parts)


def action_to_env(a: np.ndarray, cfg: EpisodeConfig, stage: Stage) -> np.ndarray:
    """Normalized [-1, 1] action -> physical units."""
    if stage is Stage.STAGE1:
        return np.array(
            [a[0] * cfg.dxy_max, a[1] * cfg.dxy_max, a[2] * cfg.dtheta_max]
        )
    return np.array(
        [
            a[0] * cfg.dxy_max, a[1] * cfg.dxy_max, a[2] * cfg.dtheta_max,
            a[3] * cfg.dz_max, np.clip(a[4], 0.0, 1.0),
        ]
    )


# ---------------------------------------------------------------------------
# policy / value networks
# ---------------------------------------------------------------------------

class GaussianPolicy:
    """Mean MLP (2 x 32 tanh) + state-independent log-std per action dim."""

    kind = "gaussian_policy"

    def __init__(self, obs_dim: int, act_dim: int, rng=None,
                 log_std_init: float = 0.5, hidden: int = 32,
                 out_scale: float = 0.01):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.hidden = hidden
        self.mean_net = nn.Network.mlp(
            [obs_dim, hidden, hidden, act_dim], hidden=nn.Tanh, rng=rng
        )
        # small output-layer init: the starting policy dithers around zero
        # instead of drifting off the plane along a random mean bias
        if rng is not None:
            self.mean_net.layers[-1].params["W"] *= out_scale
        self.log_std = np.full(
            act_dim, np.clip(np.log(log_std_init), LOG_STD_MIN, LOG_STD_MAX),
            dtype=np.float32,
        )

    # -- distribution ------------------------------------------------------

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        m = self.mean_net.forward(obs[None].astype(np.float32))[0]
        return np.clip(m, -1.0, 1.0)

    def act(self, obs: np.ndarray, rng) -> tuple[np.ndarray, float]:
        m = self.mean_net.forward(obs[None].astype(np.float32))[0]
        std = np.exp(self.log_std)
        a = np.clip(m + std * rng.standard_normal(self.act_dim), -1.0, 1.0)
        logp = float(self._log_prob(a[None], m[None], std)[0])
        return a.astype(np.float32), logp

    @staticmethod
    def _log_prob(a, mean, std):
        z = (a - mean) / std
        return -0.5 * np.sum(z * z + _LOG_2PI, axis=1) - np.sum(np.log(std))

    def evaluate_actions(self, obs: np.ndarray, actions: np.ndarray):
        mean = self.mean_net.forward(obs.astype(np.float32))
        std = np.exp(self.log_std).astype(np.float64)
        logp = self._log_prob(actions.astype(np.float64), mean, std)
        entropy = float(np.sum(self.log_std + 0.5 * (_LOG_2PI + 1.0)))
        return logp, entropy, mean, std

    # -- container protocol -------------------------------------------------

    def params(self) -> dict:
        out = {f"mean.{k}": v for k, v in self.mean_net.params().items()}
        out["log_std"] = self.log_std
        return out

    def spec(self) -> dict:
        return {
            "kind": self.kind, "obs_dim": self.obs_dim,
            "act_dim": self.act_dim, "hidden": self.hidden,
            "mean": self.mean_net.spec(),
        }

    def fingerprint(self) -> str:
        return nn.topology_fingerprint(self.spec())

    def copy(self) -> "GaussianPolicy":
        p = GaussianPolicy(self.obs_dim, self.act_dim, hidden=self.hidden)
        nn.load_params(p, {k: v.copy() for k, v in self.params().items()})
        return p


def _policy_from_spec(spec: dict) -> GaussianPolicy:
    return GaussianPolicy(spec["obs_dim"], spec["act_dim"],
                          hidden=spec.get("hidden", 32))


nn.register_network_kind("gaussian_policy", _policy_from_spec)


def make_value_net(obs_dim: int, rng=None, hidden: int = 32) -> nn.Network:
    return nn.Network.mlp([obs_dim, hidden, hidden, 1], hidden=nn.Tanh, rng=rng)


# ---------------------------------------------------------------------------
# returns and advantages
# ---------------------------------------------------------------------------

def discounted_return(rewards, gamma: float) -> float:
    """Sum of gamma^t r_t."""
    if not (0.0 < gamma <= 1.0):
        raise ConfigError("gamma must be in (0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


@dataclass
class TrajectoryBuffer:
    """Flat on-policy storage; episodes are contiguous and complete."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray  # 1.0 at the final step of each episode
    episode_returns: list = field(default_factory=list)
    episode_successes: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    alpha_mean: float = 0.0

    def __len__(self):
        return len(self.rewards)

    @property
    def saturation_fraction(self) -> float:
        return float(np.mean(np.abs(self.actions) >= 0.999))


def gae_advantages(buffer: TrajectoryBuffer, gamma: float, lam: float):
    """A_t = delta_t + gamma lam (1 - done_t) A_{t+1};
    delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t.  Returns (adv, ret)."""
    r, v, d = buffer.rewards, buffer.values, buffer.dones
    n = len(r)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        v_next = 0.0 if d[t] else v[t + 1]
        delta = r[t] + gamma * v_next - v[t]
        last = delta + gamma * lam * (0.0 if d[t] else last)
        adv[t] = last
    return adv, adv + v


# ---------------------------------------------------------------------------
# rollout collection (episode-parallel, deterministic)
# ---------------------------------------------------------------------------

def _blob(net) -> tuple:
    return (net.spec(), {k: v.copy() for k, v in net.params().items()})


def _from_blob(blob):
    net = nn.network_from_spec(blob[0])
    nn.load_params(net, blob[1])
    return net


def _make_feature_fn(encoder_blob):
    if encoder_blob is None:
        return None
    return vision.make_feature_fn(_from_blob(encoder_blob))


def run_episode(env, policy, value, stage_spec: StageSpec, seed: int,
                deterministic: bool = False):
    """One complete episode; returns per-step arrays and episode stats."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1))))
    obs_env = env.reset(seed=seed)
    obs = stage_spec.assemble(obs_env)
    rows = {k: [] for k in ("obs", "actions", "log_probs", "rewards", "values",
                            "dones")}
    done = False
    success = False
    alphas = []
    while not done:
        if deterministic:
            a = policy.mean_action(obs)
            logp = 0.0
        else:
            a, logp = policy.act(obs, rng)
        v = float(value.forward(obs[None].astype(np.float32))[0, 0]) if value else 0.0
        obs_env, r, done, info = env.step(action_to_env(a, env.cfg, env.stage))
        rows["obs"].append(obs)
        rows["actions"].append(a)
        rows["log_probs"].append(logp)
        rows["rewards"].append(r)
        rows["values"].append(v)
        rows["dones"].append(float(done))
        obs = stage_spec.assemble(obs_env)
        success = bool(info["success"])
        if env.stage is not Stage.STAGE1:
            alphas.append(info["alpha"])
    return {
        "obs": np.asarray(rows["obs"], dtype=np.float32),
        "actions": np.asarray(rows["actions"], dtype=np.float32),
        "log_probs": np.asarray(rows["log_probs"]),
        "rewards": np.asarray(rows["rewards"]),
        "values": np.asarray(rows["values"]),
        "dones": np.asarray(rows["dones"]),
        "success": success,
        "alpha_mean": float(np.mean(alphas)) if alphas else 0.0,
    }


def _worker_episodes(args):
    (env_cfg_dict, stage_val, spec_flags, policy_blob, value_blob,
     encoder_blob, seeds, deterministic) = args
    cfg = EpisodeConfig(**env_cfg_dict)
    stage_spec = StageSpec(stage=Stage(stage_val), **spec_flags)
    env = PegInHoleEnv(cfg, stage_spec.stage,
                       feature_fn=_make_feature_fn(encoder_blob))
    policy = _from_blob(policy_blob)
    value = _from_blob(value_blob) if value_blob else None
    return [
        run_episode(env, policy, value, stage_spec, s, deterministic)
        for s in seeds
    ]


def collect_rollouts(policy, value, env_cfg: EpisodeConfig,
                     stage_spec: StageSpec, n_steps: int, seed_start: int,
                     n_workers: int = 1, encoder=None,
                     pool: ProcessPoolExecutor | None = None
                     ) -> tuple[TrajectoryBuffer, int]:
    """Collect whole episodes (seeded seed_start, seed_start+1, ...) until at
    least n_steps env steps; returns (buffer, next_seed).  The episode set is
    a deterministic function of the nets and seeds only, so any worker count
    yields the same buffer."""
    spec_flags = dict(
        feature_dim=stage_spec.feature_dim, use_force=stage_spec.use_force,
        use_velocity=stage_spec.use_velocity,
        feature_source=stage_spec.feature_source,
    )
    policy_blob = _blob(policy)
    value_blob = _blob(value) if value is not None else None
    encoder_blob = _blob(encoder) if encoder is not None else None
    cfg_dict = env_cfg.to_dict()

    episodes = []
    total = 0
    next_seed = seed_start
    est_len = 100.0
    env_inline = None
    while total < n_steps:
        batch = int(np.ceil((n_steps - total) / est_len))
        seeds = list(range(next_seed, next_seed + batch))
        next_seed += batch
        if n_workers <= 1 or pool is None:
            if env_inline is None:
                env_inline = PegInHoleEnv(
                    env_cfg, stage_spec.stage,
                    feature_fn=_make_feature_fn(encoder_blob),
                )
            results = [
                run_episode(env_inline, policy, value, stage_spec, s)
                for s in seeds
            ]
        else:
            chunks = [seeds[i::n_workers] for i in range(n_workers)]
            futures = [
                pool.submit(
                    _worker_episodes,
                    (cfg_dict, int(stage_spec.stage), spec_flags, policy_blob,
                     value_blob, encoder_blob, chunk, False),
                )
                for chunk in chunks if chunk
            ]
            by_seed = {}
            for fut, chunk in zip(futures, [c for c in chunks if c]):
                for s, ep in zip(chunk, fut.result()):
                    by_seed[s] = ep
            results = [by_seed[s] for s in seeds]
        for ep in results:
            episodes.append(ep)
            total += len(ep["rewards"])
        est_len = max(20.0, total / len(episodes))

    buffer = TrajectoryBuffer(
        obs=np.concatenate([e["obs"] for e in episodes]),
        actions=np.concatenate([e["actions"] for e in episodes]),
        log_probs=np.concatenate([e["log_probs"] for e in episodes]),
        rewards=np.concatenate([e["rewards"] for e in episodes]),
        values=np.concatenate([e["values"] for e in episodes]),
        dones=np.concatenate([e["dones"] for e in episodes]),
        episode_returns=[float(np.sum(e["rewards"])) for e in episodes],
        episode_successes=[e["success"] for e in episodes],
        episode_lengths=[len(e["rewards"]) for e in episodes],
        alpha_mean=float(np.mean([e["alpha_mean"] for e in episodes])),
    )
    return buffer, next_seed


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

@dataclass
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 10
    minibatch: int = 64
    lr: float = 3e-4
    rollout_steps: int = 2048
    total_steps: int = 300_000
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    n_workers: int = 1
    log_std_init: float = 0.5

    # adaptive curriculum over the initial offset ranges: sparse success is
    # unreachable by dithering at the full +/-4 cm, +/-60 deg start set, so
    # training begins with a scaled range and expands once the rollout
    # success rate clears the threshold.  Evaluation always runs the full
    # task; this only schedules the training start-state distribution.
    curriculum: bool = True
    curriculum_start: float = 0.15
    curriculum_step: float = 0.15
    curriculum_threshold: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("gamma must be in (0, 1]")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError("lambda must be in [0, 1]")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")


def ppo_update(policy: GaussianPolicy, value: nn.Network,
               buffer: TrajectoryBuffer, cfg: PPOConfig, rng,
               pi_opt: nn.Adam, v_opt: nn.Adam) -> dict:
    """Clipped-surrogate ascent with value regression and entropy bonus."""
    adv, ret = gae_advantages(buffer, cfg.gamma, cfg.lam)
    adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(buffer)
    obs = buffer.obs
    actions = buffer.actions.astype(np.float64)
    logp_old = buffer.log_probs

    clip_fracs, kls, pi_losses, v_losses = [], [], [], []
    entropy = 0.0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for k in range(0, n, cfg.minibatch):
            mb = perm[k : k + cfg.minibatch]
            if len(mb) < 2:
                continue
            logp, entropy, mean, std = policy.evaluate_actions(
                obs[mb], actions[mb]
            )
            ratio = np.exp(logp - logp_old[mb])
            a_mb = adv_n[mb]
            surr1 = ratio * a_mb
            surr2 = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * a_mb
            pi_loss = -np.mean(np.minimum(surr1, surr2))
            if not np.isfinite(pi_loss):
                raise TrainingDiverged("NaN policy loss")
            # gradient flows only through the unclipped branch
            active = surr1 <= surr2
            dlogp = np.where(active, -a_mb * ratio, 0.0) / len(mb)
            z = (actions[mb] - mean) / std
            dmean = (dlogp[:, None] * z / std).astype(np.float32)
            dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)
            dlog_std -= cfg.entropy_coef  # d(-c_e * H)/d log_std
            grads, _ = policy.mean_net.backward(dmean)
            pg = {f"mean.{k2}": v2 for k2, v2 in grads.items()}
            pg["log_std"] = dlog_std.astype(np.float32)
            pi_opt.step(policy.params(), pg)
            policy.log_std[:] = np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX)

            v_pred = value.forward(obs[mb])[:, 0]
            v_err = v_pred - ret[mb]
            v_loss = float(np.mean(v_err**2))
            if not np.isfinite(v_loss):
                raise TrainingDiverged("NaN value loss")
            dv = (cfg.value_coef * 2.0 * v_err / len(mb)).astype(np.float32)
            vgrads, _ = value.backward(dv[:, None])
            v_opt.step(value.params(), vgrads)

            clip_fracs.append(float(np.mean(np.abs(ratio - 1) > cfg.clip)))
            kls.append(float(np.mean(logp_old[mb] - logp)))
            pi_losses.append(float(pi_loss))
            v_losses.append(v_loss)

    return {
        "clip_frac": float(np.mean(clip_fracs)),
        "approx_kl": float(np.mean(kls)),
        "pi_loss": float(np.mean(pi_losses)),
        "v_loss": float(np.mean(v_losses)),
        "entropy": entropy,
        "sat_frac": buffer.saturation_fraction,
    }


# ---------------------------------------------------------------------------
# stage-2 initialization from the stage-1 visuomotor policy
# ---------------------------------------------------------------------------

def _expand_first_dense(net: nn.Network, old_dim: int, new_dim: int) -> None:
    layer = net.layers[0]
    W = np.zeros((layer.n_out, new_dim), dtype=np.float32)
    W[:, :old_dim] = layer.params["W"][:, :old_dim]
    layer.params["W"] = W
    layer.n_in = new_dim


def init_stage2_from_stage1(policy1: GaussianPolicy, value1: nn.Network,
                            stage2: StageSpec, rng,
                            new_weight_scale: float = 0.01,
                            log_std_new: float = 0.5):
    """Copy shared weights; zero-init the new observation columns (so padded
    observations reproduce stage-1 outputs exactly); give the new action rows
    (dz, alpha) small random weights and zero bias so dz ~ 0 and the
    stiffness factor starts at 0."""
    if stage2.stage is Stage.STAGE1:
        raise ConfigError("target spec must be stage 2 / flat")
    obs1, obs2 = policy1.obs_dim, stage2.obs_dim
    act1, act2 = policy1.act_dim, stage2.act_dim
    policy2 = GaussianPolicy(obs2, act2, rng=None, hidden=policy1.hidden)
    nn.load_params(
        policy2.mean_net,
        {k: v.copy() for k, v in policy1.mean_net.params().items()}
        | {"0.W": _expanded(policy1.mean_net.layers[0].params["W"], obs2)}
        | {
            "4.W": _expanded_rows(
                policy1.mean_net.layers[4].params["W"], act2, rng,
                new_weight_scale,
            ),
            "4.b": _expanded_bias(policy1.mean_net.layers[4].params["b"], act2),
        },
    )
    policy2.log_std[:act1] = policy1.log_std
    policy2.log_std[act1:] = np.clip(
        np.log(log_std_new), LOG_STD_MIN, LOG_STD_MAX
    )

    value2 = make_value_net(obs2)
    nn.load_params(
        value2,
        {k: v.copy() for k, v in value1.params().items()}
        | {"0.W": _expanded(value1.layers[0].params["W"], obs2)},
    )
    return policy2, value2


def _expanded(W: np.ndarray, new_in: int) -> np.ndarray:
    out = np.zeros((W.shape[0], new_in), dtype=np.float32)
    out[:, : W.shape[1]] = W
    return out


def _expanded_rows(W: np.ndarray, new_out: int, rng, scale: float) -> np.ndarray:
    out = np.zeros((new_out, W.shape[1]), dtype=np.float32)
    out[: W.shape[0]] = W
    out[W.shape[0] :] = (
        rng.standard_normal((new_out - W.shape[0], W.shape[1])) * scale
    ).astype(np.float32)
    return out


def _expanded_bias(b: np.ndarray, new_out: int) -> np.ndarray:
    out = np.zeros(new_out, dtype=np.float32)
    out[: len(b)] = b
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


class ScriptedAlignPolicy:
    """Ground-truth baseline: move along the relative displacement, rotate to
    the folded alignment, and let the force-controlled axis insert.  Used to
    certify that the contact model and success predicate admit a solution."""

    def __init__(self, stage: Stage = Stage.STAGE1, press_alpha: float = 0.8):
        self.stage = stage
        self.press_alpha = press_alpha

    def act_on_env(self, env: PegInHoleEnv) -> np.ndarray:
        dx, dy, dth, _ = env.relative_pose()
        cfg = env.cfg
        a = [
            np.clip(dx / cfg.dxy_max, -1, 1),
            np.clip(dy / cfg.dxy_max, -1, 1),
            np.clip(dth / cfg.dtheta_max, -1, 1),
        ]
        if self.stage is not Stage.STAGE1:
            aligned = max(abs(dx), abs(dy)) < 5e-4 and abs(dth) < np.deg2rad(1)
            a += [-1.0 if aligned else 0.0,
                  self.press_alpha if aligned else 0.0]
        return np.array(a)


def evaluate(policy, env_cfg: EpisodeConfig, stage_spec: StageSpec,
             n_trials: int, seed_start: int = 10_000_000, encoder=None) -> dict:
    """Deterministic mean-action evaluation; mean success + binomial 95% CI."""
    feature_fn = None
    if encoder is not None:
        feature_fn = vision.make_feature_fn(encoder)
    env = PegInHoleEnv(env_cfg, stage_spec.stage, feature_fn=feature_fn)
    scripted = isinstance(policy, ScriptedAlignPolicy)
    successes = []
    returns = []
    for k in range(n_trials):
        obs = stage_spec.assemble(env.reset(seed=seed_start + k))
        done = False
        total = 0.0
        info = {}
        while not done:
            if scripted:
                a_env = action_to_env(policy.act_on_env(env), env_cfg, env.stage)
            else:
                a_env = action_to_env(policy.mean_action(obs), env_cfg, env.stage)
            obs_env, r, done, info = env.step(a_env)
            obs = stage_spec.assemble(obs_env)
            total += r
        successes.append(bool(info["success"]))
        returns.append(total)
    k = int(np.sum(successes))
    lo, hi = wilson_interval(k, n_trials)
    return {
        "success_rate": k / n_trials,
        "ci_low": lo,
        "ci_high": hi,
        "n_trials": n_trials,
        "mean_return": float(np.mean(returns)),
        "successes": successes,
    }


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

METRIC_FIELDS = [
    "update", "env_steps", "mean_return", "success_rate", "clip_frac",
    "approx_kl", "pi_loss", "v_loss", "entropy", "sat_frac", "alpha_mean",
    "curriculum",
]


def _curriculum_cfg(env_cfg: EpisodeConfig, p: float) -> EpisodeConfig:
    if p >= 1.0:
        return env_cfg
    return replace(
        env_cfg,
        max_xy_offset=p * env_cfg.max_xy_offset,
        max_yaw_offset=p * env_cfg.max_yaw_offset,
    )


@dataclass
class TrainResult:
    policy: GaussianPolicy
    value: nn.Network
    metrics: list
    env_steps: int


def train_stage(env_cfg: EpisodeConfig, stage_spec: StageSpec, ppo: PPOConfig,
                seed: int, policy: GaussianPolicy | None = None,
                value: nn.Network | None = None, encoder=None,
                metrics_path=None, pool=None, log=None) -> TrainResult:
    """Generic PPO loop for one stage (also used for the flat baseline)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 7))))
    init_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((seed, 13)))
    )
    if policy is None:
        policy = GaussianPolicy(
            stage_spec.obs_dim, stage_spec.act_dim, rng=init_rng,
            log_std_init=ppo.log_std_init,
        )
    if value is None:
        value = make_value_net(stage_spec.obs_dim, rng=init_rng)
    pi_opt = nn.Adam(lr=ppo.lr)
    v_opt = nn.Adam(lr=ppo.lr)
    env_cfg = replace(env_cfg, seed=seed)

    metrics = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()

    steps_done = 0
    update = 0
    next_seed = seed * 1_000_003
    cur_p = ppo.curriculum_start if ppo.curriculum else 1.0
    try:
        while steps_done < ppo.total_steps:
            buffer, next_seed = collect_rollouts(
                policy, value, _curriculum_cfg(env_cfg, cur_p), stage_spec,
                ppo.rollout_steps, next_seed, n_workers=ppo.n_workers,
                encoder=encoder, pool=pool,
            )
            steps_done += len(buffer)
            stats = ppo_update(policy, value, buffer, ppo, rng, pi_opt, v_opt)
            success_rate = float(np.mean(buffer.episode_successes))
            row = {
                "update": update,
                "env_steps": steps_done,
                "mean_return": float(np.mean(buffer.episode_returns)),
                "success_rate": success_rate,
                "alpha_mean": buffer.alpha_mean,
                "curriculum": cur_p,
                **stats,
            }
            metrics.append(row)
            if writer:
                writer.writerow({k: row[k] for k in METRIC_FIELDS})
                fh.flush()
            if log:
                log(row)
            if (
                ppo.curriculum and cur_p < 1.0
                and success_rate >= ppo.curriculum_threshold
            ):
                cur_p = min(1.0, cur_p + ppo.curriculum_step)
            update += 1
    finally:
        if fh:
            fh.close()
    return TrainResult(policy=policy, value=value, metrics=metrics,
                       env_steps=steps_done)


def train_hierarchical(env_cfg: EpisodeConfig, ppo1: PPOConfig,
                       ppo2: PPOConfig, seed: int, feature_dim: int = 128,
                       encoder=None, stage2_flags: dict | None = None,
                       out_dir=None, pool=None, log=None) -> dict:
    """Stage-1 visuomotor training, policy surgery, then stage-2 training."""
    src = "encoder" if encoder is not None else "oracle"
    spec1 = StageSpec(stage=Stage.STAGE1, feature_dim=feature_dim,
                      feature_source=src)
    res1 = train_stage(
        env_cfg, spec1, ppo1, seed, encoder=encoder,
        metrics_path=_mpath(out_dir, "stage1", seed), pool=pool, log=log,
    )
    spec2 = StageSpec(stage=Stage.STAGE2, feature_dim=feature_dim,
                      feature_source=src, **(stage2_flags or {}))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 21))))
    policy2, value2 = init_stage2_from_stage1(res1.policy, res1.value, spec2, rng)
    res2 = train_stage(
        env_cfg, spec2, ppo2, seed + 1, policy=policy2, value=value2,
        encoder=encoder, metrics_path=_mpath(out_dir, "stage2", seed),
        pool=pool, log=log,
    )
    return {"stage1": res1, "stage2": res2, "spec1": spec1, "spec2": spec2}


def train_flat(env_cfg: EpisodeConfig, ppo: PPOConfig, seed: int,
               feature_dim: int = 128, encoder=None, out_dir=None,
               pool=None, log=None) -> dict:
    """Single-stage baseline on the full stage-2 spaces and rewards."""
    src = "encoder" if encoder is not None else "oracle"
    spec = StageSpec(stage=Stage.FLAT, feature_dim=feature_dim,
                     feature_source=src)
    res = train_stage(
        env_cfg, spec, ppo, seed, encoder=encoder,
        metrics_path=_mpath(out_dir, "flat", seed), pool=pool, log=log,
    )
    return {"flat": res, "spec": spec}


def _mpath(out_dir, name, seed):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, f"metrics_{name}_seed{seed}.csv")

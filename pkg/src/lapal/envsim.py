"""Deterministic toy continuous-control environments with scripted experts.

Two families, both torque/force controlled with semi-implicit Euler
integration and viscous damping:

  pointmass      state (pos - goal, vel) in R^4, action = 2-D force
  arm<K>         planar K-link chain, state (angles, velocities, goal) in
                 R^(2K+2), action = K joint torques; the end effector must
                 reach a workspace goal sampled near its start pose
  arm<K>-perturbed   same arm with links 20% longer and damping doubled,
                 used as the policy-transfer target

Rewards are ground-truth evaluation signals only (never shown to imitation
learners): -||ee - goal|| - w_u ||action||^2. Episodes end at the horizon,
never early. The scripted experts are operational-space PD controllers
(Jacobian-transpose for the arms); demo collection adds smooth task-space
exploration noise so that the action distribution given a state has genuine
spread for the action autoencoder to model.
"""

from __future__ import annotations

import hashlib
import io
import math
import re
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CheckpointError, ConfigError, QualityGateError

DEMO_MAGIC = b"LPDEMO\x00"
DEMO_VERSION = 1

CONTROL_COST_WEIGHT = 1e-3


class EnvironmentFault(RuntimeError):
    """Non-finite state or action fed to the simulator."""


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    dt: float
    horizon: int
    gamma: float

    def canonical(self) -> str:
        lo = ",".join(f"{x:.17g}" for x in self.action_low)
        hi = ",".join(f"{x:.17g}" for x in self.action_high)
        return (
            f"env:{self.env_id};s={self.state_dim};a={self.action_dim};"
            f"lo={lo};hi={hi};dt={self.dt:.17g};h={self.horizon};gamma={self.gamma:.17g}"
        )

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


@dataclass(frozen=True)
class PointmassParams:
    mass: float = 1.0
    damping: float = 0.6
    v_max: float = 4.0
    goal_radii: tuple = (0.45, 0.95)
    expert_kp: float = 3.0
    expert_kd: float = 2.0
    success_tol: float = 0.08


@dataclass(frozen=True)
class ArmParams:
    n_joints: int
    lengths: tuple
    inertia: float = 0.5
    damping: float = 1.0
    v_max: float = 8.0
    base_angle_range: tuple = (0.15, 0.55)
    bend_jitter: float = 0.25          # relative jitter on the per-joint bend
    goal_radii: tuple = (0.70, 0.86)
    goal_sector: float = 0.25          # polar half-width around the start ee angle
    expert_kp: float = 10.0
    expert_kd: float = 4.0
    expert_joint_damping: float = 0.3
    success_tol: float = 0.04

    def nominal_bend(self) -> float:
        # per-joint bend that parks the start pose at ~0.78 of full reach
        return 2.32 / self.n_joints


@dataclass(frozen=True)
class EnvDef:
    spec: EnvSpec
    kind: str                          # "pointmass" | "arm"
    params: object


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    done: bool
    eval_reward: float


# ---------------------------------------------------------------------------
# registry

_ARM_ID = re.compile(r"^arm(\d+)(-perturbed)?$")

_clamp_counts: dict = {}


def clamp_counts() -> dict:
    return dict(_clamp_counts)


def reset_clamp_counts() -> None:
    _clamp_counts.clear()


def _pointmass_def() -> EnvDef:
    spec = EnvSpec(
        env_id="pointmass", state_dim=4, action_dim=2,
        action_low=-np.ones(2), action_high=np.ones(2),
        dt=0.1, horizon=60, gamma=0.99,
    )
    return EnvDef(spec=spec, kind="pointmass", params=PointmassParams())


def _arm_def(k: int, perturbed: bool) -> EnvDef:
    if k < 1:
        raise ConfigError(f"arm needs at least one joint, got {k}")
    name = f"arm{k}" + ("-perturbed" if perturbed else "")
    lengths = tuple(1.0 / k for _ in range(k))
    params = ArmParams(n_joints=k, lengths=lengths)
    if k == 2:
        # low-dimensional navigation-style task: wide goal sweeps
        params = replace(params, goal_radii=(0.45, 0.80), goal_sector=0.90,
                         success_tol=0.06)
    if perturbed:
        params = replace(
            params,
            lengths=tuple(l * 1.2 for l in params.lengths),
            damping=params.damping * 2.0,
        )
    spec = EnvSpec(
        env_id=name, state_dim=2 * k + 2, action_dim=k,
        action_low=-np.ones(k), action_high=np.ones(k),
        dt=0.05, horizon=140, gamma=0.99,
    )
    return EnvDef(spec=spec, kind="arm", params=params)


def env_def(env_id: str) -> EnvDef:
    if env_id == "pointmass":
        return _pointmass_def()
    m = _ARM_ID.match(env_id)
    if m:
        return _arm_def(int(m.group(1)), m.group(2) is not None)
    raise ConfigError(f"unknown env_id {env_id!r}")


def env_spec(env_id: str) -> EnvSpec:
    return env_def(env_id).spec


# ---------------------------------------------------------------------------
# kinematics


def forward_kinematics(lengths, angles) -> np.ndarray:
    """Planar chain end-effector position from cumulative joint angles."""
    lengths = np.asarray(lengths, dtype=np.float64)
    cum = np.cumsum(np.asarray(angles, dtype=np.float64))
    return np.array([np.sum(lengths * np.cos(cum)), np.sum(lengths * np.sin(cum))])


def arm_jacobian(lengths, angles) -> np.ndarray:
    """2 x K Jacobian of the end-effector position w.r.t. joint angles."""
    lengths = np.asarray(lengths, dtype=np.float64)
    cum = np.cumsum(np.asarray(angles, dtype=np.float64))
    x_terms = lengths * np.cos(cum)
    y_terms = lengths * np.sin(cum)
    # d ee / d theta_j involves links j..K-1 only
    sx = np.cumsum(x_terms[::-1])[::-1]
    sy = np.cumsum(y_terms[::-1])[::-1]
    return np.stack([-sy, sx])


def nullspace_direction(lengths, angles) -> np.ndarray:
    """Unit torque direction that produces no end-effector motion.

    Projects a fixed alternating pattern through I - J^T (J J^T)^-1 J; zero
    for arms without redundant joints.
    """
    k = len(angles)
    if k <= 2:
        return np.zeros(k)
    jac = arm_jacobian(lengths, angles)
    pattern = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(k)])
    gram = jac @ jac.T
    try:
        proj = pattern - jac.T @ np.linalg.solve(gram, jac @ pattern)
    except np.linalg.LinAlgError:
        return np.zeros(k)
    norm = np.linalg.norm(proj)
    return proj / norm if norm > 1e-9 else np.zeros(k)


def wrap_angle(theta):
    """Wrap to (-pi, pi]; angles already in range pass through bit-exactly."""
    theta = np.asarray(theta, dtype=np.float64)
    w = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    in_range = (theta > -np.pi) & (theta <= np.pi)
    return np.where(in_range, theta, w)


def _arm_state(angles, velocities, goal):
    return np.concatenate([angles, velocities, goal])


def split_arm_state(env: EnvDef, state):
    k = env.params.n_joints
    return state[:k], state[k : 2 * k], state[2 * k :]


def end_effector(env: EnvDef, state) -> np.ndarray:
    angles, _, _ = split_arm_state(env, state)
    return forward_kinematics(env.params.lengths, angles)


def goal_distance(env: EnvDef, state) -> float:
    if env.kind == "pointmass":
        return float(np.linalg.norm(state[:2]))
    angles, _, goal = split_arm_state(env, state)
    return float(np.linalg.norm(forward_kinematics(env.params.lengths, angles) - goal))


# ---------------------------------------------------------------------------
# reset / step


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def env_reset(env_id: str, seed) -> np.ndarray:
    env = env_def(env_id)
    rng = _as_rng(seed)
    if env.kind == "pointmass":
        p = env.params
        r = rng.uniform(p.goal_radii[0], p.goal_radii[1])
        phi = rng.uniform(-np.pi, np.pi)
        goal = r * np.array([np.cos(phi), np.sin(phi)])
        # agent starts at the origin with zero velocity; state is goal-relative
        return np.concatenate([-goal, np.zeros(2)])
    p = env.params
    k = p.n_joints
    bend = p.nominal_bend()
    angles = np.empty(k)
    angles[0] = rng.uniform(*p.base_angle_range)
    if k > 1:
        angles[1:] = bend * (1.0 + p.bend_jitter * rng.uniform(-1.0, 1.0, size=k - 1))
    ee = forward_kinematics(p.lengths, angles)
    ee_angle = math.atan2(ee[1], ee[0])
    r = rng.uniform(*p.goal_radii) * float(np.sum(p.lengths))
    phi = ee_angle + rng.uniform(-p.goal_sector, p.goal_sector)
    goal = r * np.array([np.cos(phi), np.sin(phi)])
    return _arm_state(angles, np.zeros(k), goal)


def _clamp_action(env: EnvDef, action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (env.spec.action_dim,):
        raise ConfigError(
            f"action shape {a.shape} invalid for {env.spec.env_id} "
            f"(want ({env.spec.action_dim},))"
        )
    lo, hi = env.spec.action_low, env.spec.action_high
    if np.any(a < lo) or np.any(a > hi):
        _clamp_counts[env.spec.env_id] = _clamp_counts.get(env.spec.env_id, 0) + 1
        a = np.clip(a, lo, hi)
    return a


def env_step(env_id: str, state, action):
    """One simulator step; returns (next_state, eval_reward).

    Episodes terminate only at the horizon, which the rollout layer tracks;
    the dynamics themselves never emit a terminal.
    """
    env = env_def(env_id)
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (env.spec.state_dim,):
        raise ConfigError(f"state shape {state.shape} invalid for {env_id}")
    if not np.all(np.isfinite(state)) or not np.all(np.isfinite(np.asarray(action, dtype=np.float64))):
        raise EnvironmentFault(f"non-finite state or action in {env_id}")
    a = _clamp_action(env, action)
    if env.kind == "pointmass":
        p = env.params
        delta, vel = state[:2], state[2:]
        acc = (a - p.damping * vel) / p.mass
        vel = np.clip(vel + env.spec.dt * acc, -p.v_max, p.v_max)
        delta = delta + env.spec.dt * vel
        nxt = np.concatenate([delta, vel])
        reward = -float(np.linalg.norm(delta)) - CONTROL_COST_WEIGHT * float(a @ a)
        return nxt, reward
    p = env.params
    angles, vel, goal = split_arm_state(env, state)
    acc = (a - p.damping * vel) / p.inertia
    vel = np.clip(vel + env.spec.dt * acc, -p.v_max, p.v_max)
    angles = wrap_angle(angles + env.spec.dt * vel)
    nxt = _arm_state(angles, vel, goal)
    dist = np.linalg.norm(forward_kinematics(p.lengths, angles) - goal)
    reward = -float(dist) - CONTROL_COST_WEIGHT * float(a @ a)
    return nxt, reward


def feature_dim(env_id: str) -> int:
    env = env_def(env_id)
    if env.kind == "pointmass":
        return env.spec.state_dim
    return 3 * env.params.n_joints + 6


def feature_map(env_id: str, states) -> np.ndarray:
    """Model-side input features for one state or a batch.

    Arm states are impoverished compared to what physics simulators expose
    (joint angles only, no body coordinates), so every learned network sees
    the standard derived features instead: wrapped angles as cos/sin,
    velocities scaled to O(1), and end-effector coordinates alongside the
    goal. The environment state itself is untouched and rewards never pass
    through here.
    """
    env = env_def(env_id)
    S = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if env.kind == "pointmass":
        out = S
    else:
        k = env.params.n_joints
        angles, vel, goal = S[:, :k], S[:, k : 2 * k], S[:, 2 * k :]
        cum = np.cumsum(angles, axis=1)
        lengths = np.asarray(env.params.lengths)
        ee = np.stack([np.sum(lengths * np.cos(cum), axis=1),
                       np.sum(lengths * np.sin(cum), axis=1)], axis=1)
        out = np.concatenate(
            [np.cos(angles), np.sin(angles), vel / 4.0, goal, ee, goal - ee], axis=1)
    return out[0] if np.asarray(states).ndim == 1 else out


def eval_reward_batch(env_id: str, states, actions) -> np.ndarray:
    """Vectorized ground-truth reward of (state, action) batches.

    Recomputes the deterministic transition reward exactly as env_step does;
    used as the reward oracle for reinforcement-learning sanity runs (the
    imitation learners never see it).
    """
    env = env_def(env_id)
    S = np.atleast_2d(np.asarray(states, dtype=np.float64))
    A = np.clip(np.atleast_2d(np.asarray(actions, dtype=np.float64)),
                env.spec.action_low, env.spec.action_high)
    ctrl = CONTROL_COST_WEIGHT * np.sum(A * A, axis=1)
    if env.kind == "pointmass":
        p = env.params
        delta, vel = S[:, :2], S[:, 2:]
        acc = (A - p.damping * vel) / p.mass
        vel2 = np.clip(vel + env.spec.dt * acc, -p.v_max, p.v_max)
        delta2 = delta + env.spec.dt * vel2
        return -np.linalg.norm(delta2, axis=1) - ctrl
    p = env.params
    k = p.n_joints
    angles, vel, goal = S[:, :k], S[:, k : 2 * k], S[:, 2 * k :]
    acc = (A - p.damping * vel) / p.inertia
    vel2 = np.clip(vel + env.spec.dt * acc, -p.v_max, p.v_max)
    angles2 = wrap_angle(angles + env.spec.dt * vel2)
    cum = np.cumsum(angles2, axis=1)
    lengths = np.asarray(p.lengths)
    ee = np.stack([np.sum(lengths * np.cos(cum), axis=1),
                   np.sum(lengths * np.sin(cum), axis=1)], axis=1)
    return -np.linalg.norm(ee - goal, axis=1) - ctrl


def kinetic_energy(env_id: str, state) -> float:
    env = env_def(env_id)
    if env.kind == "pointmass":
        v = state[2:]
        return 0.5 * env.params.mass * float(v @ v)
    _, vel, _ = split_arm_state(env, state)
    return 0.5 * env.params.inertia * float(vel @ vel)


# ---------------------------------------------------------------------------
# scripted experts


def scripted_expert(env_id: str, state, kp_scale: float = 1.0,
                    task_bias=None) -> np.ndarray:
    """Operational-space PD controller toward the goal, clamped to bounds.

    kp_scale and task_bias exist for demo collection: the bias is a 2-D
    force added in task space (end-effector space for arms), so demo actions
    vary along the task-relevant directions.
    """
    env = env_def(env_id)
    state = np.asarray(state, dtype=np.float64)
    if env.kind == "pointmass":
        p = env.params
        delta, vel = state[:2], state[2:]
        f = -kp_scale * p.expert_kp * delta - p.expert_kd * vel
        if task_bias is not None:
            f = f + task_bias
        return np.clip(f, env.spec.action_low, env.spec.action_high)
    p = env.params
    angles, vel, goal = split_arm_state(env, state)
    jac = arm_jacobian(p.lengths, angles)
    ee = forward_kinematics(p.lengths, angles)
    ee_vel = jac @ vel
    f = kp_scale * p.expert_kp * (goal - ee) - p.expert_kd * ee_vel
    if task_bias is not None:
        f = f + task_bias
    tau = jac.T @ f - p.expert_joint_damping * vel
    return np.clip(tau, env.spec.action_low, env.spec.action_high)


# ---------------------------------------------------------------------------
# rollouts


def rollout_episode(env_id: str, act_fn, episode_seed) -> dict:
    """Roll one full episode; act_fn(state, t) -> action."""
    env = env_def(env_id)
    state = env_reset(env_id, episode_seed)
    horizon = env.spec.horizon
    states = np.empty((horizon, env.spec.state_dim))
    actions = np.empty((horizon, env.spec.action_dim))
    next_states = np.empty_like(states)
    rewards = np.empty(horizon)
    for t in range(horizon):
        action = act_fn(state, t)
        nxt, reward = env_step(env_id, state, action)
        states[t] = state
        actions[t] = np.clip(action, env.spec.action_low, env.spec.action_high)
        next_states[t] = nxt
        rewards[t] = reward
        state = nxt
    dones = np.zeros(horizon)
    dones[-1] = 1.0
    return {
        "states": states, "actions": actions, "next_states": next_states,
        "rewards": rewards, "dones": dones,
        "return": float(np.sum(rewards)),
        "final_dist": goal_distance(env, state),
        "settle_dist": float(np.mean([goal_distance(env, s) for s in next_states[-10:]])),
    }


# ---------------------------------------------------------------------------
# demonstrations


@dataclass(frozen=True)
class JitterConfig:
    """Smooth task-space exploration noise mixed into demo collection.

    The end-effector force noise fades linearly with distance to the goal
    below fade_dist (down to fade_floor), so demos stay exploratory in
    transit but still settle inside the success tolerance. Arms with
    redundant joints additionally get a smooth posture wiggle through the
    Jacobian nullspace projector, which varies the joint torques without
    moving the end effector.
    """

    ou_sigma: float = 0.35
    ou_tau: float = 0.4                # correlation time, seconds
    gain_scale_range: tuple = (0.75, 1.25)
    fade_dist: float = 0.4
    fade_floor: float = 0.2
    null_sigma: float = 0.0            # nullspace torque channel (arms, K > 2)


DEFAULT_JITTER = {
    "pointmass": JitterConfig(ou_sigma=0.35, fade_dist=0.4),
    "arm": JitterConfig(ou_sigma=0.45, fade_dist=0.25, fade_floor=0.1,
                        null_sigma=0.25),
}


def default_jitter(env_id: str) -> JitterConfig:
    return DEFAULT_JITTER[env_def(env_id).kind]


@dataclass
class DemoBuffer:
    env_id: str
    env_digest: str
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    rewards: np.ndarray
    episode_boundaries: np.ndarray     # start index of each episode

    def __len__(self):
        return self.states.shape[0]

    @property
    def n_episodes(self):
        return len(self.episode_boundaries)

    def episode_slices(self):
        bounds = list(self.episode_boundaries) + [len(self)]
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def episode_returns(self):
        return np.array([float(self.rewards[s].sum()) for s in self.episode_slices()])

    def save(self, path) -> None:
        buf = io.BytesIO()
        buf.write(DEMO_MAGIC)
        buf.write(struct.pack("<I", DEMO_VERSION))
        eid = self.env_id.encode()
        buf.write(struct.pack("<H", len(eid)))
        buf.write(eid)
        buf.write(bytes.fromhex(self.env_digest))
        n, sd = self.states.shape
        ad = self.actions.shape[1]
        buf.write(struct.pack("<IIQQ", sd, ad, n, self.n_episodes))
        buf.write(np.ascontiguousarray(self.episode_boundaries, dtype="<u8").tobytes())
        for arr in (self.states, self.actions, self.next_states, self.dones, self.rewards):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        from .configio import atomic_write_bytes

        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "DemoBuffer":
        with open(path, "rb") as fh:
            if fh.read(len(DEMO_MAGIC)) != DEMO_MAGIC:
                raise CheckpointError(f"{path}: not a demo file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != DEMO_VERSION:
                raise CheckpointError(f"{path}: unsupported demo version {version}")
            (elen,) = struct.unpack("<H", fh.read(2))
            env_id = fh.read(elen).decode()
            digest = fh.read(32).hex()
            sd, ad, n, neps = struct.unpack("<IIQQ", fh.read(24))
            bounds = np.frombuffer(fh.read(8 * neps), dtype="<u8").astype(np.int64)
            arrays = []
            for cols in (sd, ad, sd, 1, 1):
                raw = fh.read(8 * n * cols)
                if len(raw) != 8 * n * cols:
                    raise CheckpointError(f"{path}: truncated demo file")
                arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
                arrays.append(arr.reshape(n, cols) if cols > 1 else arr)
        spec = env_spec(env_id)
        if spec.digest() != digest:
            raise CheckpointError(
                f"{path}: demos were generated by a different {env_id} definition"
            )
        if (sd, ad) != (spec.state_dim, spec.action_dim):
            raise CheckpointError(f"{path}: dimension header mismatch")
        return cls(env_id, digest, arrays[0], arrays[1], arrays[2], arrays[3],
                   arrays[4], bounds)


def _ou_steps(rng, n, dim, sigma, tau, dt):
    decay = math.exp(-dt / tau)
    diff = sigma * math.sqrt(1.0 - decay * decay)
    noise = np.empty((n, dim))
    x = sigma * rng.standard_normal(dim)
    for t in range(n):
        noise[t] = x
        x = decay * x + diff * rng.standard_normal(dim)
    return noise


def collect_demos(env_id: str, n_episodes: int = 64, seed: int = 0,
                  jitter: JitterConfig | None = None,
                  min_success_rate: float = 0.9) -> DemoBuffer:
    """Roll the scripted expert with task-space jitter; gate on goal reaching."""
    if n_episodes < 1:
        raise ConfigError("need at least one episode")
    env = env_def(env_id)
    if jitter is None:
        jitter = default_jitter(env_id)
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(n_episodes)
    episodes = []
    successes = 0
    use_null = env.kind == "arm" and env.params.n_joints > 2 and jitter.null_sigma > 0
    for child in children:
        rng = np.random.default_rng(child)
        kp_scale = rng.uniform(*jitter.gain_scale_range)
        noise = _ou_steps(rng, env.spec.horizon, 2, jitter.ou_sigma, jitter.ou_tau,
                          env.spec.dt)
        null_amp = (_ou_steps(rng, env.spec.horizon, 1, jitter.null_sigma,
                              jitter.ou_tau, env.spec.dt)[:, 0] if use_null else None)

        def act(s, t, kp_scale=kp_scale, noise=noise, null_amp=null_amp):
            fade = max(jitter.fade_floor,
                       min(1.0, goal_distance(env, s) / jitter.fade_dist))
            tau = scripted_expert(env_id, s, kp_scale=kp_scale,
                                  task_bias=fade * noise[t])
            if null_amp is not None:
                angles, _, _ = split_arm_state(env, s)
                tau = tau + null_amp[t] * nullspace_direction(env.params.lengths, angles)
                tau = np.clip(tau, env.spec.action_low, env.spec.action_high)
            return tau

        ep = rollout_episode(env_id, act, rng)
        successes += ep["settle_dist"] <= _success_tol(env)
        episodes.append(ep)
    rate = successes / n_episodes
    buffer = DemoBuffer(
        env_id=env_id,
        env_digest=env.spec.digest(),
        states=np.concatenate([e["states"] for e in episodes]),
        actions=np.concatenate([e["actions"] for e in episodes]),
        next_states=np.concatenate([e["next_states"] for e in episodes]),
        dones=np.concatenate([e["dones"] for e in episodes]),
        rewards=np.concatenate([e["rewards"] for e in episodes]),
        episode_boundaries=np.arange(n_episodes, dtype=np.int64) * env.spec.horizon,
    )
    if rate < min_success_rate:
        raise QualityGateError(
            f"{env_id}: expert settled within {_success_tol(env)} of the goal in "
            f"only {rate:.0%} of {n_episodes} episodes (need {min_success_rate:.0%})"
        )
    return buffer


def _success_tol(env: EnvDef) -> float:
    return env.params.success_tol


def demo_summary(buffer: DemoBuffer, jitter: JitterConfig | None = None,
                 reference: dict | None = None) -> str:
    """Human-readable sidecar text for a saved demo file."""
    returns = buffer.episode_returns()
    lines = [
        f"env: {buffer.env_id}",
        f"episodes: {buffer.n_episodes}",
        f"transitions: {len(buffer)}",
        f"env_digest: {buffer.env_digest}",
        f"mean_episode_return: {np.mean(returns):.6f}",
        f"std_episode_return: {np.std(returns):.6f}",
        f"min_episode_return: {np.min(returns):.6f}",
        f"max_episode_return: {np.max(returns):.6f}",
    ]
    if jitter is not None:
        lines.append(
            f"jitter: ou_sigma={jitter.ou_sigma} ou_tau={jitter.ou_tau} "
            f"gain_scale={jitter.gain_scale_range[0]}..{jitter.gain_scale_range[1]}"
        )
    if reference is not None:
        for key in sorted(reference):
            lines.append(f"{key}: {reference[key]:.6f}")
    lines.append("quality_gate: PASS")
    lines.append("episode_returns:")
    lines.extend(f"  {r:.6f}" for r in returns)
    return "\n".join(lines) + "\n"

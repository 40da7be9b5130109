"""End-to-end adversarial imitation training, evaluation, and transfer.

One run = one seed: collect experience with the current policy, then
alternate discriminator and generator updates, evaluating deterministically
on a fixed set of fresh episodes. Three algorithms share the loop:

  gail             policy and discriminator in the raw action space
  lapal-agnostic   policy and discriminator in the latent space of a frozen
                   pretrained action codec
  lapal-aware      as agnostic, but the encoder joins the discriminator
                   ascent and the decoder joins the generator descent

Latent actions attached to stored transitions are always re-encoded from
the raw buffer action with the current encoder (never cached), so the
task-aware mode with codec learning rates forced to zero walks exactly the
task-agnostic update sequence - a differential test the suite pins down.

Rewards are recomputed from the current discriminator for every batch;
nothing reward-like is ever stored. Normalized returns are gap-closed:
(R - R_random) / (R_expert - R_random) against references recorded at run
start with the same evaluation episodes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import adversary, envsim, latentact, sacgen
from .adversary import DiscComposition
from .errors import CheckpointError, ConfigError, DivergenceError
from .latentact import ActionCodec, CVAEConfig
from .nncore import MLPSpec, read_segment, write_segment
from .sacgen import SacAgent, SacConfig

ALGOS = ("gail", "lapal-agnostic", "lapal-aware")

POLICY_MAGIC = b"LPPOL\x00"
POLICY_VERSION = 1

CURVE_COLUMNS = (
    "env_steps", "mean_eval_return", "std_eval_return", "norm_eval_return",
    "disc_loss", "actor_loss", "critic_loss", "alpha", "entropy", "recon_mse",
)


@dataclass(frozen=True)
class RunConfig:
    algo: str
    env_id: str
    total_env_steps: int
    steps_per_iteration: int = 1000
    disc_updates_per_iteration: int = 500
    gen_updates_per_iteration: int = 1000
    eval_every: int = 2000
    eval_episodes: int = 16
    disc_hidden: tuple = (64, 64)
    disc_lr: float = 3e-5
    codec_disc_lr: float = 3e-5       # encoder step size in aware mode
    codec_gen_lr: float = 3e-5        # decoder step size in aware mode
    codec_warm_start: bool = True
    store_emitted_latents: bool = False
    divergence_guard: bool = True
    preset: str = "desk"

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if self.eval_every % self.steps_per_iteration != 0:
            raise ConfigError("eval_every must be a multiple of steps_per_iteration")
        if self.store_emitted_latents and self.algo != "lapal-agnostic":
            raise ConfigError(
                "store_emitted_latents only applies to the frozen-codec mode"
            )

    @property
    def latent(self) -> bool:
        return self.algo.startswith("lapal")


@dataclass
class CurveRow:
    env_steps: int
    mean_eval_return: float
    std_eval_return: float
    norm_eval_return: float
    disc_loss: float
    actor_loss: float
    critic_loss: float
    alpha: float
    entropy: float
    recon_mse: float


@dataclass
class RunResult:
    curve: list
    bundle: "PolicyBundle"
    discriminator: adversary.Discriminator
    codec: ActionCodec | None
    expert_return: float
    random_return: float
    env_steps: int

    def normalized(self, raw_return: float) -> float:
        return _normalize(raw_return, self.expert_return, self.random_return)


def _normalize(value, expert, random):
    span = expert - random
    if span <= 0:
        raise ConfigError("expert reference does not beat the random baseline")
    return (value - random) / span


# ---------------------------------------------------------------------------
# policies


class ExpertPolicy:
    """Clean scripted controller; the 100% reference."""

    def __init__(self, env_id: str):
        self.env_id = env_id

    def episode_actor(self, episode_seed):
        return lambda s, t: envsim.scripted_expert(self.env_id, s)


class RandomPolicy:
    """Uniform actions over the bounds; the 0% reference."""

    def __init__(self, env_id: str):
        self.spec = envsim.env_spec(env_id)

    def episode_actor(self, episode_seed):
        # draw from a sub-stream so action noise is independent of the
        # episode's goal sampling
        rng = np.random.default_rng(_child_seq(episode_seed, 1))
        return lambda s, t: rng.uniform(self.spec.action_low, self.spec.action_high)


def _child_seq(seq, i: int) -> np.random.SeedSequence:
    """Stateless spawn: child i of a SeedSequence without mutating it."""
    if not isinstance(seq, np.random.SeedSequence):
        seq = np.random.SeedSequence(seq)
    return np.random.SeedSequence(entropy=seq.entropy,
                                  spawn_key=tuple(seq.spawn_key) + (i,))


@dataclass
class PolicyBundle:
    """Deterministic evaluation policy: actor plus its action realization."""

    env_id: str
    kind: str                          # "raw" | "latent"
    actor: object                      # ParamTree emitting a Gaussian head
    u_dim: int
    codec: ActionCodec | None = None

    def __post_init__(self):
        if self.kind not in ("raw", "latent"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "latent" and self.codec is None:
            raise ConfigError("latent policy bundle needs a codec")

    def action(self, state):
        feats = envsim.feature_map(self.env_id, state)
        raw = self.actor.forward(feats[None, :])
        u = sacgen.squash(raw[0, : self.u_dim])
        if self.kind == "latent":
            return latentact.decode(self.codec, state, u)
        return u * envsim.env_spec(self.env_id).action_high

    def episode_actor(self, episode_seed):
        return lambda s, t: self.action(s)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.actor.digest().encode())
        if self.codec is not None:
            h.update(self.codec.digest().encode())
        return h.hexdigest()


def evaluate_policy(policy, env_id: str, n_episodes: int = 16, seed=0):
    """Mean and std of episode returns over fresh deterministic episodes.

    Episode seeds derive statelessly from `seed`, so evaluating twice with
    the same seed replays exactly the same episodes.
    """
    returns = []
    for ep in range(n_episodes):
        child = _child_seq(seed, ep)
        returns.append(
            envsim.rollout_episode(env_id, policy.episode_actor(child), child)["return"]
        )
    return float(np.mean(returns)), float(np.std(returns))


# ---------------------------------------------------------------------------
# training


def _eval_seed(seed) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=0xE7A1, spawn_key=(int(seed),))


def run_training(cfg: RunConfig, sac_cfg: SacConfig, demos: envsim.DemoBuffer,
                 codec: ActionCodec | None = None, seed: int = 0,
                 on_iteration=None) -> RunResult:
    spec = envsim.env_spec(cfg.env_id)
    if demos.env_digest != spec.digest():
        raise ConfigError(f"demos were generated for a different {cfg.env_id}")
    if cfg.latent and codec is None:
        raise ConfigError(f"{cfg.algo} requires a pretrained action codec")
    if not cfg.latent and codec is not None:
        raise ConfigError("gail must not be given a codec")
    if codec is not None and codec.env_id != cfg.env_id:
        raise ConfigError(
            f"codec was trained on {codec.env_id}, not {cfg.env_id}; refusing the pairing"
        )

    seq = np.random.SeedSequence(entropy=0x1A9A, spawn_key=(int(seed),))
    s_init, s_disc_init, s_act, s_batch, s_codec = seq.spawn(5)
    act_rng = np.random.default_rng(s_act)
    batch_rng = np.random.default_rng(s_batch)

    feat_dim = envsim.feature_dim(cfg.env_id)
    run_codec = None
    if cfg.latent:
        if cfg.codec_warm_start:
            run_codec = codec.copy(frozen=(cfg.algo == "lapal-agnostic"))
        else:
            run_codec = latentact.make_codec(cfg.env_id, codec.config, s_codec)
            run_codec.frozen = cfg.algo == "lapal-agnostic"
        u_dim = run_codec.latent_dim
        comp = DiscComposition(cfg.env_id, "latent", feat_dim, u_dim,
                               run_codec.digest())
    else:
        u_dim = spec.action_dim
        comp = DiscComposition(cfg.env_id, "raw", feat_dim, u_dim)

    agent = SacAgent(feat_dim, u_dim, sac_cfg, np.random.default_rng(s_init))
    disc = adversary.make_discriminator(comp, cfg.disc_hidden,
                                        np.random.default_rng(s_disc_init))
    buf = sacgen.ReplayBuffer(sac_cfg.buffer_capacity, spec.state_dim, spec.action_dim)
    emitted = (
        sacgen.ReplayBuffer(sac_cfg.buffer_capacity, 1, u_dim)
        if cfg.store_emitted_latents else None
    )

    eval_seed = _eval_seed(seed)
    expert_ret, _ = evaluate_policy(ExpertPolicy(cfg.env_id), cfg.env_id,
                                    cfg.eval_episodes, eval_seed)
    random_ret, _ = evaluate_policy(RandomPolicy(cfg.env_id), cfg.env_id,
                                    cfg.eval_episodes, eval_seed)
    bundle = PolicyBundle(cfg.env_id, "latent" if cfg.latent else "raw",
                          agent.actor, u_dim, run_codec)
    recon_probe = _recon_probe(demos, batch_rng) if cfg.latent else None

    def agent_u(states, raw_actions, rows=None):
        """Action-box coordinates the critics and discriminator consume."""
        if cfg.latent:
            if emitted is not None and rows is not None:
                return emitted.actions[rows]
            return latentact.encode_for_training(run_codec, states, raw_actions)
        return raw_actions / spec.action_high

    def reward_fn(states, u):
        return adversary.disc_reward(disc, states, u)

    aware = cfg.algo == "lapal-aware"
    decoder_path = (
        sacgen.DecoderPathContext(run_codec, disc, cfg.codec_gen_lr) if aware else None
    )
    featurize = lambda S: envsim.feature_map(cfg.env_id, S)
    demo_n = len(demos)
    half = max(1, sac_cfg.batch_size // 2)

    curve: list = []
    state = envsim.env_reset(cfg.env_id, act_rng)
    ep_t = 0
    steps = 0
    last = {"disc": float("nan"), "actor": float("nan"), "critic": float("nan"),
            "alpha": agent.alpha, "entropy": float("nan")}
    iteration = 0
    while steps < cfg.total_env_steps:
        for _ in range(min(cfg.steps_per_iteration, cfg.total_env_steps - steps)):
            u = sacgen.act(agent, featurize(state), deterministic=False, rng=act_rng)
            action = (latentact.decode(run_codec, state, u) if cfg.latent
                      else u * spec.action_high)
            nxt, _ = envsim.env_step(cfg.env_id, state, action)
            ep_t += 1
            done = ep_t >= spec.horizon
            buf.push(state, action, nxt, done)
            if emitted is not None:
                emitted.push(np.zeros(1), u, np.zeros(1), done)
            state = nxt
            if done:
                state = envsim.env_reset(cfg.env_id, act_rng)
                ep_t = 0
            steps += 1

        if len(buf) >= sac_cfg.batch_size:
            from .errors import OptimizerError

            dl = al = cl = en = 0.0
            try:
                for _ in range(cfg.disc_updates_per_iteration):
                    ei = batch_rng.integers(0, demo_n, half)
                    rows = batch_rng.integers(0, len(buf), half)
                    b = sacgen.BufferBatch(buf.states[rows], buf.actions[rows],
                                           buf.next_states[rows], buf.dones[rows])
                    dl = _disc_step(cfg, disc, run_codec, demos, ei, b, rows,
                                    agent_u, spec)
                for _ in range(cfg.gen_updates_per_iteration):
                    rows = batch_rng.integers(0, len(buf), sac_cfg.batch_size)
                    b = sacgen.BufferBatch(buf.states[rows], buf.actions[rows],
                                           buf.next_states[rows], buf.dones[rows])
                    u_batch = agent_u(b.states, b.actions, rows)
                    feats = featurize(b.states)
                    closses = sacgen.critic_update(agent, feats, u_batch,
                                                   featurize(b.next_states),
                                                   reward_fn, batch_rng)
                    if decoder_path is not None:
                        decoder_path.raw_states = b.states
                    alosses = sacgen.actor_update(agent, feats, batch_rng,
                                                  decoder_path=decoder_path)
                    cl, al, en = (closses["critic1"], alosses["actor"],
                                  alosses["entropy"])
            except OptimizerError as exc:
                raise DivergenceError(
                    f"optimizer aborted at step {steps}: {exc}"
                ) from exc
            last = {"disc": dl, "actor": al, "critic": cl,
                    "alpha": agent.alpha, "entropy": en}
            if cfg.divergence_guard and not all(np.isfinite(v) for v in last.values()):
                raise DivergenceError(f"non-finite training loss at step {steps}: {last}")

        iteration += 1
        if steps % cfg.eval_every == 0 or steps >= cfg.total_env_steps:
            mean_ret, std_ret = evaluate_policy(bundle, cfg.env_id,
                                                cfg.eval_episodes, eval_seed)
            norm = _normalize(mean_ret, expert_ret, random_ret)
            recon = (
                latentact.holdout_reconstruction_mse(run_codec, *recon_probe)
                if cfg.latent else float("nan")
            )
            curve.append(CurveRow(
                env_steps=steps, mean_eval_return=mean_ret, std_eval_return=std_ret,
                norm_eval_return=norm, disc_loss=last["disc"], actor_loss=last["actor"],
                critic_loss=last["critic"], alpha=last["alpha"],
                entropy=last["entropy"], recon_mse=recon,
            ))
            if (cfg.divergence_guard and steps >= cfg.total_env_steps // 2
                    and norm < 0.0):
                raise DivergenceError(
                    f"eval return {mean_ret:.3f} fell below the random baseline "
                    f"{random_ret:.3f} after {steps} of {cfg.total_env_steps} steps"
                )
        if on_iteration is not None:
            on_iteration({
                "iteration": iteration, "env_steps": steps,
                "actor_digest": agent.actor.digest(),
                "critic_digest": agent.critic1.digest(),
                "disc_digest": disc.digest(),
                "alpha": agent.alpha,
                "codec_digest": run_codec.digest() if run_codec else "",
                "buffer_size": len(buf),
            })

    return RunResult(curve=curve, bundle=bundle, discriminator=disc,
                     codec=run_codec, expert_return=expert_ret,
                     random_return=random_ret, env_steps=steps)


def _recon_probe(demos, rng, n=512):
    idx = rng.integers(0, len(demos), min(n, len(demos)))
    return demos.states[idx], demos.actions[idx]


def _disc_step(cfg, disc, run_codec, demos, ei, b, rows, agent_u, spec):
    """One discriminator minibatch; chains into the encoder in aware mode."""
    se_raw, sa_raw = demos.states[ei], b.states
    se = envsim.feature_map(cfg.env_id, se_raw)
    sa = envsim.feature_map(cfg.env_id, sa_raw)
    if cfg.algo == "lapal-aware":
        # both expectation terms flow through the encoder, so encode the two
        # halves in one recorded pass and step the encoder with the combined
        # input gradient
        n_e = len(ei)
        states = np.concatenate([se_raw, sa_raw])
        raws = np.concatenate([demos.actions[ei], b.actions])
        post = latentact.encode(run_codec, states, raws, record=True)
        abar = np.tanh(post.mean)
        loss, g_e, g_a = adversary.disc_loss_and_grad(
            disc, (se, abar[:n_e]), (sa, abar[n_e:]), want_input_grads=True)
        d_abar = np.concatenate([g_e, g_a])[:, run_codec.state_dim:]
        d_mean = d_abar * (1.0 - abar * abar)
        run_codec.encoder.backward(
            np.concatenate([d_mean, np.zeros_like(d_mean)], axis=1))
        run_codec.encoder.adam_step(cfg.codec_disc_lr)
    elif cfg.latent:
        n_e = len(ei)
        states = np.concatenate([se_raw, sa_raw])
        raws = np.concatenate([demos.actions[ei], b.actions])
        if cfg.store_emitted_latents:
            expert_lat = latentact.encode_for_training(run_codec, se_raw,
                                                       demos.actions[ei])
            agent_lat = agent_u(sa_raw, b.actions, rows)
        else:
            abar = latentact.encode_for_training(run_codec, states, raws)
            expert_lat, agent_lat = abar[:n_e], abar[n_e:]
        loss = adversary.disc_loss_and_grad(disc, (se, expert_lat), (sa, agent_lat))
    else:
        loss = adversary.disc_loss_and_grad(
            disc, (se, demos.actions[ei]), (sa, b.actions))
    disc.tree.adam_step(cfg.disc_lr)
    return loss


# ---------------------------------------------------------------------------
# transfer


def transfer_policy(source: PolicyBundle, target_demos: envsim.DemoBuffer,
                    cvae_cfg: CVAEConfig, seed: int = 0) -> tuple:
    """Compose the source latent actor with a decoder retrained on target demos.

    Touches the target environment only through the provided demonstrations.
    Returns (bundle, codec_history).
    """
    if source.kind != "latent":
        raise ConfigError("only latent policies can be transferred by decoder retraining")
    if cvae_cfg.latent_dim != source.u_dim:
        raise ConfigError(
            f"latent dim mismatch: source actor emits {source.u_dim}, "
            f"target codec config says {cvae_cfg.latent_dim}"
        )
    new_codec, history = latentact.train_codec(target_demos, cvae_cfg, seed)
    latentact.freeze(new_codec)
    bundle = PolicyBundle(env_id=target_demos.env_id, kind="latent",
                          actor=source.actor.copy(), u_dim=source.u_dim,
                          codec=new_codec)
    return bundle, history


# ---------------------------------------------------------------------------
# curve and checkpoint serialization


def curve_to_csv(curve) -> str:
    from .configio import format_float

    lines = [",".join(CURVE_COLUMNS)]
    for row in curve:
        lines.append(",".join([str(row.env_steps)] + [
            format_float(getattr(row, c)) for c in CURVE_COLUMNS[1:]
        ]))
    return "\n".join(lines) + "\n"


def curve_from_csv(text: str) -> list:
    lines = [l for l in text.strip().splitlines() if l]
    if not lines or lines[0] != ",".join(CURVE_COLUMNS):
        raise CheckpointError("unrecognized curve CSV header")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        rows.append(CurveRow(int(vals[0]), *[float(v) for v in vals[1:]]))
    return rows


def aggregate_curves(curves) -> list:
    """Mean/std of normalized and raw returns across seeds at matched steps."""
    steps = [tuple(r.env_steps for r in c) for c in curves]
    if len(set(steps)) != 1:
        raise ConfigError("cannot aggregate curves with different eval grids")
    out = []
    for i in range(len(curves[0])):
        rows = [c[i] for c in curves]
        out.append({
            "env_steps": rows[0].env_steps,
            "mean_return": float(np.mean([r.mean_eval_return for r in rows])),
            "std_return": float(np.std([r.mean_eval_return for r in rows])),
            "mean_norm_return": float(np.mean([r.norm_eval_return for r in rows])),
            "std_norm_return": float(np.std([r.norm_eval_return for r in rows])),
        })
    return out


AGGREGATE_COLUMNS = ("env_steps", "mean_return", "std_return",
                     "mean_norm_return", "std_norm_return")


def aggregate_to_csv(rows) -> str:
    from .configio import format_float

    lines = [",".join(AGGREGATE_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(r["env_steps"])] + [
            format_float(r[c]) for c in AGGREGATE_COLUMNS[1:]
        ]))
    return "\n".join(lines) + "\n"


def save_policy(path, bundle: PolicyBundle) -> None:
    buf = io.BytesIO()
    buf.write(POLICY_MAGIC)
    buf.write(struct.pack("<I", POLICY_VERSION))
    eid = bundle.env_id.encode()
    buf.write(struct.pack("<H", len(eid)))
    buf.write(eid)
    kind = bundle.kind.encode()
    buf.write(struct.pack("<H", len(kind)))
    buf.write(kind)
    buf.write(struct.pack("<I", bundle.u_dim))
    spec = bundle.actor.spec
    buf.write(struct.pack("<I", spec.input_dim))
    buf.write(struct.pack("<H", len(spec.hidden)))
    for h in spec.hidden:
        buf.write(struct.pack("<I", h))
    write_segment(buf, bundle.actor)
    if bundle.kind == "latent":
        import tempfile

        with tempfile.TemporaryDirectory() as td:
            p = f"{td}/codec"
            latentact.save_codec(p, bundle.codec)
            blob = open(p, "rb").read()
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    from .configio import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue())


def load_policy(path) -> PolicyBundle:
    with open(path, "rb") as fh:
        if fh.read(len(POLICY_MAGIC)) != POLICY_MAGIC:
            raise CheckpointError(f"{path}: not a policy checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != POLICY_VERSION:
            raise CheckpointError(f"{path}: unsupported policy version {version}")
        (elen,) = struct.unpack("<H", fh.read(2))
        env_id = fh.read(elen).decode()
        (klen,) = struct.unpack("<H", fh.read(2))
        kind = fh.read(klen).decode()
        (u_dim,) = struct.unpack("<I", fh.read(4))
        (in_dim,) = struct.unpack("<I", fh.read(4))
        (nh,) = struct.unpack("<H", fh.read(2))
        hidden = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(nh))
        spec = MLPSpec(in_dim, hidden, 2 * u_dim, activation="relu")
        actor = read_segment(fh, spec)
        codec = None
        if kind == "latent":
            (blen,) = struct.unpack("<Q", fh.read(8))
            blob = fh.read(blen)
            import tempfile

            with tempfile.TemporaryDirectory() as td:
                p = f"{td}/codec"
                with open(p, "wb") as out:
                    out.write(blob)
                codec = latentact.load_codec(p)
    return PolicyBundle(env_id=env_id, kind=kind, actor=actor, u_dim=u_dim,
                        codec=codec)

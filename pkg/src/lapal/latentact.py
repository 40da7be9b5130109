"""Conditional variational autoencoder over actions.

The encoder maps a state-action pair to a diagonal Gaussian over a
low-dimensional latent; the decoder maps (state, latent) back to a bounded
action. Latent actions live in the open box (-1, 1)^d: the deterministic
encoding is tanh of the posterior mean and sampled encodings squash the
reparameterized draw, so the latent box matches what a squashed-Gaussian
policy emits. The KL regularizer is computed on the pre-squash Gaussian
against a standard-normal prior, which equals the KL between the squashed
distributions exactly (KL is invariant under the shared bijection).

Training minimizes  ||a - decode(s, sample)||^2 + beta * KL  per pair with a
single reparameterized sample, on expert demonstrations only.
"""

from __future__ import annotations

import hashlib
import io
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import envsim
from .errors import CheckpointError, ConfigError, QualityGateError, StateError
from .nncore import (
    GaussianDist,
    MLPSpec,
    ParamTree,
    gaussian_head,
    read_segment,
    write_segment,
)

CODEC_MAGIC = b"LPCODEC\x00"
CODEC_VERSION = 1


@dataclass(frozen=True)
class CVAEConfig:
    latent_dim: int = 4
    beta: float = 2e-4
    encoder_hidden: tuple = (64, 64)
    decoder_hidden: tuple = (64, 64)
    activation: str = "leaky_relu"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    holdout_fraction: float = 0.1
    sample_encoding: bool = False      # ablation: sampled instead of mean encodes

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")

    def canonical(self) -> str:
        return (
            f"cvae:d={self.latent_dim};beta={self.beta!r};"
            f"enc={','.join(map(str, self.encoder_hidden))};"
            f"dec={','.join(map(str, self.decoder_hidden))};act={self.activation};"
            f"sample={int(self.sample_encoding)}"
        )


def encoder_spec(feat_dim: int, action_dim: int, cfg: CVAEConfig) -> MLPSpec:
    return MLPSpec(feat_dim + action_dim, cfg.encoder_hidden, 2 * cfg.latent_dim,
                   activation=cfg.activation)


def decoder_spec(feat_dim: int, action_dim: int, cfg: CVAEConfig) -> MLPSpec:
    return MLPSpec(feat_dim + cfg.latent_dim, cfg.decoder_hidden, action_dim,
                   activation=cfg.activation, output_activation="tanh")


@dataclass
class ActionCodec:
    encoder: ParamTree
    decoder: ParamTree
    config: CVAEConfig
    env_id: str
    state_dim: int
    action_dim: int
    action_high: np.ndarray
    frozen: bool = False

    @property
    def feat_dim(self) -> int:
        return envsim.feature_dim(self.env_id)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.encoder.digest().encode())
        h.update(self.decoder.digest().encode())
        h.update(self.config.canonical().encode())
        return h.hexdigest()

    def copy(self, frozen: bool | None = None) -> "ActionCodec":
        return ActionCodec(
            encoder=self.encoder.copy(), decoder=self.decoder.copy(),
            config=self.config, env_id=self.env_id, state_dim=self.state_dim,
            action_dim=self.action_dim, action_high=self.action_high.copy(),
            frozen=self.frozen if frozen is None else frozen,
        )

    def require_mutable(self):
        if self.frozen:
            raise StateError("codec is frozen; its parameters must not change")


def make_codec(env_id: str, cfg: CVAEConfig, seed) -> ActionCodec:
    spec = envsim.env_spec(env_id)
    if cfg.latent_dim >= spec.action_dim:
        warnings.warn(
            f"latent_dim {cfg.latent_dim} >= action_dim {spec.action_dim} on "
            f"{env_id}: the action abstraction is vacuous",
            RuntimeWarning,
        )
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    feat = envsim.feature_dim(env_id)
    return ActionCodec(
        encoder=ParamTree.init(encoder_spec(feat, spec.action_dim, cfg), rng),
        decoder=ParamTree.init(decoder_spec(feat, spec.action_dim, cfg), rng),
        config=cfg,
        env_id=env_id,
        state_dim=spec.state_dim,
        action_dim=spec.action_dim,
        action_high=np.array(spec.action_high, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# encode / decode


def encode(codec: ActionCodec, states, actions, record: bool = False) -> GaussianDist:
    """Posterior over the pre-squash latent; tanh of its samples/mean is the
    latent action. States are raw env states, featurized internally."""
    feats = envsim.feature_map(codec.env_id, states)
    x = np.concatenate([np.atleast_2d(feats), np.atleast_2d(actions)], axis=1)
    if not np.all(np.isfinite(x)):
        raise ConfigError("non-finite inputs to encode")
    raw = codec.encoder.forward(x, record=record)
    dist, _ = gaussian_head(raw)
    return dist


def encode_mean(codec: ActionCodec, states, actions) -> np.ndarray:
    """Deterministic latent encoding: tanh of the posterior mean."""
    return np.tanh(encode(codec, states, actions).mean)


def encode_sample(codec: ActionCodec, states, actions, rng) -> np.ndarray:
    dist = encode(codec, states, actions)
    return np.tanh(dist.sample(rng.standard_normal(dist.mean.shape)))


def encode_for_training(codec: ActionCodec, states, actions, rng=None) -> np.ndarray:
    """Latent actions fed to discriminators/critics; mean unless the
    sampled-encoding ablation is enabled."""
    if codec.config.sample_encoding:
        if rng is None:
            raise ConfigError("sampled encoding needs an rng")
        return encode_sample(codec, states, actions, rng)
    return encode_mean(codec, states, actions)


def decode(codec: ActionCodec, states, latents, record: bool = False) -> np.ndarray:
    """Map latent actions back to env actions, strictly inside the bounds."""
    s2 = np.atleast_2d(envsim.feature_map(codec.env_id, states))
    z2 = np.atleast_2d(latents)
    if z2.shape[1] != codec.latent_dim:
        raise ConfigError(f"latent width {z2.shape[1]} != latent_dim {codec.latent_dim}")
    out = codec.decoder.forward(np.concatenate([s2, z2], axis=1), record=record)
    out = out * codec.action_high
    return out[0] if np.asarray(states).ndim == 1 else out


# ---------------------------------------------------------------------------
# loss


def cvae_loss(codec: ActionCodec, states, actions, noise) -> tuple:
    """Reconstruction + beta * KL, averaged over the batch; loss = recon + beta*kl."""
    loss, parts, _ = _cvae_forward(codec, states, actions, noise, record=False)
    return loss, parts


def _cvae_forward(codec, states, actions, noise, record):
    S = np.atleast_2d(states)
    A = np.atleast_2d(actions)
    dist = encode(codec, S, A, record=record)
    z = dist.sample(noise)
    abar = np.tanh(z)
    recon = decode(codec, S, abar, record=record)
    err = recon - A
    recon_term = float(np.mean(np.sum(err * err, axis=1)))
    kl_term = float(np.mean(dist.kl_to_standard()))
    loss = recon_term + codec.config.beta * kl_term
    cache = (S, A, dist, z, abar, recon, err)
    return loss, {"recon": recon_term, "kl": kl_term}, cache


def cvae_loss_and_grad(codec: ActionCodec, states, actions, noise) -> tuple:
    """As cvae_loss, but also accumulates encoder/decoder gradients."""
    loss, parts, cache = _cvae_forward(codec, states, actions, noise, record=True)
    S, A, dist, z, abar, recon, err = cache
    B = S.shape[0]
    beta = codec.config.beta
    # reconstruction path: d/d(decoder output before bound scaling)
    d_dec_out = (2.0 / B) * err * codec.action_high
    d_in = codec.decoder.backward(d_dec_out)
    d_abar = d_in[:, codec.feat_dim:]
    d_z = d_abar * (1.0 - abar * abar)
    sigma = dist.std
    d_mean = d_z + (beta / B) * dist.mean
    d_log_std = d_z * sigma * noise + (beta / B) * (sigma * sigma - 1.0)
    # log-std clamp subgradient: zero where the head output was clipped
    from .nncore import LOG_STD_MAX, LOG_STD_MIN

    ls_ok = ((dist.log_std > LOG_STD_MIN) & (dist.log_std < LOG_STD_MAX)).astype(float)
    codec.encoder.backward(np.concatenate([d_mean, d_log_std * ls_ok], axis=1))
    return loss, parts


# ---------------------------------------------------------------------------
# training


def train_codec(demos: envsim.DemoBuffer, cfg: CVAEConfig, seed) -> tuple:
    """Minibatch Adam on the CVAE loss over expert demos.

    Returns (codec, history). Episodes are split 90/10 into train/held-out
    sets; the held-out reconstruction error must beat predicting the train
    corpus mean action or the codec is rejected.
    """
    seq = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    init_rng, batch_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    codec = make_codec(demos.env_id, cfg, init_rng)

    slices = demos.episode_slices()
    n_hold = max(1, int(round(cfg.holdout_fraction * len(slices)))) if len(slices) > 1 else 0
    hold_slices = slices[len(slices) - n_hold:]
    train_slices = slices[: len(slices) - n_hold] or slices
    tr_idx = np.concatenate([np.arange(s.start, s.stop) for s in train_slices])
    ho_idx = (np.concatenate([np.arange(s.start, s.stop) for s in hold_slices])
              if hold_slices else tr_idx)
    S_tr, A_tr = demos.states[tr_idx], demos.actions[tr_idx]
    S_ho, A_ho = demos.states[ho_idx], demos.actions[ho_idx]

    history = {"loss": [], "recon": [], "kl": [], "holdout_recon": []}
    n = len(tr_idx)
    for _ in range(cfg.epochs):
        order = batch_rng.permutation(n)
        ep_loss, ep_recon, ep_kl, n_batches = 0.0, 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            noise = batch_rng.standard_normal((len(idx), cfg.latent_dim))
            loss, parts = cvae_loss_and_grad(codec, S_tr[idx], A_tr[idx], noise)
            if not np.isfinite(loss):
                raise QualityGateError(
                    f"CVAE loss became non-finite (recon={parts['recon']}, kl={parts['kl']})"
                )
            codec.encoder.adam_step(cfg.lr)
            codec.decoder.adam_step(cfg.lr)
            ep_loss += loss
            ep_recon += parts["recon"]
            ep_kl += parts["kl"]
            n_batches += 1
        history["loss"].append(ep_loss / n_batches)
        history["recon"].append(ep_recon / n_batches)
        history["kl"].append(ep_kl / n_batches)
        history["holdout_recon"].append(holdout_reconstruction_mse(codec, S_ho, A_ho))

    baseline = float(np.mean(np.sum((A_ho - A_tr.mean(axis=0)) ** 2, axis=1)))
    final = holdout_reconstruction_mse(codec, S_ho, A_ho)
    history["holdout_baseline"] = baseline
    history["holdout_final"] = final
    if cfg.epochs > 0 and final >= baseline:
        raise QualityGateError(
            f"codec rejected: held-out reconstruction {final:.6f} does not beat "
            f"the corpus-mean baseline {baseline:.6f}"
        )
    return codec, history


def holdout_reconstruction_mse(codec: ActionCodec, states, actions) -> float:
    """Mean squared reconstruction error of the deterministic round trip."""
    abar = encode_mean(codec, states, actions)
    recon = decode(codec, states, abar)
    return float(np.mean(np.sum((recon - actions) ** 2, axis=1)))


def freeze(codec: ActionCodec) -> ActionCodec:
    codec.frozen = True
    return codec


# ---------------------------------------------------------------------------
# checkpoints


def save_codec(path, codec: ActionCodec) -> None:
    buf = io.BytesIO()
    buf.write(CODEC_MAGIC)
    buf.write(struct.pack("<I", CODEC_VERSION))
    eid = codec.env_id.encode()
    buf.write(struct.pack("<H", len(eid)))
    buf.write(eid)
    buf.write(bytes.fromhex(envsim.env_spec(codec.env_id).digest()))
    cfg = codec.config.canonical().encode()
    buf.write(struct.pack("<H", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<IIIB", codec.state_dim, codec.action_dim,
                          codec.latent_dim, int(codec.frozen)))
    buf.write(struct.pack("<d", codec.config.beta))
    buf.write(np.ascontiguousarray(codec.action_high, dtype="<f8").tobytes())
    write_segment(buf, codec.encoder)
    write_segment(buf, codec.decoder)
    from .configio import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue())


def load_codec(path, cfg: CVAEConfig | None = None) -> ActionCodec:
    with open(path, "rb") as fh:
        if fh.read(len(CODEC_MAGIC)) != CODEC_MAGIC:
            raise CheckpointError(f"{path}: not a codec checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CODEC_VERSION:
            raise CheckpointError(f"{path}: unsupported codec version {version}")
        (elen,) = struct.unpack("<H", fh.read(2))
        env_id = fh.read(elen).decode()
        digest = fh.read(32).hex()
        spec = envsim.env_spec(env_id)
        if spec.digest() != digest:
            raise CheckpointError(
                f"{path}: codec was trained against a different {env_id} definition"
            )
        (clen,) = struct.unpack("<H", fh.read(2))
        canonical = fh.read(clen).decode()
        state_dim, action_dim, latent_dim, frozen = struct.unpack("<IIIB", fh.read(13))
        if (state_dim, action_dim) != (spec.state_dim, spec.action_dim):
            raise CheckpointError(
                f"{path}: codec dims ({state_dim}, {action_dim}) do not match "
                f"{env_id} ({spec.state_dim}, {spec.action_dim})"
            )
        (beta,) = struct.unpack("<d", fh.read(8))
        high = np.frombuffer(fh.read(8 * action_dim), dtype="<f8").astype(np.float64)
        if cfg is None:
            cfg = _config_from_canonical(canonical, latent_dim, beta)
        if cfg.canonical() != canonical:
            raise CheckpointError(
                f"{path}: codec config {canonical!r} != expected {cfg.canonical()!r}"
            )
        feat = envsim.feature_dim(env_id)
        enc = read_segment(fh, encoder_spec(feat, action_dim, cfg))
        dec = read_segment(fh, decoder_spec(feat, action_dim, cfg))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        codec = ActionCodec(
            encoder=enc, decoder=dec, config=cfg, env_id=env_id,
            state_dim=state_dim, action_dim=action_dim, action_high=high,
            frozen=bool(frozen),
        )
    return codec


def _config_from_canonical(canonical: str, latent_dim: int, beta: float) -> CVAEConfig:
    fields_ = dict(kv.split("=", 1) for kv in canonical.removeprefix("cvae:").split(";"))
    return CVAEConfig(
        latent_dim=latent_dim,
        beta=beta,
        encoder_hidden=tuple(int(x) for x in fields_["enc"].split(",")),
        decoder_hidden=tuple(int(x) for x in fields_["dec"].split(",")),
        activation=fields_["act"],
        sample_encoding=bool(int(fields_["sample"])),
    )

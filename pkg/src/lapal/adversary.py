"""Discriminator between expert and agent pairs, and the reward it induces.

The network emits one raw logit l; the classification probability is
sigmoid(l) but all arithmetic stays in logit space. The training loss is the
numerically stable binary cross-entropy

    loss = mean softplus(-l_expert) + mean softplus(l_agent)

whose minimization ascends  E_expert[log D] + E_agent[log(1 - D)].  The
generator reward is -log(1 - D(s, u)) = softplus(l): finite and non-negative
for every finite logit, so the classic overflow of the naive formula cannot
occur. Input composition (raw action vs latent, dims, env) is recorded next
to the weights so mismatched pairings are rejected at load time.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import envsim
from .errors import CheckpointError, ConfigError
from .nncore import MLPSpec, ParamTree, read_segment, sigmoid, softplus, write_segment

DISC_MAGIC = b"LPDISC\x00"
DISC_VERSION = 1


@dataclass(frozen=True)
class DiscComposition:
    """What the discriminator classifies: (state, raw action) or (state, latent)."""

    env_id: str
    input_kind: str                    # "raw" | "latent"
    state_dim: int
    u_dim: int
    codec_digest: str = ""             # latent mode only

    def __post_init__(self):
        if self.input_kind not in ("raw", "latent"):
            raise ConfigError(f"unknown discriminator input kind {self.input_kind!r}")

    def canonical(self) -> str:
        return (
            f"disc:{self.env_id};{self.input_kind};s={self.state_dim};"
            f"u={self.u_dim};codec={self.codec_digest}"
        )


@dataclass
class Discriminator:
    tree: ParamTree
    composition: DiscComposition

    @property
    def spec(self) -> MLPSpec:
        return self.tree.spec

    def digest(self) -> str:
        return self.tree.digest()


def make_discriminator(composition: DiscComposition, hidden, seed) -> Discriminator:
    spec = MLPSpec(composition.state_dim + composition.u_dim, tuple(hidden), 1,
                   activation="tanh")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Discriminator(tree=ParamTree.init(spec, rng), composition=composition)


def _stack(states, actions):
    return np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)


def disc_logit(d: Discriminator, states, actions, record: bool = False) -> np.ndarray:
    x = _stack(states, actions)
    if x.shape[1] != d.spec.input_dim:
        raise ConfigError(
            f"discriminator input width {x.shape[1]} != expected {d.spec.input_dim}"
        )
    out = d.tree.forward(x, record=record)
    return out[:, 0]


def disc_prob(d: Discriminator, states, actions) -> np.ndarray:
    return sigmoid(disc_logit(d, states, actions))


def disc_reward(d: Discriminator, states, actions) -> np.ndarray:
    """-log(1 - D) computed as softplus(logit): finite, >= 0."""
    return softplus(disc_logit(d, states, actions))


def disc_loss(d: Discriminator, expert_batch, agent_batch) -> float:
    se, ue = expert_batch
    sa, ua = agent_batch
    le = disc_logit(d, se, ue)
    la = disc_logit(d, sa, ua)
    return float(np.mean(softplus(-le)) + np.mean(softplus(la)))


def disc_loss_and_grad(d: Discriminator, expert_batch, agent_batch,
                       want_input_grads: bool = False):
    """Accumulate discriminator gradients for one balanced minibatch.

    Expert rows are labeled 1, agent rows 0. With want_input_grads the
    per-row gradients of the loss w.r.t. the expert and agent (state, u)
    inputs are returned as well, which is what chains the loss into an
    action encoder when the latent space itself is being trained.
    """
    se, ue = expert_batch
    sa, ua = agent_batch
    xe, xa = _stack(se, ue), _stack(sa, ua)
    if xe.shape[0] == 0 or xa.shape[0] == 0:
        raise ConfigError("both discriminator batches must be non-empty")
    x = np.concatenate([xe, xa], axis=0)
    out = d.tree.forward(x, record=True)
    logits = out[:, 0]
    ne, na = xe.shape[0], xa.shape[0]
    le, la = logits[:ne], logits[ne:]
    loss = float(np.mean(softplus(-le)) + np.mean(softplus(la)))
    upstream = np.empty((ne + na, 1))
    upstream[:ne, 0] = (sigmoid(le) - 1.0) / ne
    upstream[ne:, 0] = sigmoid(la) / na
    d_in = d.tree.backward(upstream)
    if want_input_grads:
        return loss, d_in[:ne], d_in[ne:]
    return loss


# ---------------------------------------------------------------------------
# checkpoints


def save_discriminator(path, d: Discriminator) -> None:
    buf = io.BytesIO()
    buf.write(DISC_MAGIC)
    buf.write(struct.pack("<I", DISC_VERSION))
    comp = d.composition.canonical().encode()
    buf.write(struct.pack("<H", len(comp)))
    buf.write(comp)
    buf.write(bytes.fromhex(envsim.env_spec(d.composition.env_id).digest()))
    hidden = d.spec.hidden
    buf.write(struct.pack("<H", len(hidden)))
    for h in hidden:
        buf.write(struct.pack("<I", h))
    write_segment(buf, d.tree)
    from .configio import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue())


def load_discriminator(path, expected: DiscComposition | None = None) -> Discriminator:
    with open(path, "rb") as fh:
        if fh.read(len(DISC_MAGIC)) != DISC_MAGIC:
            raise CheckpointError(f"{path}: not a discriminator checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != DISC_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (clen,) = struct.unpack("<H", fh.read(2))
        canonical = fh.read(clen).decode()
        comp = _composition_from_canonical(canonical)
        digest = fh.read(32).hex()
        if envsim.env_spec(comp.env_id).digest() != digest:
            raise CheckpointError(
                f"{path}: discriminator trained against a different "
                f"{comp.env_id} definition"
            )
        if expected is not None and expected.canonical() != canonical:
            raise CheckpointError(
                f"{path}: composition {canonical!r} does not match the "
                f"expected {expected.canonical()!r}; refusing the pairing"
            )
        (nh,) = struct.unpack("<H", fh.read(2))
        hidden = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(nh))
        spec = MLPSpec(comp.state_dim + comp.u_dim, hidden, 1, activation="tanh")
        tree = read_segment(fh, spec)
    return Discriminator(tree=tree, composition=comp)


def _composition_from_canonical(canonical: str) -> DiscComposition:
    body = canonical.removeprefix("disc:")
    env_id, kind, s, u, codec = body.split(";")
    return DiscComposition(
        env_id=env_id, input_kind=kind,
        state_dim=int(s.removeprefix("s=")), u_dim=int(u.removeprefix("u=")),
        codec_digest=codec.removeprefix("codec="),
    )

"""Dense networks with hand-rolled reverse-mode gradients, plus Adam.

Everything is float64 and single-threaded so that analytic gradients can be
checked against central finite differences to tight tolerances. A ParamTree
owns the weights of one MLP together with gradient buffers and Adam moments;
forward passes optionally record a tape that the matching backward pass
consumes. Gradients accumulate across backward calls until an optimizer step
zeroes them, which is what lets a loss with several expectation terms sum
its pieces before updating.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, OptimizerError, StateError

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
OUTPUT_ACTIVATIONS = ("identity", "tanh")
LEAKY_SLOPE = 0.01

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0

# float64 tanh rounds to exactly +-1.0 when saturated; outputs that must stay
# strictly inside the open interval are capped just inside it
TANH_CAP = 1.0 - 1e-12

SEGMENT_MAGIC = b"LPSEG\x00"
SEGMENT_VERSION = 1


# ---------------------------------------------------------------------------
# numerics helpers shared across modules


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    # log(1 + e^x) without overflow for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def tanh_log_jacobian(z):
    # log(1 - tanh(z)^2) = 2*(log 2 - z - softplus(-2z)), exact and stable
    return 2.0 * (np.log(2.0) - z - softplus(-2.0 * z))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLPSpec:
    """Shape and activation description of one dense network."""

    input_dim: int
    hidden: tuple
    output_dim: int
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"non-positive dims in {self}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be a non-empty positive list, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def dims(self):
        return (self.input_dim,) + self.hidden + (self.output_dim,)

    def canonical(self) -> str:
        return (
            f"mlp:in={self.input_dim};hidden={','.join(map(str, self.hidden))};"
            f"out={self.output_dim};act={self.activation};outact={self.output_activation}"
        )

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "leaky_relu":
        return np.where(x >= 0.0, x, LEAKY_SLOPE * x)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad_from_output(name, a):
    # derivative of the activation expressed through its own output; valid
    # because every supported activation is sign-preserving or smooth
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(a > 0.0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


@dataclass
class DenseLayer:
    w: np.ndarray
    b: np.ndarray
    gw: np.ndarray = field(default=None, repr=False)
    gb: np.ndarray = field(default=None, repr=False)
    mw: np.ndarray = field(default=None, repr=False)
    vw: np.ndarray = field(default=None, repr=False)
    mb: np.ndarray = field(default=None, repr=False)
    vb: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("gw", "mw", "vw"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.w))
        for name in ("gb", "mb", "vb"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.b))


class ParamTree:
    """Weights + grads + Adam state for one MLP, with a single forward tape."""

    def __init__(self, spec: MLPSpec, layers, step: int = 0):
        self.spec = spec
        self.layers = layers
        self.step = step
        self._tape = None

    @classmethod
    def init(cls, spec: MLPSpec, rng: np.random.Generator) -> "ParamTree":
        dims = spec.dims()
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            layers.append(DenseLayer(w=w, b=b))
        return cls(spec, layers)

    @classmethod
    def zeros(cls, spec: MLPSpec) -> "ParamTree":
        dims = spec.dims()
        layers = [
            DenseLayer(w=np.zeros((i, o)), b=np.zeros(o))
            for i, o in zip(dims[:-1], dims[1:])
        ]
        return cls(spec, layers)

    # -- parameter plumbing -------------------------------------------------

    def n_params(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.w.ravel(), l.b]) for l in self.layers])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for l in self.layers:
            n = l.w.size
            l.w[...] = vec[i : i + n].reshape(l.w.shape)
            i += n
            l.b[...] = vec[i : i + l.b.size]
            i += l.b.size
        if i != vec.size:
            raise ConfigError(f"flat vector length {vec.size} != {self.n_params()}")

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.gw.ravel(), l.gb]) for l in self.layers])

    def zero_grads(self) -> None:
        for l in self.layers:
            l.gw[...] = 0.0
            l.gb[...] = 0.0

    def copy(self) -> "ParamTree":
        layers = [
            DenseLayer(
                w=l.w.copy(), b=l.b.copy(), gw=l.gw.copy(), gb=l.gb.copy(),
                mw=l.mw.copy(), vw=l.vw.copy(), mb=l.mb.copy(), vb=l.vb.copy(),
            )
            for l in self.layers
        ]
        return ParamTree(self.spec, layers, step=self.step)

    def digest(self) -> str:
        h = hashlib.sha256(self.spec.canonical().encode())
        for l in self.layers:
            h.update(np.ascontiguousarray(l.w).tobytes())
            h.update(np.ascontiguousarray(l.b).tobytes())
        return h.hexdigest()

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        squeeze = x.ndim == 1
        a = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if a.shape[1] != self.spec.input_dim:
            raise ConfigError(
                f"input width {a.shape[1]} does not match spec input_dim {self.spec.input_dim}"
            )
        inputs = [a] if record else None
        last = len(self.layers) - 1
        for i, l in enumerate(self.layers):
            z = a @ l.w + l.b
            act = self.spec.output_activation if i == last else self.spec.activation
            a = _act(act, z)
            if i == last and act == "tanh":
                a = np.clip(a, -TANH_CAP, TANH_CAP)
            if record and i < last:
                inputs.append(a)
        if record:
            self._tape = (inputs, a)
        return a[0] if squeeze else a

    def backward(self, upstream: np.ndarray, accumulate: bool = True) -> np.ndarray:
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass")
        inputs, out = self._tape
        self._tape = None
        d = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if d.shape != out.shape:
            raise ConfigError(f"upstream shape {d.shape} != output shape {out.shape}")
        d = d * _act_grad_from_output(self.spec.output_activation, out)
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            if accumulate:
                l.gw += inputs[i].T @ d
                l.gb += d.sum(axis=0)
            d = d @ l.w.T
            if i > 0:
                d *= _act_grad_from_output(self.spec.activation, inputs[i])
        return d if upstream.ndim > 1 else d[0]

    # -- Adam -----------------------------------------------------------------

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        for k, l in enumerate(self.layers):
            if not (np.all(np.isfinite(l.gw)) and np.all(np.isfinite(l.gb))):
                bad_w = int(np.sum(~np.isfinite(l.gw)))
                bad_b = int(np.sum(~np.isfinite(l.gb)))
                raise OptimizerError(
                    f"non-finite gradient in layer {k} of {self.spec.canonical()}: "
                    f"{bad_w} weight entries, {bad_b} bias entries; step aborted"
                )
        self.step += 1
        c1 = 1.0 - beta1 ** self.step
        c2 = 1.0 - beta2 ** self.step
        for l in self.layers:
            for p, g, m, v in ((l.w, l.gw, l.mw, l.vw), (l.b, l.gb, l.mb, l.vb)):
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.zero_grads()


class AdamScalar:
    """Adam for a single scalar parameter (entropy temperature)."""

    def __init__(self, value: float):
        self.value = float(value)
        self.m = 0.0
        self.v = 0.0
        self.step = 0

    def update(self, grad: float, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
        if not np.isfinite(grad):
            raise OptimizerError(f"non-finite scalar gradient {grad}")
        self.step += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        mhat = self.m / (1.0 - beta1 ** self.step)
        vhat = self.v / (1.0 - beta2 ** self.step)
        self.value -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# diagonal Gaussians


@dataclass
class GaussianDist:
    """Diagonal Gaussian given by mean and clamped log-std (vector or batch)."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64),
                               LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self):
        return np.exp(self.log_std)

    def sample(self, noise: np.ndarray) -> np.ndarray:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != self.mean.shape:
            raise ConfigError(f"noise shape {noise.shape} != mean shape {self.mean.shape}")
        return self.mean + self.std * noise

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        per_dim = -0.5 * z * z - self.log_std - 0.5 * np.log(2.0 * np.pi)
        return per_dim.sum(axis=-1)

    def kl_to_standard(self) -> np.ndarray:
        """KL(N(mean, std) || N(0, I)), summed over dims; >= 0 always."""
        var = np.exp(2.0 * self.log_std)
        per_dim = 0.5 * (self.mean ** 2 + var - 1.0) - self.log_std
        return per_dim.sum(axis=-1)


def gaussian_head(raw: np.ndarray, log_std_min: float = LOG_STD_MIN,
                  log_std_max: float = LOG_STD_MAX):
    """Split a (..., 2d) network output into a GaussianDist plus clamp mask.

    The mask is 1 where the raw log-std fell inside the clamp bounds, which is
    the subgradient callers multiply into the log-std upstream when chaining
    through the head.
    """
    if raw.shape[-1] % 2 != 0:
        raise ConfigError(f"gaussian head needs an even output width, got {raw.shape[-1]}")
    d = raw.shape[-1] // 2
    mean = raw[..., :d]
    raw_ls = raw[..., d:]
    mask = ((raw_ls > log_std_min) & (raw_ls < log_std_max)).astype(np.float64)
    return GaussianDist(mean, np.clip(raw_ls, log_std_min, log_std_max)), mask


def gaussian_kl_to_standard(d: GaussianDist) -> float:
    return float(np.sum(d.kl_to_standard()))


# ---------------------------------------------------------------------------
# checkpoint segments


def write_segment(fh: io.BufferedIOBase, tree: ParamTree) -> None:
    fh.write(SEGMENT_MAGIC)
    fh.write(struct.pack("<I", SEGMENT_VERSION))
    fh.write(tree.spec.digest())
    fh.write(struct.pack("<Q", tree.step))
    for l in tree.layers:
        for arr in (l.w, l.b, l.mw, l.vw, l.mb, l.vb):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_segment(fh: io.BufferedIOBase, spec: MLPSpec) -> ParamTree:
    magic = fh.read(len(SEGMENT_MAGIC))
    if magic != SEGMENT_MAGIC:
        raise CheckpointError(f"bad segment magic {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != SEGMENT_VERSION:
        raise CheckpointError(f"unsupported segment version {version}")
    digest = fh.read(32)
    if digest != spec.digest():
        raise CheckpointError(
            f"segment was written for a different network spec than {spec.canonical()}"
        )
    (step,) = struct.unpack("<Q", fh.read(8))
    tree = ParamTree.zeros(spec)
    tree.step = step
    for l in tree.layers:
        for arr in (l.w, l.b, l.mw, l.vw, l.mb, l.vb):
            raw = fh.read(arr.size * 8)
            if len(raw) != arr.size * 8:
                raise CheckpointError("truncated segment")
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
    return tree

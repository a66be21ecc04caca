"""Noise-prediction backends.

Two interchangeable backends implement ``predict_noise(x_t, t)``:

* :class:`GMMScoreModel` evaluates the exact scaled score of a Gaussian
  mixture diffused to time t. If the data distribution is
  sum_i w_i N(mu_i, v_i I), the distribution at time t is
  sum_i w_i N(sqrt(ab_t) mu_i, (ab_t v_i + 1 - ab_t) I)
  and the model returns -sqrt(1 - ab_t) * grad_x log q_t(x). No training
  involved; this is the ground-truth oracle for solver studies.

* :class:`TinyNet` is a small fully-connected network over flattened
  rasters with a sinusoidal time embedding, trained by plain
  reverse-mode differentiation written out by hand (no framework).

Checkpoints use a little-endian binary format: magic ``HLCK``, a u32
version, a u32 channel count, image height/width, the time-embedding
width, an activation id, the layer-shape table, then all weights and
biases as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .schedules import NoiseSchedule, diffuse

__all__ = [
    "GMM",
    "GMMScoreModel",
    "TinyNet",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "train_tinynet",
    "sinusoidal_embedding",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"HLCK"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"relu": 0, "tanh": 1, "silu": 2}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATIONS.items()}


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------------------
# analytic Gaussian-mixture backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GMM:
    """Isotropic Gaussian mixture: weights w_i, means mu_i, variances v_i."""

    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, d)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        v = np.asarray(self.variances, dtype=float)
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()}, expected 1")
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        if m.shape[0] != w.shape[0] or v.shape[0] != w.shape[0]:
            raise ValueError("weights, means, variances must share K")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Full covariance of the mixture."""
        mu = self.mean()
        d = self.dim
        cov = np.zeros((d, d))
        for w, m, v in zip(self.weights, self.means, self.variances):
            diff = m - mu
            cov += w * (v * np.eye(d) + np.outer(diff, diff))
        return cov

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * eps

    def diffused_log_density(self, x: np.ndarray, alpha_bar: float) -> np.ndarray:
        """log q_t(x) for the mixture diffused to signal level alpha_bar."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = np.sqrt(alpha_bar) * self.means                    # (K, d)
        s2 = alpha_bar * self.variances + (1.0 - alpha_bar)    # (K,)
        d = self.dim
        diff = x[:, None, :] - m[None, :, :]                   # (n, K, d)
        sq = np.sum(diff * diff, axis=2)                       # (n, K)
        logp = (np.log(self.weights)[None, :]
                - 0.5 * sq / s2[None, :]
                - 0.5 * d * np.log(2 * np.pi * s2)[None, :])
        mx = logp.max(axis=1, keepdims=True)
        return (mx[:, 0] + np.log(np.sum(np.exp(logp - mx), axis=1)))

    def diffused_score(self, x: np.ndarray, alpha_bar: float) -> np.ndarray:
        """grad_x log q_t(x) with log-sum-exp stabilized responsibilities."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = np.sqrt(alpha_bar) * self.means
        s2 = alpha_bar * self.variances + (1.0 - alpha_bar)
        d = self.dim
        diff = x[:, None, :] - m[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        logp = (np.log(self.weights)[None, :]
                - 0.5 * sq / s2[None, :]
                - 0.5 * d * np.log(2 * np.pi * s2)[None, :])
        mx = logp.max(axis=1, keepdims=True)
        resp = np.exp(logp - mx)
        resp /= resp.sum(axis=1, keepdims=True)                # (n, K)
        return np.einsum("nk,nkd->nd", resp, -diff / s2[None, :, None])


class GMMScoreModel:
    """Exact noise prediction for Gaussian-mixture data.

    predict_noise returns -sqrt(1 - alpha_bar_t) * grad log q_t(x), the
    quantity a perfectly trained network would output.
    """

    def __init__(self, gmm: GMM, schedule: NoiseSchedule,
                 bias: float = 0.0):
        self.gmm = gmm
        self.schedule = schedule
        self.bias = bias  # constant prediction offset, used for error studies
        self.input_dim = gmm.dim

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        xb = np.atleast_2d(x)
        if not np.all(np.isfinite(xb)):
            raise FloatingPointError("non-finite input to predict_noise")
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim == 0:
            ab = float(self.schedule.alpha_bar(float(t_arr)))
            out = -np.sqrt(1.0 - ab) * self.gmm.diffused_score(xb, ab)
        else:
            out = np.empty_like(xb)
            for ab in np.unique(t_arr):
                idx = t_arr == ab
                abv = float(self.schedule.alpha_bar(float(ab)))
                out[idx] = -np.sqrt(1.0 - abv) * self.gmm.diffused_score(
                    xb[idx], abv)
        out = out + self.bias
        return out[0] if squeeze else out

    def with_bias(self, bias: float) -> "GMMScoreModel":
        return GMMScoreModel(self.gmm, self.schedule, bias=bias)


# ---------------------------------------------------------------------------
# tiny trainable network
# ---------------------------------------------------------------------------

def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos positional features of the (possibly fractional) step."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # overflow-safe logistic, branch-free: exp(-|z|) never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "silu":
        return z * _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative wrt pre-activation z; a = act(z) is passed to reuse work
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "silu":
        sig = _sigmoid(z)
        return sig * (1.0 + z * (1.0 - sig))
    raise ValueError(f"unknown activation {name!r}")


class TinyNet:
    """Fully-connected noise predictor over flat inputs.

    The timestep enters through a sinusoidal embedding concatenated to the
    input, so the first layer has input_dim + time_dim columns. Forward
    passes are deterministic; gradients come from a hand-written backward
    pass (verified against finite differences in the test suite).
    """

    def __init__(self, input_dim: int, hidden: tuple[int, ...] = (256, 256),
                 time_dim: int = 16, activation: str = "silu",
                 n_channels: int = 1, image_shape: tuple[int, int] | None = None,
                 seed: int = 0, dtype=np.float64):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.activation = activation
        self.n_channels = int(n_channels)
        self.image_shape = tuple(image_shape) if image_shape else None
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        dims = [self.input_dim + self.time_dim, *self.hidden, self.input_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append((rng.standard_normal((fan_in, fan_out))
                                 * scale).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    # -- parameter plumbing ------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        it = iter(params)
        for i in range(self.n_layers):
            self.weights[i] = next(it).reshape(self.weights[i].shape)
            self.biases[i] = next(it).reshape(self.biases[i].shape)

    def copy(self) -> "TinyNet":
        net = TinyNet(self.input_dim, self.hidden, self.time_dim,
                      self.activation, self.n_channels, self.image_shape,
                      dtype=self.dtype)
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    def astype(self, dtype) -> "TinyNet":
        """Copy of the network computing in the given float precision."""
        net = self.copy()
        net.dtype = np.dtype(dtype)
        net.weights = [w.astype(net.dtype) for w in net.weights]
        net.biases = [b.astype(net.dtype) for b in net.biases]
        return net

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- forward / backward -------------------------------------------------

    def _features(self, x: np.ndarray, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if t.shape[0] == 1 and x.shape[0] > 1:
            t = np.repeat(t, x.shape[0])
        emb = sinusoidal_embedding(t, self.time_dim).astype(self.dtype)
        return np.concatenate([x.astype(self.dtype, copy=False), emb],
                              axis=1)

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[1] != self.input_dim:
            raise ValueError(
                f"input dim {xb.shape[1]} != network dim {self.input_dim}")
        h = self._features(xb, t)
        for i in range(self.n_layers - 1):
            h = _act(self.activation, h @ self.weights[i] + self.biases[i])
        out = h @ self.weights[-1] + self.biases[-1]
        return out[0] if squeeze else out

    def loss_and_grads(self, x_t: np.ndarray, t: np.ndarray, eps: np.ndarray,
                       weight: np.ndarray | None = None):
        """Mean weighted squared-norm loss and its parameter gradients.

        loss = mean_i w_i * ||net(x_i, t_i) - eps_i||^2, gradients by
        reverse-mode accumulation through the affine/activation stack.
        """
        n = x_t.shape[0]
        w = np.ones(n, dtype=self.dtype) if weight is None \
            else np.asarray(weight, dtype=self.dtype)
        x_t = np.asarray(x_t, dtype=self.dtype)
        eps = np.asarray(eps, dtype=self.dtype)
        h = self._features(x_t, t)
        acts = [h]          # post-activation values, acts[0] is the input
        pres = []           # pre-activation values per hidden layer
        for i in range(self.n_layers - 1):
            z = acts[-1] @ self.weights[i] + self.biases[i]
            pres.append(z)
            acts.append(_act(self.activation, z))
        out = acts[-1] @ self.weights[-1] + self.biases[-1]
        resid = out - eps
        loss = float(np.mean(w * np.sum(resid * resid, axis=1)))

        grad_out = (2.0 / n) * w[:, None] * resid
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        delta = grad_out
        grads_w[-1] = acts[-1].T @ delta
        grads_b[-1] = delta.sum(axis=0)
        for i in range(self.n_layers - 2, -1, -1):
            delta = (delta @ self.weights[i + 1].T) * _act_grad(
                self.activation, pres[i], acts[i + 1])
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend([gw, gb])
        return loss, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 1000
    batch: int = 128
    seed: int = 0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.05
    val_every: int = 200
    log_every: int = 0        # 0 disables progress printing
    ema_decay: float = 0.0    # 0 disables the parameter average


@dataclass
class TrainResult:
    net: TinyNet
    initial_val_loss: float
    final_val_loss: float
    val_losses: list
    steps: int

    @property
    def improvement(self) -> float:
        return self.initial_val_loss - self.final_val_loss


def _adam_step(params, grads, m, v, step, cfg: TrainConfig):
    gn = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    scale = 1.0 if gn <= cfg.clip_norm else cfg.clip_norm / gn
    b1c = 1.0 - cfg.beta1 ** step
    b2c = 1.0 - cfg.beta2 ** step
    for p, g, mi, vi in zip(params, grads, m, v):
        g = g * scale
        mi *= cfg.beta1
        mi += (1 - cfg.beta1) * g
        vi *= cfg.beta2
        vi += (1 - cfg.beta2) * g * g
        p -= cfg.lr * (mi / b1c) / (np.sqrt(vi / b2c) + cfg.adam_eps)


def _val_loss(net: TinyNet, x0, t, eps, schedule) -> float:
    x_t = diffuse(x0, t, eps, schedule)
    pred = net.predict_noise(x_t, t)
    return float(np.mean(np.sum((pred - eps) ** 2, axis=1)))


def train_tinynet(net: TinyNet, dataset: np.ndarray, schedule: NoiseSchedule,
                  config: TrainConfig | None = None) -> TrainResult:
    """Train the denoiser on flat data rows.

    Each step draws a batch with a uniform timestep and fresh Gaussian
    noise per item and takes one Adam step on the squared-error noise
    objective (global-norm gradient clipping). A held-out validation
    batch with frozen (t, eps) draws tracks progress; the run aborts if
    the loss stops being finite. Fully reproducible from config.seed.
    """
    cfg = config or TrainConfig()
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, d) array")
    if data.shape[1] != net.input_dim:
        raise ValueError(
            f"dataset dim {data.shape[1]} != network dim {net.input_dim}")

    rng = np.random.default_rng(cfg.seed)
    net = net.copy()
    data = data.astype(net.dtype, copy=False)

    n_val = max(1, min(int(len(data) * cfg.val_fraction), 512))
    val_idx = rng.choice(len(data), size=n_val, replace=len(data) < n_val)
    val_x0 = data[val_idx]
    val_t = rng.integers(1, schedule.T + 1, size=n_val)
    val_eps = rng.standard_normal(val_x0.shape)

    params = net.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    ema = [p.copy() for p in params] if cfg.ema_decay > 0 else None

    initial_val = _val_loss(net, val_x0, val_t, val_eps, schedule)
    val_losses = [(0, initial_val)]
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(data), size=cfg.batch)
        x0 = data[idx]
        t = rng.integers(1, schedule.T + 1, size=cfg.batch)
        eps = rng.standard_normal(x0.shape)
        x_t = diffuse(x0, t, eps, schedule)
        loss, grads = net.loss_and_grads(x_t, t, eps)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at step {step}")
        _adam_step(params, grads, m, v, step, cfg)
        if ema is not None:
            for e, p in zip(ema, params):
                e *= cfg.ema_decay
                e += (1 - cfg.ema_decay) * p
        if cfg.val_every and step % cfg.val_every == 0:
            val_losses.append((step, _val_loss(net, val_x0, val_t, val_eps,
                                               schedule)))
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"  step {step:7d}  train loss {loss:.4f}")

    if ema is not None:
        net.set_parameters(ema)
    final_val = _val_loss(net, val_x0, val_t, val_eps, schedule)
    val_losses.append((cfg.steps, final_val))
    return TrainResult(net=net, initial_val_loss=initial_val,
                       final_val_loss=final_val, val_losses=val_losses,
                       steps=cfg.steps)


# ---------------------------------------------------------------------------
# checkpoint i/o
# ---------------------------------------------------------------------------

def save_checkpoint(net: TinyNet, path) -> None:
    h, w = net.image_shape if net.image_shape else (0, 0)
    header = struct.pack(
        "<4sIIIIIBI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.n_channels,
        h, w, net.time_dim, _ACTIVATIONS[net.activation], net.n_layers)
    shapes = b"".join(
        struct.pack("<II", wgt.shape[0], wgt.shape[1]) for wgt in net.weights)
    blobs = []
    for wgt, bias in zip(net.weights, net.biases):
        blobs.append(wgt.astype("<f4").tobytes())
        blobs.append(bias.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(shapes)
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> TinyNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_channels, h, w, time_dim, act_id, n_layers = \
        struct.unpack_from("<4sIIIIIBI", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = struct.calcsize("<4sIIIIIBI")
    shapes = []
    for _ in range(n_layers):
        r, c = struct.unpack_from("<II", raw, off)
        shapes.append((r, c))
        off += 8
    input_dim = shapes[-1][1]
    hidden = tuple(s[1] for s in shapes[:-1])
    # parameters are stored as float32, so loading at float32 is lossless
    net = TinyNet(input_dim, hidden, time_dim,
                  _ACTIVATION_NAMES[act_id], n_channels,
                  (h, w) if h and w else None, dtype=np.float32)
    weights, biases = [], []
    for r, c in shapes:
        wgt = np.frombuffer(raw, dtype="<f4", count=r * c, offset=off)
        off += 4 * r * c
        bias = np.frombuffer(raw, dtype="<f4", count=c, offset=off)
        off += 4 * c
        weights.append(wgt.reshape(r, c).astype(np.float32))
        biases.append(bias.astype(np.float32))
    net.weights = weights
    net.biases = biases
    return net

"""Small numpy MLPs with exact reverse-mode gradients, action heads and checkpoints."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG2PI = float(np.log(2.0 * np.pi))
LOGSTD_MIN, LOGSTD_MAX = -5.0, 1.0
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Mlp:
    """tanh hidden layers, identity output. Weights are stored (in, out)."""

    def __init__(self, layer_sizes, weights=None, biases=None, rng=None, out_scale=0.01):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if any(s <= 0 for s in self.layer_sizes) or len(self.layer_sizes) < 2:
            raise ShapeError(f"bad layer sizes {layer_sizes}")
        if weights is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weights, biases = [], []
            n = len(self.layer_sizes) - 1
            for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
                gain = out_scale if i == n - 1 else np.sqrt(2.0)
                weights.append(_orthogonal(rng, a, b, gain))
                biases.append(np.zeros(b))
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} do not chain")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x, return_cache=False):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.n_in:
            raise ShapeError(f"input width {h.shape[-1]} != {self.n_in}")
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
                acts.append(h)
        out = h[0] if squeeze else h
        if return_cache:
            return out, (acts, squeeze)
        return out

    def backward(self, cache, grad_out):
        """Return (param grads in ``params()`` order, input grad)."""
        acts, squeeze = cache
        g = np.asarray(grad_out, dtype=float)
        g = g[None, :] if squeeze else g
        if g.shape[-1] != self.n_out or g.shape[0] != acts[0].shape[0]:
            raise ShapeError(f"upstream gradient shape {g.shape} does not match output")
        grads = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (1.0 - acts[i] ** 2)
        gx = g[0] if squeeze else g
        return grads, gx

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_backward(net: Mlp, x, upstream_grad):
    _, cache = net.forward(x, return_cache=True)
    return net.backward(cache, upstream_grad)


# ---------------------------------------------------------------- heads

def gaussian_logprob(mean, logstd, sample):
    mean = np.asarray(mean, dtype=float)
    logstd = np.broadcast_to(np.asarray(logstd, dtype=float), mean.shape)
    z = (np.asarray(sample, dtype=float) - mean) * np.exp(-logstd)
    return np.sum(-0.5 * z * z - logstd - 0.5 * LOG2PI, axis=-1)


def gaussian_logprob_grad(mean, logstd, sample):
    """d logp / d mean and d logp / d logstd (per element)."""
    mean = np.asarray(mean, dtype=float)
    logstd = np.broadcast_to(np.asarray(logstd, dtype=float), mean.shape)
    inv = np.exp(-logstd)
    z = (np.asarray(sample, dtype=float) - mean) * inv
    return z * inv, z * z - 1.0


def gaussian_entropy(logstd, dim=None):
    logstd = np.asarray(logstd, dtype=float)
    return np.sum(logstd + 0.5 * (1.0 + LOG2PI), axis=-1)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=float)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def gumbel_softmax_sample(logits, temperature, rng):
    """Relaxed sample and its one-hot argmax; the hard sample is exactly categorical."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=float)
    u = rng.uniform(size=logits.shape)
    g = -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
    return gumbel_softmax_from_noise(logits, g, temperature)


def gumbel_softmax_from_noise(logits, noise, temperature):
    y = (np.asarray(logits, dtype=float) + noise) / temperature
    soft = softmax(y)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, np.argmax(soft, axis=-1)[..., None], 1.0, axis=-1)
    return soft, hard


def straight_through_grad(m_soft, temperature, grad_m):
    """Backward pass that treats d m_hard as d m_soft; returns d loss / d logits."""
    s = np.asarray(m_soft, dtype=float)
    g = np.asarray(grad_m, dtype=float)
    dot = np.sum(g * s, axis=-1, keepdims=True)
    return s * (g - dot) / temperature


def route_action(m_hard, out_low, out_high):
    """Select the expert output by a one-hot mode vector."""
    m = np.asarray(m_hard, dtype=float)
    ok = np.all((m == 0.0) | (m == 1.0), axis=-1) & (m.sum(axis=-1) == 1.0)
    if not np.all(ok):
        raise ValueError(f"mode vector is not one-hot: {m}")
    low = np.asarray(out_low, dtype=float)
    high = np.asarray(out_high, dtype=float)
    # where() keeps the selected output bit-identical (no 0*inf or -0.0 surprises)
    return np.where(m[..., 1:2] == 1.0, high, low)


# ---------------------------------------------------------------- normalisation

class RunningNormalizer:
    """Streaming mean/variance scaler with a transform/inverse_transform surface."""

    def __init__(self, n_features: int, eps: float = 1e-8):
        self.n_features = int(n_features)
        self.eps = eps
        self.mean_ = np.zeros(self.n_features)
        self.var_ = np.ones(self.n_features)
        self.count_ = 0.0

    def get_params(self, deep=True):
        return {"n_features": self.n_features, "eps": self.eps}

    def partial_fit(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, self.n_features)
        n = X.shape[0]
        if n == 0:
            return self
        b_mean = X.mean(axis=0)
        b_var = X.var(axis=0)
        tot = self.count_ + n
        delta = b_mean - self.mean_
        if self.count_ == 0:
            self.mean_, self.var_ = b_mean, b_var
        else:
            m2 = self.var_ * self.count_ + b_var * n + delta ** 2 * self.count_ * n / tot
            self.mean_ = self.mean_ + delta * n / tot
            self.var_ = m2 / tot
        self.count_ = tot
        return self

    def fit(self, X, y=None):
        self.mean_ = np.zeros(self.n_features)
        self.var_ = np.ones(self.n_features)
        self.count_ = 0.0
        return self.partial_fit(X)

    @property
    def scale_(self):
        return np.sqrt(self.var_ + self.eps)

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=float) * self.scale_ + self.mean_

    def state(self) -> dict:
        return {"mean": self.mean_.copy(), "var": self.var_.copy(), "count": self.count_}

    def load(self, st: dict) -> None:
        self.mean_ = np.asarray(st["mean"], dtype=float).copy()
        self.var_ = np.asarray(st["var"], dtype=float).copy()
        self.count_ = float(st["count"])


# ---------------------------------------------------------------- policies

@dataclass
class ExpertPolicy:
    """Gaussian policy over pre-squash body accelerations (tanh applied by the caller)."""

    net: Mlp
    logstd: np.ndarray
    norm: RunningNormalizer
    value: Mlp

    @classmethod
    def create(cls, n_obs, hidden, rng, init_logstd=-0.5):
        return cls(
            net=Mlp([n_obs, *hidden, 3], rng=rng),
            logstd=np.full(3, float(init_logstd)),
            norm=RunningNormalizer(n_obs),
            value=Mlp([n_obs, *hidden, 1], rng=rng, out_scale=1.0),
        )

    def act_mean(self, obs):
        return self.net.forward(self.norm.transform(obs))

    def param_arrays(self):
        return self.net.params() + [self.logstd]

    def parameter_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for a in self.param_arrays() + self.value.params():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def command_mean(out: np.ndarray, mode=None) -> np.ndarray:
    """Velocity-command mean for the given mode.

    High-level outputs are laid out as [LOW mean (3), mode logits (2), HIGH mean (3)];
    a 3-wide output (an expert) has a single mean.
    """
    if out.shape[-1] < 8 or mode is None:
        return out[..., :3]
    return np.where((np.asarray(mode) == 1)[..., None], out[..., 5:8], out[..., :3])


@dataclass
class HighLevelPolicy:
    """Shared trunk with a 2-way mode head and one Gaussian velocity-command head per mode.

    The joint law is pi(mode | s) * N(v_cmd; mean_mode(s), sigma).
    """

    net: Mlp
    logstd: np.ndarray
    norm: RunningNormalizer
    value: Mlp

    @classmethod
    def create(cls, n_obs, hidden, rng, init_logstd=-0.5, low_mode_prior=0.0):
        """``low_mode_prior`` is the initial logit advantage of LOW over HIGH."""
        net = Mlp([n_obs, *hidden, 8], rng=rng)
        net.biases[-1][3] = float(low_mode_prior)
        return cls(
            net=net,
            logstd=np.full(3, float(init_logstd)),
            norm=RunningNormalizer(n_obs),
            value=Mlp([n_obs, *hidden, 1], rng=rng, out_scale=1.0),
        )

    def heads(self, obs):
        """(per-mode means stacked as (..., 2, 3), clipped logstd, mode logits)."""
        out = self.net.forward(self.norm.transform(obs))
        means = np.stack([out[..., :3], out[..., 5:8]], axis=-2)
        return means, np.clip(self.logstd, LOGSTD_MIN, LOGSTD_MAX), out[..., 3:5]

    def param_arrays(self):
        return self.net.params() + [self.logstd]

    def parameter_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for a in self.param_arrays() + self.value.params():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def save_checkpoint(path, policy, kind: str, config_hash: str, extra: dict | None = None) -> None:
    arrays = {}
    for prefix, net in (("pi", policy.net), ("v", policy.value)):
        for i, a in enumerate(net.params()):
            arrays[f"{prefix}_{i}"] = a
    arrays["logstd"] = policy.logstd
    st = policy.norm.state()
    arrays["norm_mean"], arrays["norm_var"] = st["mean"], st["var"]
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "pi_sizes": policy.net.layer_sizes,
        "v_sizes": policy.value.layer_sizes,
        "norm_count": st["count"],
        "config_hash": config_hash,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def read_checkpoint_meta(path) -> dict:
    try:
        with np.load(path) as data:
            return json.loads(bytes(data["meta"]).decode("utf-8"))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected_config_hash: str | None = None, kind: str | None = None):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            arrays = {k: data[k] for k in data.files if k != "meta"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    if kind is not None and meta["kind"] != kind:
        raise CheckpointError(f"{path} holds a {meta['kind']!r} policy, expected {kind!r}")
    if expected_config_hash is not None and meta["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"config hash mismatch for {path}: checkpoint {meta['config_hash']} vs run {expected_config_hash}")

    def build(prefix, sizes):
        n = len(sizes) - 1
        ws = [arrays[f"{prefix}_{2 * i}"] for i in range(n)]
        bs = [arrays[f"{prefix}_{2 * i + 1}"] for i in range(n)]
        return Mlp(sizes, ws, bs)

    net = build("pi", meta["pi_sizes"])
    value = build("v", meta["v_sizes"])
    norm = RunningNormalizer(net.n_in)
    norm.load({"mean": arrays["norm_mean"], "var": arrays["norm_var"], "count": meta["norm_count"]})
    cls = HighLevelPolicy if meta["kind"] == "high_level" else ExpertPolicy
    return cls(net=net, logstd=arrays["logstd"].astype(float), norm=norm, value=value), meta

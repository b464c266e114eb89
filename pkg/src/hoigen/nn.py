"""Minimal trainable modules with analytic gradients: MLP, single-head
cross-attention, AdamW, logit-normal time sampling, and the checkpoint format.

Parameters live in plain dicts of numpy arrays (float32 for training,
float64 for gradient checking). Forward passes return caches explicitly, so
modules stay pure and reentrant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, WrongDimension

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU; the backward pass differentiates this exact form."""
    inner = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner


_ACTS = {
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "gelu": (gelu, gelu_grad),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


class Mlp:
    """Fully connected network y = act_L(... act_1(x W_1 + b_1) ...).

    Weights are (fan_in, fan_out); inputs may be (d,) or batched (B, d).
    """

    def __init__(self, widths, activations=None, rng=None, dtype=np.float32, prefix=""):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if activations is None:
            activations = ["gelu"] * (len(widths) - 2) + ["linear"]
        if len(activations) != len(widths) - 1:
            raise ValueError("one activation per layer required")
        for a in activations:
            if a not in _ACTS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = list(widths)
        self.activations = list(activations)
        self.dtype = dtype
        self.prefix = prefix
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        for i, (m, n) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (m + n))
            self.params[f"{prefix}w{i}"] = rng.uniform(-bound, bound, size=(m, n)).astype(dtype)
            self.params[f"{prefix}b{i}"] = np.zeros(n, dtype=dtype)

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.widths[0]:
            raise WrongDimension(f"input width {x.shape[-1]}, expected {self.widths[0]}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Returns (output, cache) where cache feeds backward()."""
        x = self._check_input(x)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        inputs = [h]
        preacts = []
        for i in range(self.num_layers):
            z = h @ self.params[f"{self.prefix}w{i}"] + self.params[f"{self.prefix}b{i}"]
            preacts.append(z)
            h = _ACTS[self.activations[i]][0](z)
            inputs.append(h)
        out = h[0] if squeeze else h
        return out, (inputs, preacts, squeeze)

    def backward(self, cache, upstream: np.ndarray):
        """Gradients of sum(upstream * output) w.r.t. parameters and input."""
        inputs, preacts, squeeze = cache
        g = np.asarray(upstream, dtype=self.dtype)
        if squeeze:
            g = g[None, :]
        grads: dict[str, np.ndarray] = {}
        for i in reversed(range(self.num_layers)):
            g = g * _ACTS[self.activations[i]][1](preacts[i])
            grads[f"{self.prefix}w{i}"] = inputs[i].T @ g
            grads[f"{self.prefix}b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"{self.prefix}w{i}"].T
        gx = g[0] if squeeze else g
        return grads, gx


class AttentionBlock:
    """Single-head cross-attention: softmax((Q Wq)(K Wk)^T / sqrt(d)) (K Wv) Wo."""

    def __init__(self, dim: int, rng=None, dtype=np.float32, prefix=""):
        self.dim = dim
        self.dtype = dtype
        self.prefix = prefix
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(3.0 / dim)
        self.params = {
            f"{prefix}{name}": rng.uniform(-bound, bound, size=(dim, dim)).astype(dtype)
            for name in ("wq", "wk", "wv", "wo")
        }

    def attention_weights(self, queries: np.ndarray, keys_values: np.ndarray) -> np.ndarray:
        q = queries @ self.params[f"{self.prefix}wq"]
        k = keys_values @ self.params[f"{self.prefix}wk"]
        s = q @ k.T / np.sqrt(self.dim)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def forward(self, queries: np.ndarray, keys_values: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(queries, keys_values)
        return y

    def forward_cached(self, queries: np.ndarray, keys_values: np.ndarray):
        queries = np.asarray(queries, dtype=self.dtype)
        keys_values = np.asarray(keys_values, dtype=self.dtype)
        p = self.prefix
        q = queries @ self.params[f"{p}wq"]
        k = keys_values @ self.params[f"{p}wk"]
        v = keys_values @ self.params[f"{p}wv"]
        s = q @ k.T / np.sqrt(self.dim)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=1, keepdims=True)
        o = a @ v
        y = o @ self.params[f"{p}wo"]
        return y, (queries, keys_values, q, k, v, a, o)

    def backward(self, cache, upstream: np.ndarray):
        queries, keys_values, q, k, v, a, o = cache
        p = self.prefix
        gy = np.asarray(upstream, dtype=self.dtype)
        grads = {f"{p}wo": o.T @ gy}
        go = gy @ self.params[f"{p}wo"].T
        ga = go @ v.T
        gv = a.T @ go
        # softmax backward row-wise: gs = a * (ga - sum(ga * a))
        gs = a * (ga - (ga * a).sum(axis=1, keepdims=True))
        gs = gs / np.sqrt(self.dim)
        gq = gs @ k
        gk = gs.T @ q
        grads[f"{p}wq"] = queries.T @ gq
        grads[f"{p}wk"] = keys_values.T @ gk
        grads[f"{p}wv"] = keys_values.T @ gv
        g_queries = gq @ self.params[f"{p}wq"].T
        g_kv = gk @ self.params[f"{p}wk"].T + gv @ self.params[f"{p}wv"].T
        return grads, g_queries, g_kv


@dataclass
class AdamW:
    """AdamW with decoupled weight decay; state keyed by parameter name."""

    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update; decay acts on parameters, never on the moments."""
        self.step_count += 1
        t = self.step_count
        for name in params:
            g = grads.get(name)
            if g is None:
                continue
            p = params[name]
            if g.shape != p.shape:
                raise WrongDimension(f"grad shape {g.shape} != param shape {p.shape} for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adamw_step(opt: AdamW, params: dict, grads: dict) -> dict:
    opt.step(params, grads)
    return params


def sample_time_logit_normal(rng: np.random.Generator, mu: float = 0.0, sigma: float = 1.0, size=None):
    """Flow time tau = sigmoid(z), z ~ Normal(mu, sigma); strictly inside (0, 1)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = rng.normal(mu, sigma, size=size)
    return 1.0 / (1.0 + np.exp(-z))


def linear_anneal_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Linear annealing from base_lr to 0 over total_steps."""
    frac = min(max(step, 0), total_steps) / max(total_steps, 1)
    return base_lr * (1.0 - frac)


# -- gradient checking ---------------------------------------------------------


def fd_gradient_check(
    loss_fn,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    rng: np.random.Generator,
    num_coords: int = 64,
    h: float = 1e-4,
) -> float:
    """Max relative error between analytic grads and central finite differences
    on num_coords randomly chosen parameter coordinates. Mutates and restores
    params in place; loss_fn() must recompute the scalar loss from params."""
    names = [n for n in params if n in grads and params[n].size > 0]
    worst = 0.0
    for _ in range(num_coords):
        name = names[rng.integers(len(names))]
        p = params[name]
        flat = p.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        fd = (lp - lm) / (2.0 * h)
        an = float(grads[name].reshape(-1)[i])
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst


# -- checkpoint format ----------------------------------------------------------
#
# <base>.bin : all parameters, float32 little-endian, concatenated in the
#              order listed by the sidecar.
# <base>.json: {"kind": "hoigen-checkpoint", "version": 1, "byte_order":
#              "little", "dtype": "float32", "names": [...], "shapes": {...},
#              "meta": {...}}

CKPT_VERSION = 1


def save_checkpoint(base_path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    base = str(base_path)
    names = list(params.keys())
    sidecar = {
        "kind": "hoigen-checkpoint",
        "version": CKPT_VERSION,
        "byte_order": "little",
        "dtype": "float32",
        "names": names,
        "shapes": {n: list(params[n].shape) for n in names},
        "meta": meta or {},
    }
    with open(base + ".bin", "wb") as fh:
        for n in names:
            arr = np.ascontiguousarray(params[n], dtype="<f4")
            fh.write(arr.tobytes())
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")


def load_checkpoint(base_path, dtype=np.float32):
    base = str(base_path)
    with open(base + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if sidecar.get("kind") != "hoigen-checkpoint" or sidecar.get("version") != CKPT_VERSION:
        raise FormatError("not a hoigen checkpoint sidecar")
    params: dict[str, np.ndarray] = {}
    with open(base + ".bin", "rb") as fh:
        raw = fh.read()
    off = 0
    for n in sidecar["names"]:
        shape = tuple(sidecar["shapes"][n])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        params[n] = arr.astype(dtype)
        off += count * 4
    if off != len(raw):
        raise FormatError(f"checkpoint binary has {len(raw)} bytes, expected {off}")
    return params, sidecar["meta"]

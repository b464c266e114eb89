"""Conditional flow matching: optimal-transport paths, closed-form target
fields, clean-endpoint prediction with derived velocities, the training loss
with classifier-free condition dropping, and the Euler sampler.

The model predicts the clean endpoint by default; velocity regression is kept
behind the ``mode`` switch as an ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, SingularTime
from .nn import Mlp, sample_time_logit_normal

DENOM_CAP = 1e-4  # sampler-side floor on 1 - (1 - sigma_min) * tau near tau = 1


@dataclass(frozen=True)
class FlowConfig:
    sigma_min: float = 1e-4
    num_steps: int = 50
    cfg_scale: float = 2.5
    cond_drop_prob: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.sigma_min < 1.0):
            raise ValueError("sigma_min must be in (0, 1)")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not (0.0 <= self.cond_drop_prob <= 1.0):
            raise ValueError("cond_drop_prob must be a probability")


def _align(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def ot_path_sample(x0, x1, tau: float, sigma_min: float) -> np.ndarray:
    """Point on the linear-interpolation path: (1 - (1 - s) tau) x0 + tau x1."""
    x0, x1 = _align(x0, x1)
    return (1.0 - (1.0 - sigma_min) * tau) * x0 + tau * x1


def target_field(x1, x_tau, tau: float, sigma_min: float) -> np.ndarray:
    """Closed-form conditional velocity (x1 - (1 - s) x_tau) / (1 - (1 - s) tau)."""
    x1, x_tau = _align(x1, x_tau)
    denom = 1.0 - (1.0 - sigma_min) * tau
    if denom < 1e-9:
        raise SingularTime(f"denominator {denom} below 1e-9")
    return (x1 - (1.0 - sigma_min) * x_tau) / denom


def velocity_from_xpred(x1_hat, x_tau, tau: float, sigma_min: float, denom_cap: float | None = None) -> np.ndarray:
    """Velocity derived from a clean-endpoint prediction; same formula as the
    target field, optionally with the sampler's denominator floor."""
    x1_hat, x_tau = _align(x1_hat, x_tau)
    denom = 1.0 - (1.0 - sigma_min) * tau
    if denom_cap is not None:
        denom = max(denom, denom_cap)
    if denom < 1e-9:
        raise SingularTime(f"denominator {denom} below 1e-9")
    return (x1_hat - (1.0 - sigma_min) * x_tau) / denom


class FlowModel:
    """Endpoint-prediction network over a flattened trajectory window plus an
    ordered set of conditioning slots and a scalar flow time.

    ``cond_spec`` is a list of (name, dim) pairs; the concatenated conditioning
    vector is replaced by the learnable null token when a sample's condition is
    dropped during training and when sampling the unconditional branch for
    guidance.
    """

    def __init__(
        self,
        window_dim: int,
        cond_spec: list[tuple[str, int]],
        hidden: tuple[int, ...] = (256, 256),
        config: FlowConfig | None = None,
        mode: str = "x",
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if mode not in ("x", "v"):
            raise ValueError("mode must be 'x' (endpoint) or 'v' (velocity)")
        self.window_dim = int(window_dim)
        self.cond_spec = list(cond_spec)
        self.cond_dim = sum(d for _, d in self.cond_spec)
        self.config = config or FlowConfig()
        self.mode = mode
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        in_dim = self.window_dim + self.cond_dim + 1
        self.predictor = Mlp(
            [in_dim, *hidden, self.window_dim], rng=rng, dtype=dtype, prefix="pred."
        )
        self.params = dict(self.predictor.params)
        self.params["null_cond"] = np.zeros(self.cond_dim, dtype=dtype)
        # keep the predictor's dict in sync with the shared parameter store
        self.predictor.params = self.params

    def cond_slices(self) -> dict[str, slice]:
        out = {}
        off = 0
        for name, dim in self.cond_spec:
            out[name] = slice(off, off + dim)
            off += dim
        return out

    def pack_cond(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        """Concatenate conditioning slots in spec order, validating dims."""
        chunks = []
        for name, dim in self.cond_spec:
            v = np.asarray(parts[name], dtype=np.float64).reshape(-1)
            if v.shape[0] != dim:
                raise ShapeMismatch(f"slot {name!r}: got {v.shape[0]}, expected {dim}")
            chunks.append(v)
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def _inputs(self, x: np.ndarray, tau, cond: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=self.dtype))
        cond = np.atleast_2d(np.asarray(cond, dtype=self.dtype))
        if cond.shape[0] == 1 and x.shape[0] > 1:
            cond = np.repeat(cond, x.shape[0], axis=0)
        tau_col = np.full((x.shape[0], 1), 0.0, dtype=self.dtype)
        tau_col[:, 0] = tau
        return np.concatenate([x, cond, tau_col], axis=1)

    def predict(self, x: np.ndarray, tau, cond: np.ndarray) -> np.ndarray:
        """Network output: clean endpoint ('x' mode) or velocity ('v' mode)."""
        squeeze = np.asarray(x).ndim == 1
        out = self.predictor.forward(self._inputs(x, tau, cond))
        return out[0] if squeeze else out

    def null_condition(self, batch: int | None = None) -> np.ndarray:
        n = self.params["null_cond"]
        return n.copy() if batch is None else np.repeat(n[None, :], batch, axis=0)


def fm_loss(
    model: FlowModel,
    x1: np.ndarray,
    cond: np.ndarray,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    blend_fn=None,
):
    """One stochastic flow-matching loss evaluation with gradients.

    Draws x0 ~ N(0, I) and tau ~ logit-normal per sample, forms the path
    point, optionally blends known frames into it (``blend_fn(x_tau, tau)``),
    drops each sample's conditioning to the null token with the configured
    probability, and regresses the network on the clean endpoint ('x' mode)
    or the closed-form velocity ('v' mode). The loss is the squared error
    summed over (masked) coordinates and averaged over the batch.

    Returns (loss, grads); grads covers predictor parameters and the null
    token.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if cond.shape[0] == 1 and x1.shape[0] > 1:
        cond = np.repeat(cond, x1.shape[0], axis=0)
    b, d = x1.shape
    if d != model.window_dim:
        raise ShapeMismatch(f"window {d}, expected {model.window_dim}")
    cfg = model.config
    sigma = cfg.sigma_min

    x0 = rng.standard_normal((b, d))
    tau = np.asarray(sample_time_logit_normal(rng, 0.0, 1.0, size=b))
    dropped = rng.uniform(size=b) < cfg.cond_drop_prob

    coef0 = 1.0 - (1.0 - sigma) * tau
    x_tau = coef0[:, None] * x0 + tau[:, None] * x1
    if blend_fn is not None:
        x_tau = blend_fn(x_tau, tau)

    cond_used = np.where(dropped[:, None], model.params["null_cond"][None, :].astype(np.float64), cond)

    inputs = np.concatenate(
        [x_tau, cond_used, tau[:, None]], axis=1
    ).astype(model.dtype)
    pred, cache = model.predictor.forward_cached(inputs)
    pred64 = pred.astype(np.float64)

    if model.mode == "x":
        target = x1
    else:
        denom = 1.0 - (1.0 - sigma) * tau
        target = (x1 - (1.0 - sigma) * x_tau) / denom[:, None]

    diff = pred64 - target
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        mask_row = mask[None, :] if mask.ndim == 1 else mask
        diff = diff * mask_row
    loss = float(np.sum(diff * diff) / b)

    upstream = (2.0 / b) * diff
    grads, g_in = model.predictor.backward(cache, upstream.astype(model.dtype))
    c0, c1 = model.window_dim, model.window_dim + model.cond_dim
    g_cond = g_in[:, c0:c1].astype(np.float64)
    grads["null_cond"] = g_cond[dropped].sum(axis=0).astype(model.dtype)
    return loss, grads


def euler_sample(
    model: FlowModel,
    cond: np.ndarray,
    x0: np.ndarray,
    num_steps: int | None = None,
    cfg_scale: float | None = None,
    step_hook=None,
) -> np.ndarray:
    """Integrate x' = v(x, tau, cond) from tau 0 to 1 with K fixed Euler steps.

    Guidance with scale s combines branch velocities as
    v_null + s * (v_cond - v_null); at s == 1 only the conditioned branch is
    evaluated, so the result is bit-identical to unguided sampling. The
    optional ``step_hook(x, tau) -> x`` runs before every step and once on the
    terminal state (used for prefix inpainting and transition clamping).
    """
    cfg = model.config
    k_steps = cfg.num_steps if num_steps is None else int(num_steps)
    if k_steps < 1:
        raise ValueError("num_steps must be >= 1")
    scale = cfg.cfg_scale if cfg_scale is None else float(cfg_scale)
    squeeze = np.asarray(x0).ndim == 1
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if cond.shape[0] == 1 and x.shape[0] > 1:
        cond = np.repeat(cond, x.shape[0], axis=0)
    guided = scale != 1.0 and model.cond_dim > 0
    null_rows = model.null_condition(x.shape[0]) if guided else None

    def velocity(xk, tau):
        out = model.predict(xk, tau, cond).astype(np.float64)
        if model.mode == "x":
            v = velocity_from_xpred(out, xk, tau, cfg.sigma_min, denom_cap=DENOM_CAP)
        else:
            v = out
        if guided:
            out_n = model.predict(xk, tau, null_rows).astype(np.float64)
            if model.mode == "x":
                v_n = velocity_from_xpred(out_n, xk, tau, cfg.sigma_min, denom_cap=DENOM_CAP)
            else:
                v_n = out_n
            v = v_n + scale * (v - v_n)
        return v

    dt = 1.0 / k_steps
    for k in range(k_steps):
        tau = k / k_steps
        if step_hook is not None:
            x = step_hook(x, tau)
        x = x + dt * velocity(x, tau)
    if step_hook is not None:
        x = step_hook(x, 1.0)
    return x[0] if squeeze else x

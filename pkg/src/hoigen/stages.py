"""Two-stage trajectory generation: a hands-only grasping stage conditioned on
object geometry, a grasp-focused instruction, and the initial state; then a
full-sequence manipulation stage that soft-inpaints the generated grasp prefix,
hard-clamps the transition frame, and trains with a future-frames-only loss.
A symmetric InfoNCE head aligns motion and text embeddings during training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatch, ShapeMismatch
from .flow import FlowModel, euler_sample, fm_loss
from .hoirep import FRAME_DIM, HAND_DIM, HoiSequence, de_anchor
from .nn import Mlp
from .scene import SceneTokens

HANDS_DIM = 2 * HAND_DIM  # grasp-stage per-frame state: both hands only


class TextEmbedder:
    """Deterministic stand-in for a pretrained text encoder: the instruction
    string is hashed to seed a frozen random unit vector, so distinct
    instructions map to near-orthogonal embeddings."""

    def __init__(self, dim: int = 512, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        if text not in self._cache:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            words = [self.seed] + list(np.frombuffer(digest[:16], dtype=np.uint32))
            rng = np.random.default_rng(words)
            v = rng.normal(size=self.dim)
            self._cache[text] = v / np.linalg.norm(v)
        return self._cache[text].copy()


# -- conditioning -----------------------------------------------------------------


@dataclass(frozen=True)
class GraspCond:
    """Grasping-stage conditioning: object geometry code, grasp-focused
    instruction embedding, and the packed initial hand+object state."""

    object_bps: np.ndarray
    text_embedding: np.ndarray
    x_init: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return {"bps": self.object_bps, "text": self.text_embedding, "x_init": self.x_init}

    @staticmethod
    def spec(bps_dim: int, text_dim: int) -> list[tuple[str, int]]:
        return [("bps", bps_dim), ("text", text_dim), ("x_init", FRAME_DIM)]


@dataclass(frozen=True)
class ManipCond:
    """Manipulation-stage conditioning: object geometry code, full instruction
    embedding, compact scene tokens, and the grasp-stage transition state."""

    object_bps: np.ndarray
    text_embedding: np.ndarray
    scene: SceneTokens
    transition_state: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return {
            "bps": self.object_bps,
            "text": self.text_embedding,
            "scene_local": self.scene.local.reshape(-1),
            "scene_global": self.scene.glob,
            "transition": self.transition_state,
        }

    @staticmethod
    def spec(bps_dim: int, text_dim: int, num_latents: int, token_dim: int) -> list[tuple[str, int]]:
        return [
            ("bps", bps_dim),
            ("text", text_dim),
            ("scene_local", num_latents * token_dim),
            ("scene_global", token_dim),
            ("transition", FRAME_DIM),
        ]


@dataclass(frozen=True)
class TemporalMask:
    """Binary per-frame mask: 0 on the fixed grasp segment (t <= t_g), 1 on
    the manipulation segment (t > t_g)."""

    n: int
    t_g: int

    def __post_init__(self):
        if not (0 <= self.t_g < self.n):
            raise ValueError("t_g out of range")

    def frames(self) -> np.ndarray:
        m = np.ones(self.n)
        m[: self.t_g + 1] = 0.0
        return m

    def flat(self, frame_dim: int = FRAME_DIM) -> np.ndarray:
        return np.repeat(self.frames(), frame_dim)


def inpaint_blend(x: np.ndarray, prefix: np.ndarray, mask: TemporalMask, tau: float) -> np.ndarray:
    """Soft inpainting: below the 0.9 cutoff, frames 0..t_g are replaced by the
    known grasp prefix; at or above the cutoff the input passes through."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != mask.n:
        raise ShapeMismatch(f"{x.shape[0]} frames vs mask over {mask.n}")
    if prefix.shape != (mask.t_g + 1, x.shape[1]):
        raise ShapeMismatch(f"prefix shape {prefix.shape}")
    if tau >= 0.9:
        return x.copy()
    out = x.copy()
    out[: mask.t_g + 1] = prefix
    return out


def clamp_transition(x: np.ndarray, transition_state: np.ndarray, t_g: int) -> np.ndarray:
    """Hard constraint: frame t_g is overwritten with the grasp terminal state."""
    out = np.asarray(x, dtype=np.float64).copy()
    out[t_g] = np.asarray(transition_state, dtype=np.float64)
    return out


# -- contrastive alignment ----------------------------------------------------------

TEMP_MIN, TEMP_MAX = 0.01, 100.0


def infonce_align(motion_embs: np.ndarray, text_embs: np.ndarray, temp: float):
    """Symmetric InfoNCE over cosine-similarity logits with positives on the
    diagonal. Embeddings are L2-normalized internally.

    Returns (loss, g_motion, g_text, g_temp) with gradients w.r.t. the raw
    (unnormalized) embeddings and the temperature.
    """
    m = np.asarray(motion_embs, dtype=np.float64)
    t = np.asarray(text_embs, dtype=np.float64)
    if m.ndim != 2 or t.shape != m.shape:
        raise ShapeMismatch(f"{m.shape} vs {t.shape}")
    b = m.shape[0]
    if b < 2:
        raise DegenerateBatch("contrastive alignment needs at least 2 samples")

    mn = np.linalg.norm(m, axis=1, keepdims=True)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    mh = m / np.maximum(mn, 1e-12)
    th = t / np.maximum(tn, 1e-12)
    sim = mh @ th.T / temp

    def softmax(z, axis):
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    p_m2t = softmax(sim, axis=1)
    p_t2m = softmax(sim, axis=0)
    eye = np.eye(b)
    loss_m2t = -np.mean(np.log(np.maximum(p_m2t[eye.astype(bool)], 1e-300)))
    loss_t2m = -np.mean(np.log(np.maximum(p_t2m[eye.astype(bool)], 1e-300)))
    loss = 0.5 * (loss_m2t + loss_t2m)

    g_sim = 0.5 * ((p_m2t - eye) + (p_t2m - eye)) / b
    g_mh = g_sim @ th / temp
    g_th = g_sim.T @ mh / temp
    g_temp = float(-np.sum(g_sim * sim) / temp)

    def denormalize(gh, raw_hat, raw_norm):
        return (gh - np.sum(gh * raw_hat, axis=1, keepdims=True) * raw_hat) / np.maximum(
            raw_norm, 1e-12
        )

    return loss, denormalize(g_mh, mh, mn), denormalize(g_th, th, tn), g_temp


class AlignHeads:
    """Motion pooling encoder, text projection, and a learnable clamped
    temperature for the motion-text alignment loss."""

    def __init__(
        self,
        frame_dim: int,
        text_dim: int = 512,
        embed_dim: int = 512,
        hidden: int = 128,
        init_temp: float = 0.7,
        rng=None,
        dtype=np.float32,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.frame_dim = frame_dim
        self.motion_mlp = Mlp([frame_dim, hidden, embed_dim], rng=rng, dtype=dtype, prefix="align.motion.")
        self.text_mlp = Mlp([text_dim, hidden, embed_dim], rng=rng, dtype=dtype, prefix="align.text.")
        self.params: dict[str, np.ndarray] = {}
        self.params.update(self.motion_mlp.params)
        self.params.update(self.text_mlp.params)
        self.params["align.temp"] = np.array([init_temp], dtype=dtype)
        self.motion_mlp.params = self.params
        self.text_mlp.params = self.params

    @property
    def temperature(self) -> float:
        return float(self.params["align.temp"][0])

    def clamp_temperature(self) -> None:
        np.clip(self.params["align.temp"], TEMP_MIN, TEMP_MAX, out=self.params["align.temp"])

    def _pool(self, windows: np.ndarray) -> np.ndarray:
        w = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        if w.shape[1] % self.frame_dim:
            raise ShapeMismatch(f"window width {w.shape[1]} not divisible by {self.frame_dim}")
        return w.reshape(w.shape[0], -1, self.frame_dim).mean(axis=1)

    def loss(self, windows: np.ndarray, text_embs: np.ndarray):
        """Alignment loss over a batch; returns (loss, grads) for the heads."""
        pooled = self._pool(windows)
        m_emb, m_cache = self.motion_mlp.forward_cached(pooled.astype(self.motion_mlp.dtype))
        t_emb, t_cache = self.text_mlp.forward_cached(
            np.asarray(text_embs, dtype=self.text_mlp.dtype)
        )
        loss, g_m, g_t, g_temp = infonce_align(m_emb, t_emb, self.temperature)
        grads, _ = self.motion_mlp.backward(m_cache, g_m.astype(self.motion_mlp.dtype))
        t_grads, _ = self.text_mlp.backward(t_cache, g_t.astype(self.text_mlp.dtype))
        grads.update(t_grads)
        grads["align.temp"] = np.array([g_temp], dtype=self.params["align.temp"].dtype)
        return loss, grads


# -- training steps ------------------------------------------------------------------


def train_grasp_step(
    model: FlowModel,
    batch_windows: np.ndarray,
    batch_cond: np.ndarray,
    batch_text: np.ndarray,
    heads: AlignHeads | None,
    rng: np.random.Generator,
    lambda_align: float = 0.1,
):
    """Grasping-stage losses and gradients: endpoint-prediction flow loss plus
    the weighted motion-text alignment loss. Returns (losses, grads)."""
    flow_l, grads = fm_loss(model, batch_windows, batch_cond, rng)
    align_l = 0.0
    if heads is not None and lambda_align != 0.0:
        align_l, a_grads = heads.loss(batch_windows, batch_text)
        for k, g in a_grads.items():
            grads[k] = lambda_align * g
    losses = {"flow_loss": flow_l, "align_loss": align_l, "total": flow_l + lambda_align * align_l}
    return losses, grads


def make_train_blend(mask: TemporalMask, frame_dim: int, x1: np.ndarray, cutoff: float = 0.9):
    """Training-time counterpart of the sampler's inpainting: below the cutoff
    each sample's noisy window gets its own clean prefix written back, and the
    transition frame is always clamped to the clean state."""
    t_g = mask.t_g
    prefix_cols = (t_g + 1) * frame_dim
    tg_cols = slice(t_g * frame_dim, (t_g + 1) * frame_dim)

    def blend(x_tau: np.ndarray, tau: np.ndarray) -> np.ndarray:
        out = x_tau.copy()
        low = tau < cutoff
        out[low, :prefix_cols] = x1[low, :prefix_cols]
        out[:, tg_cols] = x1[:, tg_cols]
        return out

    return blend


def train_manip_step(
    model: FlowModel,
    batch_windows: np.ndarray,
    batch_cond: np.ndarray,
    batch_text: np.ndarray,
    mask: TemporalMask,
    heads: AlignHeads | None,
    rng: np.random.Generator,
    lambda_align: float = 0.1,
):
    """Manipulation-stage losses: masked endpoint loss over future frames with
    the grasp prefix inpainted into the noisy input, plus alignment."""
    x1 = np.atleast_2d(np.asarray(batch_windows, dtype=np.float64))
    blend = make_train_blend(mask, FRAME_DIM, x1)
    flow_l, grads = fm_loss(model, x1, batch_cond, rng, mask=mask.flat(), blend_fn=blend)
    align_l = 0.0
    if heads is not None and lambda_align != 0.0:
        align_l, a_grads = heads.loss(x1, batch_text)
        for k, g in a_grads.items():
            grads[k] = lambda_align * g
    losses = {"flow_loss": flow_l, "align_loss": align_l, "total": flow_l + lambda_align * align_l}
    return losses, grads


def masked_flow_loss(model, x1_full, cond, mask: TemporalMask, rng):
    """Masked flow loss without the alignment term (exposed for tests)."""
    x1 = np.atleast_2d(np.asarray(x1_full, dtype=np.float64))
    blend = make_train_blend(mask, FRAME_DIM, x1)
    return fm_loss(model, x1, cond, rng, mask=mask.flat(), blend_fn=blend)


# -- end-to-end generation --------------------------------------------------------------


@dataclass
class GenerationInputs:
    """Everything generate() needs besides the two models: conditioning
    sources, frame counts, and metadata for the output sequence. The packed
    initial state must already be anchored (the object is static during the
    grasp, so the anchor equals the initial object position)."""

    object_bps: np.ndarray
    text_embedding: np.ndarray
    text_grasp_embedding: np.ndarray
    scene: SceneTokens
    x_init: np.ndarray  # anchored packed frame 0
    anchor: np.ndarray  # world object position at the transition frame
    n: int
    n_g: int
    fps: float = 20.0
    label: str = ""
    text: str = ""
    text_grasp: str = ""
    object_mesh: str = ""
    scene_path: str = ""
    seq_id: str = ""
    grasp_hand: str = "right"


def generate(
    grasp_model: FlowModel,
    manip_model: FlowModel,
    inputs: GenerationInputs,
    seed: int,
    num_steps: int | None = None,
    cfg_scale: float | None = None,
    instrument: list | None = None,
) -> HoiSequence:
    """Sample one two-stage trajectory; identical seeds give identical output."""
    return generate_batch(
        grasp_model, manip_model, [inputs], seed, num_steps, cfg_scale, instrument
    )[0]


def generate_batch(
    grasp_model: FlowModel,
    manip_model: FlowModel,
    inputs_list: list[GenerationInputs],
    seed: int,
    num_steps: int | None = None,
    cfg_scale: float | None = None,
    instrument: list | None = None,
) -> list[HoiSequence]:
    """Vectorized two-stage sampling across sequences sharing (n, n_g).

    The grasping stage generates hand states only, with the object held at its
    initial pose; the manipulation stage samples the full sequence with the
    grasp prefix soft-inpainted below the 0.9 cutoff and the transition frame
    clamped at every step. The grasp prefix is reimposed on the final state so
    the emitted frames 0..t_g match the grasping stage exactly, then
    translations are de-anchored back to world coordinates.
    """
    if not inputs_list:
        return []
    n = inputs_list[0].n
    n_g = inputs_list[0].n_g
    if any(gi.n != n or gi.n_g != n_g for gi in inputs_list):
        raise ShapeMismatch("batched generation requires uniform n and n_g")
    t_g = n_g - 1
    b = len(inputs_list)
    root = np.random.SeedSequence([int(seed), n, n_g, b])
    rng_grasp, rng_manip = (np.random.default_rng(s) for s in root.spawn(2))

    grasp_cond = np.stack(
        [
            grasp_model.pack_cond(
                GraspCond(gi.object_bps, gi.text_grasp_embedding, gi.x_init).parts()
            )
            for gi in inputs_list
        ]
    )
    x0g = rng_grasp.standard_normal((b, n_g * HANDS_DIM))
    grasp_flat = euler_sample(grasp_model, grasp_cond, x0g, num_steps, cfg_scale)
    grasp_hands = grasp_flat.reshape(b, n_g, HANDS_DIM)

    # full 117-dim prefix: generated hands plus the static initial object pose
    prefix = np.zeros((b, n_g, FRAME_DIM))
    prefix[:, :, :HANDS_DIM] = grasp_hands
    for i, gi in enumerate(inputs_list):
        prefix[i, :, HANDS_DIM:] = gi.x_init[HANDS_DIM:]
    transition = prefix[:, t_g, :].copy()

    manip_cond = np.stack(
        [
            manip_model.pack_cond(
                ManipCond(
                    gi.object_bps, gi.text_embedding, gi.scene, transition[i]
                ).parts()
            )
            for i, gi in enumerate(inputs_list)
        ]
    )

    mask = TemporalMask(n, t_g)
    prefix_cols = n_g * FRAME_DIM
    tg_cols = slice(t_g * FRAME_DIM, (t_g + 1) * FRAME_DIM)
    prefix_flat = prefix.reshape(b, -1)

    def hook(x: np.ndarray, tau: float) -> np.ndarray:
        out = x.copy()
        if tau < 0.9:
            out[:, :prefix_cols] = prefix_flat
        out[:, tg_cols] = transition
        if instrument is not None:
            instrument.append(
                {
                    "tau": tau,
                    "prefix_exact": bool(np.array_equal(out[:, :prefix_cols], prefix_flat)),
                    "clamp_exact": bool(np.array_equal(out[:, tg_cols], transition)),
                }
            )
        return out

    x0m = rng_manip.standard_normal((b, n * FRAME_DIM))
    full = euler_sample(manip_model, manip_cond, x0m, num_steps, cfg_scale, step_hook=hook)
    full[:, :prefix_cols] = prefix_flat

    out = []
    for i, gi in enumerate(inputs_list):
        seq = HoiSequence(
            data=full[i].reshape(n, FRAME_DIM),
            fps=gi.fps,
            t_g=t_g,
            label=gi.label,
            text=gi.text,
            text_grasp=gi.text_grasp,
            anchor=np.asarray(gi.anchor, dtype=np.float64),
            object_mesh=gi.object_mesh,
            scene=gi.scene_path,
            grasp_hand=gi.grasp_hand,
            seq_id=gi.seq_id,
        )
        out.append(de_anchor(seq))
    return out

"""Scene-context tokenization: farthest point sampling, pluggable per-point
feature providers, gated geometric/semantic fusion, Fourier-coded token
projection, a Perceiver-style cross-attention bottleneck, and a voxel
occupancy grid pooled into one global token.

Feature extraction is deterministic given the scene; the fusion gate, token
projection, latent queries, and the grid encoder are trainable with analytic
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyScene, FormatError, ShapeMismatch
from .geom import FourierPE, fourier_encode
from .nn import AttentionBlock

MAX_SCENE_POINTS = 25_000


@dataclass
class ScenePoints:
    """Sampled scene points with per-point geometric and semantic features."""

    positions: np.ndarray  # (N, 3)
    geo_features: np.ndarray  # (N, d_e)
    sem_features: np.ndarray  # (N, d_u)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.geo_features = np.atleast_2d(np.asarray(self.geo_features, dtype=np.float64))
        self.sem_features = np.atleast_2d(np.asarray(self.sem_features, dtype=np.float64))
        n = len(self.positions)
        if n == 0:
            raise EmptyScene("no scene points")
        if n > MAX_SCENE_POINTS:
            raise ValueError(f"{n} points exceeds the {MAX_SCENE_POINTS} cap")
        if len(self.geo_features) != n or len(self.sem_features) != n:
            raise ShapeMismatch("feature rows must align with positions")


@dataclass(frozen=True)
class SceneTokens:
    local: np.ndarray  # (L, d_s)
    glob: np.ndarray  # (d_s,)


def fps_sample(points: np.ndarray, n: int) -> np.ndarray:
    """Greedy farthest-point subset of size n, always starting at index 0.

    Each selected point maximizes its distance to the already selected set;
    ties resolve to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(points)
    if m < 1:
        raise EmptyScene("no points to sample")
    if n > m:
        raise ValueError(f"cannot sample {n} from {m} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0
    dist = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, n):
        idx = int(np.argmax(dist))
        chosen[i] = idx
        dist = np.minimum(dist, np.linalg.norm(points - points[idx], axis=1))
    return chosen


# -- feature providers --------------------------------------------------------


class GeometricFeatureProvider:
    """Hand-crafted local descriptors (normal, curvature proxy, density,
    height) zero-padded to the configured width."""

    def __init__(self, dim: int = 1536, k_neighbors: int = 16):
        self.dim = dim
        self.k = k_neighbors

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64)
        n = len(positions)
        k = min(self.k, n - 1)
        feats = np.zeros((n, self.dim))
        if k < 2:
            return feats
        for s in range(0, n, 1024):
            block = positions[s : s + 1024]
            d2 = np.sum((block[:, None, :] - positions[None, :, :]) ** 2, axis=2)
            nbr = np.argpartition(d2, k, axis=1)[:, : k + 1]
            for row, idx in enumerate(nbr):
                pts = positions[idx]
                ctr = pts.mean(axis=0)
                cov = (pts - ctr).T @ (pts - ctr) / len(pts)
                evals, evecs = np.linalg.eigh(cov)
                normal = evecs[:, 0]
                if normal[2] < 0:
                    normal = -normal
                curvature = evals[0] / max(evals.sum(), 1e-18)
                mean_d = float(np.sqrt(np.sort(d2[row, idx])[1:]).mean())
                density = 1.0 / max(mean_d, 1e-9)
                feats[s + row, :6] = [*normal, curvature, density, block[row, 2]]
        return feats


class LabelEmbeddingProvider:
    """Per-label frozen random embedding, zero-padded to the configured width."""

    def __init__(self, dim: int = 768, embed_dim: int = 16, seed: int = 0):
        self.dim = dim
        self.embed_dim = min(embed_dim, dim)
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    def embedding(self, label: int) -> np.ndarray:
        if label not in self._cache:
            rng = np.random.default_rng([self.seed, int(label)])
            v = rng.normal(size=self.embed_dim)
            self._cache[label] = v / np.linalg.norm(v)
        return self._cache[label]

    def __call__(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        out = np.zeros((len(labels), self.dim))
        for i, lab in enumerate(labels):
            out[i, : self.embed_dim] = self.embedding(int(lab))
        return out


# -- voxel occupancy -----------------------------------------------------------


@dataclass(frozen=True)
class VoxelGridSpec:
    dims: tuple[int, int, int] = (48, 48, 24)
    origin: tuple[float, float, float] = (-1.2, -1.2, -0.2)
    cell_size: float = 0.05

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError("grid dims must be positive")
        if self.cell_size <= 0:
            raise ValueError("cell size must be positive")


@dataclass
class OccupancyGrid:
    data: np.ndarray  # bool (nx, ny, nz)
    spec: VoxelGridSpec
    clamped: int = 0  # points outside the bounds, clamped to boundary cells


def voxelize(points: np.ndarray, spec: VoxelGridSpec) -> OccupancyGrid:
    """Binary occupancy: a cell is set iff at least one point maps into it.
    Out-of-bounds points clamp to boundary cells and are counted."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyScene("cannot voxelize an empty scene")
    rel = (points - np.asarray(spec.origin)) / spec.cell_size
    idx = np.floor(rel).astype(np.int64)
    hi = np.asarray(spec.dims) - 1
    clamped = int(np.sum(np.any((idx < 0) | (idx > hi), axis=1)))
    idx = np.clip(idx, 0, hi)
    data = np.zeros(spec.dims, dtype=bool)
    data[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyGrid(data, spec, clamped)


def grid_patches(grid: OccupancyGrid, patch: int = 4) -> np.ndarray:
    """Non-overlapping patch x patch x patch blocks flattened to rows; grid
    dims must be divisible by the patch size."""
    nx, ny, nz = grid.data.shape
    if nx % patch or ny % patch or nz % patch:
        raise ShapeMismatch(f"grid {grid.data.shape} not divisible by patch {patch}")
    g = grid.data.reshape(nx // patch, patch, ny // patch, patch, nz // patch, patch)
    g = np.moveaxis(g, (1, 3), (3, 4))  # (px, py, pz, patch, patch, patch)
    return g.reshape(-1, patch**3).astype(np.float64)


# -- trainable encoder -----------------------------------------------------------


@dataclass(frozen=True)
class SceneEncoderConfig:
    geo_dim: int = 1536
    sem_dim: int = 768
    hidden_dim: int = 512  # shared latent for the gated fusion
    token_dim: int = 64  # d_s
    num_latents: int = 256  # L
    pe_bands: int = 6
    pe_max_freq: float = 16.0
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    patch: int = 4


class SceneEncoder:
    """Fuses per-point features, projects hybrid tokens, compresses them with
    one cross-attention pass from learnable latent queries, and pools a voxel
    occupancy grid into a single global token."""

    def __init__(self, config: SceneEncoderConfig, rng=None, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.pe = FourierPE(num_bands=c.pe_bands, max_freq=c.pe_max_freq)
        pe_dim = self.pe.output_dim(3)
        num_patches = int(np.prod(np.asarray(c.grid.dims) // c.patch))

        def init(shape, fan_in):
            bound = np.sqrt(3.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        self.params: dict[str, np.ndarray] = {
            "fuse.we": init((c.geo_dim, c.hidden_dim), c.geo_dim),
            "fuse.wu": init((c.sem_dim, c.hidden_dim), c.sem_dim),
            "fuse.alpha": np.zeros(c.hidden_dim, dtype=dtype),
            "psi": init((c.hidden_dim + pe_dim, c.token_dim), c.hidden_dim + pe_dim),
            "latent_q": init((c.num_latents, c.token_dim), c.token_dim),
            "vit.patch_w": init((c.patch**3, c.token_dim), c.patch**3),
            "vit.pos": (0.02 * rng.normal(size=(num_patches, c.token_dim))).astype(dtype),
            "vit.pool_q": init((1, c.token_dim), c.token_dim),
        }
        self.perceiver = AttentionBlock(c.token_dim, rng=rng, dtype=dtype, prefix="perceiver.")
        self.vit_attn = AttentionBlock(c.token_dim, rng=rng, dtype=dtype, prefix="vit.attn.")
        self.params.update(self.perceiver.params)
        self.params.update(self.vit_attn.params)
        self.perceiver.params = self.params
        self.vit_attn.params = self.params

    # pieces, exposed for unit tests

    def gated_fuse(self, geo: np.ndarray, sem: np.ndarray) -> np.ndarray:
        if geo.shape[1] != self.config.geo_dim or sem.shape[1] != self.config.sem_dim:
            raise ShapeMismatch("feature widths do not match the encoder config")
        gate = _sigmoid(self.params["fuse.alpha"].astype(np.float64))
        return geo @ self.params["fuse.we"] + gate * (sem @ self.params["fuse.wu"])

    def build_tokens(self, fused: np.ndarray, positions: np.ndarray) -> np.ndarray:
        if len(fused) != len(positions):
            raise ShapeMismatch("fused rows must align with positions")
        pe = fourier_encode(positions, self.pe)
        return np.concatenate([fused, pe], axis=1) @ self.params["psi"]

    def compress(self, tokens: np.ndarray) -> np.ndarray:
        return self.perceiver.forward(self.params["latent_q"], tokens)

    def global_token(self, grid: OccupancyGrid) -> np.ndarray:
        t = grid_patches(grid, self.config.patch) @ self.params["vit.patch_w"]
        t = t + self.params["vit.pos"]
        return self.vit_attn.forward(self.params["vit.pool_q"], t)[0]

    def encode(self, scene: ScenePoints) -> SceneTokens:
        tokens, _ = self.encode_cached(scene)
        return tokens

    def encode_cached(self, scene: ScenePoints):
        c = self.config
        geo = scene.geo_features
        sem = scene.sem_features
        if geo.shape[1] != c.geo_dim or sem.shape[1] != c.sem_dim:
            raise ShapeMismatch("feature widths do not match the encoder config")
        gate = _sigmoid(self.params["fuse.alpha"].astype(np.float64))
        sem_proj = sem @ self.params["fuse.wu"]
        fused = geo @ self.params["fuse.we"] + gate * sem_proj
        pe = fourier_encode(scene.positions, self.pe)
        hybrid = np.concatenate([fused, pe], axis=1)
        tokens = hybrid @ self.params["psi"]
        local, p_cache = self.perceiver.forward_cached(self.params["latent_q"], tokens)

        grid = voxelize(scene.positions, c.grid)
        patches = grid_patches(grid, c.patch)
        vit_tokens = patches @ self.params["vit.patch_w"] + self.params["vit.pos"]
        glob_row, v_cache = self.vit_attn.forward_cached(self.params["vit.pool_q"], vit_tokens)

        cache = (scene, gate, sem_proj, hybrid, p_cache, patches, v_cache)
        return SceneTokens(local, glob_row[0]), cache

    def backward(self, cache, g_local: np.ndarray, g_glob: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of sum(g_local * local) + sum(g_glob * glob)."""
        scene, gate, sem_proj, hybrid, p_cache, patches, v_cache = cache
        grads: dict[str, np.ndarray] = {}

        p_grads, g_q, g_tokens = self.perceiver.backward(p_cache, g_local)
        grads.update(p_grads)
        grads["latent_q"] = g_q
        grads["psi"] = hybrid.T @ g_tokens
        g_hybrid = g_tokens @ self.params["psi"].T
        d_h = self.config.hidden_dim
        g_fused = g_hybrid[:, :d_h]
        grads["fuse.we"] = scene.geo_features.T @ g_fused
        grads["fuse.wu"] = scene.sem_features.T @ (g_fused * gate)
        grads["fuse.alpha"] = (gate * (1.0 - gate)) * np.sum(g_fused * sem_proj, axis=0)

        v_grads, g_pool, g_vt = self.vit_attn.backward(v_cache, np.atleast_2d(g_glob))
        grads.update(v_grads)
        grads["vit.pool_q"] = g_pool
        grads["vit.pos"] = g_vt
        grads["vit.patch_w"] = patches.T @ g_vt
        return {k: np.asarray(v, dtype=self.dtype) for k, v in grads.items()}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gated_fuse(geo, sem, alpha, w_geo, w_sem) -> np.ndarray:
    """Functional form of the channel-gated fusion: geo @ w_geo +
    sigmoid(alpha) * (sem @ w_sem), broadcast row-wise."""
    geo = np.atleast_2d(np.asarray(geo, dtype=np.float64))
    sem = np.atleast_2d(np.asarray(sem, dtype=np.float64))
    if geo.shape[0] != sem.shape[0]:
        raise ShapeMismatch("row counts differ")
    out_g = geo @ w_geo
    out_s = sem @ w_sem
    if out_g.shape != out_s.shape:
        raise ShapeMismatch("projections disagree on the latent width")
    return out_g + _sigmoid(np.asarray(alpha)) * out_s


# -- point-cloud file format -----------------------------------------------------
#
# Binary little-endian layout:
#   magic "HPC1" | uint32 count | uint8 has_labels |
#   count * 3 float32 positions | count * int32 labels (when has_labels)

_PCL_MAGIC = b"HPC1"


def write_pointcloud(path, positions: np.ndarray, labels: np.ndarray | None = None) -> None:
    positions = np.asarray(positions, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(_PCL_MAGIC)
        fh.write(np.uint32(len(positions)).tobytes())
        fh.write(np.uint8(0 if labels is None else 1).tobytes())
        fh.write(positions.tobytes())
        if labels is not None:
            labels = np.asarray(labels, dtype="<i4").reshape(-1)
            if len(labels) != len(positions):
                raise ShapeMismatch("labels must align with positions")
            fh.write(labels.tobytes())


def read_pointcloud(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _PCL_MAGIC:
        raise FormatError("bad point-cloud magic")
    count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    has_labels = raw[8] != 0
    off = 9
    pos = np.frombuffer(raw, dtype="<f4", count=count * 3, offset=off).reshape(count, 3)
    off += count * 12
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=count, offset=off).copy()
    return pos.astype(np.float64), labels

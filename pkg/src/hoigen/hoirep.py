"""Canonical hand-object state: 117-dim frames, a simplified 21-joint hand,
signed-distance features, transition-frame translation anchoring, and the
JSONL trajectory format.

Frame layout (117 = 54 + 54 + 9):
    [  0: 54)  left hand   [trans 3 | rot6d 6 | articulation 24 | sd 21]
    [ 54:108)  right hand  (same layout)
    [108:111)  object translation
    [111:117)  object rotation (6D)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, WrongDimension
from .geom import IDENTITY_ROT6D, RigidPose, matrix_from_axis_angle, rot6d_to_matrix
from .mesh import TriMesh

FRAME_DIM = 117
HAND_DIM = 54
NUM_JOINTS = 21
NUM_HINGES = 20
ARTIC_DIM = 24

LEFT = slice(0, 54)
RIGHT = slice(54, 108)
OBJ_T = slice(108, 111)
OBJ_R = slice(111, 117)
# offsets within one hand block
H_T = slice(0, 3)
H_R = slice(3, 9)
H_THETA = slice(9, 33)
H_SD = slice(33, 54)

FINGER_TIPS = (4, 8, 12, 16, 20)  # thumb, index, middle, ring, pinky
THUMB_TIP = 4


@dataclass(frozen=True)
class HandState:
    """One hand: anchored root translation, 6D orientation, articulation in
    the 24-dim linear pose space, per-joint signed distances to the object."""

    root_translation: np.ndarray
    orientation6d: np.ndarray
    articulation: np.ndarray
    sd_features: np.ndarray

    @staticmethod
    def zeros() -> "HandState":
        return HandState(np.zeros(3), IDENTITY_ROT6D.copy(), np.zeros(24), np.zeros(21))

    def packed(self) -> np.ndarray:
        return np.concatenate(
            [self.root_translation, self.orientation6d, self.articulation, self.sd_features]
        )


@dataclass(frozen=True)
class HoiFrame:
    left: HandState
    right: HandState
    object_pose: RigidPose


def pack_hand(h: HandState) -> np.ndarray:
    v = h.packed()
    if v.shape != (HAND_DIM,):
        raise WrongDimension(f"hand packs to {v.shape}, expected ({HAND_DIM},)")
    return v


def unpack_hand(v: np.ndarray) -> HandState:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (HAND_DIM,):
        raise WrongDimension(f"expected ({HAND_DIM},), got {v.shape}")
    return HandState(v[H_T].copy(), v[H_R].copy(), v[H_THETA].copy(), v[H_SD].copy())


def pack_frame(f: HoiFrame) -> np.ndarray:
    return np.concatenate(
        [pack_hand(f.left), pack_hand(f.right), f.object_pose.translation, f.object_pose.rotation6d]
    )


def unpack_frame(v: np.ndarray) -> HoiFrame:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (FRAME_DIM,):
        raise WrongDimension(f"expected ({FRAME_DIM},), got {v.shape}")
    return HoiFrame(
        unpack_hand(v[LEFT]),
        unpack_hand(v[RIGHT]),
        RigidPose(v[OBJ_T].copy(), v[OBJ_R].copy()),
    )


@dataclass
class HoiSequence:
    """N-frame trajectory stored as an (N, 117) array plus metadata.

    `anchor` is None for world-frame sequences; anchored sequences store the
    transition-frame object position that was subtracted from all hand and
    object translations.
    """

    data: np.ndarray
    fps: float
    t_g: int
    label: str = ""
    text: str = ""
    text_grasp: str = ""
    anchor: np.ndarray | None = None
    object_mesh: str = ""
    scene: str = ""
    grasp_hand: str = "right"
    seq_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != FRAME_DIM:
            raise WrongDimension(f"sequence data must be (N, {FRAME_DIM})")
        if not (0 <= self.t_g < len(self.data)):
            raise ValueError(f"t_g={self.t_g} out of range for N={len(self.data)}")

    def __len__(self) -> int:
        return len(self.data)

    def frame(self, t: int) -> HoiFrame:
        return unpack_frame(self.data[t])

    def copy(self) -> "HoiSequence":
        return replace(
            self,
            data=self.data.copy(),
            anchor=None if self.anchor is None else np.array(self.anchor),
        )


def anchor_translations(seq: HoiSequence) -> HoiSequence:
    """Express hand and object translations relative to the object position at
    the transition frame. The anchored object translation at t_g is zero."""
    if seq.anchor is not None:
        raise ValueError("sequence is already anchored")
    out = seq.copy()
    anchor = seq.data[seq.t_g, OBJ_T].copy()
    for sl in (LEFT, RIGHT):
        out.data[:, sl.start : sl.start + 3] -= anchor
    out.data[:, OBJ_T] -= anchor
    out.anchor = anchor
    return out


def de_anchor(seq: HoiSequence) -> HoiSequence:
    """Inverse of anchor_translations."""
    if seq.anchor is None:
        raise ValueError("sequence is not anchored")
    out = seq.copy()
    for sl in (LEFT, RIGHT):
        out.data[:, sl.start : sl.start + 3] += seq.anchor
    out.data[:, OBJ_T] += seq.anchor
    out.anchor = None
    return out


# -- simplified hand skeleton -------------------------------------------------


@dataclass(frozen=True)
class HandSkeleton:
    """Tree-structured 21-joint hand with one hinge per non-root joint.

    `artic_map` is a frozen row-orthonormal (20, 24) matrix mapping the
    24-dim articulation vector to hinge angles; its transpose is the
    minimum-norm inverse used by the data generator.
    """

    side: str
    offsets: np.ndarray  # (21, 3) rest offsets, local to parent
    parents: np.ndarray  # (21,) parent indices, -1 for the wrist
    axes: np.ndarray  # (21, 3) hinge axes, row 0 unused
    artic_map: np.ndarray  # (20, 24)
    limits: np.ndarray  # (20, 2) radians

    def hinge_angles(self, articulation: np.ndarray) -> np.ndarray:
        raw = self.artic_map @ np.asarray(articulation, dtype=np.float64)
        return np.clip(raw, self.limits[:, 0], self.limits[:, 1])

    def articulation_from_angles(self, angles: np.ndarray) -> np.ndarray:
        """Minimum-norm articulation realizing the given hinge angles."""
        return self.artic_map.T @ np.asarray(angles, dtype=np.float64)


_FINGER_BASE_X = (0.088, 0.092, 0.088, 0.080)
_FINGER_BASE_Y = (0.030, 0.010, -0.012, -0.032)
_FINGER_LENS = (
    (0.040, 0.026, 0.022),
    (0.044, 0.028, 0.024),
    (0.040, 0.026, 0.022),
    (0.034, 0.020, 0.018),
)
_THUMB_BASE = (0.024, 0.040, -0.006)
_THUMB_DIR = (0.55, 0.75, -0.20)
_THUMB_LENS = (0.042, 0.034, 0.028)


def build_hand_skeleton(side: str = "right", seed: int = 7) -> HandSkeleton:
    """Default skeleton: palm in the xy-plane, fingers along +x, palm normal
    -z, thumb offset toward +y (right hand) or -y (left hand)."""
    if side not in ("right", "left"):
        raise ValueError("side must be 'right' or 'left'")
    mirror = 1.0 if side == "right" else -1.0
    offsets = np.zeros((21, 3))
    parents = np.full(21, -1, dtype=np.int64)
    axes = np.zeros((21, 3))

    def chain(base_joint: int, base_off, seg_dir, seg_lens, axis):
        d = np.asarray(seg_dir, dtype=np.float64)
        d = d / np.linalg.norm(d)
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        offsets[base_joint] = base_off
        parents[base_joint] = 0
        axes[base_joint] = axis
        j = base_joint
        for ln in seg_lens:
            offsets[j + 1] = d * ln
            parents[j + 1] = j
            axes[j + 1] = axis
            j += 1

    td = np.array(_THUMB_DIR) * np.array([1.0, mirror, 1.0])
    tb = np.array(_THUMB_BASE) * np.array([1.0, mirror, 1.0])
    # thumb hinges about the +-x axis so positive curl sweeps the tip down
    # and across the palm, opposing the fingers
    chain(1, tb, td, _THUMB_LENS, (-mirror, 0.0, 0.0))
    for i in range(4):
        base = np.array([_FINGER_BASE_X[i], mirror * _FINGER_BASE_Y[i], 0.0])
        chain(5 + 4 * i, base, (1.0, 0.0, 0.0), _FINGER_LENS[i], (0.0, 1.0, 0.0))

    rng = np.random.default_rng(seed)
    g = rng.normal(size=(ARTIC_DIM, NUM_HINGES))
    q, _ = np.linalg.qr(g)
    artic_map = q.T  # (20, 24), orthonormal rows
    limits = np.tile(np.array([-0.25, 1.85]), (NUM_HINGES, 1))
    return HandSkeleton(side, offsets, parents, axes, artic_map, limits)


def fk_positions(
    skel: HandSkeleton,
    root_translation: np.ndarray,
    root_rotation: np.ndarray,
    articulation: np.ndarray,
) -> np.ndarray:
    """Joint positions (21, 3) for an explicit root pose and articulation."""
    angles = skel.hinge_angles(articulation)
    pos = np.empty((21, 3))
    rot = np.empty((21, 3, 3))
    pos[0] = np.asarray(root_translation, dtype=np.float64)
    rot[0] = np.asarray(root_rotation, dtype=np.float64)
    for k in range(1, 21):
        p = skel.parents[k]
        pos[k] = pos[p] + rot[p] @ skel.offsets[k]
        rot[k] = rot[p] @ matrix_from_axis_angle(skel.axes[k] * angles[k - 1])
    return pos


def forward_kinematics(skel: HandSkeleton, h: HandState) -> np.ndarray:
    """Joint positions for a hand state, in the frame of its root translation
    (de-anchor the state first for world coordinates)."""
    return fk_positions(skel, h.root_translation, rot6d_to_matrix(h.orientation6d), h.articulation)


def compute_sd_features(joints: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Per-joint signed distance to the mesh surface (negative = inside)."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape != (NUM_JOINTS, 3):
        raise WrongDimension(f"expected ({NUM_JOINTS}, 3) joints, got {joints.shape}")
    return mesh.signed_distances(joints)


# -- JSONL serialization -------------------------------------------------------

FORMAT_VERSION = 1


def _header(seq: HoiSequence) -> dict:
    return {
        "kind": "hoi_sequence",
        "version": FORMAT_VERSION,
        "fps": seq.fps,
        "n": len(seq),
        "t_g": seq.t_g,
        "label": seq.label,
        "text": seq.text,
        "text_grasp": seq.text_grasp,
        "anchor": None if seq.anchor is None else [float(x) for x in seq.anchor],
        "object_mesh": seq.object_mesh,
        "scene": seq.scene,
        "grasp_hand": seq.grasp_hand,
        "seq_id": seq.seq_id,
    }


def write_sequences(path, seqs) -> None:
    """Write one or more sequences as JSONL: a header object followed by one
    117-element array per frame. Floats round-trip bit-exactly."""
    if isinstance(seqs, HoiSequence):
        seqs = [seqs]
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(json.dumps(_header(seq)) + "\n")
            for row in seq.data:
                fh.write(json.dumps([float(x) for x in row]) + "\n")


def read_sequences(path) -> list[HoiSequence]:
    seqs: list[HoiSequence] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = None
        rows: list[list[float]] = []

        def flush():
            if header is None:
                return
            if len(rows) != header["n"]:
                raise FormatError(
                    f"sequence {header.get('seq_id', '')!r}: expected {header['n']} frames, got {len(rows)}"
                )
            seqs.append(
                HoiSequence(
                    data=np.array(rows, dtype=np.float64),
                    fps=header["fps"],
                    t_g=header["t_g"],
                    label=header.get("label", ""),
                    text=header.get("text", ""),
                    text_grasp=header.get("text_grasp", ""),
                    anchor=None if header.get("anchor") is None else np.array(header["anchor"]),
                    object_mesh=header.get("object_mesh", ""),
                    scene=header.get("scene", ""),
                    grasp_hand=header.get("grasp_hand", "right"),
                    seq_id=header.get("seq_id", ""),
                )
            )

        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict):
                flush()
                if obj.get("kind") != "hoi_sequence" or obj.get("version") != FORMAT_VERSION:
                    raise FormatError(f"unsupported header: {obj.get('kind')} v{obj.get('version')}")
                header = obj
                rows = []
            else:
                if header is None:
                    raise FormatError("frame row before header")
                if len(obj) != FRAME_DIM:
                    raise FormatError(f"frame with {len(obj)} values, expected {FRAME_DIM}")
                rows.append(obj)
        flush()
    return seqs

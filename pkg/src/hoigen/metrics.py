"""Evaluation metrics for generated trajectories: interpenetration volume /
depth / contact ratio / volume-per-contact-unit, sample and overall diversity,
the binary physical-plausibility heuristic, grasp and final-displacement
errors, finite-difference smoothness statistics, and a nearest-centroid action
classifier.

The hand surface is a capsule sweep along the skeleton bones (palm bones from
the wrist to each finger base, then the finger segments). Elementwise-absolute
smoothness statistics are computed in the canonical frame of the initial
object pose so every metric is invariant under a global rigid transform of
hands, object, and ground plane together.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import LengthMismatch, NotWatertight, TooShort, UntrainedClassifier
from .geom import axis_angle_from_matrix, rot6d_to_matrix
from .hoirep import (
    FRAME_DIM,
    HandSkeleton,
    HoiSequence,
    build_hand_skeleton,
    de_anchor,
    fk_positions,
)
from .mesh import TriMesh, voxel_overlap_volume

CONTACT_DELTA = 0.005  # m
DEFAULT_VOXEL = 0.005  # m


def _skeletons(skels=None) -> tuple[HandSkeleton, HandSkeleton]:
    if skels is not None:
        return skels
    return build_hand_skeleton("left"), build_hand_skeleton("right")


def _world(seq: HoiSequence) -> HoiSequence:
    return de_anchor(seq) if seq.anchor is not None else seq


def sequence_joints(seq: HoiSequence, skels=None) -> np.ndarray:
    """World joint positions, shape (N, 2, 21, 3); hand 0 is the left."""
    left, right = _skeletons(skels)
    seq = _world(seq)
    out = np.empty((len(seq), 2, 21, 3))
    for t in range(len(seq)):
        row = seq.data[t]
        for h, (skel, off) in enumerate(((left, 0), (right, 54))):
            out[t, h] = fk_positions(
                skel, row[off : off + 3], rot6d_to_matrix(row[off + 3 : off + 9]), row[off + 9 : off + 33]
            )
    return out


def object_poses(seq: HoiSequence) -> tuple[np.ndarray, np.ndarray]:
    """World object translations (N, 3) and rotation matrices (N, 3, 3)."""
    seq = _world(seq)
    trans = seq.data[:, 108:111].copy()
    rots = np.stack([rot6d_to_matrix(r) for r in seq.data[:, 111:117]])
    return trans, rots


# -- capsule hand surface -------------------------------------------------------


@dataclass(frozen=True)
class CapsuleSpec:
    finger_radius: float = 0.006
    palm_radius: float = 0.012
    axial_samples: int = 3
    circ_samples: int = 8


def hand_capsules(joints: np.ndarray, skel: HandSkeleton, spec: CapsuleSpec = CapsuleSpec()):
    """Capsule segments (20, 2, 3) and radii (20,): one capsule per non-root
    joint, spanning from its parent joint."""
    segs = np.empty((20, 2, 3))
    radii = np.empty(20)
    for k in range(1, 21):
        p = skel.parents[k]
        segs[k - 1, 0] = joints[p]
        segs[k - 1, 1] = joints[k]
        radii[k - 1] = spec.palm_radius if p == 0 else spec.finger_radius
    return segs, radii


def capsule_inside(points: np.ndarray, segs: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """True where a point lies inside any capsule."""
    points = np.atleast_2d(points)
    a = segs[:, 0]
    d = segs[:, 1] - segs[:, 0]
    len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-18)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pkj,kj->pk", ap, d) / len2[None, :], 0.0, 1.0)
    closest = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(points[:, None, :] - closest, axis=2)
    return np.any(dist <= radii[None, :], axis=1)


def capsule_surface_points(
    segs: np.ndarray,
    radii: np.ndarray,
    spec: CapsuleSpec = CapsuleSpec(),
    ref_dir: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic sample points on each capsule surface (cylinder rings
    plus polar cap points); these stand in for hand mesh vertices.

    When ref_dir is given (e.g. a wrist-frame direction), the ring bases are
    built from it, making the samples material points that rotate with the
    hand."""
    pts = []
    n_ax, n_c = spec.axial_samples, spec.circ_samples
    ang = 2 * np.pi * np.arange(n_c) / n_c
    for (a, b), r in zip(segs, radii):
        axis = b - a
        ln = np.linalg.norm(axis)
        axis = axis / ln if ln > 1e-12 else np.array([0.0, 0.0, 1.0])
        candidates = []
        if ref_dir is not None:
            candidates.append(np.asarray(ref_dir, dtype=np.float64))
        candidates += [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
        for ref in candidates:
            e1 = np.cross(axis, ref)
            n1 = np.linalg.norm(e1)
            if n1 > 1e-6:
                e1 = e1 / n1
                break
        e2 = np.cross(axis, e1)
        ring = r * (np.outer(np.cos(ang), e1) + np.outer(np.sin(ang), e2))
        for i in range(n_ax):
            center = a + (i + 0.5) / n_ax * (b - a)
            pts.append(center[None, :] + ring)
        # cap rings at 45 degrees plus the two pole points
        cr = r / np.sqrt(2.0)
        pts.append(a[None, :] - cr * axis[None, :] + cr * (ring / r))
        pts.append(b[None, :] + cr * axis[None, :] + cr * (ring / r))
        pts.append((a - r * axis)[None, :])
        pts.append((b + r * axis)[None, :])
    return np.concatenate(pts, axis=0)


def capsule_area(segs: np.ndarray, radii: np.ndarray) -> float:
    lens = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    return float(np.sum(2 * np.pi * radii * lens + 4 * np.pi * radii**2))


def _posed_aabb(mesh: TriMesh, rot: np.ndarray, trans: np.ndarray):
    lo, hi = mesh.aabb()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    world = corners @ rot.T + trans
    return world.min(axis=0), world.max(axis=0)


def _pruned_sd(mesh: TriMesh, local_pts: np.ndarray, cutoff: float) -> np.ndarray:
    """Signed distances where only points whose AABB lower bound is within
    the cutoff get the exact query; the rest keep the (positive) lower bound,
    which classifies contact and penetration identically."""
    lo, hi = mesh.aabb()
    d = np.maximum(lo - local_pts, 0.0) + np.maximum(local_pts - hi, 0.0)
    lb = np.linalg.norm(d, axis=1)
    out = lb.copy()
    near = lb <= cutoff
    if np.any(near):
        out[near] = mesh.signed_distances(local_pts[near])
    return out


# -- physical interaction quality ------------------------------------------------


def interpenetration(
    seq: HoiSequence,
    mesh: TriMesh,
    delta: float = CONTACT_DELTA,
    voxel_size: float = DEFAULT_VOXEL,
    capsule: CapsuleSpec = CapsuleSpec(),
    skels=None,
) -> dict:
    """Per-hand interpenetration metrics, averaged across hands.

    iv (cm^3): voxel overlap volume between the capsule hand and the posed
    object mesh, averaged over all frames. id (cm): mean penetration depth of
    penetrating surface samples, averaged over all frames. cr (%): fraction of
    surface samples within delta, averaged over frames after the transition.
    ivu: iv normalized by contact area, over frames with nonzero contact;
    reported 0 with no_contact=True when no such frame exists.
    """
    if not mesh.watertight:
        raise NotWatertight("interpenetration requires a watertight object mesh")
    seq = _world(seq)
    joints = sequence_joints(seq, skels)
    trans, rots = object_poses(seq)
    n = len(seq)
    skl = _skeletons(skels)
    per_hand = []
    for h, off in ((0, 0), (1, 54)):
        iv_t = np.zeros(n)
        id_t = np.zeros(n)
        cr_t = np.zeros(n)
        area = None
        for t in range(n):
            segs, radii = hand_capsules(joints[t, h], skl[h], capsule)
            if area is None:
                area = capsule_area(segs, radii)
            wrist_rot = rot6d_to_matrix(seq.data[t, off + 3 : off + 9])
            ref_dir = wrist_rot @ np.array([0.57735027, 0.57735027, 0.57735027])
            verts = capsule_surface_points(segs, radii, capsule, ref_dir=ref_dir)
            local = (verts - trans[t]) @ rots[t]
            sd = _pruned_sd(mesh, local, delta)
            pen = sd < 0
            id_t[t] = float(np.mean(-sd[pen])) if np.any(pen) else 0.0
            cr_t[t] = float(np.mean(sd <= delta))
            hand_lo = joints[t, h].min(axis=0) - radii.max()
            hand_hi = joints[t, h].max(axis=0) + radii.max()
            obj_lo, obj_hi = _posed_aabb(mesh, rots[t], trans[t])
            lo = np.maximum(hand_lo, obj_lo)
            hi = np.minimum(hand_hi, obj_hi)
            if np.all(hi > lo):
                posed = mesh.transformed(rots[t], trans[t])
                iv_t[t] = voxel_overlap_volume(
                    lo, hi, voxel_size, lambda p: capsule_inside(p, segs, radii), posed
                )
        post = np.arange(n) > seq.t_g
        contact = cr_t > 0
        ivu_vals = iv_t[contact] / (cr_t[contact] * area)
        per_hand.append(
            {
                "iv": float(np.mean(iv_t)) * 1e6,
                "id": float(np.mean(id_t)) * 100.0,
                "cr": float(np.mean(cr_t[post])) * 100.0 if np.any(post) else 0.0,
                "ivu": float(np.mean(ivu_vals)) if np.any(contact) else 0.0,
                "no_contact": not bool(np.any(contact)),
            }
        )
    out = {k: 0.5 * (per_hand[0][k] + per_hand[1][k]) for k in ("iv", "id", "cr", "ivu")}
    out["no_contact"] = per_hand[0]["no_contact"] and per_hand[1]["no_contact"]
    out["per_hand"] = per_hand
    return out


# -- diversity ---------------------------------------------------------------------


def trajectory_diversity(seqs: list[HoiSequence], skels=None) -> float:
    """Mean pairwise L2 distance between flattened hand-joint trajectories,
    normalized by the frame count: 2/(K(K-1)) sum_{i<j} ||h_i - h_j|| / T."""
    if len(seqs) < 2:
        return 0.0
    n = len(seqs[0])
    if any(len(s) != n for s in seqs):
        raise LengthMismatch("diversity requires equal-length sequences")
    flats = [sequence_joints(s, skels).reshape(-1) for s in seqs]
    k = len(flats)
    total = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            total += float(np.linalg.norm(flats[i] - flats[j])) / n
    return 2.0 * total / (k * (k - 1))


# -- plausibility heuristic ----------------------------------------------------------


def phy_heuristic(
    seq: HoiSequence,
    mesh: TriMesh,
    skels=None,
    ground_normal=(0.0, 0.0, 1.0),
    ground_offset: float = 0.0,
    threshold: float = CONTACT_DELTA,
) -> int:
    """1 iff (i) some hand joint stays within the signed-distance threshold of
    the object surface at every frame after the transition, and (ii) the posed
    object mesh stays on or above the ground plane at every frame."""
    seq = _world(seq)
    joints = sequence_joints(seq, skels)
    trans, rots = object_poses(seq)
    normal = np.asarray(ground_normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    for t in range(len(seq)):
        verts = mesh.vertices @ rots[t].T + trans[t]
        if np.min(verts @ normal - ground_offset) < -1e-9:
            return 0
        if t > seq.t_g:
            pts = joints[t].reshape(-1, 3)
            sd = _pruned_sd(mesh, (pts - trans[t]) @ rots[t], threshold)
            if sd.min() > threshold:
                return 0
    return 1


# -- endpoint errors ------------------------------------------------------------------


def endpoint_errors(gen: HoiSequence, ref: HoiSequence, skels=None, contact: float = CONTACT_DELTA) -> dict:
    """ge (m): mean per-joint distance between generated and reference joints
    at the transition frame, over the grasping hand(s) selected by proximity
    in the reference. fde (m): final-frame object translation distance."""
    if len(gen) != len(ref) or gen.t_g != ref.t_g:
        raise LengthMismatch("endpoint errors need matching N and t_g")
    gen = _world(gen)
    ref = _world(ref)
    t_g = ref.t_g
    hands = []
    for off in (0, 54):
        sd = ref.data[t_g, off + 33 : off + 54]
        if np.min(np.abs(sd)) <= contact:
            hands.append(0 if off == 0 else 1)
    if not hands:
        hands = [1]  # fall back to the right hand
    jg = sequence_joints(gen, skels)[t_g]
    jr = sequence_joints(ref, skels)[t_g]
    dists = [np.linalg.norm(jg[h] - jr[h], axis=1).mean() for h in hands]
    fde = float(np.linalg.norm(gen.data[-1, 108:111] - ref.data[-1, 108:111]))
    return {"ge": float(np.mean(dists)), "fde": fde}


# -- smoothness -------------------------------------------------------------------------


def _grad(x: np.ndarray, dt: float, order: int) -> np.ndarray:
    """Repeated central differences; the returned array drops `order` frames
    at each boundary, where the one-sided edge stencils would contaminate the
    higher derivatives."""
    for _ in range(order):
        x = np.gradient(x, dt, axis=0)
    return x[order:-order] if len(x) > 2 * order else x[:0]


def _relative_axis_angles(rots: np.ndarray) -> np.ndarray:
    """Axis-angle of each rotation relative to the first frame."""
    r0 = rots[0]
    return np.stack([axis_angle_from_matrix(r0.T @ r) for r in rots])


def smoothness(seq: HoiSequence, skels=None) -> dict:
    """Finite-difference motion statistics in physical units.

    jerk_pos / jerk_ang: mean norm of the third derivative of the object
    translation / frame-0-relative axis-angle rotation. acc_g / acc_l: mean
    absolute second derivative of the wrist (global) and wrist-relative finger
    (local) positions and rotations, averaged over components and both hands.
    All positional quantities are expressed in the initial object frame so the
    statistics are invariant to a global rigid transform of the scene.
    """
    if len(seq) < 4:
        raise TooShort("smoothness needs at least 4 frames")
    seq = _world(seq)
    dt = 1.0 / seq.fps
    trans, rots = object_poses(seq)
    canon_r = rots[0]
    canon_t = trans[0]

    obj_local = (trans - canon_t) @ canon_r
    jerk_pos = float(np.mean(np.linalg.norm(_grad(obj_local, dt, 3), axis=1)))
    jerk_ang = float(np.mean(np.linalg.norm(_grad(_relative_axis_angles(rots), dt, 3), axis=1)))

    joints = sequence_joints(seq, skels)
    left, right = _skeletons(skels)
    acc_gp, acc_lp, acc_gr, acc_lr = [], [], [], []
    for h, (skel, off) in enumerate(((left, 0), (right, 54))):
        wrist = (joints[:, h, 0, :] - canon_t) @ canon_r
        acc_gp.append(np.abs(_grad(wrist, dt, 2)))
        fingers = (joints[:, h, 1:, :] - joints[:, h, 0:1, :]) @ canon_r
        acc_lp.append(np.abs(_grad(fingers.reshape(len(seq), -1), dt, 2)))
        wrist_rots = np.stack([rot6d_to_matrix(r) for r in seq.data[:, off + 3 : off + 9]])
        acc_gr.append(np.abs(_grad(_relative_axis_angles(wrist_rots), dt, 2)))
        hinges = np.stack([skel.hinge_angles(th) for th in seq.data[:, off + 9 : off + 33]])
        acc_lr.append(np.abs(_grad(hinges, dt, 2)))
    return {
        "jerk_pos": jerk_pos,
        "jerk_ang": jerk_ang,
        "acc_g_pos": float(np.mean(np.concatenate([a.ravel() for a in acc_gp]))),
        "acc_l_pos": float(np.mean(np.concatenate([a.ravel() for a in acc_lp]))),
        "acc_g_rot": float(np.mean(np.concatenate([a.ravel() for a in acc_gr]))),
        "acc_l_rot": float(np.mean(np.concatenate([a.ravel() for a in acc_lr]))),
    }


# -- action recognition --------------------------------------------------------------------


class NearestCentroidActionClassifier:
    """Nearest centroid over downsampled wrist-relative joint trajectories:
    each hand's joints are expressed in that hand's initial wrist frame, so
    the features are invariant to a global rigid transform while preserving
    the motion itself."""

    def __init__(self, num_frames: int = 16, skels=None):
        self.num_frames = num_frames
        self.skels = _skeletons(skels)
        self.centroids: dict[str, np.ndarray] | None = None

    def features(self, seq: HoiSequence) -> np.ndarray:
        seq = _world(seq)
        idx = np.round(np.linspace(0, len(seq) - 1, self.num_frames)).astype(int)
        joints = sequence_joints(seq, self.skels)[idx]
        parts = []
        for h, off in ((0, 0), (1, 54)):
            p0 = seq.data[0, off : off + 3]
            r0 = rot6d_to_matrix(seq.data[0, off + 3 : off + 9])
            parts.append((joints[:, h].reshape(-1, 3) - p0) @ r0)
        return np.concatenate(parts).reshape(-1)

    def fit(self, seqs: list[HoiSequence]) -> "NearestCentroidActionClassifier":
        sums: dict[str, list[np.ndarray]] = {}
        for s in seqs:
            sums.setdefault(s.label, []).append(self.features(s))
        self.centroids = {lab: np.mean(np.stack(f), axis=0) for lab, f in sums.items()}
        return self

    def predict(self, seq: HoiSequence) -> str:
        if self.centroids is None:
            raise UntrainedClassifier("fit the classifier before predicting")
        f = self.features(seq)
        labels = sorted(self.centroids)
        dists = [np.linalg.norm(f - self.centroids[lab]) for lab in labels]
        return labels[int(np.argmin(dists))]

    def accuracy(self, seqs: list[HoiSequence]) -> float:
        if not seqs:
            return 0.0
        return float(np.mean([self.predict(s) == s.label for s in seqs]))


# -- report assembly ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Full per-sequence metric vector; simulation-based success metrics are
    out of scope and deliberately absent."""

    iv: float  # cm^3
    id: float  # cm
    cr: float  # %
    ivu: float
    no_contact: bool
    phy: int
    ge: float | None  # m
    fde: float | None  # m
    jerk_pos: float  # m/s^3
    jerk_ang: float  # rad/s^3
    acc_g_pos: float  # m/s^2
    acc_l_pos: float  # m/s^2
    acc_g_rot: float  # rad/s^2
    acc_l_rot: float  # rad/s^2
    sd: float | None = None  # m, per-condition sample diversity
    ar_label: str | None = None
    label: str = ""
    seq_id: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate_sequence(
    gen: HoiSequence,
    mesh: TriMesh,
    ref: HoiSequence | None = None,
    classifier: NearestCentroidActionClassifier | None = None,
    skels=None,
    voxel_size: float = DEFAULT_VOXEL,
) -> MetricReport:
    inter = interpenetration(gen, mesh, voxel_size=voxel_size, skels=skels)
    smooth = smoothness(gen, skels)
    ends = endpoint_errors(gen, ref, skels) if ref is not None else {"ge": None, "fde": None}
    return MetricReport(
        iv=inter["iv"],
        id=inter["id"],
        cr=inter["cr"],
        ivu=inter["ivu"],
        no_contact=inter["no_contact"],
        phy=phy_heuristic(gen, mesh, skels),
        ge=ends["ge"],
        fde=ends["fde"],
        jerk_pos=smooth["jerk_pos"],
        jerk_ang=smooth["jerk_ang"],
        acc_g_pos=smooth["acc_g_pos"],
        acc_l_pos=smooth["acc_l_pos"],
        acc_g_rot=smooth["acc_g_rot"],
        acc_l_rot=smooth["acc_l_rot"],
        ar_label=classifier.predict(gen) if classifier is not None else None,
        label=gen.label,
        seq_id=gen.seq_id,
    )


AGGREGATE_COLUMNS = [
    "IV [cm^3]",
    "ID [cm]",
    "CR [%]",
    "IVU",
    "AR",
    "SD [m]",
    "OD [m]",
    "Phy [%]",
    "GE [m]",
    "FDE [m]",
    "Jerk-pos [m/s^3]",
    "Jerk-ang [rad/s^3]",
    "Acc_g-pos [m/s^2]",
    "Acc_l-pos [m/s^2]",
    "Acc_g-rot [rad/s^2]",
    "Acc_l-rot [rad/s^2]",
]


def aggregate_reports(reports: list[MetricReport], od: float | None = None) -> dict:
    """Mean metrics over a report set, matching the headline table columns."""

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    ar = None
    labeled = [r for r in reports if r.ar_label is not None]
    if labeled:
        ar = float(np.mean([1.0 if r.ar_label == r.label else 0.0 for r in labeled]))
    return {
        "IV [cm^3]": mean([r.iv for r in reports]),
        "ID [cm]": mean([r.id for r in reports]),
        "CR [%]": mean([r.cr for r in reports]),
        "IVU": mean([r.ivu for r in reports]),
        "AR": ar,
        "SD [m]": mean([r.sd for r in reports]),
        "OD [m]": od,
        "Phy [%]": mean([100.0 * r.phy for r in reports]),
        "GE [m]": mean([r.ge for r in reports]),
        "FDE [m]": mean([r.fde for r in reports]),
        "Jerk-pos [m/s^3]": mean([r.jerk_pos for r in reports]),
        "Jerk-ang [rad/s^3]": mean([r.jerk_ang for r in reports]),
        "Acc_g-pos [m/s^2]": mean([r.acc_g_pos for r in reports]),
        "Acc_l-pos [m/s^2]": mean([r.acc_l_pos for r in reports]),
        "Acc_g-rot [rad/s^2]": mean([r.acc_g_rot for r in reports]),
        "Acc_l-rot [rad/s^2]": mean([r.acc_l_rot for r in reports]),
    }


def aggregate_csv(agg: dict) -> str:
    header = ",".join(AGGREGATE_COLUMNS)
    row = ",".join("" if agg.get(c) is None else repr(agg[c]) for c in AGGREGATE_COLUMNS)
    return header + "\n" + row + "\n"

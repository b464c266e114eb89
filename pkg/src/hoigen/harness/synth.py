"""Procedural hand-object interaction generator.

Each task is a minimum-jerk approach to a procedurally solved top grasp on a
primitive object, followed by class-specific object motion with the hand
rigidly attached: lift (straight up), slide (translate on the table), rotate
(yaw in place), or handover (carry to a meeting point where the other hand
takes over). Ground truth is exact by construction, which makes the generated
corpus usable both as training data and as a metric oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InfeasibleSpec
from ..geom import matrix_from_axis_angle, matrix_to_rot6d
from ..hoirep import (
    FINGER_TIPS,
    FRAME_DIM,
    HandSkeleton,
    HoiSequence,
    build_hand_skeleton,
    fk_positions,
)
from ..mesh import TriMesh, box_mesh, cylinder_mesh, icosphere_mesh

ACTIONS = ("lift", "slide", "rotate", "handover")
PRIMITIVES = ("box", "sphere", "cylinder")

INSTRUCTIONS = {
    "lift": (
        "lift the {obj} straight up",
        "raise the {obj} off the table",
        "pick the {obj} up and hold it",
    ),
    "slide": (
        "slide the {obj} across the table",
        "push the {obj} along the surface",
        "drag the {obj} to a new spot",
    ),
    "rotate": (
        "rotate the {obj} in place",
        "turn the {obj} around its axis",
        "spin the {obj} without moving it",
    ),
    "handover": (
        "hand the {obj} over to the other hand",
        "pass the {obj} to the free hand",
        "transfer the {obj} between hands",
    ),
}
GRASP_INSTRUCTIONS = (
    "reach out and grasp the {obj}",
    "approach the {obj} and grip it",
)
OBJECT_NAMES = {"box": "box", "sphere": "ball", "cylinder": "can"}

CONTACT_THRESHOLD = 0.005  # m, shared with the contact-ratio metric
MAX_PENETRATION = 0.001  # m


@dataclass(frozen=True)
class SynthTaskSpec:
    """One synthetic interaction task; everything derives from the seed."""

    action: str
    primitive: str
    size: float  # characteristic object size (m)
    approach_duration: float = 0.75  # s
    manip_duration: float = 2.25  # s
    noise: float = 0.0  # approach wrist jitter amplitude (m)
    seed: int = 0
    fps: float = 20.0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.size <= 0:
            raise ValueError("size must be positive")

    @property
    def n_g(self) -> int:
        return max(int(round(self.approach_duration * self.fps)), 2)

    @property
    def n(self) -> int:
        return self.n_g + max(int(round(self.manip_duration * self.fps)), 2)


@dataclass
class SynthResult:
    seq: HoiSequence
    mesh: TriMesh  # canonical object frame, centered at the origin
    scene_points: np.ndarray
    scene_labels: np.ndarray


@dataclass
class GraspSolution:
    wrist_pos: np.ndarray
    wrist_rot: np.ndarray  # 3x3
    angles: np.ndarray  # 20 hinge angles
    contacts: list[int]  # fingerpad joint ids within the contact threshold


def minimum_jerk(u):
    u = np.clip(u, 0.0, 1.0)
    return 10.0 * u**3 - 15.0 * u**4 + 6.0 * u**5


def build_object_mesh(spec: SynthTaskSpec) -> TriMesh:
    """Canonical mesh centered at the origin; height equals spec.size."""
    s = spec.size
    if spec.primitive == "box":
        return box_mesh((s, 0.85 * s, s))
    if spec.primitive == "sphere":
        return icosphere_mesh(s / 2.0, 2)
    return cylinder_mesh(0.38 * s, s, segments=20)


def make_scene(rng: np.random.Generator, num_table: int = 500):
    """Static scene: a table top at z=0, a back wall, and a few clutter
    blocks. Labels: 0 table, 1 wall, 2 clutter."""
    table = np.column_stack(
        [
            rng.uniform(-0.45, 0.45, num_table),
            rng.uniform(-0.45, 0.45, num_table),
            rng.normal(0.0, 0.001, num_table),
        ]
    )
    wall = np.column_stack(
        [
            rng.uniform(-0.45, 0.45, 120),
            np.full(120, -0.5) + rng.normal(0, 0.002, 120),
            rng.uniform(0.0, 0.35, 120),
        ]
    )
    clutter = []
    for _ in range(3):
        ctr = np.array([rng.uniform(-0.4, 0.4), rng.uniform(0.2, 0.4), 0.03])
        pts = ctr + rng.uniform(-0.03, 0.03, size=(40, 3))
        pts[:, 2] = np.abs(pts[:, 2])
        clutter.append(pts)
    points = np.concatenate([table, wall, *clutter])
    labels = np.concatenate([np.zeros(num_table), np.ones(120), np.full(120, 2)]).astype(np.int64)
    return points, labels


_CURL_WEIGHTS = np.array([0.35, 1.0, 0.8])  # base, middle, distal hinge shares


def _finger_angles(curls: np.ndarray) -> np.ndarray:
    """Map 5 per-finger curl scalars to the 20 hinge angles; tip hinges are
    unused by the kinematics and stay 0."""
    angles = np.zeros(20)
    for f in range(5):
        angles[4 * f : 4 * f + 3] = _CURL_WEIGHTS * curls[f]
    return angles


def _pad_sd(skel, mesh, obj_rot, obj_pos, wrist_pos, wrist_rot, curls, joint):
    joints = fk_positions(skel, wrist_pos, wrist_rot, skel.articulation_from_angles(_finger_angles(curls)))
    local = (joints[joint] - obj_pos) @ obj_rot
    return mesh.signed_distance(local), joints


def solve_top_grasp(
    skel: HandSkeleton,
    mesh: TriMesh,
    obj_rot: np.ndarray,
    obj_pos: np.ndarray,
    azimuth: float,
    pad_gap: float = 0.0035,
) -> GraspSolution | None:
    """Palm-down grasp from above: the wrist is placed over the object and
    each finger curls until its pad sits pad_gap above the surface (small
    enough for contact, large enough that a capsule-padded hand barely
    penetrates). Returns None when fewer than 3 pads (or not the thumb)
    reach contact without penetration."""
    lo, hi = mesh.aabb()
    mirror = 1.0 if skel.side == "right" else -1.0
    wrist_rot = matrix_from_axis_angle(np.array([0.0, 0.0, azimuth]))
    top = obj_pos[2] + hi[2]
    half_x = (hi[0] - lo[0]) / 2.0

    for clearance in (0.016, 0.026, 0.006, 0.036):
        back = 0.092 - 0.35 * half_x
        wrist_pos = obj_pos.copy()
        wrist_pos[2] = top + clearance
        wrist_pos[:2] -= (wrist_rot[:2, :2] @ np.array([back, mirror * 0.01]))
        curls = np.zeros(5)
        contacts = []
        for f in range(5):
            pad = FINGER_TIPS[f]
            grid = np.linspace(0.0, 1.75, 36)
            hit = None
            for c in grid[1:]:
                trial = curls.copy()
                trial[f] = c
                sd, _ = _pad_sd(skel, mesh, obj_rot, obj_pos, wrist_pos, wrist_rot, trial, pad)
                if sd <= pad_gap:
                    hit = (c - grid[1], c)
                    break
            if hit is None:
                continue
            lo_c, hi_c = hit
            for _ in range(18):
                mid = (lo_c + hi_c) / 2.0
                trial = curls.copy()
                trial[f] = mid
                sd, _ = _pad_sd(skel, mesh, obj_rot, obj_pos, wrist_pos, wrist_rot, trial, pad)
                if sd <= pad_gap:
                    hi_c = mid
                else:
                    lo_c = mid
            curls[f] = hi_c
            sd, _ = _pad_sd(skel, mesh, obj_rot, obj_pos, wrist_pos, wrist_rot, curls, pad)
            if abs(sd) <= CONTACT_THRESHOLD:
                contacts.append(pad)
        if len(contacts) < 3 or FINGER_TIPS[0] not in contacts:
            continue
        angles = _finger_angles(curls)
        joints = fk_positions(
            skel, wrist_pos, wrist_rot, skel.articulation_from_angles(angles)
        )
        all_sd = mesh.signed_distances((joints - obj_pos) @ obj_rot)
        if all_sd.min() < -MAX_PENETRATION:
            continue
        return GraspSolution(wrist_pos, wrist_rot, angles, contacts)
    return None


@dataclass
class _HandTrack:
    pos: np.ndarray  # (N, 3)
    rot: np.ndarray  # (N, 3, 3)
    theta: np.ndarray  # (N, 24)


def _interp_theta(theta_a, theta_b, s):
    return theta_a[None, :] + s[:, None] * (theta_b - theta_a)[None, :]


def _rest_track(n, pos, rot, theta):
    return _HandTrack(
        np.tile(pos, (n, 1)), np.tile(rot, (n, 1, 1)), np.tile(theta, (n, 1))
    )


def synth_generate(spec: SynthTaskSpec) -> SynthResult:
    """Generate one labeled trajectory, its object mesh, and its scene.

    Raises InfeasibleSpec when no valid grasp exists at the requested object
    scale (at least 3 fingerpads including the thumb within 5 mm, nowhere
    deeper than 1 mm penetration).
    """
    rng = np.random.default_rng(spec.seed)
    n, n_g, fps = spec.n, spec.n_g, spec.fps
    t_g = n_g - 1

    mesh = build_object_mesh(spec)
    obj_h = mesh.aabb()[1][2] - mesh.aabb()[0][2]
    yaw0 = rng.uniform(0.0, 2.0 * np.pi)
    obj_rot0 = matrix_from_axis_angle(np.array([0.0, 0.0, yaw0]))
    obj_pos0 = np.array([rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08), obj_h / 2.0])

    right = build_hand_skeleton("right")
    left = build_hand_skeleton("left")
    # approach direction follows the (random) object yaw with a small offset:
    # world-frame approaches stay diverse while the object-frame grasp
    # geometry stays consistent within a class
    azimuth = yaw0 + rng.uniform(-0.5, 0.5)
    grasp = solve_top_grasp(right, mesh, obj_rot0, obj_pos0, azimuth)
    if grasp is None:
        raise InfeasibleSpec(
            f"no valid top grasp for {spec.primitive} of size {spec.size:.3f}"
        )

    theta_grasp = right.articulation_from_angles(grasp.angles)
    theta_open = right.articulation_from_angles(_finger_angles(np.full(5, 0.15)))

    # approach: minimum-jerk wrist translation at constant orientation
    start_offset = grasp.wrist_rot @ np.array([-0.16, 0.0, 0.0]) + np.array([0.0, 0.0, 0.11])
    start_pos = grasp.wrist_pos + start_offset
    u_g = np.arange(n_g) / t_g if t_g > 0 else np.zeros(n_g)
    s_g = minimum_jerk(u_g)
    r_pos = start_pos[None, :] + s_g[:, None] * (grasp.wrist_pos - start_pos)[None, :]
    if spec.noise > 0:
        wiggle_dir = rng.normal(size=3)
        wiggle_dir /= np.linalg.norm(wiggle_dir)
        r_pos = r_pos + (spec.noise * np.sin(np.pi * u_g) ** 2)[:, None] * wiggle_dir
    r_track = _HandTrack(
        r_pos, np.tile(grasp.wrist_rot, (n_g, 1, 1)), _interp_theta(theta_open, theta_grasp, s_g)
    )

    left_rest_pos = np.array([-0.08, 0.32, 0.07])
    left_rest_rot = np.eye(3)
    left_rest_theta = left.articulation_from_angles(_finger_angles(np.full(5, 0.3)))
    l_track = _rest_track(n_g, left_rest_pos, left_rest_rot, left_rest_theta)

    obj_pos = np.tile(obj_pos0, (n_g, 1))
    obj_rot = np.tile(obj_rot0, (n_g, 1, 1))

    # manipulation segment
    n_m = n - n_g
    u_m = np.arange(1, n_m + 1) / n_m
    s_m = minimum_jerk(u_m)
    rel_pos = obj_rot0.T @ (grasp.wrist_pos - obj_pos0)
    rel_rot = obj_rot0.T @ grasp.wrist_rot

    def attach(obj_p, obj_r):
        return obj_p + obj_r @ rel_pos, obj_r @ rel_rot

    if spec.action == "lift":
        dz = rng.uniform(0.12, 0.22)
        m_obj_pos = obj_pos0[None, :] + np.outer(s_m, [0.0, 0.0, dz])
        m_obj_rot = np.tile(obj_rot0, (n_m, 1, 1))
    elif spec.action == "slide":
        # slide along the object's own +x axis (with jitter) so the motion is
        # consistent in the pose-canonical frame the classifier uses
        ang = rng.uniform(-0.4, 0.4)
        dist = rng.uniform(0.12, 0.20)
        delta = obj_rot0 @ (np.array([np.cos(ang), np.sin(ang), 0.0]) * dist)
        m_obj_pos = obj_pos0[None, :] + s_m[:, None] * delta[None, :]
        m_obj_rot = np.tile(obj_rot0, (n_m, 1, 1))
    elif spec.action == "rotate":
        dyaw = rng.uniform(np.deg2rad(60), np.deg2rad(110))
        m_obj_pos = np.tile(obj_pos0, (n_m, 1))
        m_obj_rot = np.stack(
            [matrix_from_axis_angle(np.array([0, 0, yaw0 + s * dyaw])) for s in s_m]
        )
    else:  # handover
        meet = obj_pos0 + np.array([0.0, 0.16, 0.12])
        final = meet + np.array([0.0, 0.10, -0.04])
        m_obj_pos = np.empty((n_m, 3))
        m_obj_rot = np.tile(obj_rot0, (n_m, 1, 1))
        half = n_m // 2
        s1 = minimum_jerk(np.arange(1, half + 1) / half)
        s2 = minimum_jerk(np.arange(1, n_m - half + 1) / (n_m - half))
        m_obj_pos[:half] = obj_pos0[None, :] + s1[:, None] * (meet - obj_pos0)[None, :]
        m_obj_pos[half:] = meet[None, :] + s2[:, None] * (final - meet)[None, :]

    # right hand follows the object while attached
    m_r_pos = np.empty((n_m, 3))
    m_r_rot = np.empty((n_m, 3, 3))
    m_r_theta = np.tile(theta_grasp, (n_m, 1))
    m_l_pos = np.tile(left_rest_pos, (n_m, 1))
    m_l_rot = np.tile(left_rest_rot, (n_m, 1, 1))
    m_l_theta = np.tile(left_rest_theta, (n_m, 1))

    if spec.action == "handover":
        half = n_m // 2
        # left hand solves its own grasp at the meeting pose
        lgrasp = solve_top_grasp(left, mesh, obj_rot0, meet, azimuth)
        if lgrasp is None:
            raise InfeasibleSpec("handover meeting grasp infeasible")
        l_theta_grasp = left.articulation_from_angles(lgrasp.angles)
        l_rel_pos = obj_rot0.T @ (lgrasp.wrist_pos - meet)
        l_rel_rot = obj_rot0.T @ lgrasp.wrist_rot
        # phase 1: right carries, left approaches its grasp pose
        for k in range(half):
            m_r_pos[k], m_r_rot[k] = attach(m_obj_pos[k], m_obj_rot[k])
        s_app = minimum_jerk(np.arange(1, half + 1) / half)
        l_start = left_rest_pos
        for k in range(half):
            m_l_pos[k] = l_start + s_app[k] * (lgrasp.wrist_pos - l_start)
            m_l_rot[k] = lgrasp.wrist_rot
            m_l_theta[k] = left_rest_theta + s_app[k] * (l_theta_grasp - left_rest_theta)
        # phase 2: left carries, right releases and retreats
        theta_release = right.articulation_from_angles(_finger_angles(np.full(5, 0.2)))
        r_hold_pos, r_hold_rot = attach(m_obj_pos[half - 1], m_obj_rot[half - 1])
        retreat = r_hold_pos + grasp.wrist_rot @ np.array([-0.12, 0.0, 0.0]) + np.array([0, 0, 0.08])
        s_ret = minimum_jerk(np.arange(1, n_m - half + 1) / (n_m - half))
        for k in range(half, n_m):
            j = k - half
            m_l_pos[k] = m_obj_pos[k] + m_obj_rot[k] @ l_rel_pos
            m_l_rot[k] = m_obj_rot[k] @ l_rel_rot
            m_l_theta[k] = l_theta_grasp
            m_r_pos[k] = r_hold_pos + s_ret[j] * (retreat - r_hold_pos)
            m_r_rot[k] = r_hold_rot
            m_r_theta[k] = theta_grasp + minimum_jerk(min(j / max(half * 0.3, 1), 1.0)) * (
                theta_release - theta_grasp
            )
    else:
        for k in range(n_m):
            m_r_pos[k], m_r_rot[k] = attach(m_obj_pos[k], m_obj_rot[k])

    r_full = _HandTrack(
        np.concatenate([r_track.pos, m_r_pos]),
        np.concatenate([r_track.rot, m_r_rot]),
        np.concatenate([r_track.theta, m_r_theta]),
    )
    l_full = _HandTrack(
        np.concatenate([l_track.pos, m_l_pos]),
        np.concatenate([l_track.rot, m_l_rot]),
        np.concatenate([l_track.theta, m_l_theta]),
    )
    obj_pos_full = np.concatenate([obj_pos, m_obj_pos])
    obj_rot_full = np.concatenate([obj_rot, m_obj_rot])

    data = np.zeros((n, FRAME_DIM))
    for t in range(n):
        for sl_start, skel, track in ((0, left, l_full), (54, right, r_full)):
            joints = fk_positions(skel, track.pos[t], track.rot[t], track.theta[t])
            local = (joints - obj_pos_full[t]) @ obj_rot_full[t]
            sd = mesh.signed_distances(local)
            data[t, sl_start : sl_start + 3] = track.pos[t]
            data[t, sl_start + 3 : sl_start + 9] = matrix_to_rot6d(track.rot[t])
            data[t, sl_start + 9 : sl_start + 33] = track.theta[t]
            data[t, sl_start + 33 : sl_start + 54] = sd
        data[t, 108:111] = obj_pos_full[t]
        data[t, 111:117] = matrix_to_rot6d(obj_rot_full[t])

    # validate the transition-frame grasp on the stored features
    pad_sd = data[t_g, 54 + 33 : 54 + 54][list(FINGER_TIPS)]
    if np.sum(np.abs(pad_sd) <= CONTACT_THRESHOLD) < 3 or abs(pad_sd[0]) > CONTACT_THRESHOLD:
        raise InfeasibleSpec("transition-frame grasp lost contact")
    if data[t_g, 33:54].min() < -MAX_PENETRATION or data[t_g, 87:108].min() < -MAX_PENETRATION:
        raise InfeasibleSpec("transition-frame grasp penetrates the object")

    obj_name = OBJECT_NAMES[spec.primitive]
    text = INSTRUCTIONS[spec.action][int(rng.integers(len(INSTRUCTIONS[spec.action])))].format(obj=obj_name)
    text_grasp = GRASP_INSTRUCTIONS[int(rng.integers(len(GRASP_INSTRUCTIONS)))].format(obj=obj_name)
    scene_points, scene_labels = make_scene(rng)

    seq = HoiSequence(
        data=data,
        fps=fps,
        t_g=t_g,
        label=spec.action,
        text=text,
        text_grasp=text_grasp,
        grasp_hand="right",
        seq_id=f"{spec.action}-{spec.primitive}-{spec.seed}",
    )
    return SynthResult(seq, mesh, scene_points, scene_labels)


def default_specs(
    count: int,
    base_seed: int = 0,
    size_range=(0.055, 0.085),
    approach_duration: float = 0.75,
    manip_duration: float = 2.25,
    noise: float = 0.0,
    fps: float = 20.0,
) -> list[SynthTaskSpec]:
    """Balanced task list cycling through actions and primitives."""
    rng = np.random.default_rng(base_seed)
    specs = []
    for i in range(count):
        specs.append(
            SynthTaskSpec(
                action=ACTIONS[i % len(ACTIONS)],
                primitive=PRIMITIVES[(i // len(ACTIONS)) % len(PRIMITIVES)],
                size=float(rng.uniform(*size_range)),
                approach_duration=approach_duration,
                manip_duration=manip_duration,
                noise=noise,
                seed=int(rng.integers(2**31)) + i,
                fps=fps,
            )
        )
    return specs


def generate_many(specs: list[SynthTaskSpec], max_retries: int = 8) -> list[SynthResult]:
    """Generate all specs, retrying infeasible ones with re-derived seeds so a
    balanced class distribution survives."""
    out = []
    for spec in specs:
        cur = spec
        for attempt in range(max_retries + 1):
            try:
                out.append(synth_generate(cur))
                break
            except InfeasibleSpec:
                if attempt == max_retries:
                    raise
                cur = SynthTaskSpec(
                    action=spec.action,
                    primitive=spec.primitive,
                    size=spec.size,
                    approach_duration=spec.approach_duration,
                    manip_duration=spec.manip_duration,
                    noise=spec.noise,
                    seed=spec.seed + 1000003 * (attempt + 1),
                    fps=spec.fps,
                )
    return out

"""Procedural capsule humanoid with linear-blend skinning.

Every posed mesh shares the rest-pose topology, so vertex ``i`` in any pose
corresponds to vertex ``i`` in every other pose.  Coordinates: ``+y`` up,
the body faces ``+z`` and its left side is ``+x``; feet rest on ``y = 0``.
"""
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.sparse import csgraph
from skimage.measure import marching_cubes

from .arrays import atomic_write_text
from .mesh_core import TriMesh

BONES = (
    "torso", "head",
    "l_upper_arm", "l_forearm", "r_upper_arm", "r_forearm",
    "l_thigh", "l_shin", "r_thigh", "r_shin",
)
PARENTS = {
    "torso": None, "head": "torso",
    "l_upper_arm": "torso", "l_forearm": "l_upper_arm",
    "r_upper_arm": "torso", "r_forearm": "r_upper_arm",
    "l_thigh": "torso", "l_shin": "l_thigh",
    "r_thigh": "torso", "r_shin": "r_thigh",
}

# (low, high) in radians
JOINT_LIMITS = {
    "root_yaw": (-np.pi, np.pi),
    "root_pitch": (-np.pi, np.pi),
    "root_roll": (-np.pi, np.pi),
    "neck_flex": (-0.4, 0.4),
    "neck_turn": (-0.6, 0.6),
    "l_shoulder_abd": (-0.3, 1.2),
    "l_shoulder_flex": (-0.6, 1.2),
    "r_shoulder_abd": (-0.3, 1.2),
    "r_shoulder_flex": (-0.6, 1.2),
    "l_elbow": (0.0, 1.8),
    "r_elbow": (0.0, 1.8),
    "l_hip_flex": (-0.4, 1.0),
    "l_hip_abd": (-0.1, 0.5),
    "r_hip_flex": (-0.4, 1.0),
    "r_hip_abd": (-0.1, 0.5),
    "l_knee": (0.0, 1.5),
    "r_knee": (0.0, 1.5),
}

KEYPOINT_NAMES = (
    "head_top", "face", "back_of_head", "neck_front", "neck_back",
    "sternum", "upper_back", "navel", "lower_back",
    "l_ear", "r_ear", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand", "l_chest", "r_chest",
    "l_waist", "r_waist", "l_hip", "r_hip", "l_buttock", "r_buttock",
    "l_knee", "r_knee", "l_ankle", "r_ankle", "l_foot", "r_foot",
)


class BodySpecError(ValueError):
    pass


@dataclass(frozen=True)
class BodySpec:
    """Capsule skeleton dimensions in meters.

    ``right_scale`` scales right-limb lengths and radii (1.0 gives a
    left/right symmetric body).  ``shape_variation`` perturbs every
    dimension by up to that relative amount, drawn from ``rng_seed``.
    """

    torso_length: float = 0.52
    torso_radius: float = 0.14
    torso_depth_ratio: float = 0.72
    neck_radius: float = 0.055
    head_radius: float = 0.10
    head_length: float = 0.10
    shoulder_width: float = 0.19
    upper_arm_length: float = 0.29
    upper_arm_radius: float = 0.055
    forearm_length: float = 0.31
    forearm_radius: float = 0.045
    arm_abduction: float = 0.42
    hip_width: float = 0.10
    thigh_length: float = 0.42
    thigh_radius: float = 0.075
    shin_length: float = 0.42
    shin_radius: float = 0.055
    leg_abduction: float = 0.05
    foot_length: float = 0.13
    foot_radius: float = 0.04
    right_scale: float = 1.0
    density: float = 32.0
    blend: float = 0.03
    shape_variation: float = 0.0
    rng_seed: int = 0

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("rng_seed", "shape_variation", "arm_abduction", "leg_abduction"):
                continue
            if not value > 0:
                raise BodySpecError(f"{f.name} must be positive, got {value}")
        if not 0 <= self.shape_variation < 0.5:
            raise BodySpecError("shape_variation must be in [0, 0.5)")
        if self.torso_depth_ratio > 1:
            raise BodySpecError("torso_depth_ratio must be <= 1")

    def varied(self):
        """Spec with ``shape_variation`` applied (deterministic in ``rng_seed``)."""
        if self.shape_variation == 0:
            return self
        rng = np.random.default_rng(self.rng_seed)
        scaled = {}
        for f in fields(self):
            if f.name.endswith(("_length", "_radius", "_width")):
                scaled[f.name] = getattr(self, f.name) * (1 + self.shape_variation * rng.uniform(-1, 1))
        return BodySpec(**{**asdict(self), **scaled, "shape_variation": 0.0})


@dataclass
class SkeletonBinding:
    """Rest skeleton plus per-vertex bone weights (rows sum to one)."""

    weights: np.ndarray
    pivots: dict
    directions: dict
    capsules: list = field(repr=False, default_factory=list)
    sites: dict = field(repr=False, default_factory=dict)

    @property
    def n_vertices(self):
        return len(self.weights)


def _rot(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def _skeleton(spec):
    """Bone pivots, rest directions, capsules ``(bone, a, b, radius)`` and landmark sites."""
    s = spec
    rs = s.right_scale
    piv, dirs, caps = {}, {}, []
    for side, sx, sc in (("l", 1.0, 1.0), ("r", -1.0, rs)):
        leg = np.array([sx * np.sin(s.leg_abduction), -np.cos(s.leg_abduction), 0.0])
        shin_r, thigh_r = s.shin_radius * sc, s.thigh_radius * sc
        # legs splay outward from the hips; the foot rests on the floor
        drop = -leg[1] * (s.thigh_length + s.shin_length) * sc
        hip = np.array([sx * s.hip_width, shin_r + drop, 0.0])
        knee = hip + leg * s.thigh_length * sc
        ankle = knee + leg * s.shin_length * sc
        piv[f"{side}_thigh"], piv[f"{side}_shin"] = hip, knee
        dirs[f"{side}_thigh"] = dirs[f"{side}_shin"] = leg
        caps.append((f"{side}_thigh", hip, knee, thigh_r))
        caps.append((f"{side}_shin", knee, ankle, shin_r))
        # feet point forward and break the front/back symmetry of the capsules
        heel = ankle + [0.0, s.foot_radius * sc - shin_r, 0.0]
        caps.append((f"{side}_shin", heel, heel + [0.0, 0.0, s.foot_length * sc], s.foot_radius * sc))
    pelvis_y = max(piv["l_thigh"][1], piv["r_thigh"][1])
    pelvis = np.array([0.0, pelvis_y, 0.0])
    neck = pelvis + [0.0, s.torso_length, 0.0]
    piv["torso"], piv["head"] = pelvis, neck
    dirs["torso"] = dirs["head"] = np.array([0.0, 1.0, 0.0])
    caps.append(("torso", pelvis + [0, 0.03, 0], neck - [0, s.torso_radius, 0], s.torso_radius))
    head_c0 = neck + [0.0, 0.04 + s.head_radius, 0.0]
    head_c1 = head_c0 + [0.0, s.head_length, 0.0]
    caps.append(("head", neck - [0, 0.06, 0], head_c0, s.neck_radius))
    caps.append(("head", head_c0, head_c1, s.head_radius))
    for side, sx, sc in (("l", 1.0, 1.0), ("r", -1.0, rs)):
        arm = np.array([sx * np.sin(s.arm_abduction), -np.cos(s.arm_abduction), 0.0])
        shoulder = np.array([sx * s.shoulder_width, neck[1] - 0.08, 0.0])
        elbow = shoulder + arm * s.upper_arm_length * sc
        tip = elbow + arm * s.forearm_length * sc
        piv[f"{side}_upper_arm"], piv[f"{side}_forearm"] = shoulder, elbow
        dirs[f"{side}_upper_arm"] = dirs[f"{side}_forearm"] = arm
        caps.append(("torso", np.array([0.0, shoulder[1], 0.0]), shoulder, s.upper_arm_radius * sc))
        caps.append((f"{side}_upper_arm", shoulder, elbow, s.upper_arm_radius * sc))
        caps.append((f"{side}_forearm", elbow, tip, s.forearm_radius * sc))

    tr, td = s.torso_radius, s.torso_radius * s.torso_depth_ratio
    head_mid = head_c0 + [0.0, 0.5 * s.head_length, 0.0]
    sites = {
        "head_top": head_c1 + [0, s.head_radius, 0],
        "face": head_mid + [0, 0, s.head_radius],
        "back_of_head": head_mid - [0, 0, s.head_radius],
        "neck_front": neck + [0, 0.03, s.neck_radius],
        "neck_back": neck + [0, 0.03, -s.neck_radius],
        "sternum": neck + [0, -0.18, td],
        "upper_back": neck + [0, -0.18, -td],
        "navel": pelvis + [0, 0.15, td],
        "lower_back": pelvis + [0, 0.15, -td],
    }
    for side, sx, sc in (("l", 1.0, 1.0), ("r", -1.0, rs)):
        arm = dirs[f"{side}_upper_arm"]
        # frontal-plane normal of the arm, pointing away from the body
        out = np.array([-arm[1], arm[0], 0.0])
        if out[0] * sx < 0:
            out = -out
        hip, knee = piv[f"{side}_thigh"], piv[f"{side}_shin"]
        leg = dirs[f"{side}_thigh"]
        ankle = knee + leg * s.shin_length * sc
        sites.update({
            f"{side}_ear": head_mid + [sx * s.head_radius, 0, 0],
            f"{side}_shoulder": piv[f"{side}_upper_arm"] + [0, s.upper_arm_radius * sc, 0],
            f"{side}_elbow": piv[f"{side}_forearm"] + out * s.upper_arm_radius * sc,
            f"{side}_wrist": piv[f"{side}_forearm"] + arm * (s.forearm_length * sc - 0.08) + out * s.forearm_radius * sc,
            f"{side}_hand": piv[f"{side}_forearm"] + arm * (s.forearm_length * sc + s.forearm_radius * sc),
            f"{side}_chest": neck + [sx * 0.08, -0.16, td],
            f"{side}_waist": pelvis + [sx * tr, 0.22, 0],
            f"{side}_hip": hip + [sx * s.thigh_radius * sc, -0.05, 0],
            f"{side}_buttock": hip + [0, -0.02, -s.thigh_radius * sc],
            f"{side}_knee": knee + [0, 0, s.thigh_radius * sc],
            f"{side}_ankle": ankle + [sx * s.shin_radius * sc, 0.02, 0],
            f"{side}_foot": ankle + [0, (s.foot_radius - s.shin_radius) * sc, (s.foot_length + s.foot_radius) * sc],
        })
    return piv, dirs, caps, sites


def _capsule_sdf(points, a, b, r, depth_ratio=1.0):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    diff = points - (a + t[:, None] * ab)
    if depth_ratio != 1.0:
        diff = diff * [1.0, 1.0, 1.0 / depth_ratio]
        return np.linalg.norm(diff, axis=1) * depth_ratio - r * depth_ratio
    return np.linalg.norm(diff, axis=1) - r


def _smooth_min(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def _bone_distances(points, caps, spec):
    out = np.full((len(points), len(BONES)), np.inf)
    for bone, a, b, r in caps:
        ratio = spec.torso_depth_ratio if (bone == "torso" and a[0] == 0 and b[0] == 0) else 1.0
        j = BONES.index(bone)
        out[:, j] = np.minimum(out[:, j], _capsule_sdf(points, a, b, r, ratio))
    return out


def generate_body(spec=None):
    """Build the rest-pose mesh and its skinning binding.

    Returns
    -------
    mesh : TriMesh
    binding : SkeletonBinding
    """
    spec = spec or BodySpec()
    spec.validate()
    shape = spec.varied()
    piv, dirs, caps, sites = _skeleton(shape)

    h = 1.0 / spec.density
    lo = np.min([np.minimum(a, b) - r for _, a, b, r in caps], axis=0) - 2 * h
    hi = np.max([np.maximum(a, b) + r for _, a, b, r in caps], axis=0) + 2 * h
    # grid symmetric about x = 0 so symmetric specs give mirror-symmetric meshes
    half_x = max(-lo[0], hi[0])
    nx = int(np.ceil(2 * half_x / h)) + 1
    ny = int(np.ceil((hi[1] - lo[1]) / h)) + 1
    nz = int(np.ceil((hi[2] - lo[2]) / h)) + 1
    xs = (np.arange(nx) - (nx - 1) / 2) * h
    ys = lo[1] + np.arange(ny) * h
    zs = lo[2] + np.arange(nz) * h
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    dist = _bone_distances(grid, caps, shape)
    field_ = dist[:, 0]
    for j in range(1, dist.shape[1]):
        field_ = _smooth_min(field_, dist[:, j], shape.blend)
    volume = field_.reshape(nx, ny, nz)
    verts, faces, _, _ = marching_cubes(volume, level=0.0, spacing=(h, h, h), allow_degenerate=False)
    verts = verts + [xs[0], ys[0], zs[0]]
    verts, faces = _largest_component(verts, faces)
    mesh = TriMesh(verts, faces)
    weights = skinning_weights(mesh.vertices, caps, shape)
    return mesh, SkeletonBinding(weights=weights, pivots=piv, directions=dirs, capsules=caps, sites=sites)


def _largest_component(verts, faces):
    n = len(verts)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]]])
    from scipy import sparse
    g = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, comp = csgraph.connected_components(g, directed=False)
    keep_comp = np.bincount(comp[faces[:, 0]]).argmax()
    faces = faces[comp[faces[:, 0]] == keep_comp]
    used = np.unique(faces)
    remap = np.full(n, -1)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def skinning_weights(vertices, caps, spec, band=0.05):
    """Per-vertex bone weights blended between the nearest bone and its neighbors.

    A vertex gets weight exactly 1 on its nearest bone unless an adjacent
    (parent or child) bone is within ``band`` meters of the same distance.
    """
    d = _bone_distances(vertices, caps, spec)
    nearest = np.argmin(d, axis=1)
    adjacent = np.eye(len(BONES), dtype=bool)
    for child, parent in PARENTS.items():
        if parent is not None:
            i, j = BONES.index(child), BONES.index(parent)
            adjacent[i, j] = adjacent[j, i] = True
    dmin = d[np.arange(len(d)), nearest]
    w = np.clip(1.0 - (d - dmin[:, None]) / band, 0.0, 1.0) ** 2
    w *= adjacent[nearest]
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class Pose:
    """Joint angles in radians; missing joints stay at rest."""

    angles: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.angles.items():
            if name not in JOINT_LIMITS:
                raise KeyError(f"unknown joint angle {name!r}")
            lo, hi = JOINT_LIMITS[name]
            if not lo - 1e-12 <= value <= hi + 1e-12:
                raise ValueError(f"{name}={value} outside joint limits [{lo}, {hi}]")

    def get(self, name):
        return float(self.angles.get(name, 0.0))


def random_pose(rng, scale=0.6, root=False):
    """Uniform pose within ``scale`` times the joint limits (limits include 0)."""
    angles = {}
    for name, (lo, hi) in JOINT_LIMITS.items():
        if name.startswith("root") and not root:
            continue
        angles[name] = float(rng.uniform(lo * scale, hi * scale))
    return Pose(angles)


def bone_transforms(binding, pose):
    """World rotation and posed pivot for every bone."""
    p = pose.get
    local = {
        "torso": _rot([0, 1, 0], p("root_yaw")) @ _rot([1, 0, 0], p("root_pitch")) @ _rot([0, 0, 1], p("root_roll")),
        "head": _rot([0, 1, 0], p("neck_turn")) @ _rot([1, 0, 0], p("neck_flex")),
    }
    for side, sx in (("l", 1.0), ("r", -1.0)):
        local[f"{side}_upper_arm"] = _rot([0, 0, 1], sx * p(f"{side}_shoulder_abd")) @ _rot([1, 0, 0], -p(f"{side}_shoulder_flex"))
        local[f"{side}_thigh"] = _rot([0, 0, 1], sx * p(f"{side}_hip_abd")) @ _rot([1, 0, 0], -p(f"{side}_hip_flex"))
        arm = binding.directions[f"{side}_forearm"]
        leg = binding.directions[f"{side}_shin"]
        local[f"{side}_forearm"] = _rot(np.cross(arm, [0, 0, 1]), p(f"{side}_elbow"))
        local[f"{side}_shin"] = _rot(np.cross(leg, [0, 0, 1]), -p(f"{side}_knee"))
    rot, pos = {}, {}
    for bone in BONES:
        parent = PARENTS[bone]
        if parent is None:
            rot[bone] = local[bone]
            pos[bone] = binding.pivots[bone]
        else:
            rot[bone] = rot[parent] @ local[bone]
            pos[bone] = pos[parent] + rot[parent] @ (binding.pivots[bone] - binding.pivots[parent])
    return rot, pos


def pose_body(mesh, binding, pose):
    """Linear-blend skinning of the rest mesh; faces are shared with ``mesh``."""
    if binding.n_vertices != mesh.n_vertices:
        raise ValueError(f"binding has {binding.n_vertices} vertices, mesh has {mesh.n_vertices}")
    rot, pos = bone_transforms(binding, pose)
    v = mesh.vertices
    out = np.zeros_like(v)
    for j, bone in enumerate(BONES):
        w = binding.weights[:, j]
        if not w.any():
            continue
        moved = (v - binding.pivots[bone]) @ rot[bone].T + pos[bone]
        out += w[:, None] * moved
    return mesh.with_vertices(out)


def keypoints(mesh, binding):
    """33 landmark vertex indices, in ``KEYPOINT_NAMES`` order."""
    idx = []
    for name in KEYPOINT_NAMES:
        d = np.linalg.norm(mesh.vertices - binding.sites[name], axis=1)
        idx.append(int(np.argmin(d)))
    if len(set(idx)) != len(idx):
        raise RuntimeError("landmark sites collapsed onto the same vertex; mesh too coarse")
    return idx


def save_keypoints(path, indices):
    lines = [f"{name} {i}" for name, i in zip(KEYPOINT_NAMES, indices)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_keypoints(path):
    with open(path) as fh:
        rows = [line.split() for line in fh if line.strip() and not line.startswith("#")]
    return [int(i) for _, i in rows]


def save_pose(path, pose):
    lines = [f"{name} = {pose.get(name)!r}" for name in JOINT_LIMITS]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_pose(path):
    angles = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line and not line.lstrip().startswith("#"):
                key, value = line.split("=", 1)
                angles[key.strip()] = float(value)
    return Pose(angles)

"""Procedural ground-truth factory: rigged biped characters, LBS, pose PCA.

Characters are built as the zero level set of a union-of-capsules signed
distance field (one capsule per bone), extracted with marching cubes and
normalized to height 1. Skin weights fall off with distance to each
bone's capsule, so the argmax weight doubles as a part label. Poses are
per-bone axis-angle rotations with the root held at identity; a PCA over
sampled joint angles provides the 32-dimensional pose latent that stands
in for a pretrained pose prior.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from skimage import measure

from .mesh import Mesh, normalize_height, winding_numbers
from .seeds import rng_for

BONE_NAMES = [
    "pelvis", "torso", "neck", "head",
    "upperarm_l", "forearm_l", "hand_l",
    "upperarm_r", "forearm_r", "hand_r",
    "thigh_l", "shin_l", "foot_l",
    "thigh_r", "shin_r", "foot_r",
]
BONE_COUNT = len(BONE_NAMES)

_PARENT_NAMES = {
    "pelvis": None,
    "torso": "pelvis",
    "neck": "torso",
    "head": "neck",
    "upperarm_l": "torso", "forearm_l": "upperarm_l", "hand_l": "forearm_l",
    "upperarm_r": "torso", "forearm_r": "upperarm_r", "hand_r": "forearm_r",
    "thigh_l": "pelvis", "shin_l": "thigh_l", "foot_l": "shin_l",
    "thigh_r": "pelvis", "shin_r": "thigh_r", "foot_r": "shin_r",
}

# per-bone axis-angle sampling half-ranges (radians), |angle| <= 1.2 overall
_POSE_RANGES = {
    "pelvis": (0.0, 0.0, 0.0),          # root orientation removed
    "torso": (0.25, 0.3, 0.25),
    "neck": (0.2, 0.25, 0.2),
    "head": (0.25, 0.3, 0.25),
    "upperarm_l": (0.8, 0.8, 0.8), "upperarm_r": (0.8, 0.8, 0.8),
    "forearm_l": (0.15, 0.4, 1.1), "forearm_r": (0.15, 0.4, 1.1),
    "hand_l": (0.3, 0.3, 0.3), "hand_r": (0.3, 0.3, 0.3),
    "thigh_l": (0.8, 0.4, 0.5), "thigh_r": (0.8, 0.4, 0.5),
    "shin_l": (1.1, 0.1, 0.1), "shin_r": (1.1, 0.1, 0.1),
    "foot_l": (0.4, 0.2, 0.2), "foot_r": (0.4, 0.2, 0.2),
}


@dataclass
class Rig:
    """Bone tree with rest-pose head/tail joints in mesh coordinates."""

    parent: list  # per-bone parent index, None for the root
    rest_head: np.ndarray  # (B, 3)
    rest_tail: np.ndarray  # (B, 3)

    @property
    def bone_count(self) -> int:
        return len(self.parent)

    def __post_init__(self):
        self.rest_head = np.asarray(self.rest_head, dtype=np.float64)
        self.rest_tail = np.asarray(self.rest_tail, dtype=np.float64)
        for b, p in enumerate(self.parent):
            if p is not None and not (0 <= p < b):
                raise ValueError("parents must precede children (tree rooted at 0)")
        lengths = np.linalg.norm(self.rest_tail - self.rest_head, axis=1)
        if np.any(lengths <= 0):
            raise ValueError("rest bone lengths must be positive")


@dataclass
class SkinnedCharacter:
    """Rest-pose mesh plus rig, skin weights, and per-vertex part labels."""

    mesh: Mesh
    rig: Rig
    skin_weights: np.ndarray  # (n_verts, B), rows on the simplex
    part_labels: np.ndarray  # (n_verts,), argmax of the weight row
    labels_withheld: bool = False
    capsule_radii: np.ndarray | None = None


@dataclass
class PoseSample:
    """Per-bone axis-angle rotations (radians); root stays at identity."""

    rotations: np.ndarray  # (B, 3)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)

    def flat(self) -> np.ndarray:
        return self.rotations.reshape(-1)


@dataclass
class PoseSpace:
    """PCA pose latent: mean angles, orthonormal basis, per-axis scales."""

    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, dim), orthonormal columns
    component_scales: np.ndarray  # (dim,)
    effective_dim: int = 0


@dataclass
class StyleParams:
    """Per-part non-uniform scaling plus optional accessory blobs.

    part_scales maps bone index -> per-axis scale triple applied about
    that part's vertex centroid. Accessories are ellipsoids rigidly
    attached to a bone, recorded for evaluation but never used in
    training.
    """

    part_scales: dict = field(default_factory=dict)
    accessories: list = field(default_factory=list)  # (bone, center_offset, radii)


def default_proportions() -> dict:
    """Baseline T-pose proportions, units of roughly one body height."""
    return {
        "hip_y": 0.56, "shoulder_y": 0.84, "neck_y": 0.90, "head_y": 0.94,
        "head_len": 0.09, "hip_half": 0.10, "shoulder_half": 0.16,
        "upperarm_len": 0.22, "forearm_len": 0.18, "hand_len": 0.09,
        "thigh_len": 0.26, "shin_len": 0.24, "foot_len": 0.12,
        "torso_r": 0.13, "head_r": 0.085, "neck_r": 0.05,
        "upperarm_r": 0.05, "forearm_r": 0.042, "hand_r": 0.045,
        "thigh_r": 0.068, "shin_r": 0.052, "foot_r": 0.042,
    }


def sample_proportions(seed: int, spread: float = 0.12) -> dict:
    """Jitter the default proportions to get a distinct body type."""
    rng = rng_for(seed, "proportions")
    props = {}
    for key, value in default_proportions().items():
        props[key] = value * (1.0 + rng.uniform(-spread, spread))
    return props


def _build_rig(props: dict) -> tuple[Rig, np.ndarray]:
    hip_y = props["hip_y"]
    sh_y = props["shoulder_y"]
    joints = {}
    joints["pelvis"] = (np.array([0.0, hip_y, 0.0]), np.array([0.0, hip_y + 0.10, 0.0]))
    joints["torso"] = (np.array([0.0, hip_y + 0.10, 0.0]), np.array([0.0, props["neck_y"], 0.0]))
    joints["neck"] = (np.array([0.0, props["neck_y"], 0.0]), np.array([0.0, props["head_y"], 0.0]))
    joints["head"] = (
        np.array([0.0, props["head_y"], 0.0]),
        np.array([0.0, props["head_y"] + props["head_len"], 0.0]),
    )
    for side, sgn in (("l", 1.0), ("r", -1.0)):
        sx = sgn * props["shoulder_half"]
        elbow = sx + sgn * props["upperarm_len"]
        wrist = elbow + sgn * props["forearm_len"]
        tip = wrist + sgn * props["hand_len"]
        joints[f"upperarm_{side}"] = (np.array([sx, sh_y, 0.0]), np.array([elbow, sh_y, 0.0]))
        joints[f"forearm_{side}"] = (np.array([elbow, sh_y, 0.0]), np.array([wrist, sh_y, 0.0]))
        joints[f"hand_{side}"] = (np.array([wrist, sh_y, 0.0]), np.array([tip, sh_y, 0.0]))
        hx = sgn * props["hip_half"]
        knee_y = hip_y - props["thigh_len"]
        ankle_y = knee_y - props["shin_len"]
        joints[f"thigh_{side}"] = (np.array([hx, hip_y, 0.0]), np.array([hx, knee_y, 0.0]))
        joints[f"shin_{side}"] = (np.array([hx, knee_y, 0.0]), np.array([hx, ankle_y, 0.0]))
        joints[f"foot_{side}"] = (
            np.array([hx, ankle_y, 0.0]),
            np.array([hx, ankle_y - 0.02, props["foot_len"]]),
        )
    heads = np.stack([joints[name][0] for name in BONE_NAMES])
    tails = np.stack([joints[name][1] for name in BONE_NAMES])
    parents = [None if _PARENT_NAMES[n] is None else BONE_NAMES.index(_PARENT_NAMES[n]) for n in BONE_NAMES]
    radii = np.array(
        [
            props["torso_r"] * 1.05, props["torso_r"], props["neck_r"], props["head_r"],
            props["upperarm_r"], props["forearm_r"], props["hand_r"],
            props["upperarm_r"], props["forearm_r"], props["hand_r"],
            props["thigh_r"], props["shin_r"], props["foot_r"],
            props["thigh_r"], props["shin_r"], props["foot_r"],
        ]
    )
    return Rig(parent=parents, rest_head=heads, rest_tail=tails), radii


def _segment_distances(points: np.ndarray, heads: np.ndarray, tails: np.ndarray) -> np.ndarray:
    """Distance from each point to each bone segment, shape (n, B)."""
    d = tails - heads  # (B, 3)
    seg_len2 = np.einsum("bi,bi->b", d, d)
    diff = points[:, None, :] - heads[None, :, :]  # (n, B, 3)
    t = np.einsum("nbi,bi->nb", diff, d) / seg_len2[None, :]
    t = np.clip(t, 0.0, 1.0)
    closest = heads[None, :, :] + t[:, :, None] * d[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def capsule_union_sdf(points: np.ndarray, rig: Rig, radii: np.ndarray) -> np.ndarray:
    """Signed distance to the union of per-bone capsules (negative inside)."""
    dist = _segment_distances(points, rig.rest_head, rig.rest_tail)
    return (dist - radii[None, :]).min(axis=1)


def skin_weights_for(points: np.ndarray, rig: Rig, radii: np.ndarray, sharpness: float = 4.0) -> np.ndarray:
    """Smooth distance-based weights over bones, rows normalized to sum 1."""
    dist = _segment_distances(points, rig.rest_head, rig.rest_tail)
    gap = np.maximum(dist - radii[None, :], 0.0)
    w = 1.0 / (gap + 0.015) ** sharpness
    return w / w.sum(axis=1, keepdims=True)


def build_character(params: dict | None = None, seed: int = 0, grid: int = 48) -> SkinnedCharacter:
    """Construct a watertight rigged biped from proportion parameters.

    params defaults to seeded jittered proportions; grid sets the
    marching-cubes resolution along the vertical axis.
    """
    props = params if params is not None else sample_proportions(seed)
    if any(v <= 0 for v in props.values()):
        raise ValueError("proportions must be positive")
    rig, radii = _build_rig(props)
    lo = np.minimum(rig.rest_head, rig.rest_tail).min(axis=0) - radii.max() - 0.05
    hi = np.maximum(rig.rest_head, rig.rest_tail).max(axis=0) + radii.max() + 0.05
    h = (hi[1] - lo[1]) / grid
    dims = np.maximum(np.ceil((hi - lo) / h).astype(int) + 1, 2)
    axes = [lo[k] + np.arange(dims[k]) * h for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    sdf = capsule_union_sdf(pts, rig, radii).reshape(dims)
    verts, faces, _, _ = measure.marching_cubes(sdf, level=0.0, spacing=(h, h, h))
    verts = verts + lo[None, :]
    mesh = Mesh(verts, faces.astype(np.int64))
    # orient outward: an interior probe must have winding number +1
    probe = 0.5 * (rig.rest_head[1] + rig.rest_tail[1])
    if winding_numbers(mesh, probe[None, :])[0] < 0:
        mesh = Mesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    mesh, scale = normalize_height(mesh)
    centroid_before = verts.mean(axis=0)
    heads = centroid_before + (rig.rest_head - centroid_before) * scale
    tails = centroid_before + (rig.rest_tail - centroid_before) * scale
    rig = Rig(parent=rig.parent, rest_head=heads, rest_tail=tails)
    radii = radii * scale
    weights = skin_weights_for(mesh.vertices, rig, radii)
    labels = weights.argmax(axis=1)
    return SkinnedCharacter(
        mesh=mesh, rig=rig, skin_weights=weights, part_labels=labels,
        capsule_radii=radii,
    )


def _icosphere_points(radius: np.ndarray, center: np.ndarray, subdivisions: int = 2):
    # local icosphere for accessory blobs
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache = {}
        out = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                p = np.array(verts[i]) + np.array(verts[j])
                p /= np.linalg.norm(p)
                verts.append(tuple(p))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = out
    pts = np.array(verts) * np.asarray(radius)[None, :] + center[None, :]
    return pts, np.array(faces, dtype=np.int64)


def stylize(character: SkinnedCharacter, style: StyleParams, seed: int = 0) -> SkinnedCharacter:
    """Exaggerate a character: per-part scaling and rigid accessories.

    Scaling is applied per vertex by its part label about the part's
    vertex centroid; the rig is transformed consistently and skin
    weights are re-derived from the new geometry. The returned character
    has labels_withheld set: its labels exist for evaluation only.
    """
    verts = character.mesh.vertices.copy()
    labels = character.part_labels
    heads = character.rig.rest_head.copy()
    tails = character.rig.rest_tail.copy()
    radii = (
        character.capsule_radii.copy()
        if character.capsule_radii is not None
        else np.full(character.rig.bone_count, 0.05)
    )
    for bone, scales in style.part_scales.items():
        mask = labels == bone
        if not mask.any():
            continue
        center = verts[mask].mean(axis=0)
        s = np.asarray(scales, dtype=np.float64)
        verts[mask] = center + (verts[mask] - center) * s[None, :]
        heads[bone] = center + (heads[bone] - center) * s
        tails[bone] = center + (tails[bone] - center) * s
        radii[bone] = radii[bone] * float(np.cbrt(np.prod(s)))
    faces = character.mesh.faces.copy()
    new_rig = Rig(parent=list(character.rig.parent), rest_head=heads, rest_tail=tails)
    acc_faces = []
    acc_verts = []
    acc_bones = []
    for bone, offset, acc_radii in style.accessories:
        anchor = 0.5 * (heads[bone] + tails[bone]) + np.asarray(offset, dtype=np.float64)
        pts, tris = _icosphere_points(np.asarray(acc_radii, dtype=np.float64), anchor)
        acc_faces.append(tris + len(verts) + sum(len(a) for a in acc_verts))
        acc_verts.append(pts)
        acc_bones.extend([bone] * len(pts))
    if acc_verts:
        verts = np.vstack([verts] + acc_verts)
        faces = np.vstack([faces] + acc_faces)
    weights = skin_weights_for(verts[: len(character.mesh.vertices)], new_rig, radii)
    if acc_bones:
        rigid = np.zeros((len(acc_bones), new_rig.bone_count))
        rigid[np.arange(len(acc_bones)), acc_bones] = 1.0
        weights = np.vstack([weights, rigid])
    new_labels = weights.argmax(axis=1)
    return SkinnedCharacter(
        mesh=Mesh(verts, faces),
        rig=new_rig,
        skin_weights=weights,
        part_labels=new_labels,
        labels_withheld=True,
        capsule_radii=radii,
    )


def _axis_angle_matrices(rotations: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a batch of axis-angle vectors, shape (B, 3, 3)."""
    theta = np.linalg.norm(rotations, axis=1)
    out = np.tile(np.eye(3), (len(rotations), 1, 1))
    nz = theta > 1e-12
    if not nz.any():
        return out
    axis = rotations[nz] / theta[nz, None]
    k = np.zeros((nz.sum(), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -axis[:, 2], axis[:, 1]
    k[:, 1, 0], k[:, 1, 2] = axis[:, 2], -axis[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -axis[:, 1], axis[:, 0]
    s = np.sin(theta[nz])[:, None, None]
    c = (1.0 - np.cos(theta[nz]))[:, None, None]
    out[nz] = np.eye(3)[None] + s * k + c * (k @ k)
    return out


def bone_transforms(rig: Rig, pose: PoseSample) -> tuple[np.ndarray, np.ndarray]:
    """Forward kinematics: world rotation R_b and translation t_b per bone.

    Each bone rotates about its rest head inside its parent's frame, so
    the identity pose yields identity transforms exactly.
    """
    local = _axis_angle_matrices(pose.rotations)
    B = rig.bone_count
    rot = np.zeros((B, 3, 3))
    trans = np.zeros((B, 3))
    for b in range(B):
        j = rig.rest_head[b]
        # local transform: x -> j + R (x - j)
        lr = local[b]
        lt = j - lr @ j
        p = rig.parent[b]
        if p is None:
            rot[b] = lr
            trans[b] = lt
        else:
            rot[b] = rot[p] @ lr
            trans[b] = rot[p] @ lt + trans[p]
    return rot, trans


def lbs_deform(character: SkinnedCharacter, pose: PoseSample) -> Mesh:
    """Linear blend skinning of the rest mesh by the posed bone transforms.

    Blends per-bone displacements rather than absolute positions, so the
    identity pose reproduces the rest mesh bitwise even though weight
    rows only sum to 1 up to rounding.
    """
    if not np.all(np.isfinite(pose.rotations)):
        raise ValueError("pose rotations must be finite")
    rot, trans = bone_transforms(character.rig, pose)
    v = character.mesh.vertices
    # (B, n, 3): each bone's rigid displacement of every vertex
    per_bone = np.einsum("bij,nj->bni", rot, v) + trans[:, None, :] - v[None, :, :]
    out = v + np.einsum("nb,bni->ni", character.skin_weights, per_bone)
    return Mesh(out, character.mesh.faces.copy())


def identity_pose(bone_count: int = BONE_COUNT) -> PoseSample:
    return PoseSample(np.zeros((bone_count, 3)))


def sample_pose(seed: int, bone_count: int = BONE_COUNT) -> PoseSample:
    """Bounded random joint angles with joint-dependent axis ranges."""
    rng = rng_for(seed, "pose")
    rots = np.zeros((bone_count, 3))
    for b, name in enumerate(BONE_NAMES[:bone_count]):
        r = _POSE_RANGES[name]
        rots[b] = rng.uniform(-1.0, 1.0, size=3) * np.asarray(r)
    return PoseSample(rots)


def fit_pose_space(poses: list[PoseSample], dim: int = 32) -> PoseSpace:
    """PCA of flattened angle vectors; encode = project, decode = reconstruct."""
    if len(poses) < dim + 1:
        raise ValueError(f"need at least {dim + 1} poses for a {dim}-dim space")
    data = np.stack([p.flat() for p in poses])
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    n_avail = min(dim, vt.shape[0])
    basis = np.zeros((data.shape[1], dim))
    basis[:, :n_avail] = vt[:n_avail].T
    scales = np.zeros(dim)
    scales[:n_avail] = svals[:n_avail] / np.sqrt(max(len(poses) - 1, 1))
    effective = int((scales > 1e-12).sum())
    return PoseSpace(mean=mean, basis=basis, component_scales=scales, effective_dim=effective)


def encode_pose(space: PoseSpace, pose: PoseSample) -> np.ndarray:
    """Project onto the basis and whiten by the training-set scales."""
    proj = (pose.flat() - space.mean) @ space.basis
    safe = np.where(space.component_scales > 1e-12, space.component_scales, 1.0)
    code = proj / safe
    code[space.component_scales <= 1e-12] = 0.0
    return code


def decode_pose(space: PoseSpace, code: np.ndarray) -> PoseSample:
    coeff = np.asarray(code, dtype=np.float64) * space.component_scales
    flat = space.mean + space.basis @ coeff
    return PoseSample(flat.reshape(-1, 3))


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class GeneratedDataset:
    """In-memory handles to everything gen_dataset wrote to disk."""

    paths: "DatasetPaths"
    characters: dict  # char_id -> SkinnedCharacter (base, labeled)
    train_styled: dict  # styl_id -> (base_id, SkinnedCharacter)
    test_styled: dict  # styl_id -> (base_id, SkinnedCharacter)
    pose_space: PoseSpace
    train_poses: list
    test_poses: list


@dataclass
class DatasetPaths:
    root: "object"  # pathlib.Path

    def __post_init__(self):
        from pathlib import Path

        self.root = Path(self.root)

    @property
    def characters(self):
        return self.root / "characters"

    @property
    def targets(self):
        return self.root / "targets"

    @property
    def train_manifest(self):
        return self.root / "train_manifest.jsonl"

    @property
    def test_manifest(self):
        return self.root / "test_manifest.jsonl"

    @property
    def pose_space(self):
        return self.root / "pose_space.unrg"


def save_character(character: SkinnedCharacter, paths: DatasetPaths, char_id: str) -> dict:
    """Write mesh/weights/labels files; returns the manifest path fields."""
    from .mesh import save_obj
    from .nn import save_tensors

    paths.characters.mkdir(parents=True, exist_ok=True)
    obj_path = paths.characters / f"{char_id}.obj"
    weights_path = paths.characters / f"{char_id}.weights.unrg"
    labels_path = paths.characters / f"{char_id}.labels.unrg"
    save_obj(character.mesh, obj_path)
    parent = np.array(
        [-1.0 if p is None else float(p) for p in character.rig.parent]
    )
    save_tensors(
        {
            "skin_weights": character.skin_weights,
            "rig_parent": parent,
            "rig_rest_head": character.rig.rest_head,
            "rig_rest_tail": character.rig.rest_tail,
        },
        weights_path,
    )
    save_tensors(
        {
            "part_labels": character.part_labels.astype(np.float64),
            "labels_withheld": np.float64(1.0 if character.labels_withheld else 0.0),
        },
        labels_path,
    )
    return {
        "obj_path": str(obj_path),
        "weights_path": str(weights_path),
        "labels_path": str(labels_path),
    }


def gen_dataset(
    n_characters: int,
    n_poses: int,
    seed: int,
    out_dir,
    grid: int = 48,
    pose_dim: int = 32,
    stylized_train: int = 2,
    stylized_test: int = 2,
    test_poses: int = 20,
) -> GeneratedDataset:
    """Generate the full synthetic corpus and write its manifests.

    Pose 0 is always the identity. Training rows pair each base
    character with each training pose; test rows pair held-out stylized
    variants with unseen poses. Every pose's ground-truth target mesh
    comes from LBS with the character's own rig.
    """
    if n_characters < 1 or n_poses < 1:
        raise ValueError("need at least one character and one pose")
    from .nn import save_tensors

    paths = DatasetPaths(out_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.targets.mkdir(parents=True, exist_ok=True)

    characters = {}
    for i in range(n_characters):
        char_id = f"char_{i:03d}"
        characters[char_id] = build_character(seed=_spawn(seed, "char", i), grid=grid)

    # stylized variants: moderate exaggerations of the base characters
    styles = _style_bank()
    train_styled = {}
    for k in range(stylized_train):
        base_id = f"char_{k % n_characters:03d}"
        sid = f"styl_train_{k:02d}"
        style = styles[k % len(styles)]
        train_styled[sid] = (base_id, stylize(characters[base_id], style, seed=_spawn(seed, "styl_train", k)))
    test_styled = {}
    for k in range(stylized_test):
        base_id = f"char_{k % n_characters:03d}"
        sid = f"styl_test_{k:02d}"
        style = styles[(k + stylized_train) % len(styles)]
        test_styled[sid] = (base_id, stylize(characters[base_id], style, seed=_spawn(seed, "styl_test", k)))

    poses = [identity_pose()]
    for j in range(1, n_poses):
        poses.append(sample_pose(_spawn(seed, "pose", j)))
    space = fit_pose_space(poses, dim=pose_dim) if len(poses) >= pose_dim + 1 else None
    if space is None:
        # tiny datasets: pad with extra sampled poses purely to fit the space
        extra = [sample_pose(_spawn(seed, "pose_pad", j)) for j in range(pose_dim + 1)]
        space = fit_pose_space(poses + extra, dim=pose_dim)
    save_tensors(
        {
            "mean": space.mean,
            "basis": space.basis,
            "component_scales": space.component_scales,
            "effective_dim": np.float64(space.effective_dim),
        },
        paths.pose_space,
    )

    # project sampled poses onto the latent manifold so a pose code fully
    # determines its ground-truth deformation (pose 0 stays exact identity)
    poses = [poses[0]] + [decode_pose(space, encode_pose(space, p)) for p in poses[1:]]
    test_pose_list = [
        decode_pose(space, encode_pose(space, sample_pose(_spawn(seed, "test_pose", j))))
        for j in range(test_poses)
    ]

    char_fields = {}
    for char_id, character in characters.items():
        char_fields[char_id] = save_character(character, paths, char_id)
    for sid, (base_id, character) in {**train_styled, **test_styled}.items():
        char_fields[sid] = save_character(character, paths, sid)

    with open(paths.train_manifest, "w") as fh:
        for char_id, character in characters.items():
            for j, pose in enumerate(poses):
                row = _manifest_row(character, char_id, char_fields[char_id], j, pose, space, paths)
                fh.write(json.dumps(row) + "\n")
        # stylized training characters appear in rest pose only (no pairs)
        for sid, (base_id, character) in train_styled.items():
            row = _manifest_row(character, sid, char_fields[sid], 0, identity_pose(), space, paths)
            fh.write(json.dumps(row) + "\n")

    with open(paths.test_manifest, "w") as fh:
        for sid, (base_id, character) in test_styled.items():
            for j, pose in enumerate(test_pose_list):
                row = _manifest_row(
                    character, sid, char_fields[sid], j, pose, space, paths, source_id=base_id
                )
                fh.write(json.dumps(row) + "\n")

    return GeneratedDataset(
        paths=paths,
        characters=characters,
        train_styled=train_styled,
        test_styled=test_styled,
        pose_space=space,
        train_poses=poses,
        test_poses=test_pose_list,
    )


def _style_bank() -> list[StyleParams]:
    head = BONE_NAMES.index("head")
    t_l, t_r = BONE_NAMES.index("thigh_l"), BONE_NAMES.index("thigh_r")
    ua_l, ua_r = BONE_NAMES.index("upperarm_l"), BONE_NAMES.index("upperarm_r")
    torso = BONE_NAMES.index("torso")
    return [
        StyleParams(part_scales={head: (1.7, 1.7, 1.7)}),
        StyleParams(part_scales={torso: (1.35, 1.0, 1.35), t_l: (1.25, 1.0, 1.25), t_r: (1.25, 1.0, 1.25)}),
        StyleParams(
            part_scales={head: (1.5, 1.5, 1.5)},
            accessories=[(head, (0.0, 0.11, 0.0), (0.07, 0.05, 0.07))],
        ),
        StyleParams(part_scales={ua_l: (1.0, 1.4, 1.4), ua_r: (1.0, 1.4, 1.4), head: (1.3, 1.3, 1.3)}),
        StyleParams(part_scales={head: (2.0, 2.0, 2.0), torso: (0.85, 1.0, 0.85)}),
        StyleParams(
            part_scales={t_l: (1.4, 1.0, 1.4), t_r: (1.4, 1.0, 1.4)},
            accessories=[(torso, (0.0, 0.0, -0.16), (0.10, 0.13, 0.05))],
        ),
    ]


def _spawn(seed: int, label: str, index: int) -> int:
    # stable child seed; rng_for folds these labels the same way everywhere
    return int(rng_for(seed, label, index).integers(0, 2**31 - 1))


def _manifest_row(character, char_id, fields, pose_id, pose, space, paths, source_id=None):
    from .mesh import save_obj

    target = lbs_deform(character, pose)
    target_path = paths.targets / f"{char_id}_pose_{pose_id:04d}.obj"
    save_obj(target, target_path)
    code = encode_pose(space, pose)
    row = {
        "character_id": char_id,
        "obj_path": fields["obj_path"],
        "weights_path": fields["weights_path"],
        "labels_path": fields["labels_path"],
        "pose_id": pose_id,
        "pose_code": [float(c) for c in code],
        "target_obj_path": str(target_path),
    }
    if source_id is not None:
        row["source_id"] = source_id
    return row


def read_manifest(path) -> list[dict]:
    """Parse a JSON-lines manifest into row dicts."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_character_files(row: dict) -> SkinnedCharacter:
    """Rebuild a SkinnedCharacter from one manifest row's asset files."""
    from .mesh import load_obj
    from .nn import load_tensors

    mesh = load_obj(row["obj_path"])
    tensors = load_tensors(row["weights_path"])
    weights = tensors["skin_weights"]
    parent = [None if p < 0 else int(p) for p in tensors["rig_parent"]]
    rig = Rig(parent=parent, rest_head=tensors["rig_rest_head"], rest_tail=tensors["rig_rest_tail"])
    label_tensors = load_tensors(row["labels_path"])
    labels = label_tensors["part_labels"].astype(np.int64)
    withheld = bool(label_tensors.get("labels_withheld", 0.0))
    return SkinnedCharacter(
        mesh=mesh, rig=rig, skin_weights=weights, part_labels=labels,
        labels_withheld=withheld,
    )


def load_pose_space(path) -> PoseSpace:
    from .nn import load_tensors

    t = load_tensors(path)
    return PoseSpace(
        mean=t["mean"],
        basis=t["basis"],
        component_scales=t["component_scales"],
        effective_dim=int(t["effective_dim"]),
    )

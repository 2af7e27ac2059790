"""Procedural body template, skeleton graph, and vertex->joint regressors.

The template is a deterministic stand-in for a licensed body model: vertices
are scattered along bone segments of a fixed T-pose skeleton, centered at the
origin with unit nominal scale (max |coordinate| = 1). The first
``coarse_count`` full vertices double as the coarse mesh, which lets the mesh
upsampler start from an exact barycentric interpolation.

User-supplied assets load from plain text: ``v x y z`` per vertex, ``j x y z``
per joint, ``e i j`` per edge; regressor matrices load as one row of floats
per joint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# T-pose joint layout (unit-ish torso scale). Index 0 is the pelvis root.
JOINT_NAMES = (
    "pelvis", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

_TPOSE = np.array([
    [0.00, 0.00, 0.00],   # pelvis
    [0.00, 0.90, 0.00],   # head
    [-0.25, 0.65, 0.00], [-0.55, 0.60, 0.00], [-0.85, 0.55, 0.00],   # left arm
    [0.25, 0.65, 0.00], [0.55, 0.60, 0.00], [0.85, 0.55, 0.00],      # right arm
    [-0.15, -0.05, 0.00], [-0.18, -0.50, 0.00], [-0.20, -0.95, 0.00],  # left leg
    [0.15, -0.05, 0.00], [0.18, -0.50, 0.00], [0.20, -0.95, 0.00],     # right leg
])

# Bones as (proximal joint, distal joint); the proximal joint is the pivot
# used for per-limb articulation.
BONES = (
    (0, 1),
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (0, 8), (8, 9), (9, 10),
    (0, 11), (11, 12), (12, 13),
)

# COCO-style detector keypoint layout (17 keypoints).
KEYPOINT_NAMES = (
    "nose", "l_eye", "r_eye", "l_ear", "r_ear",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hip", "r_hip",
    "l_knee", "r_knee", "l_ankle", "r_ankle",
)

COCO_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4), (0, 5), (0, 6),
    (5, 7), (7, 9), (6, 8), (8, 10), (5, 6),
    (5, 11), (6, 12), (11, 12), (11, 13), (13, 15), (12, 14), (14, 16),
)

# Each detector keypoint anchored near a skeleton joint, with a small offset
# (face keypoints cluster around the head).
_KEYPOINT_ANCHORS = (
    (1, (0.00, 0.08, 0.05)),   # nose
    (1, (-0.04, 0.12, 0.04)),  # l_eye
    (1, (0.04, 0.12, 0.04)),   # r_eye
    (1, (-0.08, 0.10, 0.00)),  # l_ear
    (1, (0.08, 0.10, 0.00)),   # r_ear
    (2, (0.0, 0.0, 0.0)), (5, (0.0, 0.0, 0.0)),
    (3, (0.0, 0.0, 0.0)), (6, (0.0, 0.0, 0.0)),
    (4, (0.0, 0.0, 0.0)), (7, (0.0, 0.0, 0.0)),
    (8, (0.0, 0.0, 0.0)), (11, (0.0, 0.0, 0.0)),
    (9, (0.0, 0.0, 0.0)), (12, (0.0, 0.0, 0.0)),
    (10, (0.0, 0.0, 0.0)), (13, (0.0, 0.0, 0.0)),
)


@dataclass
class TemplateMesh:
    """Coarse/full template geometry plus bookkeeping for synthesis."""

    coarse: np.ndarray          # (M_coarse, 3)
    joints: np.ndarray          # (K_joint, 3)
    full: np.ndarray            # (M_full, 3); rows [:M_coarse] == coarse
    edges: list[tuple[int, int]]
    vertex_bone: np.ndarray     # (M_full,) bone index per full vertex

    @property
    def coarse_count(self) -> int:
        return len(self.coarse)

    @property
    def full_count(self) -> int:
        return len(self.full)

    @property
    def joint_count(self) -> int:
        return len(self.joints)


def make_template(coarse_count: int = 32, full_count: int = 128,
                  joint_count: int = 14, seed: int = 1234) -> TemplateMesh:
    """Deterministic body-like template scattered around the T-pose bones."""
    if joint_count != len(_TPOSE):
        raise ValueError(f"procedural template supports exactly {len(_TPOSE)} joints")
    if not 1 <= coarse_count <= full_count:
        raise ValueError("need 1 <= coarse_count <= full_count")
    rng = np.random.default_rng(seed)
    lengths = np.array([np.linalg.norm(_TPOSE[b] - _TPOSE[a]) for a, b in BONES])
    quota = np.maximum(1, np.round(lengths / lengths.sum() * full_count).astype(int))
    while quota.sum() > full_count:
        quota[int(np.argmax(quota))] -= 1
    while quota.sum() < full_count:
        quota[int(np.argmin(quota))] += 1

    verts, bone_of = [], []
    for bi, (a, b) in enumerate(BONES):
        n = int(quota[bi])
        t = (np.arange(n) + 0.5) / n
        core = _TPOSE[a][None, :] * (1 - t[:, None]) + _TPOSE[b][None, :] * t[:, None]
        core = core + rng.normal(scale=0.035, size=(n, 3))
        verts.append(core)
        bone_of.extend([bi] * n)
    full = np.concatenate(verts, axis=0)
    bone_of = np.array(bone_of)

    # Spread the coarse subset along the whole body, then move it to the front
    # so coarse vertex i is full vertex i.
    pick = np.linspace(0, full_count - 1, coarse_count).round().astype(int)
    pick = np.unique(pick)
    extra = [i for i in range(full_count) if i not in set(pick.tolist())]
    order = np.concatenate([pick, np.array(extra, dtype=int)])[:full_count]
    full = full[order]
    bone_of = bone_of[order]

    joints = _TPOSE.copy()
    center = full.mean(axis=0)
    full -= center
    joints -= center
    scale = np.abs(full).max()
    full /= scale
    joints /= scale

    edges = []
    offsets = np.cumsum([0] + quota.tolist())
    inv_order = np.argsort(order)
    for bi in range(len(BONES)):
        idx = [int(inv_order[i]) for i in range(offsets[bi], offsets[bi + 1])]
        edges.extend((idx[k], idx[k + 1]) for k in range(len(idx) - 1))

    return TemplateMesh(
        coarse=full[:coarse_count].copy(), joints=joints, full=full,
        edges=edges, vertex_bone=bone_of,
    )


def gaussian_regressor(anchors: np.ndarray, vertices: np.ndarray,
                       radius: float = 0.12) -> np.ndarray:
    """Row-stochastic weights over vertices nearest each anchor point."""
    d2 = ((anchors[:, None, :] - vertices[None, :, :]) ** 2).sum(axis=-1)
    w = np.exp(-d2 / (2.0 * radius * radius))
    w /= w.sum(axis=1, keepdims=True)
    return w


def make_joint_regressor(template: TemplateMesh) -> np.ndarray:
    """(K_joint, M_full) matrix mapping full vertices to 3D joints."""
    return gaussian_regressor(template.joints, template.full)


def make_keypoint_regressor(template: TemplateMesh) -> np.ndarray:
    """(K=17, M_full) matrix placing the detector keypoints on the body."""
    anchors = np.array([template.joints[j] + np.asarray(off) for j, off in _KEYPOINT_ANCHORS])
    return gaussian_regressor(anchors, template.full, radius=0.10)


@dataclass
class SkeletonGraph:
    """Keypoint connectivity with the symmetric-normalized adjacency."""

    names: list[str]
    edges: list[tuple[int, int]]
    adjacency: np.ndarray = field(init=False)

    def __post_init__(self):
        k = len(self.names)
        a = np.zeros((k, k))
        for i, j in self.edges:
            if not (0 <= i < k and 0 <= j < k):
                raise ValueError(f"edge ({i}, {j}) outside node range 0..{k - 1}")
            a[i, j] = a[j, i] = 1.0
        a += np.eye(k)
        d = a.sum(axis=1)
        dinv = 1.0 / np.sqrt(d)
        self.adjacency = a * dinv[:, None] * dinv[None, :]

    @property
    def node_count(self) -> int:
        return len(self.names)


def coco_skeleton() -> SkeletonGraph:
    return SkeletonGraph(list(KEYPOINT_NAMES), list(COCO_EDGES))


def load_skeleton(path: str) -> SkeletonGraph:
    """Structured-text skeleton: lines ``n <name>`` then ``e <i> <j>``."""
    names: list[str] = []
    edges: list[tuple[int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "n" and len(parts) == 2:
                names.append(parts[1])
            elif parts[0] == "e" and len(parts) == 3:
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError(f"{path}:{ln}: expected 'n <name>' or 'e <i> <j>'")
    return SkeletonGraph(names, edges)


def save_mesh(path: str, vertices: np.ndarray, edges=(), joints: np.ndarray | None = None) -> None:
    """Plain-text mesh export: v/j/e lines; floats at full precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        if joints is not None:
            for j in joints:
                fh.write(f"j {float(j[0])!r} {float(j[1])!r} {float(j[2])!r}\n")
        for a, b in edges:
            fh.write(f"e {a} {b}\n")


def load_mesh(path: str) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Inverse of :func:`save_mesh`; returns (vertices, joints, edges)."""
    verts, joints, edges = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v" and len(parts) == 4:
                verts.append([float(x) for x in parts[1:]])
            elif parts[0] == "j" and len(parts) == 4:
                joints.append([float(x) for x in parts[1:]])
            elif parts[0] == "e" and len(parts) == 3:
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise ValueError(f"{path}:{ln}: expected v/j/e line")
    return np.array(verts), np.array(joints) if joints else np.zeros((0, 3)), edges


def load_template(path: str, coarse_count: int) -> TemplateMesh:
    """Build a TemplateMesh from a user-supplied v/j/e file."""
    full, joints, edges = load_mesh(path)
    if len(full) < coarse_count:
        raise ValueError(f"template file has {len(full)} vertices, need >= {coarse_count}")
    return TemplateMesh(
        coarse=full[:coarse_count].copy(), joints=joints, full=full,
        edges=edges, vertex_bone=np.zeros(len(full), dtype=int),
    )


def save_regressor(path: str, w: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in w:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_regressor(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            if raw.strip():
                rows.append([float(x) for x in raw.split()])
    return np.array(rows)

"""Synthetic sample generation for all four dataset types.

Bodies are the procedural template deformed by per-limb rotations about joint
pivots plus a smooth anisotropic scale, emitted at pixel scale (template
extent times ``body_scale``). Joints are defined as W V so the regression
loss always has a consistent target. Image-free samples carry orthographic
projections of the rotated body; image samples get a deterministic splat
rendering.

Sample streams are pure functions of (spec, seed, index) and serialize to a
flat little-endian binary record format with exact round-trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import AugmentConfig, DataSpec, SAMPLE_TYPES
from .keypoints import Keypoints2D
from .template import TemplateMesh, BONES

SAMPLE_MAGIC = b"XFS1"


@dataclass
class PoseSample:
    dataset_type: str
    sequence_id: int
    frame_id: int
    image: np.ndarray | None = None          # (H, W, 3) in [0, 1]
    kp2d: Keypoints2D | None = None          # detector keypoints (K)
    joints_2d: np.ndarray | None = None      # (K_joint, 2) reprojection targets
    joints_3d: np.ndarray | None = None      # (K_joint, 3)
    vertices_3d: np.ndarray | None = None    # (M_full, 3)

    def validate(self) -> None:
        if self.dataset_type not in SAMPLE_TYPES:
            raise ValueError(f"unknown dataset type {self.dataset_type!r}")
        if self.dataset_type == "mocap":
            if self.image is not None:
                raise ValueError("mocap samples must not carry images")
            if self.kp2d is None or self.joints_3d is None or self.vertices_3d is None:
                raise ValueError("mocap samples need projected keypoints and 3D targets")
        if self.dataset_type == "image_2d_only" and (
                self.joints_3d is not None or self.vertices_3d is not None):
            raise ValueError("2D-only samples must not carry 3D targets")
        if self.dataset_type.startswith("image") and self.image is None:
            raise ValueError(f"{self.dataset_type} sample lacks an image")


@dataclass
class OrthoCamera:
    """Pixel mapping for synthetic projections: p = scale * (x, y) + center."""

    scale: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)

    def project(self, points3d: np.ndarray) -> np.ndarray:
        return self.scale * points3d[:, :2] + np.asarray(self.center)


@dataclass
class Articulation:
    """Per-bone rotation angles (radians) and a global anisotropic scale."""

    bone_angles: np.ndarray  # (n_bones, 3)
    axis_scale: np.ndarray   # (3,)

    @classmethod
    def zero(cls, n_bones: int = len(BONES)) -> "Articulation":
        return cls(np.zeros((n_bones, 3)), np.ones(3))

    @classmethod
    def draw(cls, rng: np.random.Generator, n_bones: int = len(BONES),
             angle_scale: float = 0.18, shape_scale: float = 0.08) -> "Articulation":
        return cls(
            rng.uniform(-angle_scale, angle_scale, size=(n_bones, 3)),
            1.0 + rng.uniform(-shape_scale, shape_scale, size=3),
        )


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic roll (about z), then pitch (about x), then yaw (about y)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return rz @ rx @ ry


def draw_rotation(rng: np.random.Generator, aug: AugmentConfig) -> tuple[float, float, float]:
    """Roll/pitch/yaw draws in radians, uniform over the configured ranges."""
    to_rad = np.pi / 180.0
    return (
        rng.uniform(*aug.roll_range) * to_rad,
        rng.uniform(*aug.pitch_range) * to_rad,
        rng.uniform(*aug.yaw_range) * to_rad,
    )


def apply_2d_augment(points: np.ndarray, scale: float, shift: np.ndarray) -> np.ndarray:
    """The 2D jitter map, exactly y -> scale * y + shift."""
    return scale * points + shift


def generate_synthetic_body(template: TemplateMesh, regressor_w: np.ndarray,
                            rng: np.random.Generator | None = None,
                            articulation: Articulation | None = None,
                            body_scale: float = 40.0) -> tuple[np.ndarray, np.ndarray]:
    """Deform the template and return (vertices, joints) with J = W V.

    Zero articulation reproduces the template (times body_scale) exactly.
    """
    if articulation is None:
        if rng is None:
            raise ValueError("need an rng when articulation is not given")
        articulation = Articulation.draw(rng)
    v = template.full.copy()
    for bi, (pivot_joint, _) in enumerate(BONES):
        angles = articulation.bone_angles[bi]
        if not angles.any():
            continue
        r = rotation_matrix(*angles)
        pivot = template.joints[pivot_joint]
        mask = template.vertex_bone == bi
        v[mask] = (v[mask] - pivot) @ r.T + pivot
    v = v * articulation.axis_scale * body_scale
    joints = regressor_w @ v
    return v, joints


def render_synthetic_image(vertices: np.ndarray, camera: OrthoCamera,
                           image_hw: tuple[int, int], rng: np.random.Generator,
                           blob_sigma: float = 1.0, blob_radius: int = 2) -> np.ndarray:
    """Deterministic splat rendering: vertex blobs over a noise background.

    Foreground intensity is truncated at ``blob_radius`` pixels so it stays
    concentrated inside the projected bounding box.
    """
    h, w = image_hw
    img = 0.06 * rng.random((h, w))
    pts = camera.project(vertices) if len(vertices) else np.zeros((0, 2))
    for x, y in pts:
        ix, iy = int(round(x)), int(round(y))
        for yy in range(max(0, iy - blob_radius), min(h, iy + blob_radius + 1)):
            for xx in range(max(0, ix - blob_radius), min(w, ix + blob_radius + 1)):
                d2 = (xx - x) ** 2 + (yy - y) ** 2
                img[yy, xx] += 0.8 * np.exp(-d2 / (2.0 * blob_sigma**2))
    img = np.clip(img, 0.0, 1.0)
    gains = np.array([1.0, 0.85, 0.7])
    return np.clip(img[:, :, None] * gains[None, None, :], 0.0, 1.0)


@dataclass
class SynthWorld:
    """Everything sample generation needs besides the per-sample rng."""

    template: TemplateMesh
    joint_w: np.ndarray     # (K_joint, M_full)
    keypoint_w: np.ndarray  # (K, M_full)
    image_hw: tuple[int, int]
    body_scale: float = 40.0

    @property
    def center(self) -> tuple[float, float]:
        return (self.image_hw[1] / 2.0, self.image_hw[0] / 2.0)


def mocap_to_sample(vertices: np.ndarray, joints: np.ndarray, world: SynthWorld,
                    aug: AugmentConfig, rng: np.random.Generator,
                    sequence_id: int = 0, frame_id: int = 0) -> PoseSample:
    """Rotate the body, project orthographically, jitter the 2D points.

    Keypoints stay in a centered frame (no image to anchor a corner origin);
    the same scale/shift applies to the keypoint inputs and the 2D joint
    targets so the reprojection loss remains exactly satisfiable.
    """
    r = rotation_matrix(*draw_rotation(rng, aug))
    v = vertices @ r.T
    j = joints @ r.T
    scale = rng.uniform(*aug.scale_range)
    shift = rng.uniform(aug.shift_range[0], aug.shift_range[1], size=2)
    kp3d = world.keypoint_w @ v
    kp2d = apply_2d_augment(kp3d[:, :2], scale, shift)
    j2d = apply_2d_augment(j[:, :2], scale, shift)
    return PoseSample(
        dataset_type="mocap", sequence_id=sequence_id, frame_id=frame_id,
        kp2d=Keypoints2D(kp2d, np.ones(len(kp2d), dtype=bool)),
        joints_2d=j2d, joints_3d=j, vertices_3d=v,
    )


def image_sample(kind: str, vertices: np.ndarray, joints: np.ndarray, world: SynthWorld,
                 aug: AugmentConfig, rng: np.random.Generator,
                 sequence_id: int = 0, frame_id: int = 0) -> PoseSample:
    """Rendered sample; 2D annotations live in the image's corner-origin frame."""
    r = rotation_matrix(*draw_rotation(rng, aug))
    v = vertices @ r.T
    j = joints @ r.T
    cam = OrthoCamera(1.0, world.center)
    kp2d = cam.project(world.keypoint_w @ v)
    j2d = cam.project(j)
    image = render_synthetic_image(v, cam, world.image_hw, rng)
    keep_3d = kind != "image_2d_only"
    return PoseSample(
        dataset_type=kind, sequence_id=sequence_id, frame_id=frame_id, image=image,
        kp2d=Keypoints2D(kp2d, np.ones(len(kp2d), dtype=bool)),
        joints_2d=j2d,
        joints_3d=j if keep_3d else None,
        vertices_3d=v if keep_3d else None,
    )


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, index)))


def make_sample(spec: DataSpec, world: SynthWorld, kind: str, index: int) -> PoseSample:
    """Pure function of (spec, world, kind, index)."""
    rng = _sample_rng(spec.seed, index)
    arti = Articulation.draw(rng)
    v, j = generate_synthetic_body(world.template, world.joint_w,
                                   articulation=arti, body_scale=spec.body_scale)
    if kind == "mocap":
        sample = mocap_to_sample(v, j, world, spec.augment, rng,
                                 sequence_id=index, frame_id=index)
    else:
        sample = image_sample(kind, v, j, world, spec.augment, rng,
                              sequence_id=index, frame_id=index)
    sample.validate()
    return sample


def sample_kinds(spec: DataSpec) -> list[str]:
    """Deterministic proportional interleaving with the exact per-type counts."""
    entries: list[tuple[float, int, str]] = []
    for ti, t in enumerate(SAMPLE_TYPES):
        n = spec.counts.get(t, 0)
        entries.extend(((j + 0.5) / n, ti, t) for j in range(n))
    entries.sort(key=lambda e: (e[0], e[1]))
    return [t for _, _, t in entries]


def make_dataset(spec: DataSpec, world: SynthWorld) -> list[PoseSample]:
    """Materialized deterministic stream honoring the spec's exact counts."""
    kinds = sample_kinds(spec)
    return [make_sample(spec, world, kind, i) for i, kind in enumerate(kinds)]


# -- binary serialization -----------------------------------------------------

_TYPE_CODE = {t: i for i, t in enumerate(SAMPLE_TYPES)}
_TYPE_NAME = {i: t for t, i in _TYPE_CODE.items()}


def _write_array(fh, arr: np.ndarray | None) -> None:
    if arr is None:
        fh.write(struct.pack("<B", 0))
        return
    a = np.asarray(arr)
    kind = {"f": 1, "b": 2}[a.dtype.kind]
    a = a.astype("<f8") if kind == 1 else a.astype("<u1")
    fh.write(struct.pack("<BB", 1, kind))
    fh.write(struct.pack("<B", a.ndim))
    for d in a.shape:
        fh.write(struct.pack("<I", d))
    payload = a.tobytes()
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_array(fh) -> np.ndarray | None:
    present = struct.unpack("<B", fh.read(1))[0]
    if not present:
        return None
    kind = struct.unpack("<B", fh.read(1))[0]
    ndim = struct.unpack("<B", fh.read(1))[0]
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    n = struct.unpack("<Q", fh.read(8))[0]
    raw = fh.read(n)
    if kind == 1:
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return np.frombuffer(raw, dtype="<u1").reshape(shape).astype(bool)


def save_samples(path: str, samples: list[PoseSample]) -> None:
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            fh.write(struct.pack("<BII", _TYPE_CODE[s.dataset_type], s.sequence_id, s.frame_id))
            _write_array(fh, s.image)
            _write_array(fh, None if s.kp2d is None else s.kp2d.coords)
            _write_array(fh, None if s.kp2d is None else s.kp2d.visibility)
            _write_array(fh, s.joints_2d)
            _write_array(fh, s.joints_3d)
            _write_array(fh, s.vertices_3d)


def load_samples(path: str) -> list[PoseSample]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SAMPLE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {SAMPLE_MAGIC!r}")
        count = struct.unpack("<I", fh.read(4))[0]
        out = []
        for _ in range(count):
            code, seq, frame = struct.unpack("<BII", fh.read(9))
            image = _read_array(fh)
            coords = _read_array(fh)
            vis = _read_array(fh)
            j2d = _read_array(fh)
            j3d = _read_array(fh)
            v3d = _read_array(fh)
            kp = None if coords is None else Keypoints2D(coords, vis)
            out.append(PoseSample(_TYPE_NAME[code], seq, frame, image, kp, j2d, j3d, v3d))
    return out

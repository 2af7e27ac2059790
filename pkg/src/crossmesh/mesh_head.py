"""Per-branch mesh/joint/camera heads, coarse-to-full upsampling, joint
regression, weak-perspective projection, and the two-branch ensemble.

Vertex heads predict residuals on top of the template's coarse coordinates;
joint heads predict positions directly. The camera is (scale, tx, ty) with a
softplus keeping the scale positive; projection drops z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import DimensionError, Tensor
from .template import TemplateMesh
from .tokens import TokenSequence


@dataclass
class WeakPerspectiveCamera:
    """s * (x, y) + t in normalized image units; s > 0 by construction."""

    scale: object       # scalar Tensor or float
    translation: object  # (2,) Tensor or ndarray

    def detach(self) -> "WeakPerspectiveCamera":
        s = self.scale.item() if isinstance(self.scale, Tensor) else float(self.scale)
        t = self.translation.numpy() if isinstance(self.translation, Tensor) else np.asarray(self.translation)
        return WeakPerspectiveCamera(s, t.copy())


@dataclass
class JointRegressor:
    """Row-stochastic (K_joint, M) map from vertices to joints."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise DimensionError(f"joint regressor must be a matrix, got shape {w.shape}")
        if (w < 0).any() or np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("joint regressor rows must be nonnegative and sum to 1")
        self.weights = w


@dataclass
class MeshPrediction:
    vertices_coarse: object  # (M_coarse, 3)
    vertices_full: object    # (M_full, 3)
    joints: object           # (K_joint, 3)
    camera: WeakPerspectiveCamera
    branch: str              # "kp" | "img" | "fused"

    def detach(self) -> "MeshPrediction":
        def arr(x):
            return x.numpy().copy() if isinstance(x, Tensor) else np.asarray(x).copy()
        return MeshPrediction(arr(self.vertices_coarse), arr(self.vertices_full),
                              arr(self.joints), self.camera.detach(), self.branch)


@dataclass
class HeadParams:
    vertex: tuple[Tensor, Tensor]   # (d_model, 3) + bias
    joint: tuple[Tensor, Tensor]    # (d_model, 3) + bias
    cam_w1: Tensor                  # (d_model, d_model)
    cam_b1: Tensor
    cam_w2: Tensor                  # (d_model, 3) -> (s_raw, tx, ty)
    cam_b2: Tensor
    output_scale: float = 1.0       # fixed gain on vertex/joint outputs
    camera_bias: float = 0.0        # added to s_raw inside the softplus


@dataclass
class UpsampleParams:
    """One (M_full, M_coarse) matrix per coordinate, barycentric at init."""

    weight: Tensor  # (3, M_full, M_coarse)
    bias: Tensor    # (M_full, 3)


def barycentric_upsample_init(template: TemplateMesh) -> np.ndarray:
    """Interpolation weights: identity rows for the coarse subset, inverse-
    distance blends of the two nearest coarse vertices elsewhere."""
    mc, mf = template.coarse_count, template.full_count
    u = np.zeros((mf, mc))
    u[:mc, :mc] = np.eye(mc)
    for i in range(mc, mf):
        d = np.linalg.norm(template.coarse - template.full[i], axis=1)
        near = np.argsort(d)[:2]
        w = 1.0 / (d[near] + 1e-6)
        u[i, near] = w / w.sum()
    return u


def predict_mesh(tokens: TokenSequence, params: HeadParams, template: TemplateMesh,
                 up: UpsampleParams, branch: str) -> MeshPrediction:
    """Linear heads over the vertex/joint token slots plus a camera MLP."""
    mc, kj = template.coarse_count, template.joint_count
    if tokens.roles[:mc] != ["vertex"] * mc or tokens.roles[mc:mc + kj] != ["joint"] * kj:
        raise DimensionError("token sequence lacks the vertex/joint slots the heads expect")
    x = tokens.features
    v_tok = tt.narrow(x, 0, 0, mc)
    j_tok = tt.narrow(x, 0, mc, mc + kj)
    wv, bv = params.vertex
    wj, bj = params.joint
    gain = params.output_scale
    v_coarse = Tensor(template.coarse) + tt.mul(tt.matmul(v_tok, wv) + bv, gain)
    joints = tt.mul(tt.matmul(j_tok, wj) + bj, gain)
    pooled = tt.tmean(x, axis=0, keepdims=True)
    h = tt.gelu(tt.matmul(pooled, params.cam_w1) + params.cam_b1)
    raw = tt.reshape(tt.matmul(h, params.cam_w2) + params.cam_b2, (3,))
    cam = WeakPerspectiveCamera(
        scale=tt.reshape(tt.softplus(tt.narrow(raw, 0, 0, 1) + params.camera_bias), ()),
        translation=tt.narrow(raw, 0, 1, 3),
    )
    return MeshPrediction(v_coarse, upsample_mesh(v_coarse, up), joints, cam, branch)


def upsample_mesh(v_coarse: Tensor, params: UpsampleParams) -> Tensor:
    """Per-coordinate learned linear map from the coarse to the full mesh."""
    cols = []
    for c in range(3):
        u = tt.narrow(params.weight, 0, c, c + 1)
        u = tt.reshape(u, (params.weight.shape[1], params.weight.shape[2]))
        vc = tt.narrow(v_coarse, 1, c, c + 1)
        cols.append(tt.matmul(u, vc))
    return tt.concat(cols, axis=1) + params.bias


def regress_joints(vertices, regressor: JointRegressor):
    """J = W V; accepts Tensors (differentiable) or arrays."""
    w = regressor.weights
    if isinstance(vertices, Tensor):
        if vertices.shape[0] != w.shape[1]:
            raise DimensionError(f"regressor has {w.shape[1]} columns, mesh has {vertices.shape[0]} vertices")
        return tt.matmul(Tensor(w), vertices)
    v = np.asarray(vertices)
    if v.shape[0] != w.shape[1]:
        raise DimensionError(f"regressor has {w.shape[1]} columns, mesh has {v.shape[0]} vertices")
    return w @ v


def project_weak_perspective(joints, camera: WeakPerspectiveCamera):
    """(x, y, z) -> s * (x, y) + t; z is discarded."""
    if isinstance(joints, Tensor) or isinstance(camera.scale, Tensor):
        j = joints if isinstance(joints, Tensor) else Tensor(joints)
        xy = tt.narrow(j, 1, 0, 2)
        return tt.mul(xy, camera.scale) + camera.translation
    j = np.asarray(joints)
    return float(camera.scale) * j[:, :2] + np.asarray(camera.translation)


def _combine(a, b, lam: float):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        at = a if isinstance(a, Tensor) else Tensor(a)
        bt = b if isinstance(b, Tensor) else Tensor(b)
        return tt.mul(at, lam) + tt.mul(bt, 1.0 - lam)
    return lam * np.asarray(a) + (1.0 - lam) * np.asarray(b)


def ensemble(pred_kp: MeshPrediction, pred_img: MeshPrediction, lam: float) -> MeshPrediction:
    """Convex combination of the two branches (joints, vertices, and camera).

    The endpoints return the corresponding branch's tensors unchanged, so
    single-branch inference via lam in {0, 1} is exactly that branch.
    """
    if pred_kp is None or pred_img is None:
        raise ValueError("ensemble needs both branch predictions; use lam 0/1 with both present")
    if lam == 1.0:
        return MeshPrediction(pred_kp.vertices_coarse, pred_kp.vertices_full,
                              pred_kp.joints, pred_kp.camera, "fused")
    if lam == 0.0:
        return MeshPrediction(pred_img.vertices_coarse, pred_img.vertices_full,
                              pred_img.joints, pred_img.camera, "fused")
    cam = WeakPerspectiveCamera(
        _combine(pred_kp.camera.scale, pred_img.camera.scale, lam),
        _combine(pred_kp.camera.translation, pred_img.camera.translation, lam),
    )
    return MeshPrediction(
        _combine(pred_kp.vertices_coarse, pred_img.vertices_coarse, lam),
        _combine(pred_kp.vertices_full, pred_img.vertices_full, lam),
        _combine(pred_kp.joints, pred_img.joints, lam),
        cam, "fused",
    )
"""Training objectives and the per-dataset-type routing.

Conventions (each matches its frozen worked example in the tests):
  * map losses average |difference| over map cells, per keypoint, then take
    the visibility-weighted sum divided by K;
  * vertex/joint losses sum |difference| over the 3 coordinates per point and
    average over points;
  * the reprojection loss averages |difference| over the 2 coordinates per
    joint, masks by visibility, and divides by the joint count;
  * the consistency loss is the Frobenius norm of the feature difference
    divided by sqrt(token count), with gradients flowing to both inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .config import LossWeights, SAMPLE_TYPES
from .tensor import ContractViolation, DimensionError, Tensor


@dataclass
class LossReport:
    """Named scalar per active term plus the weighted total.

    Inactive terms are absent from ``terms``, not zero.
    """

    terms: dict[str, float]
    total: float

    def __str__(self) -> str:
        parts = ", ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        return f"total={self.total:.6g} ({parts})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_map(pred, gt, kp_weights) -> Tensor:
    """Weighted L1 on heatmaps and offsets; invisible keypoints weigh zero."""
    ph, po = pred.heatmaps, pred.offsets
    gh, go = gt.heatmaps, gt.offsets
    ph, po = _as_tensor(ph), _as_tensor(po)
    gh, go = _as_tensor(gh), _as_tensor(go)
    _check_shapes(ph, gh, "loss_map heatmaps")
    _check_shapes(po, go, "loss_map offsets")
    k = ph.shape[0]
    w = np.asarray(kp_weights, dtype=np.float64).reshape(k)
    heat_term = tt.tmean(tt.reshape(tt.absolute(ph - gh), (k, -1)), axis=1)
    off_term = tt.tmean(tt.reshape(tt.absolute(po - go), (k, -1)), axis=1)
    wt = Tensor(w)
    return (tt.tsum(tt.mul(heat_term, wt)) + tt.tsum(tt.mul(off_term, wt))) / k


def _point_l1(pred, gt, what: str) -> Tensor:
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _check_shapes(pred, gt, what)
    per_point = tt.tsum(tt.absolute(pred - gt), axis=1)
    return tt.tmean(per_point)


def loss_vertex(v_pred, v_gt) -> Tensor:
    """Mean over vertices of the per-vertex coordinate-sum L1 distance."""
    return _point_l1(v_pred, v_gt, "loss_vertex")


def loss_joint(j_pred, j_gt) -> Tensor:
    return _point_l1(j_pred, j_gt, "loss_joint")


def loss_joint_reg(v_pred, j_gt, regressor) -> Tensor:
    """Joint loss on W V; gradients reach the vertices through W."""
    v_pred = _as_tensor(v_pred)
    j_from_v = tt.matmul(Tensor(regressor.weights), v_pred)
    return loss_joint(j_from_v, j_gt)


def loss_reproj(j3d_pred, camera, j2d_gt, visibility) -> Tensor:
    """Visibility-masked mean L1 between projected and target 2D joints.

    Per joint the two coordinate differences are averaged; the masked sum is
    divided by the total joint count, so all-invisible inputs give exactly 0.
    """
    from .mesh_head import project_weak_perspective

    proj = project_weak_perspective(_as_tensor(j3d_pred), camera)
    gt = _as_tensor(j2d_gt)
    _check_shapes(proj, gt, "loss_reproj")
    k = proj.shape[0]
    vis = np.asarray(visibility, dtype=np.float64).reshape(k)
    per_joint = tt.tmean(tt.absolute(proj - gt), axis=1)
    return tt.tsum(tt.mul(per_joint, Tensor(vis))) / k


def loss_consistency(f_mha, f_mlp) -> Tensor:
    """|| F_mha - F_mlp ||_F / sqrt(T); both inputs receive gradients."""
    if f_mha is None:
        raise ContractViolation("consistency loss requires the attended feature (image modality present)")
    f_mha, f_mlp = _as_tensor(f_mha), _as_tensor(f_mlp)
    _check_shapes(f_mha, f_mlp, "loss_consistency")
    t = f_mha.shape[0]
    return tt.sqrt(tt.sum_squares(f_mha - f_mlp)) / np.sqrt(t)


# Active loss-term sets per dataset type (branch terms expand per available
# branch). Pseudo-3D labels train exactly like real 3D labels.
ROUTING = {
    "image_3d": ("map", "vertex", "joint", "joint_reg", "reproj", "consistency"),
    "image_pseudo3d": ("map", "vertex", "joint", "joint_reg", "reproj", "consistency"),
    "image_2d_only": ("map", "reproj", "consistency"),
    "mocap": ("vertex", "joint", "joint_reg", "reproj"),
}


def active_terms(sample_type: str, branches: tuple[str, ...], use_consistency: bool = True,
                 mocap_reproj: bool = True) -> list[str]:
    """Expand the routing table into concrete term names for a sample.

    Branch-specific terms become ``<branch>_<term>``; mocap samples route
    through the keypoint branch only.
    """
    if sample_type not in SAMPLE_TYPES:
        raise ValueError(f"unknown sample type {sample_type!r}")
    kinds = ROUTING[sample_type]
    names: list[str] = []
    sample_branches = ("kp",) if sample_type == "mocap" else branches
    for kind in kinds:
        if kind == "map":
            names.append("map")
        elif kind == "consistency":
            if use_consistency and len(branches) == 2:
                names.append("consistency")
        else:
            for br in sample_branches:
                if kind == "reproj" and sample_type == "mocap" and not mocap_reproj:
                    continue
                names.append(f"{br}_{kind}")
    return names


_WEIGHT_OF = {"map": "heatmaps", "vertex": "vertex", "joint": "joint",
              "joint_reg": "joint_reg", "reproj": "reproj", "consistency": "consistency"}


def total_loss(sample_type: str, outputs: dict, targets: dict, weights: LossWeights,
               regressor, use_consistency: bool = True, mocap_reproj: bool = True
               ) -> tuple[Tensor, LossReport]:
    """Assemble the routed loss for one sample.

    ``outputs``: 'maps' (HeatmapSet of Tensors), predictions under 'kp'/'img'
    (MeshPrediction), 'consistency_pairs' (list of (mha, mlp)).
    ``targets``: 'maps' (HeatmapSet), 'kp_vis', 'vertices', 'joints',
    'joints_2d', 'joints_2d_vis' as applicable.
    """
    branches = tuple(br for br in ("kp", "img") if outputs.get(br) is not None)
    if sample_type == "mocap" and "kp" not in branches:
        raise ContractViolation("mocap sample requires the keypoint branch")
    names = active_terms(sample_type, branches, use_consistency, mocap_reproj)
    values: dict[str, Tensor] = {}
    for name in names:
        if name == "map":
            if targets.get("maps") is None:
                raise ContractViolation(f"{sample_type} sample lacks heatmap targets")
            values[name] = loss_map(outputs["maps"], targets["maps"], targets["kp_vis"])
        elif name == "consistency":
            pairs = outputs.get("consistency_pairs") or []
            if not pairs:
                raise ContractViolation("consistency loss active but no attended/MLP feature pairs exist")
            acc = loss_consistency(*pairs[0])
            for mha, mlp in pairs[1:]:
                acc = acc + loss_consistency(mha, mlp)
            values[name] = acc / len(pairs)
        else:
            br, kind = name.split("_", 1)
            pred = outputs[br]
            if kind == "vertex":
                if targets.get("vertices") is None:
                    raise ContractViolation(f"{sample_type} sample lacks vertex targets")
                values[name] = loss_vertex(pred.vertices_full, targets["vertices"])
            elif kind == "joint":
                if targets.get("joints") is None:
                    raise ContractViolation(f"{sample_type} sample lacks joint targets")
                values[name] = loss_joint(pred.joints, targets["joints"])
            elif kind == "joint_reg":
                values[name] = loss_joint_reg(pred.vertices_full, targets["joints"], regressor)
            elif kind == "reproj":
                if targets.get("joints_2d") is None:
                    raise ContractViolation(f"{sample_type} sample lacks 2D joint targets")
                values[name] = loss_reproj(pred.joints, pred.camera,
                                           targets["joints_2d"], targets["joints_2d_vis"])
            else:
                raise ValueError(f"unknown loss term {name!r}")
    total = None
    for name, val in values.items():
        kind = name.split("_", 1)[1] if name.split("_", 1)[0] in ("kp", "img") else name
        wv = getattr(weights, _WEIGHT_OF[kind])
        term = tt.mul(val, wv)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    report = LossReport({k: v.item() for k, v in values.items()}, total.item())
    return total, report

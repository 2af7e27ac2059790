"""Keypoint branch front end: heatmap/offset codec, GCN, token assembly.

Heatmaps live at a quarter of the input image resolution. A keypoint
coordinate decodes as 4 * (argmax cell + offset at that cell), with argmax
ties broken to the first row-major cell, so render -> decode round-trips
exactly for representable coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .template import SkeletonGraph, TemplateMesh
from .tokens import TokenSequence

OFFSET_LIMIT = 2.0


@dataclass
class HeatmapSet:
    """Per-keypoint confidence maps (K, H/4, W/4) and offsets (K, 2, H/4, W/4).

    Offset channel 0 is the x offset, channel 1 the y offset, both in
    heatmap-pixel units and clamped to [-2, 2].
    """

    heatmaps: object  # np.ndarray or Tensor
    offsets: object

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        h = self.heatmaps.numpy() if isinstance(self.heatmaps, Tensor) else np.asarray(self.heatmaps)
        o = self.offsets.numpy() if isinstance(self.offsets, Tensor) else np.asarray(self.offsets)
        return h, o


@dataclass
class Keypoints2D:
    coords: np.ndarray      # (K, 2) in input-image pixel space, (x, y)
    visibility: np.ndarray  # (K,) bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.coords.shape != (len(self.visibility), 2):
            raise ValueError(f"coords {self.coords.shape} do not match visibility {self.visibility.shape}")


def decode_keypoints(maps: HeatmapSet, threshold: float = 0.05) -> Keypoints2D:
    """Read keypoints as 4 * (peak cell + offset); peak <= threshold means invisible."""
    heat, off = maps.arrays()
    k, hq, wq = heat.shape
    coords = np.zeros((k, 2))
    vis = np.zeros(k, dtype=bool)
    for i in range(k):
        flat = int(heat[i].argmax())  # first row-major occurrence on ties
        iy, ix = divmod(flat, wq)
        coords[i, 0] = 4.0 * (ix + off[i, 0, iy, ix])
        coords[i, 1] = 4.0 * (iy + off[i, 1, iy, ix])
        vis[i] = heat[i, iy, ix] > threshold
    return Keypoints2D(coords, vis)


def render_gt_maps(kp: Keypoints2D, heatmap_hw: tuple[int, int], sigma: float = 2.0) -> HeatmapSet:
    """Gaussian confidence targets plus sub-cell offsets around each keypoint.

    Offsets are written only where the cell sits within distance 2 of the
    quarter-resolution keypoint location; invisible keypoints render all-zero
    maps.
    """
    hq, wq = heatmap_hw
    k = len(kp.visibility)
    heat = np.zeros((k, hq, wq))
    off = np.zeros((k, 2, hq, wq))
    ys, xs = np.mgrid[0:hq, 0:wq]
    for i in range(k):
        if not kp.visibility[i]:
            continue
        cx, cy = kp.coords[i, 0] / 4.0, kp.coords[i, 1] / 4.0
        dx, dy = cx - xs, cy - ys
        d2 = dx * dx + dy * dy
        heat[i] = np.exp(-d2 / (2.0 * sigma * sigma))
        near = d2 < OFFSET_LIMIT * OFFSET_LIMIT
        off[i, 0][near] = dx[near]
        off[i, 1][near] = dy[near]
    return HeatmapSet(heat, off)


def normalize_keypoints(coords: np.ndarray, image_hw: tuple[int, int], centered: bool = False) -> np.ndarray:
    """Map pixel coordinates into [-1, 1] by image extent.

    ``centered`` marks coordinates whose origin is already the image center
    (image-free samples); corner-origin coordinates get the center subtracted.
    """
    h, w = image_hw
    half = np.array([w / 2.0, h / 2.0])
    c = np.asarray(coords, dtype=np.float64)
    return c / half if centered else (c - half) / half


@dataclass
class GCNParams:
    layers: list[tuple[Tensor, Tensor]]  # (theta, bias) per layer


def gcn_forward(coords_norm, graph: SkeletonGraph, params: GCNParams) -> Tensor:
    """Stacked X' = relu(A_hat X Theta + b) over the skeleton graph."""
    a_hat = Tensor(graph.adjacency)
    x = coords_norm if isinstance(coords_norm, Tensor) else Tensor(coords_norm)
    for theta, bias in params.layers:
        x = tt.relu(tt.matmul(tt.matmul(a_hat, x), theta) + bias)
    return x


@dataclass
class KpTokenParams:
    proj_template: Tensor  # (3 + d_gcn + 2, d_model)
    bias_template: Tensor
    proj_keypoint: Tensor  # (d_gcn + 2, d_model)
    bias_keypoint: Tensor


def assemble_kp_tokens(features: Tensor, coords_norm, template: TemplateMesh,
                       params: KpTokenParams) -> TokenSequence:
    """Build the keypoint-branch token sequence.

    Template vertex/joint tokens carry (template xyz ++ pooled keypoint
    feature); each keypoint token carries (its GCN feature ++ its normalized
    2D coordinate). Everything is projected to d_model.
    """
    coords = coords_norm if isinstance(coords_norm, Tensor) else Tensor(coords_norm)
    per_kp = tt.concat([features, coords], axis=1)              # (K, d_gcn + 2)
    pooled = tt.tmean(per_kp, axis=0)                           # keypoint global feature
    t_count = template.coarse_count + template.joint_count
    t_coords = Tensor(np.concatenate([template.coarse, template.joints], axis=0))
    t_in = tt.concat([t_coords, tt.broadcast_rows(pooled, t_count)], axis=1)
    t_tokens = tt.matmul(t_in, params.proj_template) + params.bias_template
    k_tokens = tt.matmul(per_kp, params.proj_keypoint) + params.bias_keypoint
    roles = (["vertex"] * template.coarse_count + ["joint"] * template.joint_count
             + ["keypoint"] * per_kp.shape[0])
    return TokenSequence(tt.concat([t_tokens, k_tokens], axis=0), roles)

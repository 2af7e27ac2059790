"""Image branch front end: tiny CNN backbone, keypoint-decoder head, tokens.

The backbone is five stride-2 conv stages (input must be divisible by 32);
the decoder climbs back from stride 32 to stride 4 with three transposed
convolutions and projected skip connections, emitting sigmoid heatmaps and
tanh offsets scaled to [-2, 2]. Grid tokens come from the stride-16 stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import DimensionError, Tensor
from .keypoints import HeatmapSet, OFFSET_LIMIT
from .template import TemplateMesh
from .tokens import TokenSequence


@dataclass
class BackboneFeatures:
    """Stage maps keyed by stride (4, 8, 16, 32) plus the pooled global vector."""

    by_stride: dict[int, Tensor]
    pooled: Tensor  # (C32,)


@dataclass
class BackboneParams:
    stages: list[tuple[Tensor, Tensor]]  # five (kernel, bias) pairs, each stride 2


def backbone_forward(image: np.ndarray, params: BackboneParams) -> BackboneFeatures:
    """image: (H, W, 3) floats in [0, 1], H and W divisible by 32."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"backbone expects (H, W, 3), got {img.shape}")
    if img.shape[0] % 32 or img.shape[1] % 32:
        raise DimensionError(f"image extent {img.shape[:2]} must be divisible by 32")
    x = Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)))
    by_stride: dict[int, Tensor] = {}
    stride = 1
    for w, b in params.stages:
        x = tt.relu(tt.conv2d(x, w, b, stride=2, padding=1))
        stride *= 2
        if stride >= 4:
            by_stride[stride] = x
    pooled = tt.tmean(tt.reshape(x, (x.shape[0], -1)), axis=1)
    return BackboneFeatures(by_stride, pooled)


@dataclass
class DecoderParams:
    up: list[tuple[Tensor, Tensor]]        # three transposed-conv (kernel, bias), stride 2
    skip: list[tuple[Tensor, Tensor]]      # 1x1 projections for stride-16 / stride-8 skips
    head_heat: tuple[Tensor, Tensor]       # 1x1 conv -> K channels
    head_offset: tuple[Tensor, Tensor]     # 1x1 conv -> 2K channels


def keypoint_decoder(feats: BackboneFeatures, params: DecoderParams) -> HeatmapSet:
    """Three x2 upsamples from stride 32 to stride 4, with skip connections.

    The stride-16 backbone features join after the first upsample and the
    stride-8 features after the second, each through a 1x1 projection.
    """
    x = feats.by_stride[32]
    skips = [feats.by_stride[16], feats.by_stride[8], None]
    for i, (w, b) in enumerate(params.up):
        x = tt.transposed_conv2d(x, w, b, stride=2, padding=1)
        if skips[i] is not None:
            sw, sb = params.skip[i]
            x = x + tt.conv2d(skips[i], sw, sb)
        x = tt.relu(x)
    hw, hb = params.head_heat
    ow, ob = params.head_offset
    heat = tt.sigmoid(tt.conv2d(x, hw, hb))
    k = heat.shape[0]
    off = tt.tanh(tt.conv2d(x, ow, ob)) * OFFSET_LIMIT
    off = tt.reshape(off, (k, 2, off.shape[1], off.shape[2]))
    return HeatmapSet(heat, off)


@dataclass
class ImgTokenParams:
    proj_template: Tensor  # (3 + C32, d_model)
    bias_template: Tensor
    proj_grid: Tensor      # (C16 + 2, d_model)
    bias_grid: Tensor


def grid_cell_centers(h16: int, w16: int) -> np.ndarray:
    """Normalized (x, y) centers of the stride-16 grid cells, row-major."""
    ys, xs = np.mgrid[0:h16, 0:w16]
    cx = (xs + 0.5) / w16 * 2.0 - 1.0
    cy = (ys + 0.5) / h16 * 2.0 - 1.0
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


def assemble_img_tokens(feats: BackboneFeatures, template: TemplateMesh,
                        params: ImgTokenParams) -> TokenSequence:
    """Template tokens (xyz ++ pooled image feature) then stride-16 grid tokens."""
    t_count = template.coarse_count + template.joint_count
    t_coords = Tensor(np.concatenate([template.coarse, template.joints], axis=0))
    t_in = tt.concat([t_coords, tt.broadcast_rows(feats.pooled, t_count)], axis=1)
    t_tokens = tt.matmul(t_in, params.proj_template) + params.bias_template

    g = feats.by_stride[16]
    c16, h16, w16 = g.shape
    cells = tt.transpose(tt.reshape(g, (c16, h16 * w16)), (1, 0))
    centers = Tensor(grid_cell_centers(h16, w16))
    g_in = tt.concat([cells, centers], axis=1)
    g_tokens = tt.matmul(g_in, params.proj_grid) + params.bias_grid

    roles = (["vertex"] * template.coarse_count + ["joint"] * template.joint_count
             + ["grid"] * (h16 * w16))
    return TokenSequence(tt.concat([t_tokens, g_tokens], axis=0), roles)

"""Model assembly: parameter construction, the per-sample forward pass, and
branch bookkeeping.

Parameters live in one ordered name -> Tensor registry (construction order is
the deterministic iteration order used by the optimizer and checkpoints).
The forward pass takes a single sample; batching is a loop with per-sample
tapes and index-ordered gradient accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .attention import (AttentionParams, BlockParams, CrossModalParams, EncoderLayerParams,
                        FeedForwardParams, FusionParams, LayerNormParams,
                        ModalitySwitchParams, StackOutput, run_stack)
from .config import ModelConfig
from .image_branch import (BackboneFeatures, BackboneParams, DecoderParams, ImgTokenParams,
                           assemble_img_tokens, backbone_forward, keypoint_decoder)
from .keypoints import (GCNParams, HeatmapSet, Keypoints2D, KpTokenParams, assemble_kp_tokens,
                        decode_keypoints, gcn_forward, normalize_keypoints, render_gt_maps)
from .mesh_head import (HeadParams, JointRegressor, MeshPrediction, UpsampleParams,
                        barycentric_upsample_init, ensemble, predict_mesh)
from .synth import PoseSample
from .template import (TemplateMesh, coco_skeleton, make_joint_regressor,
                       make_keypoint_regressor, make_template)
from .tensor import ContractViolation, Tensor


class Registry:
    """Ordered parameter store; names double as checkpoint keys."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t


def _glorot(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _he_conv(rng, cin: int, k: int, shape) -> np.ndarray:
    return rng.normal(scale=np.sqrt(2.0 / (cin * k * k)), size=shape)


def _linear(reg, rng, name: str, d_in: int, d_out: int, scale: float | None = None):
    if scale is None:
        w = reg.add(f"{name}.w", _glorot(rng, d_in, d_out, (d_in, d_out)))
    else:
        w = reg.add(f"{name}.w", rng.normal(scale=scale, size=(d_in, d_out)))
    b = reg.add(f"{name}.b", np.zeros(d_out))
    return w, b


def _layer_norm(reg, name: str, d: int) -> LayerNormParams:
    return LayerNormParams(reg.add(f"{name}.gamma", np.ones(d)),
                           reg.add(f"{name}.beta", np.zeros(d)))


def _attention(reg, rng, name: str, d: int, heads: int) -> AttentionParams:
    wq, bq = _linear(reg, rng, f"{name}.q", d, d)
    wk, bk = _linear(reg, rng, f"{name}.k", d, d)
    wv, bv = _linear(reg, rng, f"{name}.v", d, d)
    wo, bo = _linear(reg, rng, f"{name}.o", d, d)
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, heads)


def _encoder_layer(reg, rng, name: str, d: int, heads: int) -> EncoderLayerParams:
    attn = _attention(reg, rng, f"{name}.attn", d, heads)
    ln1 = _layer_norm(reg, f"{name}.ln1", d)
    w1, b1 = _linear(reg, rng, f"{name}.ffn1", d, 2 * d)
    w2, b2 = _linear(reg, rng, f"{name}.ffn2", 2 * d, d)
    ln2 = _layer_norm(reg, f"{name}.ln2", d)
    return EncoderLayerParams(attn, ln1, FeedForwardParams(w1, b1, w2, b2), ln2)


@dataclass
class ForwardResult:
    maps: HeatmapSet | None = None
    kp_input: Keypoints2D | None = None
    predictions: dict = field(default_factory=dict)  # branch -> MeshPrediction
    fused: MeshPrediction | None = None
    consistency_pairs: list = field(default_factory=list)
    attn_maps: list = field(default_factory=list)
    token_roles: dict = field(default_factory=dict)  # branch -> list[str]


class TwoBranchModel:
    """The full two-branch network over one set of named parameters."""

    def __init__(self, config: ModelConfig, template: TemplateMesh | None = None):
        config.validate()
        self.config = config
        self.template = template or make_template(
            config.coarse_vertices, config.full_vertices, config.joint_count,
            seed=config.seed + 1234,
        )
        self.joint_regressor = JointRegressor(make_joint_regressor(self.template))
        self.keypoint_regressor = make_keypoint_regressor(self.template)
        self.skeleton = coco_skeleton()
        if self.skeleton.node_count != config.keypoint_count:
            raise ContractViolation(
                f"skeleton has {self.skeleton.node_count} nodes, config wants {config.keypoint_count}"
            )
        self.stats = {"backbone_calls": 0}
        self._build_params()

    # -- parameter construction ---------------------------------------------

    def _build_params(self) -> None:
        cfg = self.config
        reg = Registry()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        use_img = cfg.branches in ("both", "image_only")
        use_kp = cfg.branches in ("both", "keypoint_only")

        chans = cfg.backbone_channels
        stages = []
        cin = 3
        for i, cout in enumerate(chans):
            w = reg.add(f"backbone.stage{i}.w", _he_conv(rng, cin, 3, (cout, cin, 3, 3)))
            b = reg.add(f"backbone.stage{i}.b", np.zeros(cout))
            stages.append((w, b))
            cin = cout
        self.backbone = BackboneParams(stages)

        k = cfg.keypoint_count
        dec_chans = [chans[4], chans[3], chans[2], chans[1]]  # stride 32 -> 4
        up, skips = [], []
        for i in range(3):
            ci, co = dec_chans[i], dec_chans[i + 1]
            w = reg.add(f"decoder.up{i}.w", _he_conv(rng, ci, 4, (ci, co, 4, 4)))
            b = reg.add(f"decoder.up{i}.b", np.zeros(co))
            up.append((w, b))
            if i < 2:
                sc = chans[3] if i == 0 else chans[2]
                sw = reg.add(f"decoder.skip{i}.w", _he_conv(rng, sc, 1, (co, sc, 1, 1)))
                sb = reg.add(f"decoder.skip{i}.b", np.zeros(co))
                skips.append((sw, sb))
        hw = reg.add("decoder.heat.w", _he_conv(rng, dec_chans[3], 1, (k, dec_chans[3], 1, 1)))
        hb = reg.add("decoder.heat.b", np.zeros(k))
        ow = reg.add("decoder.offset.w", _he_conv(rng, dec_chans[3], 1, (2 * k, dec_chans[3], 1, 1)))
        ob = reg.add("decoder.offset.b", np.zeros(2 * k))
        self.decoder = DecoderParams(up, skips, (hw, hb), (ow, ob))

        if use_kp:
            layers = []
            din = 2
            for i in range(cfg.gcn_depth):
                th = reg.add(f"gcn.layer{i}.w", _glorot(rng, din, cfg.gcn_width, (din, cfg.gcn_width)))
                bi = reg.add(f"gcn.layer{i}.b", np.zeros(cfg.gcn_width))
                layers.append((th, bi))
                din = cfg.gcn_width
            self.gcn = GCNParams(layers)
            dg = cfg.gcn_width + 2
            pt, bt = _linear(reg, rng, "kp_tokens.template", 3 + dg, d)
            pk, bk = _linear(reg, rng, "kp_tokens.keypoint", dg, d)
            self.kp_tokens = KpTokenParams(pt, bt, pk, bk)
        else:
            self.gcn = None
            self.kp_tokens = None

        if use_img:
            pt, bt = _linear(reg, rng, "img_tokens.template", 3 + chans[4], d)
            pg, bg = _linear(reg, rng, "img_tokens.grid", chans[3] + 2, d)
            self.img_tokens = ImgTokenParams(pt, bt, pg, bg)
        else:
            self.img_tokens = None

        blocks = []
        bc = cfg.block
        for bx in range(bc.n_blocks):
            front_img, front_kp, back_img, back_kp, cross = [], [], [], [], []
            for i in range(bc.n_front):
                if use_img:
                    front_img.append(_encoder_layer(reg, rng, f"blocks.{bx}.front_img.{i}", d, cfg.head_count))
                if use_kp:
                    front_kp.append(_encoder_layer(reg, rng, f"blocks.{bx}.front_kp.{i}", d, cfg.head_count))
            fusion = None
            if bc.fusion_mode == "cross_attention" and use_img and use_kp:
                for i in range(bc.n_cross):
                    name = f"blocks.{bx}.cross.{i}"
                    attn_img = _attention(reg, rng, f"{name}.img", d, cfg.head_count)
                    attn_kp = _attention(reg, rng, f"{name}.kp", d, cfg.head_count)
                    switch = None
                    if cfg.use_switch_mlp:
                        w1, b1 = _linear(reg, rng, f"{name}.switch1", d, d)
                        w2, b2 = _linear(reg, rng, f"{name}.switch2", d, d)
                        switch = ModalitySwitchParams(w1, b1, w2, b2)
                    ln_img = _layer_norm(reg, f"{name}.ln_img", d)
                    ln_kp = _layer_norm(reg, f"{name}.ln_kp", d)
                    cross.append(CrossModalParams(attn_img, attn_kp, switch, ln_img, ln_kp))
            elif bc.fusion_mode == "cross_attention" and use_kp and not use_img:
                # Keypoint-only model still owns its switch path (image-free flow).
                for i in range(bc.n_cross):
                    name = f"blocks.{bx}.cross.{i}"
                    switch = None
                    if cfg.use_switch_mlp:
                        w1, b1 = _linear(reg, rng, f"{name}.switch1", d, d)
                        w2, b2 = _linear(reg, rng, f"{name}.switch2", d, d)
                        switch = ModalitySwitchParams(w1, b1, w2, b2)
                    ln_kp = _layer_norm(reg, f"{name}.ln_kp", d)
                    cross.append(CrossModalParams(None, None, switch, None, ln_kp))
            elif bc.fusion_mode in ("add", "concat") and use_img and use_kp:
                name = f"blocks.{bx}.fusion"
                proj_img = proj_kp = None
                if bc.fusion_mode == "concat":
                    proj_img = _linear(reg, rng, f"{name}.proj_img", 2 * d, d)
                    proj_kp = _linear(reg, rng, f"{name}.proj_kp", 2 * d, d)
                fusion = FusionParams(_layer_norm(reg, f"{name}.ln_img", d),
                                      _layer_norm(reg, f"{name}.ln_kp", d),
                                      proj_img, proj_kp)
            for i in range(bc.n_back):
                if use_img:
                    back_img.append(_encoder_layer(reg, rng, f"blocks.{bx}.back_img.{i}", d, cfg.head_count))
                if use_kp:
                    back_kp.append(_encoder_layer(reg, rng, f"blocks.{bx}.back_kp.{i}", d, cfg.head_count))
            blocks.append(BlockParams(front_img, front_kp, cross, fusion, back_img, back_kp))
        self.blocks = blocks

        self.heads: dict[str, HeadParams] = {}
        for br, enabled in (("kp", use_kp), ("img", use_img)):
            if not enabled:
                continue
            wv, bv = _linear(reg, rng, f"heads.{br}.vertex", d, 3, scale=0.01)
            wj, bj = _linear(reg, rng, f"heads.{br}.joint", d, 3, scale=0.01)
            cw1, cb1 = _linear(reg, rng, f"heads.{br}.cam1", d, d)
            cw2, cb2 = _linear(reg, rng, f"heads.{br}.cam2", d, 3, scale=0.01)
            self.heads[br] = HeadParams((wv, bv), (wj, bj), cw1, cb1, cw2, cb2,
                                        output_scale=cfg.head_output_scale,
                                        camera_bias=cfg.camera_bias)

        u0 = barycentric_upsample_init(self.template)
        self.upsample = UpsampleParams(
            reg.add("upsample.w", np.repeat(u0[None, :, :], 3, axis=0)),
            reg.add("upsample.b", np.zeros((self.template.full_count, 3))),
        )
        self.params = reg.params

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- forward ---------------------------------------------------------------

    def image_frontend(self, image: np.ndarray) -> tuple[BackboneFeatures, HeatmapSet]:
        self.stats["backbone_calls"] += 1
        feats = backbone_forward(image, self.backbone)
        maps = keypoint_decoder(feats, self.decoder)
        return feats, maps

    def keypoint_branch_tokens(self, kp: Keypoints2D, centered: bool):
        coords_norm = normalize_keypoints(kp.coords, (self.config.image_h, self.config.image_w),
                                          centered=centered)
        feats = gcn_forward(Tensor(coords_norm), self.skeleton, self.gcn)
        return assemble_kp_tokens(feats, Tensor(coords_norm), self.template, self.kp_tokens)

    def forward(self, sample: PoseSample, teacher_force: bool = True) -> ForwardResult:
        """Run one sample through every enabled branch.

        ``teacher_force`` feeds ground-truth keypoints to the keypoint branch
        when the sample has them (training); otherwise the decoded detector
        output is used (inference). Image-free samples never touch the image
        stack.
        """
        cfg = self.config
        res = ForwardResult()
        use_img = cfg.branches in ("both", "image_only")
        use_kp = cfg.branches in ("both", "keypoint_only")

        img_tokens = None
        if sample.image is not None:
            feats, maps = self.image_frontend(sample.image)
            res.maps = maps
            if use_img:
                img_tokens = assemble_img_tokens(feats, self.template, self.img_tokens)

        kp_tokens = None
        if use_kp:
            centered = sample.dataset_type == "mocap"
            if teacher_force and sample.kp2d is not None:
                kp_in = sample.kp2d
            elif res.maps is not None:
                kp_in = decode_keypoints(res.maps, threshold=cfg.heatmap_threshold)
            elif sample.kp2d is not None:
                kp_in = sample.kp2d
            else:
                kp_in = None
            if kp_in is not None:
                res.kp_input = kp_in
                kp_tokens = self.keypoint_branch_tokens(kp_in, centered)

        if img_tokens is None and kp_tokens is None:
            raise ContractViolation(
                f"sample of type {sample.dataset_type!r} feeds no enabled branch "
                f"(branches={cfg.branches!r})"
            )

        stack: StackOutput = run_stack(img_tokens, kp_tokens, self.blocks, cfg.block.fusion_mode)
        res.consistency_pairs = stack.consistency_pairs
        res.attn_maps = stack.attn_maps

        if stack.kp is not None:
            res.predictions["kp"] = predict_mesh(stack.kp, self.heads["kp"], self.template,
                                                 self.upsample, "kp")
            res.token_roles["kp"] = stack.kp.roles
        if stack.img is not None:
            res.predictions["img"] = predict_mesh(stack.img, self.heads["img"], self.template,
                                                  self.upsample, "img")
            res.token_roles["img"] = stack.img.roles

        pk, pi = res.predictions.get("kp"), res.predictions.get("img")
        if pk is not None and pi is not None:
            res.fused = ensemble(pk, pi, cfg.ensemble_lambda)
        else:
            only = pk or pi
            res.fused = MeshPrediction(only.vertices_coarse, only.vertices_full,
                                       only.joints, only.camera, "fused")
        return res

    # -- loss targets ------------------------------------------------------------

    def targets_for(self, sample: PoseSample) -> dict:
        """Assemble the loss-target dict for one sample (numpy only)."""
        cfg = self.config
        t: dict = {"maps": None, "kp_vis": None, "vertices": sample.vertices_3d,
                   "joints": sample.joints_3d, "joints_2d": None, "joints_2d_vis": None}
        if sample.kp2d is not None and sample.image is not None:
            t["maps"] = render_gt_maps(sample.kp2d, (cfg.heatmap_h, cfg.heatmap_w),
                                       sigma=cfg.heatmap_sigma)
            t["kp_vis"] = sample.kp2d.visibility.astype(np.float64)
        if sample.joints_2d is not None:
            centered = sample.dataset_type == "mocap"
            t["joints_2d"] = normalize_keypoints(sample.joints_2d, (cfg.image_h, cfg.image_w),
                                                 centered=centered)
            t["joints_2d_vis"] = np.ones(len(sample.joints_2d))
        return t

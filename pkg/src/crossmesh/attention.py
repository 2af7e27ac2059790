"""Self-attention encoder layers, the cross-modal module with its modality
switch, and the block stack that composes them.

Cross-modal attention exchanges key/value pairs between the two token
sequences: the image side attends with its own queries over keypoint
keys/values and vice versa. Per-head scaling uses d_head = d_model /
head_count. When the image modality is absent, the keypoint side replaces the
attended feature with its switch-MLP surrogate and never touches an
image-side tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import ContractViolation, DimensionError, Tensor
from .tokens import TokenSequence


@dataclass
class AttentionParams:
    """Fused Q/K/V/output projections; heads are views of the fused matrices."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    head_count: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.head_count


@dataclass
class ModalitySwitchParams:
    """Two affine layers with a gelu between; input/hidden/output = d_model."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, d = x.shape
    return tt.transpose(tt.reshape(x, (t, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return tt.reshape(tt.transpose(x, (1, 0, 2)), (t, h * dh))


def project_qkv(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """The modality's own query/key/value projections, split into heads."""
    if x.shape[1] != params.d_model:
        raise DimensionError(f"attention: token dim {x.shape[1]} does not match d_model {params.d_model}")
    q = _split_heads(tt.matmul(x, params.w_q) + params.b_q, params.head_count)
    k = _split_heads(tt.matmul(x, params.w_k) + params.b_k, params.head_count)
    v = _split_heads(tt.matmul(x, params.w_v) + params.b_v, params.head_count)
    return q, k, v


def _attend(q: Tensor, k: Tensor, v: Tensor, out_params: AttentionParams
            ) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product over pre-split heads plus the output projection.

    Returns the projected output and the head-averaged attention matrix
    (row-stochastic, detached) for export.
    """
    scores = tt.matmul(q, tt.transpose(k, (0, 2, 1))) / np.sqrt(out_params.d_head)
    attn = tt.softmax(scores, axis=-1)
    ctx = _merge_heads(tt.matmul(attn, v))
    out = tt.matmul(ctx, out_params.w_o) + out_params.b_o
    return out, attn.numpy().mean(axis=0)


def multi_head_attention(queries: Tensor, keyvalues: Tensor, params: AttentionParams
                         ) -> tuple[Tensor, np.ndarray]:
    """Standard attention of `queries` over `keyvalues` with one parameter set."""
    q = project_qkv(queries, params)[0]
    if keyvalues.shape[1] != params.d_model:
        raise DimensionError(
            f"attention: token dims {queries.shape[1]}/{keyvalues.shape[1]} "
            f"do not match d_model {params.d_model}"
        )
    k = _split_heads(tt.matmul(keyvalues, params.w_k) + params.b_k, params.head_count)
    v = _split_heads(tt.matmul(keyvalues, params.w_v) + params.b_v, params.head_count)
    return _attend(q, k, v, params)


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1: LayerNormParams
    ffn: FeedForwardParams
    ln2: LayerNormParams


def self_attention_encoder(tokens: TokenSequence, params: EncoderLayerParams) -> TokenSequence:
    """Post-norm transformer encoder layer; preserves token count and dim."""
    x = tokens.features
    att, _ = multi_head_attention(x, x, params.attn)
    x = tt.layer_norm(x + att, params.ln1.gamma, params.ln1.beta)
    h = tt.matmul(x, params.ffn.w1) + params.ffn.b1
    h = tt.matmul(tt.gelu(h), params.ffn.w2) + params.ffn.b2
    x = tt.layer_norm(x + h, params.ln2.gamma, params.ln2.beta)
    return tokens.with_features(x)


@dataclass
class CrossModalParams:
    attn_img: AttentionParams
    attn_kp: AttentionParams
    switch: ModalitySwitchParams | None
    ln_img: LayerNormParams
    ln_kp: LayerNormParams


@dataclass
class CrossModalOutput:
    """Attended sequences plus the intermediates the losses need."""

    img_att: TokenSequence | None
    kp_att: TokenSequence
    kp_mha: Tensor | None   # retained for the consistency loss (gradients kept)
    kp_mlp: Tensor | None
    attn_img_over_kp: np.ndarray | None = None
    attn_kp_over_img: np.ndarray | None = None

    def require_img_att(self) -> TokenSequence:
        if self.img_att is None:
            raise ContractViolation("image-branch output requested but the image modality was absent")
        return self.img_att


def switch_mlp(x: Tensor, params: ModalitySwitchParams) -> Tensor:
    h = tt.gelu(tt.matmul(x, params.w1) + params.b1)
    return tt.matmul(h, params.w2) + params.b2


def kp_attended(kp_features: Tensor, delta: Tensor, params: CrossModalParams) -> Tensor:
    """The keypoint-side add-and-norm; shared by both modality cases."""
    return tt.layer_norm(kp_features + delta, params.ln_kp.gamma, params.ln_kp.beta)


def cross_modal_attention(img: TokenSequence | None, kp: TokenSequence,
                          params: CrossModalParams) -> CrossModalOutput:
    """Key/value exchange between modalities, or the switch-MLP fallback.

    With the image present, each branch attends over the other branch's
    keys/values and the keypoint side additionally runs its switch MLP so the
    consistency loss can compare the two. With the image absent, only the MLP
    path executes; no image-side parameter or tensor is touched.
    """
    x_kp = kp.features
    mlp_out = switch_mlp(x_kp, params.switch) if params.switch is not None else None
    if img is None:
        delta = mlp_out if mlp_out is not None else tt.mul(x_kp, 0.0)
        return CrossModalOutput(None, kp.with_features(kp_attended(x_kp, delta, params)),
                                None, mlp_out)
    x_img = img.features
    if x_img.shape[1] != x_kp.shape[1]:
        raise DimensionError(
            f"cross-modal attention: token dims differ {x_img.shape[1]} vs {x_kp.shape[1]}"
        )
    # Each modality projects its own Q/K/V; the attention consumes the other
    # modality's key/value pairs (the exchange).
    q_img, k_img, v_img = project_qkv(x_img, params.attn_img)
    q_kp, k_kp, v_kp = project_qkv(x_kp, params.attn_kp)
    img_mha, a_img = _attend(q_img, k_kp, v_kp, params.attn_img)
    kp_mha, a_kp = _attend(q_kp, k_img, v_img, params.attn_kp)
    img_att = tt.layer_norm(x_img + img_mha, params.ln_img.gamma, params.ln_img.beta)
    kp_att = kp_attended(x_kp, kp_mha, params)
    return CrossModalOutput(
        img.with_features(img_att), kp.with_features(kp_att), kp_mha, mlp_out,
        attn_img_over_kp=a_img, attn_kp_over_img=a_kp,
    )


@dataclass
class FusionParams:
    """Pooled-feature fusion baselines (add / concat ablations)."""

    ln_img: LayerNormParams
    ln_kp: LayerNormParams
    proj_img: tuple[Tensor, Tensor] | None = None  # concat mode: (2D -> D)
    proj_kp: tuple[Tensor, Tensor] | None = None


def fuse_pooled(img: TokenSequence | None, kp: TokenSequence, mode: str,
                params: FusionParams) -> tuple[TokenSequence | None, TokenSequence]:
    """Replace cross-modal attention with add/concat of pooled features.

    Without the image modality there is nothing to fuse; both sequences pass
    through unchanged (these baselines cannot exploit image-free samples).
    """
    if img is None:
        return None, kp
    g_img = tt.tmean(img.features, axis=0)
    g_kp = tt.tmean(kp.features, axis=0)
    if mode == "add":
        d_img = tt.broadcast_rows(g_kp, img.count)
        d_kp = tt.broadcast_rows(g_img, kp.count)
    elif mode == "concat":
        wi, bi = params.proj_img
        wk, bk = params.proj_kp
        cat_img = tt.concat([img.features, tt.broadcast_rows(g_kp, img.count)], axis=1)
        cat_kp = tt.concat([kp.features, tt.broadcast_rows(g_img, kp.count)], axis=1)
        d_img = tt.matmul(cat_img, wi) + bi
        d_kp = tt.matmul(cat_kp, wk) + bk
    else:
        raise ValueError(f"fuse_pooled: unknown mode {mode!r}")
    img_out = tt.layer_norm(img.features + d_img, params.ln_img.gamma, params.ln_img.beta)
    kp_out = tt.layer_norm(kp.features + d_kp, params.ln_kp.gamma, params.ln_kp.beta)
    return img.with_features(img_out), kp.with_features(kp_out)


@dataclass
class BlockParams:
    front_img: list[EncoderLayerParams]
    front_kp: list[EncoderLayerParams]
    cross: list[CrossModalParams]
    fusion: FusionParams | None
    back_img: list[EncoderLayerParams]
    back_kp: list[EncoderLayerParams]


@dataclass
class StackOutput:
    img: TokenSequence | None
    kp: TokenSequence
    consistency_pairs: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    attn_maps: list[dict] = field(default_factory=list)


def run_block(img: TokenSequence | None, kp: TokenSequence | None, params: BlockParams,
              fusion_mode: str, block_index: int = 0) -> StackOutput:
    """One block: per-branch front self-attention, interaction, back self-attention.

    Either branch may be absent (single-branch ablations, image-free samples);
    the interaction step requires both and is skipped otherwise.
    """
    out = StackOutput(img, kp)
    for layer_img, layer_kp in zip(params.front_img, params.front_kp):
        if out.img is not None:
            out.img = self_attention_encoder(out.img, layer_img)
        if out.kp is not None:
            out.kp = self_attention_encoder(out.kp, layer_kp)
    if fusion_mode == "cross_attention" and out.kp is not None:
        for mi, cm in enumerate(params.cross):
            res = cross_modal_attention(out.img, out.kp, cm)
            out.img, out.kp = res.img_att, res.kp_att
            if res.kp_mha is not None and res.kp_mlp is not None:
                out.consistency_pairs.append((res.kp_mha, res.kp_mlp))
            if res.attn_img_over_kp is not None:
                out.attn_maps.append({
                    "block": block_index, "module": mi,
                    "img_over_kp": res.attn_img_over_kp,
                    "kp_over_img": res.attn_kp_over_img,
                })
    elif fusion_mode in ("add", "concat") and out.kp is not None:
        out.img, out.kp = fuse_pooled(out.img, out.kp, fusion_mode, params.fusion)
    elif fusion_mode not in ("cross_attention", "add", "concat", "none"):
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")
    for layer_img, layer_kp in zip(params.back_img, params.back_kp):
        if out.img is not None:
            out.img = self_attention_encoder(out.img, layer_img)
        if out.kp is not None:
            out.kp = self_attention_encoder(out.kp, layer_kp)
    return out


def run_stack(img: TokenSequence | None, kp: TokenSequence | None, blocks: list[BlockParams],
              fusion_mode: str) -> StackOutput:
    """The full stack of blocks; collects consistency pairs and attention maps."""
    pairs: list[tuple[Tensor, Tensor]] = []
    maps: list[dict] = []
    for bi, bp in enumerate(blocks):
        res = run_block(img, kp, bp, fusion_mode, block_index=bi)
        img, kp = res.img, res.kp
        pairs.extend(res.consistency_pairs)
        maps.extend(res.attn_maps)
    return StackOutput(img, kp, pairs, maps)

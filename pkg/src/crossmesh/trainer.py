"""Training, evaluation, and benchmarking over the synthetic data streams.

Training is deterministic: parameter init comes from the config seed, sample
streams are pure functions of (spec, index), batches cycle through the stream
in index order, and gradients accumulate per sample in index order on private
tapes. The same config therefore reproduces the same loss curve bitwise.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .config import RunConfig
from .metrics import EvalReport, SampleErrors, score_sample, summarize
from .model import ForwardResult, TwoBranchModel
from .optim import AdamState, adam_step
from .synth import PoseSample, SynthWorld, make_dataset
from .tensor import ContractViolation, Tensor, backward, no_grad, tape_scope

LOSS_COLUMNS = ("map", "kp_vertex", "kp_joint", "kp_joint_reg", "kp_reproj",
                "img_vertex", "img_joint", "img_joint_reg", "img_reproj", "consistency")


def build_world(model: TwoBranchModel, body_scale: float) -> SynthWorld:
    cfg = model.config
    return SynthWorld(model.template, model.joint_regressor.weights,
                      model.keypoint_regressor, (cfg.image_h, cfg.image_w), body_scale)


def sample_loss(model: TwoBranchModel, sample: PoseSample) -> tuple[Tensor, L.LossReport, ForwardResult]:
    """Forward + routed loss for one sample (teacher-forced keypoints)."""
    fwd = model.forward(sample, teacher_force=True)
    outputs = {
        "kp": fwd.predictions.get("kp"),
        "img": fwd.predictions.get("img"),
        "maps": fwd.maps,
        "consistency_pairs": fwd.consistency_pairs,
    }
    total, report = L.total_loss(
        sample.dataset_type, outputs, model.targets_for(sample),
        model.config.loss_weights, model.joint_regressor,
        use_consistency=model.config.use_consistency,
        mocap_reproj=model.config.mocap_reproj,
    )
    return total, report, fwd


def batch_gradients(model: TwoBranchModel, batch: list[PoseSample]
                    ) -> tuple[dict[str, np.ndarray], list[L.LossReport]]:
    """Per-sample backward passes with index-ordered gradient accumulation."""
    grads: dict[str, np.ndarray] = {}
    reports: list[L.LossReport] = []
    for sample in batch:
        with tape_scope():
            total, report, _ = sample_loss(model, sample)
            backward(total)
        reports.append(report)
        for name, p in model.named_parameters().items():
            if p.grad is None:
                continue
            acc = grads.get(name)
            grads[name] = p.grad if acc is None else acc + p.grad
            p.grad = None
    n = len(batch)
    for name in grads:
        grads[name] = grads[name] / n
    return grads, reports


def merge_reports(reports: list[L.LossReport]) -> L.LossReport:
    """Batch report: per-term mean over the samples where the term is active."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for r in reports:
        for k, v in r.terms.items():
            sums[k] = sums.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1
    terms = {k: sums[k] / counts[k] for k in sums}
    total = float(np.mean([r.total for r in reports])) if reports else 0.0
    return L.LossReport(terms, total)


@dataclass
class TrainResult:
    model: TwoBranchModel
    adam: AdamState
    loss_history: list[L.LossReport] = field(default_factory=list)
    eval_history: list[tuple[int, list[EvalReport]]] = field(default_factory=list)
    train_mpjpe: list[tuple[int, float]] = field(default_factory=list)


def training_mpjpe(model: TwoBranchModel, samples: list[PoseSample]) -> float:
    """Fused-branch MPJPE over samples with 3D targets, teacher-forced."""
    errs = []
    with no_grad():
        for s in samples:
            if s.joints_3d is None:
                continue
            fwd = model.forward(s, teacher_force=True)
            pred = fwd.fused.detach()
            errs.append(score_sample(pred.joints, s.joints_3d, pred.vertices_full,
                                     s.vertices_3d, root=model.config.root_joint).mpjpe)
    return float(np.mean(errs)) if errs else float("nan")


def evaluate_model(model: TwoBranchModel, samples: list[PoseSample]) -> list[EvalReport]:
    """Inference-path metrics (decoded keypoints), per branch plus fused."""
    per_branch: dict[str, list[SampleErrors]] = {}
    with no_grad():
        for s in samples:
            if s.joints_3d is None or s.vertices_3d is None:
                continue
            fwd = model.forward(s, teacher_force=False)
            preds = dict(fwd.predictions)
            preds["fused"] = fwd.fused
            for name, pred in preds.items():
                if pred is None:
                    continue
                d = pred.detach()
                per_branch.setdefault(name, []).append(
                    score_sample(d.joints, s.joints_3d, d.vertices_full, s.vertices_3d,
                                 root=model.config.root_joint)
                )
    order = [b for b in ("kp", "img", "fused") if b in per_branch]
    return [summarize(b, per_branch[b]) for b in order]


def _write_loss_log(path: str, history: list[L.LossReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "total") + LOSS_COLUMNS)
        for i, rep in enumerate(history):
            w.writerow([i, repr(rep.total)] + [repr(rep.terms[c]) if c in rep.terms else ""
                                               for c in LOSS_COLUMNS])


def _write_eval_log(path: str, history: list[tuple[int, list[EvalReport]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "branch", "mpjpe", "pa_mpjpe", "pve"))
        for step, reports in history:
            for r in reports:
                w.writerow([step, r.branch, repr(r.mpjpe), repr(r.pa_mpjpe), repr(r.pve)])


def train(run: RunConfig, out_dir: str | None = None,
          stop_mpjpe_ratio: float | None = None, mpjpe_every: int = 0) -> TrainResult:
    """The full loop: cycle batches, route losses, Adam, log, evaluate.

    ``stop_mpjpe_ratio`` enables early stopping once the teacher-forced
    training MPJPE falls below that fraction of its step-0 value (checked
    every ``mpjpe_every`` steps).
    """
    run.validate()
    model = TwoBranchModel(run.model)
    world = build_world(model, run.train_data.body_scale)
    train_samples = make_dataset(run.train_data, world)
    eval_samples = make_dataset(run.eval_data, world)
    if not train_samples:
        raise ContractViolation("training stream is empty")
    adam = AdamState(lr=run.train.lr, beta1=run.train.beta1, beta2=run.train.beta2, eps=run.train.eps)
    rng = np.random.default_rng(run.model.seed + 1)
    result = TrainResult(model, adam)

    base_mpjpe = None
    if stop_mpjpe_ratio is not None or mpjpe_every:
        base_mpjpe = training_mpjpe(model, train_samples)
        result.train_mpjpe.append((0, base_mpjpe))

    n = len(train_samples)
    bsz = run.train.batch_size
    for step in range(run.train.steps):
        batch = [train_samples[(step * bsz + i) % n] for i in range(bsz)]
        try:
            grads, reports = batch_gradients(model, batch)
        except ContractViolation as exc:
            raise ContractViolation(f"step {step}: {exc}") from exc
        report = merge_reports(reports)
        if not np.isfinite(report.total):
            raise ContractViolation(f"step {step}: non-finite loss {report.total}")
        adam_step(model.named_parameters(), grads, adam)
        result.loss_history.append(report)
        if run.train.eval_every and (step + 1) % run.train.eval_every == 0:
            result.eval_history.append((step + 1, evaluate_model(model, eval_samples)))
        if mpjpe_every and (step + 1) % mpjpe_every == 0:
            cur = training_mpjpe(model, train_samples)
            result.train_mpjpe.append((step + 1, cur))
            if stop_mpjpe_ratio is not None and base_mpjpe and cur < stop_mpjpe_ratio * base_mpjpe:
                break
    _ = rng  # reserved for future stochastic batching; kept in the checkpoint

    result.eval_history.append((len(result.loss_history), evaluate_model(model, eval_samples)))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        from .checkpoint import save_checkpoint

        save_checkpoint(os.path.join(out_dir, "model.xfc"), model.named_parameters(), run,
                        adam=adam, step=len(result.loss_history),
                        rng_state=rng.bit_generator.state)
        _write_loss_log(os.path.join(out_dir, "train_log.csv"), result.loss_history)
        _write_eval_log(os.path.join(out_dir, "eval_log.csv"), result.eval_history)
    return result


def resume_steps(model: TwoBranchModel, run: RunConfig, adam: AdamState, start_step: int,
                 steps: int) -> list[L.LossReport]:
    """Continue training from a restored state for `steps` more steps."""
    world = build_world(model, run.train_data.body_scale)
    train_samples = make_dataset(run.train_data, world)
    n = len(train_samples)
    bsz = run.train.batch_size
    history = []
    for step in range(start_step, start_step + steps):
        batch = [train_samples[(step * bsz + i) % n] for i in range(bsz)]
        grads, reports = batch_gradients(model, batch)
        adam_step(model.named_parameters(), grads, adam)
        history.append(merge_reports(reports))
    return history


# -- gradient-flow audit -------------------------------------------------------


def gradient_audit(model: TwoBranchModel, batch: list[PoseSample]) -> dict[str, float]:
    """Per-parameter gradient norms over one batch (catches stopped gradients)."""
    grads, _ = batch_gradients(model, batch)
    return {name: float(np.linalg.norm(g)) for name, g in grads.items()}


# -- FLOP accounting -------------------------------------------------------------


def attention_flops(t_q: int, t_kv: int, d_model: int) -> dict[str, float]:
    """Multiply-add counts (x2) for one attention application."""
    linear = 2.0 * (t_q + 2 * t_kv) * d_model * d_model + 2.0 * t_q * d_model * d_model
    quadratic = 2.0 * t_q * t_kv * d_model * 2
    return {"linear": linear, "quadratic": quadratic}


def flop_estimate(model: TwoBranchModel) -> dict[str, float]:
    """Analytic per-forward FLOP breakdown from the configuration."""
    cfg = model.config
    h, w = cfg.image_h, cfg.image_w
    conv = 0.0
    cin = 3
    oh, ow = h, w
    for cout in cfg.backbone_channels:
        oh, ow = oh // 2, ow // 2
        conv += 2.0 * cout * cin * 9 * oh * ow
        cin = cout
    chans = cfg.backbone_channels
    dec = [(chans[4], chans[3], h // 16), (chans[3], chans[2], h // 8), (chans[2], chans[1], h // 4)]
    for ci, co, out_hw in dec:
        conv += 2.0 * co * ci * 16 * out_hw * (out_hw * w // h)
    conv += 2.0 * (cfg.keypoint_count * 3) * chans[1] * (h // 4) * (w // 4)

    t_img, t_kp, d = cfg.image_tokens, cfg.keypoint_tokens, cfg.d_model
    att_linear = att_quad = 0.0
    bc = cfg.block
    per_branch_layers = (bc.n_front + bc.n_back) * bc.n_blocks
    for t in ((t_img, t_kp) if cfg.branches == "both" else
              ((t_img,) if cfg.branches == "image_only" else (t_kp,))):
        fl = attention_flops(t, t, d)
        ffn = 2.0 * t * d * 2 * d * 2
        att_linear += per_branch_layers * (fl["linear"] + ffn)
        att_quad += per_branch_layers * fl["quadratic"]
    if bc.fusion_mode == "cross_attention" and cfg.branches == "both":
        n_cross = bc.n_cross * bc.n_blocks
        for tq, tkv in ((t_img, t_kp), (t_kp, t_img)):
            fl = attention_flops(tq, tkv, d)
            att_linear += n_cross * fl["linear"]
            att_quad += n_cross * fl["quadratic"]
        att_linear += n_cross * 2.0 * t_kp * d * d * 2  # switch MLP

    heads = 0.0
    branch_count = 2 if cfg.branches == "both" else 1
    t_by_branch = {"both": (t_kp, t_img), "image_only": (t_img,), "keypoint_only": (t_kp,)}[cfg.branches]
    for t in t_by_branch:
        heads += 2.0 * (cfg.coarse_vertices + cfg.joint_count) * d * 3 + 2.0 * d * d + 2.0 * d * 3
    heads += branch_count * 2.0 * 3 * cfg.full_vertices * cfg.coarse_vertices  # upsample
    heads += branch_count * 2.0 * cfg.joint_count * cfg.full_vertices * 3      # regressor

    gcn = 0.0
    if cfg.branches != "image_only":
        k, dg = cfg.keypoint_count, cfg.gcn_width
        gcn = 2.0 * k * k * 2 + 2.0 * k * 2 * dg + (cfg.gcn_depth - 1) * (2.0 * k * k * dg + 2.0 * k * dg * dg)

    total = conv + att_linear + att_quad + heads + gcn
    return {"conv": conv, "attention_linear": att_linear, "attention_quadratic": att_quad,
            "heads": heads, "gcn": gcn, "total": total}


# -- benchmark -------------------------------------------------------------------


@dataclass
class BenchReport:
    median_ms: float
    p95_ms: float
    iters: int
    threads: int
    tokens_per_sec: float
    flops: dict[str, float]
    dtype: str


def benchmark(model: TwoBranchModel, sample: PoseSample, iters: int = 50,
              threads: int = 1, warmup: int = 10, dtype: str = "float64") -> BenchReport:
    """Median/p95 wall-clock of the full forward pipeline, single-threaded."""
    from .tensor import set_default_dtype

    if iters < 1:
        raise ValueError("iters must be >= 1")

    def run_once():
        model.forward(sample, teacher_force=False)

    def timed() -> list[float]:
        times = []
        with no_grad():
            for _ in range(max(warmup, 10)):
                run_once()
            for _ in range(iters):
                t0 = time.perf_counter()
                run_once()
                times.append((time.perf_counter() - t0) * 1000.0)
        return times

    restore = None
    if dtype == "float32":
        restore = {name: p.data for name, p in model.named_parameters().items()}
        for p in model.named_parameters().values():
            p.data = p.data.astype(np.float32)
        set_default_dtype(np.float32)
    try:
        if threads == 1:
            try:
                from threadpoolctl import threadpool_limits

                with threadpool_limits(limits=1):
                    times = timed()
            except ImportError:
                times = timed()
        else:
            times = timed()
    finally:
        if restore is not None:
            set_default_dtype(np.float64)
            for name, p in model.named_parameters().items():
                p.data = restore[name]

    med = float(np.median(times))
    p95 = float(np.percentile(times, 95))
    cfg = model.config
    tokens = cfg.image_tokens + cfg.keypoint_tokens
    return BenchReport(med, p95, iters, threads, tokens / (med / 1000.0),
                       flop_estimate(model), dtype)

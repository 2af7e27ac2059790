"""Command-line surface: train / eval / bench / gen-data / export-attn.

Config and data-spec files are JSON. Any contract violation exits nonzero
with the reason on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .checkpoint import load_checkpoint, restore_model_params
from .config import ConfigError, DataSpec, RunConfig, _from_dict, load_config
from .model import TwoBranchModel
from .synth import SAMPLE_MAGIC, load_samples, make_dataset, save_samples
from .tensor import ContractViolation, DimensionError, no_grad
from .trainer import benchmark, build_world, evaluate_model, train


def _load_run_and_model(ckpt_path: str) -> tuple[RunConfig, TwoBranchModel, dict]:
    ck = load_checkpoint(ckpt_path)
    run: RunConfig = ck["config"]
    model = TwoBranchModel(run.model)
    restore_model_params(model.named_parameters(), ck["arrays"])
    return run, model, ck


def _load_data_arg(path: str, run: RunConfig, model: TwoBranchModel):
    """A data argument is either an XFS1 sample file or a DataSpec JSON."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == SAMPLE_MAGIC:
        return load_samples(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = _from_dict(DataSpec, doc.get("data", doc))
    spec.validate()
    return make_dataset(spec, build_world(model, spec.body_scale))


def cmd_train(args) -> int:
    run = load_config(args.config)
    result = train(run, out_dir=args.out)
    for i, rep in enumerate(result.loss_history):
        if args.verbose or (i + 1) % max(1, run.train.log_every) == 0:
            print(f"step {i}: {rep}")
    step, reports = result.eval_history[-1]
    for r in reports:
        print(f"eval[{step}] {r.branch}: mpjpe={r.mpjpe:.6g} pa_mpjpe={r.pa_mpjpe:.6g} pve={r.pve:.6g}")
    print(f"wrote checkpoint and logs to {args.out}")
    return 0


def cmd_eval(args) -> int:
    run, model, _ = _load_run_and_model(args.ckpt)
    samples = _load_data_arg(args.data, run, model)
    reports = evaluate_model(model, samples)
    if not reports:
        raise ContractViolation("no evaluable samples (3D targets required)")
    for r in reports:
        print(f"{r.branch}: mpjpe={r.mpjpe:.6g} pa_mpjpe={r.pa_mpjpe:.6g} pve={r.pve:.6g} "
              f"({len(r.samples)} samples)")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("branch", "mpjpe", "pa_mpjpe", "pve", "samples"))
            for r in reports:
                w.writerow([r.branch, repr(r.mpjpe), repr(r.pa_mpjpe), repr(r.pve), len(r.samples)])
        print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    run, model, _ = _load_run_and_model(args.ckpt)
    spec = DataSpec(counts={"image_3d": 1}, seed=run.eval_data.seed,
                    body_scale=run.eval_data.body_scale)
    sample = make_dataset(spec, build_world(model, spec.body_scale))[0]
    rep = benchmark(model, sample, iters=args.iters, threads=args.threads, dtype=args.dtype)
    out = {
        "median_ms": rep.median_ms, "p95_ms": rep.p95_ms, "iters": rep.iters,
        "threads": rep.threads, "tokens_per_sec": rep.tokens_per_sec,
        "dtype": rep.dtype, "flops": rep.flops,
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_gen_data(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    from .config import ModelConfig

    model_cfg = _from_dict(ModelConfig, doc.get("model", {})) if isinstance(doc, dict) else ModelConfig()
    model_cfg.validate()
    spec = _from_dict(DataSpec, doc.get("data", doc))
    spec.validate()
    model = TwoBranchModel(model_cfg)
    samples = make_dataset(spec, build_world(model, spec.body_scale))
    save_samples(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_export_attn(args) -> int:
    run, model, _ = _load_run_and_model(args.ckpt)
    if model.config.block.fusion_mode != "cross_attention" or model.config.branches != "both":
        raise ContractViolation("attention export needs the two-branch cross-attention configuration")
    samples = (_load_data_arg(args.data, run, model) if args.data
               else make_dataset(run.eval_data, build_world(model, run.eval_data.body_scale)))
    if not 0 <= args.sample < len(samples):
        raise ContractViolation(f"sample index {args.sample} outside stream of {len(samples)}")
    with no_grad():
        fwd = model.forward(samples[args.sample], teacher_force=False)
    if not fwd.attn_maps:
        raise ContractViolation("forward pass produced no cross-attention matrices "
                                "(sample lacks the image modality?)")
    roles_img = fwd.token_roles["img"]
    roles_kp = fwd.token_roles["kp"]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("block", "module", "direction", "query_index", "query_role",
                    "key_index", "key_role", "weight"))
        for entry in fwd.attn_maps:
            for direction, q_roles, k_roles in (
                ("img_over_kp", roles_img, roles_kp),
                ("kp_over_img", roles_kp, roles_img),
            ):
                mat = entry[direction]
                for qi in range(mat.shape[0]):
                    for ki in range(mat.shape[1]):
                        w.writerow([entry["block"], entry["module"], direction,
                                    qi, q_roles[qi], ki, k_roles[ki], repr(float(mat[qi, ki]))])
    print(f"wrote attention matrices for sample {args.sample} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossmesh",
                                description="Two-branch cross-modal body-mesh regression tooling")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a data spec or sample file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="optional CSV output path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="single-thread forward-latency benchmark")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen-data", help="materialize a synthetic sample stream to a binary file")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    x = sub.add_parser("export-attn", help="export cross-attention matrices for one sample as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--sample", type=int, required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--data", default=None)
    x.set_defaults(func=cmd_export_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, ConfigError, DimensionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

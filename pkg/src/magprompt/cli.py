"""Command-line entry points: synth, pretrain, tune, ablate, verify.

Every command resolves one flat configuration (defaults < --config file <
flag overrides), writes it next to its outputs, and emits files that are a
pure function of that config plus the dataset bytes. Exit codes: 0 success,
1 property failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .backbone import load_backbone, pretrain_edgepred, save_backbone
from .config import RunConfig, load_config
from .graph import (GraphDataset, as_node_dataset, disjoint_union, load_dataset,
                    sbm_synthesize, save_dataset)
from .prompt import save_prompt
from .trainer import ablation_grid, multi_seed
from .verify import run_all


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE", help="flat JSON config file")
    for f in dataclasses.fields(RunConfig):
        sub.add_argument(f"--{f.name}", default=argparse.SUPPRESS, metavar="V",
                         help=f"override {f.name}")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names}
    return load_config(getattr(args, "config", None), overrides)


def _load_data(cfg: RunConfig) -> GraphDataset:
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset)
    g = sbm_synthesize(cfg.blocks, cfg.per_block, cfg.p_in, cfg.p_out,
                       cfg.data_seed, cfg.noise)
    return as_node_dataset(g)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _outdir(cfg)
    data = _load_data(cfg)
    save_dataset(data, out / "dataset")
    cfg.save(out / "config.json")
    g = data.graphs[0]
    print(f"wrote {out / 'dataset'}: {g.num_nodes} nodes, {g.num_edges} edges, "
          f"{data.num_classes} classes")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = _outdir(cfg)
    data = _load_data(cfg)
    if data.task == "node":
        g = data.graphs[0]
    else:
        g, _ = disjoint_union(data.graphs)
    ckpt = pretrain_edgepred(g, cfg.arch, cfg.dims_for(data.feature_dim),
                             cfg.pretrain_epochs, cfg.lr, cfg.neg_ratio,
                             cfg.seeds[0])
    save_backbone(ckpt, out / "backbone.json")
    cfg.save(out / "config.json")
    curve = ckpt.meta["loss_curve"]
    with (out / "metrics.jsonl").open("w") as fh:
        for epoch, loss in enumerate(curve):
            fh.write(json.dumps({"epoch": epoch, "pretrain_loss": loss},
                                sort_keys=True) + "\n")
    print(f"wrote {out / 'backbone.json'} "
          f"(loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} epochs)")
    return 0


def _require_checkpoint(cfg: RunConfig):
    if cfg.checkpoint is None:
        raise ValueError("this command needs --checkpoint (run pretrain first)")
    return load_backbone(cfg.checkpoint)


def cmd_tune(args) -> int:
    cfg = _resolve_config(args)
    ckpt = _require_checkpoint(cfg)
    data = _load_data(cfg)
    out = _outdir(cfg)
    results, aggregate = multi_seed(data, ckpt, cfg.variant, cfg)

    cfg.save(out / "config.json")
    _write_json(out / "summary.json", aggregate)
    with (out / "metrics.jsonl").open("w") as fh:
        for seed, res in zip(cfg.seeds, results):
            for rec in res.metrics.records:
                fh.write(json.dumps({"seed": int(seed), **rec}, sort_keys=True) + "\n")
    with (out / "usage.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "epoch", "layer", "m", "s_m"])
        for seed, res in zip(cfg.seeds, results):
            for epoch, layer, m, s_m in res.metrics.usage_rows:
                writer.writerow([int(seed), epoch, layer, m, repr(s_m)])
    for seed, res in zip(cfg.seeds, results):
        if res.prompt is not None:
            save_prompt(res.prompt, out / f"prompt_seed{seed}.json")
    print(f"{cfg.variant}: {aggregate['metric']} "
          f"{aggregate['mean_test_metric']:.4f} +/- {aggregate['std_test_metric']:.4f} "
          f"over seeds {aggregate['seeds']}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    ckpt = _require_checkpoint(cfg)
    data = _load_data(cfg)
    out = _outdir(cfg)
    rows = ablation_grid(data, ckpt, cfg)
    cfg.save(out / "config.json")
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rw", "ep", "mean", "std", "seeds"])
        for row in rows:
            writer.writerow([int(row["rw"]), int(row["ep"]),
                             repr(row["mean"]), repr(row["std"]), row["seeds"]])
    for row in rows:
        print(f"rw={int(row['rw'])} ep={int(row['ep'])} "
              f"mean={row['mean']:.4f} std={row['std']:.4f}")
    return 0


def cmd_verify(args) -> int:
    results = run_all(corrupt=getattr(args, "corrupt", None))
    failed = [r for r in results if not r["passed"]]
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['name']}: max_error={r['max_error']:.3e} "
              f"threshold={r['threshold']:.1e}")
    if failed:
        print(f"{len(failed)} of {len(results)} properties failed: "
              + ", ".join(r["name"] for r in failed))
        return 1
    print(f"all {len(results)} properties passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magprompt",
        description="Prompt tuning for frozen message-passing graph encoders")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, func, blurb in (
            ("synth", cmd_synth, "generate a block-model node dataset"),
            ("pretrain", cmd_pretrain, "pre-train a backbone with link prediction"),
            ("tune", cmd_tune, "train a prompt and head against a checkpoint"),
            ("ablate", cmd_ablate, "run the reweighting/prompt ablation grid")):
        sub = subs.add_parser(name, help=blurb)
        _add_config_flags(sub)
        sub.set_defaults(func=func)

    sub = subs.add_parser("verify", help="run the property suite")
    sub.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    sub.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

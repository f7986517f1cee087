"""Command-line driver: generate / train / eval / analyze-graph.

Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 I/O failure.
Parallel seed training is capped by the PI_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .data import DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .envs import ENV_NAMES, SimulationError, make_spec, ground_truth_global_graph, local_graph_family
from .graphs import AdjacencyMatrix, GraphFamily, GraphError, global_criterion, local_criterion, permutation_alignment
from .evaluation import (
    entanglement_export,
    extract_learned_graph,
    mcc_score,
    posterior_means,
    quartile_summary,
)
from .models import load_checkpoint
from .training import TrainConfig, TrainingDiverged, evaluate_breakdown, train_run, write_history_csv

USAGE_ERROR, NUMERIC_ERROR, IO_ERROR = 2, 3, 4


def strip_optimizer_tensors(model):
    for name in [n for n in model.params if "::" in n]:
        model.params.pop(name)
    return model


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paramid", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a trajectory dataset")
    g.add_argument("--env", required=True, choices=ENV_NAMES)
    g.add_argument("--n", required=True, type=int, help="number of trajectories")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--horizon", type=int, default=0, help="override the env default")
    g.add_argument("--dt", type=float, default=0.0)
    g.add_argument("--token-mode", choices=("per-dim", "per-object"), default="")
    g.add_argument("--dtype", choices=("float32", "float64"), default="float32")

    t = sub.add_parser("train", help="train one decoder over one or more seeds")
    t.add_argument("--config", help="JSON file with TrainConfig fields (flags override)")
    t.add_argument("--dataset", help="path to a .traj file")
    t.add_argument("--decoder", choices=("mlp", "transformer", "vcd", "spartan"))
    t.add_argument("--seeds", type=int, default=0, help="train this many seeds (base..base+n-1)")
    t.add_argument("--seed-base", type=int, default=0)
    t.add_argument("--seed-list", help="comma-separated explicit seed list")
    t.add_argument("--out", default="runs", help="output directory")
    t.add_argument("--resume", help="checkpoint to resume the single-seed run from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--lambda-logit", type=float)
    t.add_argument("--batch-size", type=int)

    e = sub.add_parser("eval", help="score a checkpoint against a dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--out", help="write the JSON report here (default: stdout)")
    e.add_argument("--scatter", help="also write the entanglement scatter CSV here")
    e.add_argument("--aggregate", help="directory of seed-*/report.json files to summarise")
    e.add_argument("--max-rows", type=int, default=256)

    a = sub.add_parser("analyze-graph", help="run the graphical criteria on graph JSON files")
    a.add_argument("--graph", required=True, help="graph JSON ({rows, cols, data})")
    a.add_argument("--family", nargs="*", default=[], help="local graph JSON files")
    a.add_argument("--out", help="write the verdict JSON here (default: stdout)")
    return p


# ---------------------------------------------------------------------------
# generate


def _cmd_generate(args) -> int:
    overrides = {}
    if args.horizon:
        overrides["horizon"] = args.horizon
    if args.dt:
        overrides["dt"] = args.dt
    if args.token_mode:
        overrides["token_mode"] = args.token_mode
    spec = make_spec(args.env, **overrides)
    if args.n < 1:
        print("error: --n must be at least 1", file=sys.stderr)
        return USAGE_ERROR
    ds = generate_dataset(spec, args.n, args.seed, dtype=args.dtype)
    write_dataset(ds, args.out)
    print(
        f"wrote {args.out}: env={spec.env} N={args.n} T={spec.horizon} "
        f"d={spec.state_dim} n={spec.param_dim} seed={args.seed}"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _load_train_config(args) -> tuple[TrainConfig, str, list[int]]:
    file_cfg = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
    dataset_path = args.dataset or file_cfg.pop("dataset", None)
    if not dataset_path:
        raise ValueError("a dataset is required (--dataset or config key 'dataset')")
    seeds = file_cfg.pop("seeds", [0])
    out_dir = file_cfg.pop("output_dir", None)
    if out_dir and args.out == "runs":
        args.out = out_dir
    if "env" not in file_cfg:
        header = read_dataset(dataset_path).spec
        file_cfg["env"] = header.env
    cfg = TrainConfig.from_dict(file_cfg)
    if args.decoder:
        cfg = replace(cfg, decoder=args.decoder)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.pretrain_epochs is not None:
        cfg = replace(cfg, pretrain_epochs=args.pretrain_epochs)
    if args.lambda_logit is not None:
        cfg = replace(cfg, lambda_logit=args.lambda_logit)
    if args.batch_size is not None:
        cfg = replace(cfg, batch_size=args.batch_size)
    if args.seed_list:
        seeds = [int(s) for s in args.seed_list.split(",")]
    elif args.seeds:
        seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    return cfg, dataset_path, list(seeds)


def _train_one_seed(cfg_dict: dict, dataset_path: str, seed: int, out_dir: str, resume):
    cfg = replace(TrainConfig.from_dict(cfg_dict), seed=seed)
    dataset = read_dataset(dataset_path)
    seed_dir = os.path.join(out_dir, f"seed-{seed}")
    os.makedirs(seed_dir, exist_ok=True)
    result = train_run(cfg, dataset, checkpoint_dir=seed_dir, resume_from=resume)
    write_history_csv(result.history, os.path.join(seed_dir, "history.csv"))
    with open(os.path.join(seed_dir, "train_meta.json"), "w") as fh:
        json.dump(
            {
                "seed": seed,
                "target_loss": result.target_loss,
                "switch_epoch": result.switch_epoch,
                "final": vars(result.history[-1]),
                "config": cfg.to_dict(),
            },
            fh,
            indent=2,
        )
    return seed_dir


def _cmd_train(args) -> int:
    cfg, dataset_path, seeds = _load_train_config(args)
    if args.resume and len(seeds) > 1:
        print("error: --resume applies to a single-seed run", file=sys.stderr)
        return USAGE_ERROR
    workers = int(os.environ.get("PI_THREADS", "1") or "1")
    jobs = [(cfg.to_dict(), dataset_path, s, args.out, args.resume) for s in seeds]
    try:
        if workers > 1 and len(jobs) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as pool:
                dirs = list(pool.map(_train_worker, jobs))
        else:
            dirs = [_train_worker(j) for j in jobs]
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    for d in dirs:
        print(f"trained {d}")
    return 0


def _train_worker(job):
    return _train_one_seed(*job)


# ---------------------------------------------------------------------------
# eval


def _graph_verdicts(model, dataset) -> dict:
    spec = dataset.spec
    extracted, raw = extract_learned_graph(model, dataset)
    truth = ground_truth_global_graph(spec)
    res = global_criterion(extracted)
    verdicts = {
        "extracted_graph": json.loads(extracted.to_json()),
        "pre_threshold": np.asarray(raw).tolist(),
        "global_criterion": json.loads(res.to_json()),
        "matches_ground_truth_up_to_permutation": permutation_alignment(truth, extracted)
        is not None,
        "ground_truth_global_criterion": json.loads(global_criterion(truth).to_json()),
        "ground_truth_local_criterion": json.loads(
            local_criterion(local_graph_family(spec)).to_json()
        ),
    }
    return verdicts


def _cmd_eval(args) -> int:
    if args.aggregate:
        reports = []
        for entry in sorted(os.listdir(args.aggregate)):
            path = os.path.join(args.aggregate, entry, "report.json")
            if os.path.isfile(path):
                with open(path) as fh:
                    reports.append(json.load(fh))
        if not reports:
            print("error: no seed-*/report.json files found", file=sys.stderr)
            return IO_ERROR
        summary = {
            "runs": len(reports),
            "mcc": quartile_summary([r["mcc"] for r in reports]),
            "rec_val": quartile_summary([r["rec_val"] for r in reports]),
        }
        out = json.dumps(summary, indent=2)
        _emit(out, args.out)
        return 0

    if not args.checkpoint or not args.dataset:
        print("error: eval needs --checkpoint and --dataset (or --aggregate)", file=sys.stderr)
        return USAGE_ERROR
    model, extra = load_checkpoint(args.checkpoint)
    strip_optimizer_tensors(model)
    dataset = read_dataset(args.dataset)
    rows = dataset.val_indices if len(dataset.val_indices) >= 500 else np.arange(len(dataset))
    latents = posterior_means(model, dataset.states[rows])
    report_mcc = mcc_score(dataset.params[rows], latents)
    cfg_dict = extra.get("config")
    cfg = TrainConfig.from_dict(cfg_dict) if cfg_dict else TrainConfig(env=dataset.spec.env)
    breakdown = evaluate_breakdown(model, dataset, cfg, epoch=-1, dual_raw=model.dual_raw,
                                   target_loss=1.0, phase2=False)
    report = {
        "mcc": report_mcc.mcc,
        "mcc_assignment": list(report_mcc.assignment),
        "r2": report_mcc.r2.tolist(),
        "rec_val": breakdown.rec,
        "path_val": breakdown.path,
        "decoder": model.decoder.kind,
        "env": dataset.spec.env,
    }
    if model.decoder.kind in ("vcd", "spartan"):
        report["graphs"] = _graph_verdicts(model, dataset)
    if args.scatter:
        entanglement_export(dataset.params[rows], latents, args.scatter)
        report["scatter_csv"] = args.scatter
    _emit(json.dumps(report, indent=2), args.out)
    return 0


def _emit(text: str, path) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# analyze-graph


def _cmd_analyze(args) -> int:
    with open(args.graph) as fh:
        graph = AdjacencyMatrix.from_json(fh.read())
    result = {"global_criterion": json.loads(global_criterion(graph).to_json())}
    if args.family:
        members = []
        for path in args.family:
            with open(path) as fh:
                members.append(AdjacencyMatrix.from_json(fh.read()))
        fam = GraphFamily(tuple(members))
        result["local_criterion"] = json.loads(local_criterion(fam).to_json())
    _emit(json.dumps(result, indent=2), args.out)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "generate":
            return _cmd_generate(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_analyze(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (OSError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_ERROR
    except (SimulationError, GraphError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())

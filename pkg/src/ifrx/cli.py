"""Command-line entry point: ``ifrx <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adapt, arnoldi, influence, linkgen, pipeline, receiver
from ._accel import configure_threads


def _config(args) -> pipeline.ExperimentConfig:
    return pipeline.ExperimentConfig.load(args.config) if getattr(args, "config", None) else pipeline.ExperimentConfig()


def cmd_default_config(args) -> int:
    sys.stdout.write(pipeline.ExperimentConfig().to_ini())
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    ds = linkgen.generate_dataset(cfg.link, args.seed, args.n, args.split)
    linkgen.save_dataset(args.out, ds)
    print(f"wrote {len(ds)} {args.split} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = linkgen.load_dataset(args.data)
    tc = cfg.train
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lr_max", args.lr_max)) if v is not None}
    if overrides:
        tc = dataclasses.replace(tc, **overrides)
    model = receiver.ToyRx(cfg.model, ds.config)
    theta, hist = receiver.train(model, model.init_params(args.seed), ds, tc, args.seed, log=print)
    receiver.save_model(args.out, model, theta, {"lr_max": tc.lr_max, "history": hist})
    print(f"wrote {model.n_params}-parameter model to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model, theta, _ = receiver.load_model(args.model)
    ds = linkgen.load_dataset(args.data)
    table = adapt.evaluate_model(model, theta, ds, args.bins, (ds.config.snr_db_min, ds.config.snr_db_max))
    for b in table["bins"]:
        print(f"{b['snr_lo']:7.2f} dB  n={b['count']:5d}  model {b['model']:.5f}  "
              f"ls {b['ls_lmmse']:.5f}  genie {b['genie_lmmse']:.5f}")
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_arnoldi(args) -> int:
    model, theta, _ = receiver.load_model(args.model)
    ds = linkgen.load_dataset(args.data)
    ac = pipeline.ArnoldiConfig(m=args.m, k=args.k, batch_size=args.batch, mode=args.mode, passes=args.passes)
    digest = arnoldi.source_digest(pipeline.file_hash(args.model), pipeline.file_hash(args.data), args.loss)

    def progress(j, m):
        if j % 10 == 0 or j == m:
            print(f"arnoldi step {j}/{m}", file=sys.stderr)

    basis, res, diag = pipeline.build_model_basis(model, theta, ds, args.loss, ac, args.seed, digest, progress)
    arnoldi.save_basis(args.out, basis, {"krylov_steps": res.m, "breakdown": res.breakdown, "truncation": diag})
    print(f"kept {basis.k} Ritz pairs; top |lambda| {np.abs(basis.eigenvalues[:5]).round(4).tolist()}")
    if diag and diag["diagnostic"]:
        print(f"elbow at k={diag['diagnostic']['elbow']}")
    return 0


def cmd_influence(args) -> int:
    model, theta, _ = receiver.load_model(args.model)
    train_set = linkgen.load_dataset(args.data)
    eval_set = linkgen.load_dataset(args.eval)
    basis = arnoldi.load_basis(args.basis)
    expected = arnoldi.source_digest(pipeline.file_hash(args.model), pipeline.file_hash(args.data), args.loss_train)
    if args.targets:
        ids = [int(t) for t in args.targets.split(",")]
    else:
        ids = [t.eval_index for t in adapt.select_targets(eval_set, model, theta, args.top_n)]
    cache = influence.GradCache(args.cache) if args.cache else None
    key = influence.GradCache.key(pipeline.file_hash(args.model), pipeline.file_hash(args.data), args.loss_train)
    recs, skipped = influence.rank_training_set(
        {i: eval_set.subset([i]) for i in ids}, train_set, args.variant, (args.loss_train, args.loss_eval),
        basis, model, theta, expected_hash=expected, grad_cache=cache, cache_key=key)
    influence.write_scores(args.out, recs, {"variant": args.variant, "loss_train": args.loss_train,
                                            "loss_eval": args.loss_eval, "basis_hash": basis.source_hash,
                                            "model_hash": pipeline.file_hash(args.model),
                                            "skipped": {str(k): v for k, v in skipped.items()}})
    for t in ids:
        r = recs[t]
        print(f"target {t}: {len(r)} scored, {skipped[t]} skipped, most beneficial {r[0].train_index} "
              f"({r[0].score:.4g}), most harmful {r[-1].train_index} ({r[-1].score:.4g})")
    return 0


_FT_STRATEGIES = {
    ("first", "beneficial", "single"): ("influence", "random"),
    ("first", "harmful", "single"): ("harmful", "random"),
    ("first", "beneficial", "multi"): ("multi_influence", "multi_random"),
    ("first", "harmful", "multi"): ("multi_random",),
    ("second", "beneficial", "single"): ("second_order", "random"),
    ("second", "beneficial", "multi"): ("multi_second_order", "multi_random"),
}


def cmd_finetune(args) -> int:
    cfg = _config(args)
    key = (args.mode, args.which, args.targets)
    if key not in _FT_STRATEGIES:
        raise ValueError(f"unsupported combination: {key}")
    ft = dataclasses.replace(cfg.finetune, steps=args.steps, multi_steps=args.steps,
                             strategies=_FT_STRATEGIES[key])
    cfg = dataclasses.replace(cfg, finetune=ft,
                              experiment=dataclasses.replace(cfg.experiment, seeds=tuple(range(args.seeds))))
    if args.mode == "second" and args.steps > adapt.MAX_FRESH_STEPS and not args.allow_stale:
        raise adapt.StaleBasisError(f"second-order runs are limited to {adapt.MAX_FRESH_STEPS} steps without --allow-stale")
    pipe = pipeline.Pipeline(cfg, args.run)
    pipe.run("influence")
    ctx = pipe.finetune_context()
    out = Path(args.run) / "finetune_cli"
    out.mkdir(exist_ok=True)
    per_step = {}
    for strategy in _FT_STRATEGIES[key]:
        for seed in cfg.experiment.seeds:
            for r in ctx.run_strategy(strategy, seed):
                name = f"{strategy}-seed{seed}-t{'_'.join(map(str, r['targets']))}.json"
                (out / name).write_text(json.dumps(r, indent=2, sort_keys=True) + "\n")
                traj = np.mean(np.array(r["report"]["target_ber"]), axis=1)
                per_step.setdefault(strategy, {}).setdefault(seed, []).append(traj)
    rows = []
    for strategy, seeds in per_step.items():
        mat = np.array([np.mean(v, axis=0) for _, v in sorted(seeds.items())])
        for step in range(mat.shape[1]):
            rows.append([strategy, step, float(mat[:, step].mean()), float(mat[:, step].std()), len(mat)])
    csv_path = out / f"summary-{args.mode}-{args.which}-{args.targets}.csv"
    pipeline._write_csv(csv_path, ["strategy", "step", "mean_ber", "std_ber", "n_seeds"], rows)
    for r in rows:
        print(f"{r[0]:>20s} step {r[1]:2d}  BER {r[2]:.5f} +- {r[3]:.5f}")
    return 0


def cmd_sweep_lr(args) -> int:
    cfg = _config(args)
    rates = [float(r) for r in args.rates.split(",")] if args.rates else list(cfg.sweep.rates)
    path = pipeline.lr_sweep(cfg, rates, args.max_steps or cfg.sweep.max_steps, args.run)
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    out = pipeline.emit_reports(args.run, args.bins)
    print(f"reports in {out}")
    return 0


def cmd_run_all(args) -> int:
    cfg = _config(args)
    run_dir = pipeline.run(cfg, args.out or cfg.experiment.output, progress=print)
    out = pipeline.emit_reports(run_dir)
    print(f"reports in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifrx", description="Influence analysis and targeted fine-tuning of a toy neural receiver.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("default-config", help="print the default experiment config")
    s.set_defaults(fn=cmd_default_config)

    s = sub.add_parser("generate", help="synthesize a link-level dataset")
    s.add_argument("--config")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("train", help="train the receiver")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr-max", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="BER vs SNR of a model against LS-LMMSE and genie")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bins", type=int, default=55)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("arnoldi", help="build a Ritz basis of the training-loss Hessian")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--loss", default="bce")
    s.add_argument("--m", type=int, default=200)
    s.add_argument("--k", type=int, default=40)
    s.add_argument("--batch", type=int, default=22)
    s.add_argument("--passes", type=float, default=3.0)
    s.add_argument("--mode", choices=("cycle", "fixed"), default="cycle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_arnoldi)

    s = sub.add_parser("influence", help="score training samples against evaluation targets")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="training set")
    s.add_argument("--eval", required=True, help="evaluation set")
    s.add_argument("--basis", required=True)
    s.add_argument("--targets", help="comma-separated eval indices (default: top gaps)")
    s.add_argument("--top-n", type=int, default=5)
    s.add_argument("--variant", default="ell_rel", type=influence.canonical_variant,
                   help="classic | clif | theta-rel | ell-rel | newfluence")
    s.add_argument("--loss-train", default="bce")
    s.add_argument("--loss-eval", default="bce")
    s.add_argument("--cache", help="directory for cached per-sample gradients")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_influence)

    s = sub.add_parser("finetune", help="targeted fine-tuning inside a run directory")
    s.add_argument("--config")
    s.add_argument("--run", required=True)
    s.add_argument("--mode", choices=("first", "second"), default="first")
    s.add_argument("--which", choices=("beneficial", "harmful"), default="beneficial")
    s.add_argument("--targets", choices=("single", "multi"), default="single")
    s.add_argument("--steps", type=int, default=3)
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--allow-stale", action="store_true")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("sweep-lr", help="BER heatmap over fine-tuning rates and steps")
    s.add_argument("--config")
    s.add_argument("--run")
    s.add_argument("--rates")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(fn=cmd_sweep_lr)

    s = sub.add_parser("report", help="emit plot-ready CSV/JSON for a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--bins", type=int)
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("run-all", help="run every stage and emit reports")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_run_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    configure_threads()
    try:
        return args.fn(args)
    except (ValueError, pipeline.StageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

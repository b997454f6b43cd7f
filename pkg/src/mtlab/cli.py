"""Command-line entry point: ``mtlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import benchmark, evaluation, formats, landscape, trainer
from .nnet import ModelConfig
from .synthgen import DatasetSizes, generate_dataset
from .trainer import TRAIN_MODES, TrainerConfig

log = logging.getLogger("mtlab")

SPLITS = {"target": "t/test", "s1": "s1", "s2": "s2", "s3": "s3",
          "val-s2": "val/s2", "val-s3": "val/s3", "target-train": "t/train"}
MT_MODES = set(TRAIN_MODES)


class CliError(Exception):
    pass


def _dataset(args) -> dict:
    if getattr(args, "data", None):
        return formats.load_dataset(Path(args.data))
    return generate_dataset(args.data_seed)


def _trainer_config(args, **overrides) -> TrainerConfig:
    text = Path(args.config).read_text() if getattr(args, "config", None) else ""
    return formats.load_dataclass_config(TrainerConfig, text, **overrides)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_gen_data(args) -> int:
    sizes = DatasetSizes(**{k: v for k, v in (("labeled", args.labeled),
                                                ("auxiliary", args.auxiliary),
                                                ("target_test", args.target_test),
                                                ("validation", args.validation),
                                                ("target_train", args.target_train))
                            if v is not None})
    ds = generate_dataset(args.data_seed, sizes)
    formats.save_dataset(ds, Path(args.out))
    for k, v in ds.items():
        print(f"{k}\t{len(v)}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _trainer_config(args, seed=args.seed, lr_pretrain=args.lr,
                          iters_pretrain=args.iters)
    ds = _dataset(args)
    params = trainer.pretrain(cfg, ds["s1"])
    meta = formats.checkpoint_metadata(ModelConfig(), cfg.iters_pretrain, "pretrain",
                                       cfg.seed, network="single")
    formats.save_checkpoint(Path(args.out), params, meta)
    print(f"saved {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _trainer_config(args, seed=args.seed, beta=args.beta, alpha=args.alpha,
                          iters_mt=args.iters)
    ds = _dataset(args)
    init, meta = formats.load_checkpoint(Path(args.init))
    mc = ModelConfig.from_dict(meta["config"])
    state = trainer.train(args.mode, cfg, trainer.train_data_for(args.mode, ds), init, mc)
    formats.save_checkpoint(Path(args.out), state.teacher, formats.checkpoint_metadata(
        mc, state.iteration, args.mode, cfg.seed, network="teacher"))
    if args.history:
        formats.write_csv(Path(args.history), ["iter", "term", "value"],
                          [[it, k, v] for it, terms in state.history for k, v in terms.items()])
    if args.student_out:
        formats.save_checkpoint(Path(args.student_out), state.student, formats.checkpoint_metadata(
            mc, state.iteration, args.mode, cfg.seed, network="student"))
    print(f"saved {args.out}")
    return 0


def _load_eval_params(path: Path, allow_student: bool):
    params, meta = formats.load_checkpoint(path)
    # a mean-teacher checkpoint is always evaluated through its teacher
    if meta.get("mode") in MT_MODES and meta.get("network") != "teacher" and not allow_student:
        raise CliError(f"{path} holds the {meta.get('network')} of a {meta['mode']} run; "
                       "evaluation uses the teacher (pass --allow-student to override)")
    return params, meta


def cmd_eval(args) -> int:
    params, meta = _load_eval_params(Path(args.ckpt), args.allow_student)
    mc = ModelConfig.from_dict(meta["config"])
    scenes = _dataset(args)[SPLITS[args.split]]
    per_class, m = evaluation.evaluate(params, scenes, mc)
    rows = [[k, ap] for k, ap in per_class.items()]
    for k, ap in rows:
        print(f"class {k}\tAP50 {ap:.4f}")
    print(f"mAP50\t{m:.4f}")
    if args.out:
        formats.write_csv(Path(args.out), ["class", "ap", "map50"], [[k, ap, m] for k, ap in rows])
    return 0


def cmd_probe_flatness(args) -> int:
    params, meta = formats.load_checkpoint(Path(args.ckpt))
    mc = ModelConfig.from_dict(meta["config"])
    ds = _dataset(args)
    n = args.scenes
    if args.risk == "target":
        risk = landscape.target_risk(ds["t/test"][:n], args.data_seed, mc)
    else:
        risk = landscape.empirical_risk({k: ds[k][:n] for k in ("s1", "s2", "s3")},
                                        args.data_seed, mc)
    rep = landscape.flatness(params, risk, _floats(args.gammas), args.samples,
                             np.random.default_rng(args.seed), surface=args.risk)
    rows = [[g, j, float(d), mean] for g, deltas, mean in zip(rep.gamma_values, rep.samples,
                                                              rep.means)
            for j, d in enumerate(deltas)]
    header = ["gamma", "sample_idx", "delta_abs", "mean"]
    if args.out:
        formats.write_csv(Path(args.out), header, rows)
    else:
        print(",".join(header))
        for r in rows:
            print(",".join(str(formats._fmt(v)) for v in r))
    return 0


def cmd_run_benchmark(args) -> int:
    config = benchmark.parse_suite(Path(args.suite).read_text()) if args.suite else \
        benchmark.SuiteConfig()
    result = benchmark.run_benchmark(config, Path(args.out))
    for name, ok in result.checks.items():
        detail = result.details.get(name, "")
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
    print(f"reports written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", help="dataset directory from gen-data (default: generate)")
        sp.add_argument("--data-seed", type=int, default=0)

    sp = sub.add_parser("gen-data", help="render the synthetic multi-domain dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--data-seed", type=int, default=0)
    for name in ("labeled", "auxiliary", "target-test", "validation", "target-train"):
        sp.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"))
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="supervised training on the labeled domain")
    data_args(sp)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="EMA-only / mean-teacher training from a checkpoint")
    data_args(sp)
    sp.add_argument("--init", required=True, help="pretrained checkpoint")
    sp.add_argument("--mode", required=True, choices=TRAIN_MODES)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="teacher checkpoint")
    sp.add_argument("--student-out")
    sp.add_argument("--history", help="loss-history CSV (iter,term,value)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AP50 per class and mAP50 of a checkpoint")
    data_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="target", choices=sorted(SPLITS))
    sp.add_argument("--allow-student", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("probe-flatness", help="random-direction flatness of a checkpoint")
    data_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--risk", default="target", choices=("target", "empirical"))
    sp.add_argument("--gammas", default="0.5,1,2,4,8")
    sp.add_argument("--samples", type=int, default=10)
    sp.add_argument("--scenes", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_probe_flatness)

    sp = sub.add_parser("run-benchmark", help="method x seed suite with CSV and figure reports")
    sp.add_argument("--suite", help="key=value suite file (default suite if omitted)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_run_benchmark)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (CliError, formats.FormatError, trainer.UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

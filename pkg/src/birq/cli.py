"""Command line entry points.

Subcommands: pretrain, gradcheck, bilevel-demo, quantize, synth-data,
plot. Human-readable tables go to stdout, diagnostics to stderr.

Exit codes: 0 success; 2 configuration or argument error; 3 data or file
error; 4 numerical failure; 5 a verification gate did not meet its
threshold.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, DataError, NumericError
from .features import FeatureSequence, load_features, save_features, synth_dataset
from .plotting import save_plot
from .quantizer import (assign_hard, assign_soft, codebook_utilization,
                        init_codebook, init_projection, project, sample_gumbel,
                        save_labels)
from .trainer import read_metrics, run_pretrain
from .verify import (GRADCHECK_THRESHOLD, default_toy_problem, gradcheck_birq,
                     run_penalty_demo)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_THRESHOLD = 5

BASE_SEED_ENV = "BIRQ_BASE_SEED"


def _err(msg: str) -> None:
    print(f"birq: {msg}", file=sys.stderr)


def _load_resolved_config(path) -> dict:
    cfg = cfgmod.load_config(path) if path else cfgmod.default_config()
    base = os.environ.get(BASE_SEED_ENV)
    if base is not None:
        try:
            base_int = int(base, 10)
        except ValueError:
            raise ConfigError(f"{BASE_SEED_ENV} must be an integer, "
                              f"got {base!r}") from None
        _err(f"{BASE_SEED_ENV}={base_int} overrides the configured seeds")
        return cfgmod.resolve(cfg, base_seed=base_int)
    return cfgmod.resolve(cfg)


def _cmd_pretrain(args) -> int:
    cfg = _load_resolved_config(args.config)
    if args.synth:
        features = synth_dataset(cfgmod.to_synth_spec(cfg))
    else:
        paths = sorted(p for p in os.listdir(args.data) if p.endswith(".feat"))
        if not paths:
            raise DataError(f"no .feat files under {args.data}")
        features = [load_features(os.path.join(args.data, p)) for p in paths]
    raw_dim = features[0].data.shape[1]
    tc = cfgmod.to_train_config(cfg, raw_dim * cfg["stack_factor"])

    os.makedirs(args.out, exist_ok=True)
    resolved_path = os.path.join(args.out, "config.resolved")
    with open(resolved_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfgmod.serialize(cfg))

    result = run_pretrain(tc, features, out_dir=args.out,
                          resume_from=args.resume)
    last = result.records[-1]
    print(f"sequences {len(features)}  steps {last.step + 1}  "
          f"epochs {tc.epochs}")
    print(f"final loss_total {last.loss_total:.6f}  loss_F {last.loss_f:.6f}  "
          f"loss_G {last.loss_g:.6f}")
    print(f"final mask_acc_anchor {last.mask_acc_anchor:.4f}  "
          f"codebook_util_enh {last.codebook_util_enh:.4f}")
    print(f"wrote {resolved_path}")
    print(f"wrote {os.path.join(args.out, 'metrics.csv')}")
    for path in result.checkpoint_paths:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = gradcheck_birq(precision=args.precision, step=args.step,
                            sabotage=args.sabotage)
    threshold = GRADCHECK_THRESHOLD[args.precision]
    print(f"finite-difference step {report.step_size:g}  "
          f"precision {report.precision}  threshold {threshold:g}")
    for loss_name, tensors in report.per_loss.items():
        worst = max(tensors.values())
        print(f"loss {loss_name:<9} max_rel_err {worst:.3e}")
    print(f"worst overall {report.global_max:.3e} "
          f"({report.worst_loss} / {report.worst_tensor})")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("loss,tensor,max_rel_err\n")
            for loss_name, tensors in report.per_loss.items():
                for tensor, err in tensors.items():
                    fh.write(f"{loss_name},{tensor},{err!r}\n")
        print(f"wrote {args.csv}")
    if not report.passed():
        _err(f"gradient check failed: {report.global_max:.3e} > {threshold:g}")
        return EXIT_THRESHOLD
    print("gradient check passed")
    return EXIT_OK


def _cmd_bilevel_demo(args) -> int:
    try:
        gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    except ValueError:
        raise ConfigError(f"bad --gammas list: {args.gammas!r}") from None
    if not gammas:
        raise ConfigError("--gammas must name at least one value")
    problem = default_toy_problem()
    report = run_penalty_demo(problem, gammas=gammas, steps=args.steps)
    print("gamma,delta_measured,distance_to_oracle")
    for gamma, delta, dist in report.rows():
        print(f"{gamma:g},{delta!r},{dist!r}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("gamma,delta_measured,distance_to_oracle\n")
            for gamma, delta, dist in report.rows():
                fh.write(f"{gamma!r},{delta!r},{dist!r}\n")
        print(f"wrote {args.csv}")
    failures = []
    for i in range(1, len(report.gammas)):
        if (report.gammas[i] > report.gammas[i - 1]
                and report.delta_measured[i] > report.delta_measured[i - 1] + 1e-12):
            failures.append(f"delta increased from gamma={report.gammas[i-1]:g} "
                            f"to gamma={report.gammas[i]:g}")
    for gamma, dist in zip(report.gammas, report.distances):
        if gamma == 100.0 and dist > 1e-2:
            failures.append(f"distance {dist:.3e} at gamma=100 exceeds 1e-2")
    if failures:
        for f in failures:
            _err(f)
        return EXIT_THRESHOLD
    print("penalty demo passed")
    return EXIT_OK


def _cmd_quantize(args) -> int:
    feats = load_features(args.feats)
    x = np.asarray(feats.data, dtype=np.float64)
    d = x.shape[1]
    codebook = init_codebook(args.seed, args.codebook_size, args.code_dim)
    projection = init_projection(args.seed, d, args.code_dim)
    u = project(projection, x.T)
    if args.mode == "hard":
        labels = assign_hard(u, codebook, l2_normalize=args.l2_normalize)
    else:
        gumbel = None
        if args.gumbel_seed is not None:
            gumbel = sample_gumbel(args.gumbel_seed, x.shape[0],
                                   args.codebook_size)
        labels = assign_soft(u, codebook, args.tau, gumbel=gumbel,
                             l2_normalize=args.l2_normalize)
    save_labels(args.out, labels, args.codebook_size)
    hard = labels if labels.ndim == 1 else np.argmax(labels, axis=1)
    util = codebook_utilization(hard, args.codebook_size)
    print(f"frames {x.shape[0]}  codes {args.codebook_size}  mode {args.mode}")
    print(f"utilization {util:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_synth_data(args) -> int:
    cfg = _load_resolved_config(args.config)
    spec = cfgmod.to_synth_spec(cfg)
    os.makedirs(args.out, exist_ok=True)
    seqs = synth_dataset(spec)
    for i, f in enumerate(seqs):
        save_features(f, os.path.join(args.out, f"seq_{i:04d}.feat"))
    print(f"wrote {len(seqs)} sequences of shape "
          f"{spec.num_frames} x {spec.dim} to {args.out}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    rows = read_metrics(args.metrics)
    save_plot(rows, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="birq",
        description="masked-prediction pretraining with quantized anchor "
                    "labels and differentiable enhanced labels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train an encoder")
    p.add_argument("--config", default=None, help="key = value config file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth", action="store_true",
                     help="train on the built-in synthetic corpus")
    src.add_argument("--data", help="directory of .feat files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--precision", choices=("float64", "float32"),
                   default="float64")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--sabotage", default=None,
                   help="corrupt this tensor's analytic gradient (negative "
                        "control)")
    p.add_argument("--csv", default=None, help="write per-tensor errors here")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bilevel-demo",
                       help="penalty solutions vs the constrained oracle on "
                            "a quadratic toy problem")
    p.add_argument("--gammas", default="1,10,100,1000")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=_cmd_bilevel_demo)

    p = sub.add_parser("quantize",
                       help="random-projection labels for a feature file")
    p.add_argument("--feats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("hard", "soft"), default="hard")
    p.add_argument("--seed", type=int, default=4)
    p.add_argument("--codebook-size", type=int, default=16)
    p.add_argument("--code-dim", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--gumbel-seed", type=int, default=None,
                   help="add seeded perturbation noise to soft scores")
    p.add_argument("--l2-normalize", action="store_true")
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("synth-data", help="write the synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("plot", help="render metrics.csv as SVG")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        _err(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except ValueError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands:
  train         train per config, writing checkpoint.lsm and metrics.json
  eval          run a deformation suite on a checkpoint, writing report.json
  inspect       export per-layer Laplacian / power CSVs and a smoothness profile
  print-config  dump the fully resolved configuration as JSON

All randomness flows from --seed through named substreams, so any artifact a
command writes is reproducible from its config alone.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attacks, network, training
from .config import TrainConfig
from .errors import GraphSmoothError
from .rng import per_item_rng
from .signals import make_label_signals, write_profile_csv
from .trace_tools import class_contiguous_order, export_layer_matrices, probe_profile


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json_file(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "subset", None) is not None:
        cfg.dataset = dict(cfg.dataset)
        cfg.dataset["subset_train"] = args.subset
        cfg.dataset["subset_test"] = args.subset
    return cfg.validate()


def _parse_seeds(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    _, metrics = training.train(cfg, out_dir=out, quiet=False)
    final = metrics["epochs"][-1]
    print(f"done: test accuracy {final['test_accuracy']:.4f}; "
          f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = network.load_checkpoint(args.checkpoint)
    _, test = training.load_datasets(cfg)
    seeds = _parse_seeds(args.seeds)
    report = attacks.AttackReport()

    def eval_images(images):
        preds = network.predict(model, images)
        return attacks.accuracy(preds, test.labels)

    if args.attack == "clean":
        report.add("clean", None, None, "accuracy", eval_images(test.images))
    elif args.attack == "gaussian":
        if args.snr is None:
            raise GraphSmoothError("gaussian attack needs --snr")
        for seed in seeds:
            rng = per_item_rng(seed, "noise", 0)
            noisy = attacks.gaussian_noise_at_snr(test.images, args.snr, rng)
            report.add("gaussian", args.snr, seed, "accuracy", eval_images(noisy))
    elif args.attack == "fgsm":
        if args.epsilon is None and args.snr is None:
            raise GraphSmoothError("fgsm needs --epsilon or --snr")
        eps = args.epsilon if args.epsilon is not None \
            else attacks.epsilon_for_snr(test.images, args.snr)
        adv = attacks.fgsm(model, test.images, test.labels, eps,
                           before_normalization=args.before_norm,
                           channel_std=test.channel_std)
        variant = "fgsm-before-norm" if args.before_norm else "fgsm-after-norm"
        report.add(variant, eps, None, "accuracy", eval_images(adv))
    elif args.attack == "dropout":
        if args.p is None:
            raise GraphSmoothError("dropout attack needs --p")
        for seed in seeds:
            preds = attacks.fault_dropout_eval(model, test.images, args.p, seed)
            report.add("fault-dropout", args.p, seed, "accuracy",
                       attacks.accuracy(preds, test.labels))
    elif args.attack == "quantize":
        qmodel = attacks.quantize_weights(model, args.bits)
        preds = network.predict(qmodel, test.images)
        report.add("quantize", args.bits, None, "accuracy",
                   attacks.accuracy(preds, test.labels))
    elif args.attack == "minimal-l2":
        distances = []
        censored = 0
        for i in range(len(test)):
            _, dist, cens = attacks.minimal_l2_search(model, test.images[i],
                                                      int(test.labels[i]))
            distances.append(dist)
            censored += int(cens)
        report.add(attacks.MINIMAL_L2_ATTACK_NAME, None, None,
                   "mean_l2_pixel_distance", float(np.mean(distances)))
        report.add(attacks.MINIMAL_L2_ATTACK_NAME, None, None,
                   "censored_fraction", censored / len(test))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json")
    for entry in report.entries:
        print(f"{entry['attack']} param={entry['param']} seed={entry['seed']} "
              f"{entry['metric']}={entry['value']:.6g}")
    return 0


def cmd_inspect(args) -> int:
    cfg = _load_config(args)
    model = network.load_checkpoint(args.checkpoint)
    _, test = training.load_datasets(cfg)
    b = min(cfg.batch_size, len(test))
    order = class_contiguous_order(test.labels[:b])
    batch = test.images[:b][order]
    labels = test.labels[:b][order]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = args.power_m if args.power_m is not None else cfg.power_m
    reg_cfg = cfg.regularizer
    reg_cfg.power_m = m
    written = export_layer_matrices(model, batch, m, reg_cfg, out)
    signals = make_label_signals(labels, test.num_classes)
    profile = probe_profile(model, batch, signals, reg_cfg)
    rows = [(0, layer_index, m, class_id, value)
            for layer_index, per_class, _ in profile.per_layer
            for class_id, value in per_class.items()]
    profile_path = out / "smoothness_profile.csv"
    write_profile_csv(profile_path, rows)
    written.append(profile_path)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_print_config(args) -> int:
    cfg = _load_config(args)
    sys.stdout.write(cfg.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphsmooth",
                                     description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", type=str, default=None, help="config JSON path")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--subset", type=int, default=None,
                       help="cap train/test split sizes")
        if checkpoint:
            p.add_argument("--checkpoint", type=str, required=True)

    p_train = sub.add_parser("train", help="train a model per config")
    common(p_train)
    p_train.add_argument("--out", type=str, required=True, help="output directory")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint under a deformation")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--attack", required=True,
                        choices=["clean", "gaussian", "fgsm", "dropout",
                                 "quantize", "minimal-l2"])
    p_eval.add_argument("--snr", type=float, default=None, help="target SNR in dB")
    p_eval.add_argument("--epsilon", type=float, default=None, help="FGSM step size")
    p_eval.add_argument("--before-norm", action="store_true",
                        help="apply FGSM in raw pixel space, then re-normalize")
    p_eval.add_argument("--p", type=float, default=None, help="fault dropout probability")
    p_eval.add_argument("--bits", type=int, default=5, help="quantization bit width")
    p_eval.add_argument("--seeds", type=str, default="0",
                        help="comma-separated seeds for stochastic attacks")
    p_eval.add_argument("--out", type=str, required=True)
    p_eval.set_defaults(fn=cmd_eval)

    p_inspect = sub.add_parser("inspect", help="export graph matrices and profiles")
    common(p_inspect, checkpoint=True)
    p_inspect.add_argument("--power-m", type=int, default=None,
                           help="Laplacian power for the exports (default: config)")
    p_inspect.add_argument("--out", type=str, required=True)
    p_inspect.set_defaults(fn=cmd_inspect)

    p_cfg = sub.add_parser("print-config", help="dump the resolved config JSON")
    common(p_cfg)
    p_cfg.set_defaults(fn=cmd_print_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except GraphSmoothError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

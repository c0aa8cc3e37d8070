"""Command line interface: ``reluconf <subcommand> [flags]``.

Every subcommand takes ``--seed`` and ``--config FILE``; values from the JSON
config override the flags given on the command line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .attacks import PgdConfig, batched, objective_values, pgd
from .data import (LabeledDataset, load_checkpoint, load_digit_benchmark, load_mnist, load_tensors,
                   save_checkpoint, save_tensors, synth_2d, write_pgm)
from .errors import ReluConfError
from .geometry import enumerate_regions_2d
from .metrics import evaluate_confidences
from .models import RbfNetwork, confidence, lenet, mlp
from .noise import NoiseConfig, generate_noise_batch
from .probes import DEFAULT_ALPHA_MAX, alpha_scaling_batch, projected_overconfidence, summarize_alpha
from .training import TrainConfig, train

log = logging.getLogger("reluconf")

SYNTHETIC = {"moons": "two_moons", "two_moons": "two_moons", "blobs": "gaussian_blobs",
             "gaussian_blobs": "gaussian_blobs"}


class UsageError(Exception):
    pass


def _ints(text: str) -> List[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _floats(text: str) -> List[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def write_json(path: Optional[str], obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def load_dataset(name: str, n_train: int, n_test: int, seed: int, num_classes: int = 3, noise_std: float = 0.1):
    """``(train, test)`` for a dataset name: moons, blobs, digits or an IDX directory."""
    if name in SYNTHETIC:
        kind = SYNTHETIC[name]
        train_ = synth_2d(kind, n_train, noise_std, seed, num_classes)
        test_ = synth_2d(kind, n_test, noise_std, seed + 1, num_classes)
        return train_, test_
    if name == "digits":
        train_, test_, source = load_digit_benchmark(n_train, n_test, seed)
        log.info("digit benchmark source: %s", source)
        return train_, test_
    path = Path(name)
    if not path.is_dir():
        raise UsageError(f"--data: unknown dataset {name!r} (moons, blobs, digits or an IDX directory)")
    rng = np.random.default_rng(seed)
    train_, test_ = load_mnist(path, "train"), load_mnist(path, "test")
    train_ = train_.subset(np.sort(rng.permutation(len(train_))[:n_train]))
    test_ = test_.subset(np.sort(rng.permutation(len(test_))[:n_test]))
    return train_, test_


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    train_set, test_set = load_dataset(args.data, args.n_train, args.n_test, args.seed, args.classes)
    shape = train_set.images.shape[1:]
    rng = np.random.default_rng(args.seed)
    if args.arch == "lenet":
        if len(shape) != 3:
            raise UsageError("--arch lenet needs image data")
        net = lenet(rng, shape, num_classes=train_set.num_classes)
    else:
        net = mlp(shape, _ints(args.hidden), train_set.num_classes, rng, args.activation)
    pgd_cfg = PgdConfig(epsilon=args.pgd_epsilon, step_size=args.pgd_step_size,
                        iterations=args.pgd_iterations, restarts=args.pgd_restarts)
    cfg = TrainConfig(mode=args.mode, lam=args.lam, epochs=args.epochs, batch_size=args.batch_size,
                      optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
                      weight_decay=args.weight_decay, lr_drop_epochs=tuple(_ints(args.lr_drop_epochs)),
                      lr_drop_factor=args.lr_drop_factor, pgd=pgd_cfg, seed=args.seed,
                      random_crop_pad=args.random_crop_pad, mirror=args.mirror,
                      log_noise_samples=args.log_noise_samples)
    net, train_log = train(net, train_set, test_set, cfg)
    save_checkpoint(net, args.out)
    Path(args.log).write_text(train_log.to_csv())
    last = train_log.records[-1] if train_log.records else None
    if last is not None:
        print(f"epoch {last.epoch}: test_err {last.test_err:.4f} noise_mmc {last.noise_mmc:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _require_relu(net):
    if isinstance(net, RbfNetwork):
        raise UsageError("this subcommand needs a ReLU network checkpoint")
    return net


def cmd_eval(args) -> int:
    net = _require_relu(load_checkpoint(args.model))
    _, test_set = load_dataset(args.data, args.n_train, args.n_test, args.seed, net.num_classes)
    if test_set.images.shape[1:] != net.input_shape and test_set.images[0].size != net.input_dim:
        raise UsageError(f"--data: inputs of shape {test_set.images.shape[1:]} do not fit the model")
    K = net.num_classes
    ss = np.random.SeedSequence(args.seed)
    noise_seed, uniform_seed, pgd_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    _, in_conf, pred = confidence(net, test_set.images)
    test_error = float(np.mean(pred != test_set.labels))
    outs = {}
    shape = tuple(net.input_shape)
    if args.noise_samples:
        perm_frac = 0.5 if len(shape) > 1 else 0.0
        noise = generate_noise_batch(NoiseConfig(shape, perm_frac, seed=noise_seed), test_set.images,
                                     args.noise_samples)
        outs["noise"] = noise
        if args.adv_iterations:
            cfg = PgdConfig(epsilon=args.epsilon, step_size=args.step_size, iterations=args.adv_iterations,
                            restarts=args.adv_restarts, seed=pgd_seed)
            outs["adv_noise"] = batched(lambda z: pgd(net, z, cfg)[0], noise, 500)
    if args.uniform_samples:
        outs["uniform"] = np.random.default_rng(uniform_seed).uniform(0, 1, (args.uniform_samples,) + shape)
    for item in args.out_data or []:
        name, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--out-data expects NAME=PATH, got {item!r}")
        tensors = load_tensors(path)
        outs[name] = tensors["x"] if "x" in tensors else tensors[sorted(tensors)[0]]
    out_conf = {name: confidence(net, x)[1] for name, x in outs.items()}
    report = evaluate_confidences(in_conf, out_conf, K, test_error)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "hist_in.csv", ("bin_low", "bin_high", "count"), report.histogram_in)
    for name, res in report.out.items():
        write_csv(out_dir / f"roc_{name}.csv", ("fpr", "tpr", "threshold"), res.roc_points)
        write_csv(out_dir / f"hist_{name}.csv", ("bin_low", "bin_high", "count"), res.histogram)
    summary = report.summary()
    write_json(str(out_dir / "report.json"), summary)
    write_json(None, summary)
    return 0


def cmd_attack(args) -> int:
    net = _require_relu(load_checkpoint(args.model))
    tensors = load_tensors(args.input)
    if args.key not in tensors:
        raise UsageError(f"--key: tensor {args.key!r} not in {args.input} (found {sorted(tensors)})")
    x = tensors[args.key]
    labels = None
    if args.objective == "untargeted_ce":
        if args.labels_key not in tensors:
            raise UsageError(f"--labels-key: untargeted_ce needs labels, {args.labels_key!r} not found")
        labels = tensors[args.labels_key].astype(np.int64)
    iterations = args.iterations or (80 if args.objective == "untargeted_ce" else 200)
    cfg = PgdConfig(epsilon=args.epsilon, step_size=args.step_size, iterations=iterations,
                    restarts=args.restarts, objective=args.objective, seed=args.seed)
    before = objective_values(net, x, args.objective, labels)
    u, after = pgd(net, x, cfg, labels)
    save_tensors(args.out, {"x_adv": u}, dtype="float64")
    write_csv(args.csv, ("index", "objective_before", "objective_after"),
              [(i, float(b), float(a)) for i, (b, a) in enumerate(zip(before, after))])
    print(f"attacked {len(u)} samples; mean objective {np.mean(before):.6f} -> {np.mean(after):.6f}")
    return 0


def cmd_probe_alpha(args) -> int:
    net = _require_relu(load_checkpoint(args.model))
    rng = np.random.default_rng(args.seed)
    X = rng.uniform(0.0, 1.0, size=(args.directions, net.input_dim))
    results = alpha_scaling_batch(net, X, args.target, args.alpha_max)
    summary = summarize_alpha(results)
    alphas = np.array([r.alpha_found if r.alpha_found is not None else args.alpha_max for r in results])
    summary["projected_overconf_fraction"] = projected_overconfidence(net, X, alphas, args.overconf_threshold)
    summary["target_conf"] = args.target
    write_json(args.out, summary)
    return 0


def cmd_regions(args) -> int:
    net = _require_relu(load_checkpoint(args.model))
    bbox = _floats(args.bbox)
    if len(bbox) != 4:
        raise UsageError("--bbox expects x0,x1,y0,y1")
    raster = enumerate_regions_2d(net, bbox, args.resolution)
    write_csv(args.out, ("x", "y", "region_id"), raster.rows())
    print(f"{raster.count} regions on a {args.resolution}x{args.resolution} raster")
    return 0


def cmd_noise(args) -> int:
    if args.data == "none":
        shape = tuple(_ints(args.shape))
        source = None
        frac = 0.0
    else:
        train_set, _ = load_dataset(args.data, args.n_train, 1, args.seed)
        shape, source, frac = train_set.images.shape[1:], train_set.images, args.permuted_fraction
    cfg = NoiseConfig(shape, frac, (args.sigma_min, args.sigma_max), seed=args.seed)
    batch = generate_noise_batch(cfg, source, args.n)
    save_tensors(args.out, {"x": batch}, dtype="float64")
    if args.pgm_dir:
        d = Path(args.pgm_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(min(args.pgm_count, len(batch))):
            write_pgm(d / f"noise_{i:04d}.pgm", batch[i][0] if batch[i].ndim == 3 else batch[i])
    print(f"{len(batch)} noise samples of shape {shape} written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file whose keys override flags")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_flags(p: argparse.ArgumentParser, default: str = "moons") -> None:
    p.add_argument("--data", default=default, help="moons, blobs, digits or a directory of IDX files")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--classes", type=int, default=3, help="class count for blobs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reluconf", description="Confidence of ReLU classifiers far from the data.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train a classifier (plain, ceda or acet)")
    _common(p)
    _data_flags(p)
    p.add_argument("--mode", choices=("plain", "ceda", "acet"), default="plain")
    p.add_argument("--arch", choices=("mlp", "lenet"), default="mlp")
    p.add_argument("--hidden", default="256,256", help="comma separated hidden widths for mlp")
    p.add_argument("--activation", choices=("relu", "leaky"), default="relu")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--lr-drop-epochs", default="50,75,90")
    p.add_argument("--lr-drop-factor", type=float, default=10.0)
    p.add_argument("--pgd-epsilon", type=float, default=0.3)
    p.add_argument("--pgd-step-size", type=float, default=0.0075)
    p.add_argument("--pgd-iterations", type=int, default=40)
    p.add_argument("--pgd-restarts", type=int, default=1)
    p.add_argument("--random-crop-pad", type=int, default=0)
    p.add_argument("--mirror", action="store_true")
    p.add_argument("--log-noise-samples", type=int, default=1000)
    p.add_argument("--out", default="model.parn", help="checkpoint path")
    p.add_argument("--log", default="train_log.csv", help="training log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confidence metrics against noise and other out-distributions")
    _common(p)
    _data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--noise-samples", type=int, default=2000)
    p.add_argument("--uniform-samples", type=int, default=0)
    p.add_argument("--adv-iterations", type=int, default=200, help="PGD iterations for adversarial noise (0 skips)")
    p.add_argument("--adv-restarts", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--step-size", type=float, default=0.0075)
    p.add_argument("--out-data", action="append", metavar="NAME=PATH", help="extra out-distribution tensor file")
    p.add_argument("--out-dir", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="PGD in an L-inf ball around stored inputs")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="tensor container with the inputs")
    p.add_argument("--key", default="x")
    p.add_argument("--labels-key", default="y")
    p.add_argument("--objective", choices=("max_confidence", "untargeted_ce"), default="max_confidence")
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--step-size", type=float, default=0.0075)
    p.add_argument("--iterations", type=int, default=None,
                   help="default 200 for max_confidence, 80 for untargeted_ce")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--out", default="attacked.part")
    p.add_argument("--csv", default="attack.csv")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("probe-alpha", help="alpha-scaling search on uniform noise directions")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--directions", type=int, default=10000)
    p.add_argument("--target", type=float, default=0.999)
    p.add_argument("--alpha-max", type=float, default=DEFAULT_ALPHA_MAX)
    p.add_argument("--overconf-threshold", type=float, default=0.95)
    p.add_argument("--out", default="-", help="JSON output path ('-' for stdout)")
    p.set_defaults(func=cmd_probe_alpha)

    p = sub.add_parser("regions", help="label a 2-d raster by linear region")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bbox", default="0,1,0,1", help="x0,x1,y0,y1")
    p.add_argument("--resolution", type=int, default=200)
    p.add_argument("--out", default="regions.csv")
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("noise", help="write a batch of smoothed noise")
    _common(p)
    p.add_argument("--data", default="digits", help="source of permuted images, or 'none' for uniform only")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--shape", default="1,28,28", help="sample shape when --data none")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--permuted-fraction", type=float, default=0.5)
    p.add_argument("--sigma-min", type=float, default=1.0)
    p.add_argument("--sigma-max", type=float, default=2.5)
    p.add_argument("--out", default="noise.part")
    p.add_argument("--pgm-dir")
    p.add_argument("--pgm-count", type=int, default=8)
    p.set_defaults(func=cmd_noise)
    return parser


def apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"--config: cannot read {args.config}: {exc}")
    if not isinstance(overrides, dict):
        parser.error("--config: top level must be a JSON object")
    for key, value in overrides.items():
        dest = {"lambda": "lam"}.get(key, key.replace("-", "_"))
        if dest in ("func", "command", "config") or not hasattr(args, dest):
            parser.error(f"--config: unknown option {key!r}")
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        setattr(args, dest, value)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = apply_config(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"reluconf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ReluConfError, OSError, ValueError) as exc:
        print(f"reluconf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

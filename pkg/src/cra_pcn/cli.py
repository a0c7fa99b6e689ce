"""``cra-pcn`` command line: data generation, toy training, inference, metrics, checks.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Every command is deterministic given ``--seed``; only ``bench`` timings vary.
The ``CRA_PCN_THREADS`` environment variable caps BLAS threads.
"""
import argparse
import collections
import dataclasses
import math
import os
import resource
import sys
import time

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _limit_threads():
    n = os.environ.get("CRA_PCN_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


_limit_threads()

import numpy as np  # noqa: E402

from . import config as config_mod  # noqa: E402
from . import data, geometry, gradcheck, kernels, model, train  # noqa: E402
from .errors import ContractError, ParseError, TrainingError  # noqa: E402


def _load_config(path, default, train_default=None):
    if path is None:
        return default, train_default or config_mod.TrainConfig()
    return config_mod.load(path)


def cmd_gen_data(args):
    path = data.generate_dataset(
        args.out, args.count, seed=args.seed, difficulty=args.difficulty, primitive=args.primitive,
        n_complete=args.n_complete, n_partial=args.n_partial, fmt=args.format,
    )
    print(f"manifest={path} count={args.count}")
    return EXIT_OK


def cmd_train_toy(args):
    cfg, tcfg = _load_config(args.config, config_mod.ModelConfig.toy(), config_mod.TrainConfig.toy())
    cfg = dataclasses.replace(cfg, init_seed=args.seed)
    examples = data.read_manifest(args.data)
    train_ex, val_ex = train.split(examples, tcfg.val_fraction)
    train_s, val_s = train.load_samples(train_ex, cfg), train.load_samples(val_ex, cfg)
    params = model.init_params(cfg)
    print(f"train={len(train_s)} val={len(val_s)} params={model.parameter_count(params)} backend={kernels.BACKEND}")

    def on_epoch(epoch, val, loss):
        tail = "" if math.isnan(loss) else f" train_loss={loss:.17g}"
        print(f"epoch={epoch} val_cd_l1={val:.17g} val_cd_l1_x1e3={val * 1e3:.4f}{tail}", flush=True)

    try:
        history = train.fit(params, train_s, val_s, cfg, tcfg, args.epochs, seed=args.seed, on_epoch=on_epoch)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for k, v in exc.diagnostics.items():
            print(f"diagnostic {k}={v}", file=sys.stderr)
        return EXIT_NUMERIC
    train.save(args.out, params, cfg, tcfg)
    first, last = history[0][1], history[-1][1]
    print(f"final_val_cd_l1={last:.17g} initial_val_cd_l1={first:.17g} ratio={last / first:.6f} checkpoint={args.out}")
    return EXIT_OK


def cmd_complete(args):
    params, cfg, _ = train.load(args.ckpt)
    partial = data.read_points(args.input)
    out = model.forward(partial, cfg, params)
    data.write_points(args.out, out.final.data)
    if args.stages:
        stem, ext = os.path.splitext(args.out)
        named = [("seeds", out.seeds), ("p0", out.start)] + [(f"p{i + 1}", s) for i, s in enumerate(out.stages)]
        for name, pts in named:
            data.write_points(f"{stem}.{name}{ext}", pts.data)
    print(f"points={out.final.shape[0]} out={args.out}")
    return EXIT_OK


def _metric(pred, gt, metric, threshold):
    if metric == "fscore":
        return geometry.fscore(pred, gt, threshold)
    return float(geometry.chamfer(pred, gt, metric.upper()).data)


def cmd_eval(args):
    examples = data.read_manifest(args.data)
    if args.split != "all":
        tcfg = _load_config(args.config, None)[1] if args.config else config_mod.TrainConfig()
        train_ex, val_ex = train.split(examples, tcfg.val_fraction)
        examples = val_ex if args.split == "val" else train_ex
    if args.identity:
        params = cfg = None
    elif args.ckpt:
        params, cfg, _ = train.load(args.ckpt)
    else:
        print("error: eval needs --ckpt or --identity", file=sys.stderr)
        return EXIT_USAGE
    per_cat = collections.defaultdict(list)
    for ex in examples:
        gt = data.read_points(ex.complete)
        pred = gt if args.identity else model.forward(data.read_points(ex.partial), cfg, params).final.data
        per_cat[ex.category].append(_metric(pred, gt, args.metric, args.threshold))
    scale = 1.0 if args.metric == "fscore" else 1e3
    label = args.metric if args.metric == "fscore" else f"{args.metric}_x1e3"
    print(f"{'category':<12} {'n':>4} {label:>14} {'raw':>24}")
    cat_means = []
    for cat in sorted(per_cat):
        vals = per_cat[cat]
        mean = math.fsum(vals) / len(vals)
        cat_means.append(mean)
        print(f"{cat:<12} {len(vals):>4} {mean * scale:>14.4f} {mean:>24.17g}")
    avg = math.fsum(cat_means) / len(cat_means) if cat_means else float("nan")
    print(f"{'average':<12} {sum(len(v) for v in per_cat.values()):>4} {avg * scale:>14.4f} {avg:>24.17g}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg, _ = _load_config(args.config, config_mod.ModelConfig.tiny())
    partial, gt, params = gradcheck.tiny_problem(cfg, seed=args.seed)
    report = gradcheck.gradcheck(
        partial, gt, cfg, params, sample=args.sample, rng=np.random.default_rng(args.seed), corrupt=args.corrupt,
    )
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _peak_rss_mb():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def cmd_bench(args):
    cfg, _ = _load_config(args.config, config_mod.ModelConfig.toy())
    params = model.init_params(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    print(f"backend={kernels.BACKEND}")
    for n in args.n:
        if n < cfg.min_input:
            print(f"error: --n {n} is below the model minimum {cfg.min_input}", file=sys.stderr)
            return EXIT_USAGE
        x = rng.uniform(-0.5, 0.5, size=(n, 3))
        model.forward(x, cfg, params)  # warm-up
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            model.forward(x, cfg, params)
            times.append(time.perf_counter() - t0)
        print(f"n={n} latency_ms={1e3 * float(np.median(times)):.3f} min_ms={1e3 * min(times):.3f} "
              f"peak_rss_mb={_peak_rss_mb():.1f} output_points={cfg.stage_sizes[-1]}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cra-pcn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic partial/complete pairs and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--difficulty", choices=[*sorted(data.DIFFICULTY), "mixed"], default="mixed")
    g.add_argument("--primitive", choices=[*data.PRIMITIVES, "mixed"], default="mixed")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-complete", type=int, default=2048)
    g.add_argument("--n-partial", type=int, default=2048, help="FPS re-sample size; 0 keeps the raw partial")
    g.add_argument("--format", choices=["xyz", "ply"], default="xyz")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-toy", help="train on a generated dataset, report held-out CD-L1 per epoch")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="config file (default: built-in toy config)")
    t.add_argument("--epochs", type=int, default=25)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_toy)

    c = sub.add_parser("complete", help="complete one partial cloud with a checkpoint")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--stages", action="store_true", help="also write seeds and every stage")
    c.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    c.set_defaults(func=cmd_complete)

    e = sub.add_parser("eval", help="per-category metrics over a dataset")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=["cd-l1", "cd-l2", "fscore"], default="cd-l1")
    e.add_argument("--threshold", type=float, default=0.01, help="F-score distance threshold")
    e.add_argument("--split", choices=["all", "train", "val"], default="all")
    e.add_argument("--config", help="config file whose val_fraction defines the split")
    e.add_argument("--identity", action="store_true", help="score ground truth against itself")
    e.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    k.add_argument("--config", help="config file (default: built-in tiny config)")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--sample", type=int, help="check this many random coordinates per tensor instead of all")
    k.add_argument("--corrupt", help=argparse.SUPPRESS)
    k.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="forward latency and peak memory")
    b.add_argument("--config", help="config file (default: built-in toy config)")
    b.add_argument("--n", type=int, nargs="+", default=[2048])
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

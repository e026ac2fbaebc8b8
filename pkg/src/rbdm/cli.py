"""Command-line entry point: ``rbdm {gen-data,train,sample,eval,gradcheck}``.

Exit codes: 0 success, 1 usage/config, 2 data/I-O, 3 numerics.
"""
import argparse
import logging
import math
import os
import sys
import time

import numpy as np

from rbdm import bridge
from rbdm.config import format_config, load_config
from rbdm.data import (ManifestDataset, generate_dataset, read_manifest, read_tensor,
                       write_tensor, MIN_SYNTHETIC_SIZE, MUELLER_CHANNELS)
from rbdm.errors import ConfigError, DataError, NumericsError
from rbdm.metrics import MetricReport, frechet_from_features, image_metrics, write_report_csv
from rbdm.model import FeatureExtractor
from rbdm.train import load_checkpoint, train

log = logging.getLogger("rbdm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICS = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ images
def to_uint8(img):
    """[-1, 1] -> [0, 255], rounding half up."""
    x = (np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.floor(x + 0.5).astype(np.uint8)


def save_png(path, img):
    from PIL import Image

    arr = to_uint8(img)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def save_image(path, img):
    if path.lower().endswith(".png"):
        save_png(path, img)
    else:
        write_tensor(path, img)


# ---------------------------------------------------------------- commands
def cmd_gen_data(args):
    if args.size < MIN_SYNTHETIC_SIZE:
        raise ConfigError(f"--size {args.size} is below the generator minimum {MIN_SYNTHETIC_SIZE}")
    if args.count < 2:
        raise ConfigError("--count must be at least 2 for a train/test split")
    path = generate_dataset(args.out, args.count, args.size, args.seed, args.train_fraction)
    print(f"wrote {2 * args.count} tensors and {path}")
    return EXIT_OK


def _resolve(path, base):
    return path if not path or os.path.isabs(path) else os.path.join(base, path)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.no_ssr:
        cfg.ssr = False
    if args.no_rr:
        cfg.rr = False
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if not cfg.manifest:
        raise ConfigError("config has no manifest path")
    base = os.path.dirname(os.path.abspath(args.config))
    manifest = read_manifest(_resolve(cfg.manifest, base))
    dataset = ManifestDataset(manifest, split="train", size=cfg.image_size)
    if len(dataset) == 0:
        raise DataError("manifest has no train records")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    start = time.perf_counter()
    _, history = train(cfg, dataset, out_dir=cfg.out_dir, resume=args.resume)
    if history:
        print(f"trained {len(history)} steps in {time.perf_counter() - start:.1f}s; "
              f"final l1={history[-1][1]:.5f} total={history[-1][4]:.5f}")
    return EXIT_OK


def _load_model(args):
    ckpt = load_checkpoint(args.checkpoint)
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        if cfg.T != ckpt.config.T:
            raise ConfigError(f"checkpoint was trained with T={ckpt.config.T}, config says T={cfg.T}")
    return ckpt.build_model(), ckpt.config


def cmd_sample(args):
    model, cfg = _load_model(args)
    y0 = read_tensor(args.input)
    if y0.ndim != 3 or y0.shape[0] != MUELLER_CHANNELS:
        raise DataError(f"{args.input}: expected a {MUELLER_CHANNELS} x H x W Mueller patch, "
                        f"got {y0.shape}")
    if y0.min() < -1 or y0.max() > 1:
        raise DataError(f"{args.input}: values leave [-1, 1]; normalise first")
    steps = args.steps or cfg.sample_steps
    rng = np.random.default_rng(args.seed)
    res = bridge.sample(model, y0, steps, model.schedule, rng, record_trajectory=args.trajectory)
    save_image(args.out, res.image)
    if args.trajectory:
        stem = os.path.splitext(args.out)[0]
        frames = [np.clip(f, -1, 1) for f in res.trajectory]
        save_png(f"{stem}_trajectory.png", np.concatenate(frames, axis=-1))
        write_tensor(f"{stem}_trajectory.mpt", np.stack(frames))
        print(f"wrote {len(frames)} trajectory frames")
    print(f"wrote {args.out}")
    return EXIT_OK


def evaluate(model, dataset, sample_steps, seed, predictor="model", batch=16):
    """Per-sample metric rows, the aggregate report and predictions."""
    n = len(dataset)
    if n == 0:
        raise DataError("evaluation split is empty")
    rng = np.random.default_rng(seed)
    preds, targets = [], []
    for start in range(0, n, batch):
        pairs = [dataset[i] for i in range(start, min(n, start + batch))]
        y0 = np.stack([p[0] for p in pairs])
        x0 = np.stack([p[1] for p in pairs])
        if predictor == "truth":
            out = x0
        elif predictor == "encoder":
            out = np.clip(model.encode(y0), -1, 1)
        else:
            out = bridge.sample(model, y0, sample_steps, model.schedule, rng).image
        preds.append(out)
        targets.append(x0)
    preds = np.concatenate(preds)
    targets = np.concatenate(targets)
    rows = []
    for i, (p, t) in enumerate(zip(preds, targets)):
        row = {"sample_id": i}
        row.update(image_metrics(p, t))
        rows.append(row)
    extractor = FeatureExtractor()
    try:
        ffd = frechet_from_features(extractor.pooled_features(preds),
                                    extractor.pooled_features(targets))
    except ConfigError as exc:
        log.warning("ffd skipped: %s", exc)
        ffd = math.nan
    return rows, MetricReport.from_rows(rows, ffd), preds


def cmd_eval(args):
    manifest = read_manifest(args.manifest)
    if args.predictor == "truth" and not args.checkpoint:
        model, cfg = None, None
        size = manifest.image_size
        steps = 1
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --predictor truth")
        model, cfg = _load_model(args)
        size = cfg.image_size
        steps = cfg.sample_steps
    dataset = ManifestDataset(manifest, split=args.split, size=size)
    if args.limit:
        dataset.manifest.records = dataset.manifest.records[:args.limit]
    rows, report, _ = evaluate(model, dataset, steps, args.seed, args.predictor)
    write_report_csv(args.out, rows, report)
    agg = report.formatted()
    print(f"n={report.n} psnr={agg['psnr']} ssim={agg['ssim']} ms_ssim={agg['ms_ssim']} "
          f"ffd={agg['ffd'] or 'n/a'}")
    return EXIT_OK


def cmd_gradcheck(args):
    from rbdm.gradsuite import main_report

    results, text = main_report()
    print(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICS


# ------------------------------------------------------------------ parser
def build_parser():
    p = _Parser(prog="rbdm", description="Regulated bridge diffusion for Mueller-to-stain translation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.7)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--no-ssr", action="store_true", help="disable starting-state regulation")
    t.add_argument("--no-rr", action="store_true", help="disable route regulation")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out-dir")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="translate one Mueller patch")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help=".png or MPT1 path")
    s.add_argument("--trajectory", action="store_true")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="refuse to run if its T differs from the checkpoint")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="PSNR / SSIM / MS-SSIM / ffd over a split")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out", default="metrics.csv")
    e.add_argument("--predictor", default="model", choices=("model", "encoder", "truth"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int)
    e.add_argument("--config", help="refuse to run if its T differs from the checkpoint")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="64-bit finite-difference suite")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

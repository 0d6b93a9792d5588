"""Command-line entry point: ``sproad <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 invalid data (bad file contents, failed checks).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, cnn, evaluation, imaging, pipeline, superpixel
from .config import Config, ConfigError, METHODS
from .config import load as load_config
from .errors import SproadError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 1, 2, 3
log = logging.getLogger("sproad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def workers() -> int:
    """Worker count from SPROAD_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("SPROAD_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPROAD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("SPROAD_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _map(fn, items):
    n = min(workers(), max(len(items), 1))
    if n <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _config(args) -> Config:
    return load_config(args.config) if args.config else Config()


def _write_text(path, text: str) -> None:
    imaging._atomic_write(Path(path), text.encode("utf-8"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_superpixel(args) -> int:
    cfg = _config(args)
    image = imaging.load_image(args.input)
    seg = superpixel.segment(image, pipeline.slic_params(cfg.slic))
    superpixel.save_segmentation(seg, args.out_seg, args.out_meta)
    n_empty = int(np.count_nonzero(seg.empty_flags))
    print(f"{seg.n_ids} superpixels ({n_empty} empty) on a {seg.rows}x{seg.cols} lattice")
    return EXIT_OK


def _dataset_pairs(root) -> list:
    root = Path(root)
    if not (root / "image_2").is_dir():
        raise FileNotFoundError(f"no image_2/ directory under {root}")
    pairs = imaging.kitti_pairs(root)
    if not pairs:
        raise SproadError(f"no images found in {root / 'image_2'}")
    missing = [img.name for img, gt in pairs if gt is None]
    if missing:
        raise SproadError(f"{len(missing)} image(s) have no ground truth mask: {', '.join(missing[:5])}")
    return pairs


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, cnn=replace(cfg.cnn, seed=args.seed))
    dataset = args.dataset or cfg.io.dataset
    out_model = args.out_model or cfg.io.model
    if not dataset or not out_model:
        raise UsageError("--dataset and --out-model are required (or io.dataset / io.model in the config)")
    pairs = _dataset_pairs(dataset)
    by_name = {img.name: (img, gt) for img, gt in pairs}
    if cfg.cnn.val_fraction > 0 and len(pairs) >= 2:
        train_names, val_names = imaging.split_dataset(sorted(by_name), cfg.cnn.val_fraction, cfg.cnn.seed)
    else:
        train_names, val_names = sorted(by_name), []
    params = pipeline.slic_params(cfg.slic)

    def prepare(name):
        img, gt = by_name[name]
        return pipeline.training_example(imaging.load_image(img), pipeline.load_ground_truth(gt), params)

    start = time.perf_counter()
    train_set = _map(prepare, list(train_names))
    val_set = _map(prepare, list(val_names))
    log.info("prepared %d training and %d validation lattices in %.2fs", len(train_set), len(val_set),
             time.perf_counter() - start)
    history = []
    model = cnn.train(train_set, pipeline.train_params(cfg), history=history)
    cnn.save_model(model, out_model)
    log_path = args.log or f"{out_model}.csv"
    cnn.write_history(history, log_path)
    msg = f"trained {len(history)} epochs on {len(train_set)} images; train accuracy {cnn.accuracy(model, train_set):.4f}"
    if val_set:
        msg += f", validation accuracy {cnn.accuracy(model, val_set):.4f}"
    print(msg)
    print(f"model: {out_model}\nlog: {log_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    if args.overlay and not args.gt:
        raise UsageError("--overlay needs --gt to tell true from false positives")
    model_path = args.model or cfg.io.model
    if not model_path:
        raise UsageError("--model is required (or io.model in the config)")
    image = imaging.load_image(args.input)
    model = cnn.load_model(model_path, dropout=cfg.cnn.dropout)
    gt = pipeline.load_ground_truth(args.gt) if args.gt else None
    method = args.refine or cfg.crf.method
    result = pipeline.infer(image, model, cfg, method)
    t0 = time.perf_counter()
    imaging.save_mask(result.mask, args.out_mask)
    imaging.save_probability(result.probability, args.out_prob)
    if args.overlay:
        imaging.save_image(evaluation.overlay(image, result.mask, gt), args.overlay)
    result.timings["write"] = time.perf_counter() - t0
    for stage, secs in result.timings.items():
        print(f"{stage:>10s}: {secs * 1000:9.1f} ms")
    report = {"input": str(args.input), "refine": method, "timings_s": result.timings,
              "refinement": result.refinement,
              "image": {"height": int(image.shape[0]), "width": int(image.shape[1])},
              "superpixels": result.seg.n_ids}
    if result.refinement and "skipped" in result.refinement:
        print(f"refinement skipped: {result.refinement['skipped']}", file=sys.stderr)
    elif result.refinement:
        print(f"refined {result.refinement['region_pixels']} pixels with {method}")
    if gt is not None:
        report["metrics"] = evaluation.evaluate(result.mask, gt, result.probability)
    if args.report:
        _write_text(args.report, json.dumps(report, indent=2) + "\n")
    return EXIT_OK


_SUFFIXES = (".png", ".pgm", ".ppm")


def _stem_key(path: Path) -> str:
    """KITTI ground truth ``um_road_000001`` pairs with ``um_000001``."""
    stem = path.stem
    for infix in ("_road_", "_lane_"):
        stem = stem.replace(infix, "_")
    return stem


def _index(directory) -> dict:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return {_stem_key(p): p for p in sorted(d.iterdir()) if p.suffix.lower() in _SUFFIXES}


def cmd_eval(args) -> int:
    preds, gts = _index(args.pred_dir), _index(args.gt_dir)
    probs = _index(args.prob_dir) if args.prob_dir else None
    orphans = sorted(set(preds) ^ set(gts))
    if probs is not None:
        orphans += sorted(k for k in set(probs) ^ set(gts) if k not in orphans)
    if orphans:
        raise SproadError(f"unmatched files: {', '.join(orphans)}")
    if not gts:
        raise SproadError("no images to evaluate")
    names = sorted(gts)

    def one(name):
        gt = pipeline.load_ground_truth(gts[name])
        pred = pipeline.load_ground_truth(preds[name])
        prob = imaging.load_probability(probs[name]) if probs is not None else None
        return evaluation.evaluate(pred, gt, prob)

    rows = _map(one, names)
    text = evaluation.report_csv(names, rows)
    if args.out_csv:
        _write_text(args.out_csv, text)
    if args.out_json:
        _write_text(args.out_json, evaluation.report_json(names, rows) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def _corrupted_backward(model, x, targets):
    grads = cnn.backward(model, x, targets)
    grads["fc2.b"] = grads["fc2.b"] * 1.5
    return grads


def cmd_gradcheck(args) -> int:
    backward_fn = _corrupted_backward if args.corrupt_backward else None
    ok = True
    for seed in args.seed:
        start = time.perf_counter()
        res = cnn.gradcheck(seed, args.rows, args.cols, backward_fn=backward_fn)
        status = "ok" if res.passed else "FAILED"
        print(f"seed {seed}: max relative error {res.max_rel_error:.3e} "
              f"(worst {res.worst_param}{list(res.worst_index)}) {status} [{time.perf_counter() - start:.1f}s]")
        ok &= res.passed
    return EXIT_OK if ok else EXIT_DATA


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sproad", description="Superpixel CNN road segmentation with CRF refinement.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("superpixel", help="segment an image into lattice superpixels")
    s.add_argument("--input", required=True)
    s.add_argument("--config")
    s.add_argument("--out-seg", required=True, help="16-bit PGM id map")
    s.add_argument("--out-meta", required=True, help="JSON sidecar")
    s.set_defaults(fn=cmd_superpixel)

    s = sub.add_parser("train", help="train the CNN on image_2/ + gt_image_2/")
    s.add_argument("--dataset")
    s.add_argument("--config")
    s.add_argument("--out-model")
    s.add_argument("--log", help="CSV training log (default: <out-model>.csv)")
    s.add_argument("--seed", type=int, help="overrides cnn.seed")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="label one image")
    s.add_argument("--input", required=True)
    s.add_argument("--model")
    s.add_argument("--config")
    s.add_argument("--out-mask", required=True, help="native mask (0 non-road, 255 road)")
    s.add_argument("--out-prob", required=True, help="16-bit road probability PGM")
    s.add_argument("--refine", choices=METHODS, help="overrides crf.method")
    s.add_argument("--gt", help="ground truth, enables metrics and --overlay")
    s.add_argument("--overlay", help="write a TP/FP/FN overlay image")
    s.add_argument("--report", help="JSON run report")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--prob-dir")
    s.add_argument("--out-csv")
    s.add_argument("--out-json")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the CNN gradients")
    s.add_argument("--seed", type=int, nargs="+", default=[0])
    s.add_argument("--rows", type=int, default=4)
    s.add_argument("--cols", type=int, default=4)
    s.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        workers()
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"sproad: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SproadError as exc:
        print(f"sproad: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"sproad: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"sproad: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

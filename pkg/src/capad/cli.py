"""Command-line front end: ``capad train|pad|eval-pad|seg-analyze|inspect-activations``.

Every command validates its inputs before creating any file, writes each
output atomically (temp file + rename), and drops a ``run manifest`` JSON
next to its artifacts recording the command, the full flag set, the seed
and a digest of the input corpus, so identical manifests imply identical
outputs.  ``CAPAD_THREADS`` overrides ``--threads``; both bound the
internal thread pool whose reductions are order-deterministic.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (confusion_matrix, error_distance_histogram, eval_padding,
                    iou_from_confusion, load_label_map, mask_center, summed_activation_map,
                    write_border_miou_csv, write_histogram_csv, write_metrics_csv,
                    write_svg_plot)
from .imagery import SIDES, AugmentConfig, load_image, load_tensor, save_image
from .net import NetConfig
from .padding import METHOD_TAGS, PaddingMethod
from .train import PadModel, TrainConfig, load_bundle, save_bundle, train_direction

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")
MANIFEST_NAME = "run_manifest.json"


# ---------------------------------------------------------------------------
# Shared plumbing


def _corpus_paths(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"corpus directory {directory!r} does not exist")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no images ({'/'.join(IMAGE_SUFFIXES)}) found in {directory!r}")
    return paths


def _digest_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(b"\0")
        h.update(p.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def _atomic_file(final_path, write_fn) -> None:
    """Run write_fn against a temp path, then rename into place."""
    final_path = Path(final_path)
    fd, tmp = tempfile.mkstemp(dir=str(final_path.parent), prefix=".tmp-",
                               suffix=final_path.suffix)
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, final_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_manifest(path, command: str, args, digest: str) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    data = {
        "command": command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "corpus_digest": digest,
        "version": __version__,
    }
    text = json.dumps(data, sort_keys=True, indent=2) + "\n"
    _atomic_file(path, lambda tmp: Path(tmp).write_text(text))


def _resolve_threads(args) -> int:
    env = os.environ.get("CAPAD_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"CAPAD_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ValueError(f"CAPAD_THREADS must be >= 1, got {n}")
        return n
    if args.threads:
        if args.threads < 1:
            raise ValueError(f"--threads must be >= 1, got {args.threads}")
        return args.threads
    return os.cpu_count() or 1


def _build_method(tag: str, p: int, model: PadModel | None) -> PaddingMethod:
    if tag == "ca":
        if model is None:
            raise ValueError("method 'ca' requires --model pointing at a trained bundle")
        return PaddingMethod(tag=tag, p=p, model=model)
    return PaddingMethod(tag=tag, p=p)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    paths = _corpus_paths(args.corpus)
    corpus = [load_image(p) for p in paths]
    net_cfg = NetConfig(depth=args.depth, base_channels=args.base_channels,
                        in_channels=3, skip_connections=not args.no_skip,
                        seed=args.seed).validate()
    aug = None
    if args.augment_crop:
        aug = AugmentConfig(crop_size=args.augment_crop, seed=args.seed).validate()
    sides = ("left", "top") if args.two_model else SIDES
    threads = _resolve_threads(args)

    def work(item):
        index, side = item
        cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                          loss_norm=args.loss_norm, seed=args.seed + index,
                          augment=aug, border_only=args.border_only).validate()
        return train_direction(corpus, side, cfg, net_cfg, args.p, args.m)

    with ThreadPoolExecutor(max_workers=min(threads, len(sides))) as ex:
        results = list(ex.map(work, enumerate(sides)))
    nets = {side: net for side, (net, _) in zip(sides, results)}
    model = PadModel(left=nets["left"], right=nets.get("right"), top=nets["top"],
                     bottom=nets.get("bottom"), p=args.p, m=args.m,
                     two_model_mode=args.two_model)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp_dir = Path(tempfile.mkdtemp(dir=str(out), prefix=".bundle-tmp-"))
    try:
        save_bundle(model, tmp_dir)
        for name in sorted(os.listdir(tmp_dir)):
            os.replace(tmp_dir / name, out / name)
    finally:
        for leftover in tmp_dir.glob("*"):
            leftover.unlink()
        tmp_dir.rmdir()

    def write_loss(tmp):
        with open(tmp, "w") as f:
            f.write("side,epoch,loss\n")
            for side, (_, history) in zip(sides, results):
                for epoch, loss in enumerate(history, start=1):
                    f.write(f"{side},{epoch},{format(loss, '.10g')}\n")

    _atomic_file(out / "loss.csv", write_loss)
    _write_manifest(out / MANIFEST_NAME, "train", args, _digest_files(paths))
    finals = {side: history[-1] for side, (_, history) in zip(sides, results)}
    print(f"trained {len(sides)} direction model(s) on {len(corpus)} image(s); "
          f"final loss {finals}")
    return 0


# ---------------------------------------------------------------------------
# pad


def cmd_pad(args) -> int:
    tensor = load_image(args.image)
    model = load_bundle(args.model) if args.model else None
    method = _build_method(args.method, args.p, model)
    padded = method.apply(tensor, args.p)
    _atomic_file(args.out, lambda tmp: save_image(padded, tmp))
    _write_manifest(str(args.out) + ".manifest.json", "pad", args,
                    _digest_files([args.image]))
    print(f"wrote {args.out} ({padded.shape[2]}x{padded.shape[1]})")
    return 0


# ---------------------------------------------------------------------------
# eval-pad


def cmd_eval_pad(args) -> int:
    paths = _corpus_paths(args.corpus)
    corpus = [load_image(p) for p in paths]
    tags = [s.strip() for s in args.methods.split(",") if s.strip()]
    if not tags:
        raise ValueError("--methods must name at least one method")
    for tag in tags:
        if tag not in METHOD_TAGS:
            raise ValueError(f"unknown method {tag!r}; expected one of {METHOD_TAGS}")
    p_list = [int(s) for s in args.p_list.split(",") if s.strip()]
    if not p_list:
        raise ValueError("--p-list must name at least one padding width")
    overlap = Fraction(args.overlap)
    model = load_bundle(args.model) if "ca" in tags else None
    methods = [_build_method(tag, max(p_list), model) for tag in tags]
    threads = _resolve_threads(args)

    by_p = {}
    with ThreadPoolExecutor(max_workers=threads) as ex:
        map_fn = ex.map if threads > 1 else None
        for p in p_list:
            records = eval_padding(corpus, methods, p, args.crop, overlap, args.m,
                                   map_fn=map_fn)
            by_p[p] = {rec.method: rec for rec in records}
    rows = [by_p[p][tag] for tag in tags for p in p_list]

    _atomic_file(args.out, lambda tmp: write_metrics_csv(rows, tmp))
    _write_manifest(str(args.out) + ".manifest.json", "eval-pad", args,
                    _digest_files(paths))
    for rec in rows:
        print(f"{rec.method} p={rec.p}: psnr {rec.psnr_db:.2f} dB, mse {rec.mse:.3e}")
    return 0


# ---------------------------------------------------------------------------
# seg-analyze


def cmd_seg_analyze(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise ValueError(f"directory {d} does not exist")
    pred_names = {p.name for p in pred_dir.glob("*.png")}
    gt_names = {p.name for p in gt_dir.glob("*.png")}
    if pred_names != gt_names:
        missing = sorted(pred_names.symmetric_difference(gt_names))
        raise ValueError("unmatched label files between --pred and --gt: " + ", ".join(missing))
    names = sorted(pred_names)
    if not names:
        raise ValueError("no .png label maps found")
    fractions = [s.strip() for s in args.leave_out.split(",") if s.strip()]
    for s in fractions:
        f = Fraction(s)
        if not 0 <= f < 1:
            raise ValueError(f"leave-out fraction {s!r} outside [0, 1)")
    palette = args.palette or None
    num = args.num_classes

    conf = {s: np.zeros((num, num), dtype=np.int64) for s in fractions}
    missed = {s: np.zeros(num, dtype=np.int64) for s in fractions}
    hist_counts = np.zeros(0, dtype=np.int64)
    hist_centers = np.zeros(0)
    for name in names:
        pred = load_label_map(pred_dir / name, palette)
        gt = load_label_map(gt_dir / name, palette)
        for s in fractions:
            c, mi = confusion_matrix(pred, mask_center(gt, Fraction(s)), num)
            conf[s] += c
            missed[s] += mi
        centers, counts = error_distance_histogram(pred, gt, args.bin_width)
        if counts.size > hist_counts.size:
            grown = np.zeros(counts.size, dtype=np.int64)
            grown[:hist_counts.size] = hist_counts
            hist_counts, hist_centers = grown, centers
        hist_counts[:counts.size] += counts

    miou_rows = [(s, iou_from_confusion(conf[s], missed[s])[1]) for s in fractions]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_file(out_dir / "border_miou.csv",
                 lambda tmp: write_border_miou_csv(miou_rows, tmp))
    _atomic_file(out_dir / "error_distance.csv",
                 lambda tmp: write_histogram_csv(hist_centers, hist_counts, tmp))
    _atomic_file(out_dir / "error_distance.svg",
                 lambda tmp: write_svg_plot(tmp, hist_centers, hist_counts, kind="bar",
                                            title="errors vs distance to center",
                                            x_label="distance (px)", y_label="errors"))
    _write_manifest(out_dir / MANIFEST_NAME, "seg-analyze", args,
                    _digest_files([pred_dir / n for n in names] + [gt_dir / n for n in names]))
    for s, value in miou_rows:
        print(f"leave-out {s}: mIoU {value:.4f}")
    return 0


# ---------------------------------------------------------------------------
# inspect-activations


def _parse_kernel(spec: str, channels: int) -> np.ndarray:
    if spec.startswith("random:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad kernel spec {spec!r}; expected random:<seed>")
        rng = np.random.default_rng(seed)
        return rng.standard_normal((8, channels, 3, 3))
    if not Path(spec).is_file():
        raise ValueError(f"bad kernel spec {spec!r}: expected random:<seed> or a CAPT file")
    t = load_tensor(spec)  # (out, k, k); the same filter is applied per channel
    if t.shape[1] != t.shape[2] or t.shape[1] % 2 == 0:
        raise ValueError(f"kernel tensor must be (out, k, k) with odd k, got {t.shape}")
    return np.repeat(t[:, None, :, :], channels, axis=1)


def cmd_inspect_activations(args) -> int:
    tensor = load_image(args.image)
    weights = _parse_kernel(args.kernel, tensor.shape[0])
    model = load_bundle(args.model) if args.model else None
    p = max(1, (weights.shape[2] - 1) // 2)
    method = _build_method(args.method, p, model)
    amap = summed_activation_map(tensor, weights, method)
    if args.crop_corner:
        n = args.crop_corner
        if n < 1 or n > min(amap.shape):
            raise ValueError(f"--crop-corner {n} outside [1, {min(amap.shape)}]")
        amap = amap[:n, :n]
    _atomic_file(args.out, lambda tmp: save_image(np.ascontiguousarray(amap[None]), tmp))
    _write_manifest(str(args.out) + ".manifest.json", "inspect-activations", args,
                    _digest_files([args.image]))
    print(f"wrote {args.out} ({amap.shape[1]}x{amap.shape[0]})")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="capad",
        description="Context-aware padding: train extrapolation models, pad images, "
                    "and benchmark padding quality and border effects.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument("--threads", type=int, default=0,
                       help="worker threads (0 = all cores; CAPAD_THREADS overrides)")

    t = sub.add_parser("train", help="train direction models on an image corpus")
    t.add_argument("--corpus", required=True, help="directory of training images")
    t.add_argument("--out", required=True, help="output bundle directory")
    t.add_argument("--p", type=int, default=3, help="padding width (default 3)")
    t.add_argument("--m", type=int, default=20, help="context width (default 20)")
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--two-model", action="store_true",
                   help="train left/top only; right/bottom reuse them via flips")
    t.add_argument("--loss-norm", choices=("l1", "l2"), default="l1")
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--base-channels", type=int, default=16)
    t.add_argument("--no-skip", action="store_true", help="disable skip connections")
    t.add_argument("--border-only", action="store_true",
                   help="supervise strips at true image borders only")
    t.add_argument("--augment-crop", type=int, default=0,
                   help="enable augmentation with this crop size (0 = off)")
    add_threads(t)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("pad", help="pad one image with a chosen method")
    p.add_argument("--image", required=True)
    p.add_argument("--method", required=True, choices=METHOD_TAGS)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--model", default=None, help="bundle directory (required for ca)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pad, threads=1)

    e = sub.add_parser("eval-pad", help="score padding methods on masked borders")
    e.add_argument("--corpus", required=True)
    e.add_argument("--methods", required=True,
                   help="comma-separated method tags, e.g. zero,replicate,ca")
    e.add_argument("--p-list", default="1,3", help="comma-separated pad widths")
    e.add_argument("--crop", type=int, default=719)
    e.add_argument("--overlap", default="1/3", help="crop overlap fraction")
    e.add_argument("--m", type=int, default=20)
    e.add_argument("--model", default=None)
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--seed", type=int, default=0)
    add_threads(e)
    e.set_defaults(func=cmd_eval_pad)

    s = sub.add_parser("seg-analyze", help="border mIoU and error-distance histogram")
    s.add_argument("--pred", required=True, help="directory of predicted label maps")
    s.add_argument("--gt", required=True, help="directory of ground-truth label maps")
    s.add_argument("--num-classes", type=int, required=True)
    s.add_argument("--leave-out", default="0,1/3,1/2,2/3,3/4",
                   help="comma-separated center fractions to ignore")
    s.add_argument("--bin-width", type=int, default=10)
    s.add_argument("--palette", default=None, choices=("deepglobe",),
                   help="decode RGB label maps with a named palette")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_seg_analyze, threads=1)

    i = sub.add_parser("inspect-activations", help="summed-activation heatmap of a conv")
    i.add_argument("--image", required=True)
    i.add_argument("--method", required=True, choices=METHOD_TAGS)
    i.add_argument("--kernel", default="random:0",
                   help="random:<seed> or a CAPT tensor of shape (out, k, k)")
    i.add_argument("--model", default=None)
    i.add_argument("--crop-corner", type=int, default=0,
                   help="also crop the top-left NxN corner of the heatmap")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect_activations, threads=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TypeError, FloatingPointError, OSError) as exc:
        print(f"capad: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line harness: train, eval, ablate, restore, gradcheck.

Run configuration is a strict JSON document (unknown keys are rejected); the
fully-resolved config is echoed into the output directory so any run can be
reproduced by feeding the echo back in.  Images are written as binary
portable pixmaps (P6), which round-trip bit-exactly.
"""

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import (
    ALL_VARIANTS,
    ModelConfig,
    VariantKind,
    build_model,
    param_count,
)
from .data import (
    DatasetSplit,
    degraded_pairs,
    load_cifar10_dir,
    make_batches,
    quantize_to_bytes,
)
from .gradcheck import TOLERANCE, run_suite
from .metrics import evaluate_testset, restore_batch
from .training import (
    CheckpointError,
    TrainConfig,
    epoch_seed,
    fit,
    load_checkpoint,
    validate,
)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset_dir: str = "data"
    dataset_seed: int = 0
    subset_size: int = None  # train-split cap; None means the full split
    val_size: int = 5000
    test_size: int = None  # test-split cap for eval/ablate

    def __post_init__(self):
        for name in ("subset_size", "val_size", "test_size"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"data.{name} must be >= 1, got {v}")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    variants: list  # ablate-only; None means all five
    output_dir: str


_MODEL_KEYS = ("width", "enc_blocks", "mid_blocks", "dec_blocks")
_TRAIN_KEYS = (
    "epochs", "batch_size", "lr_init", "lr_final", "beta1", "beta2",
    "eps", "patience", "seed", "deterministic",
)
_DATA_KEYS = ("dataset_dir", "dataset_seed", "subset_size", "val_size", "test_size")
_TOP_KEYS = ("variant", "variants", "model", "train", "data", "output_dir")


def _check_keys(doc, allowed, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {prefix or 'root'} must be an object")
    for k in doc:
        if k not in allowed:
            path = f"{prefix}.{k}" if prefix else k
            raise ConfigError(f"unknown config key {path!r}")


def parse_run_config(doc):
    """Validate and resolve a config document, applying defaults."""
    _check_keys(doc, _TOP_KEYS, "")
    model_doc = doc.get("model", {})
    _check_keys(model_doc, _MODEL_KEYS, "model")
    train_doc = doc.get("train", {})
    _check_keys(train_doc, _TRAIN_KEYS, "train")
    data_doc = doc.get("data", {})
    _check_keys(data_doc, _DATA_KEYS, "data")
    try:
        model = ModelConfig(
            base_width=model_doc.get("width", 32),
            enc_blocks=tuple(model_doc.get("enc_blocks", (2, 2))),
            mid_blocks=model_doc.get("mid_blocks", 2),
            dec_blocks=tuple(model_doc.get("dec_blocks", (2, 2))),
            variant=VariantKind.parse(doc.get("variant", "baseline")),
        )
        train = TrainConfig(**train_doc)
        data = DataConfig(**data_doc)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    variants = doc.get("variants")
    if variants is not None:
        variants = [VariantKind.parse(v) for v in variants]
    return RunConfig(
        model=model,
        train=train,
        data=data,
        variants=variants,
        output_dir=doc.get("output_dir", "runs/latest"),
    )


def load_run_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON: {e}") from None
    return parse_run_config(doc)


def resolved_config_dict(rc):
    return {
        "variant": rc.model.variant.value,
        "variants": [v.value for v in rc.variants] if rc.variants else None,
        "model": {
            "width": rc.model.base_width,
            "enc_blocks": list(rc.model.enc_blocks),
            "mid_blocks": rc.model.mid_blocks,
            "dec_blocks": list(rc.model.dec_blocks),
        },
        "train": {k: getattr(rc.train, k) for k in _TRAIN_KEYS},
        "data": {k: getattr(rc.data, k) for k in _DATA_KEYS},
        "output_dir": rc.output_dir,
    }


def _echo_config(rc, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(resolved_config_dict(rc), indent=2, sort_keys=True) + "\n"
    (out_dir / "config_resolved.json").write_text(text)


# ---------------------------------------------------------------------------
# portable pixmap i/o


def write_image(img, path):
    """Write a (3, h, w) [0, 1] image as a binary P6 pixmap, round-half-up."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_image: expected (3, h, w), got {img.shape}")
    q = quantize_to_bytes(img).transpose(1, 2, 0)
    h, w = q.shape[0], q.shape[1]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_image(path):
    """Read a binary P6 pixmap into a (3, h, w) float32 array in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise ValueError(f"{path}: not a binary P6 pixmap")
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError(f"{path}: truncated pixmap header")
        fields.append(int(data[start:i]))
    i += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}, expected 255")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=i)
    if raster.size != w * h * 3:
        raise ValueError(f"{path}: raster truncated ({raster.size} of {w * h * 3} bytes)")
    return raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# dataset plumbing


def _load_train_val(rc):
    train_records, _ = load_cifar10_dir(rc.data.dataset_dir)
    split = DatasetSplit.standard(len(train_records), rc.data.val_size)
    train_idx = split.train
    if rc.data.subset_size is not None:
        train_idx = train_idx[: rc.data.subset_size]
    seed = rc.data.dataset_seed
    train_pairs = degraded_pairs([train_records[i] for i in train_idx], seed, "train")
    val_pairs = degraded_pairs([train_records[i] for i in split.val], seed, "val")
    return train_pairs, val_pairs


def _load_test(rc):
    _, test_records = load_cifar10_dir(rc.data.dataset_dir)
    return degraded_pairs(
        test_records, rc.data.dataset_seed, "test", limit=rc.data.test_size
    )


def _first_batch_checksum(train_pairs, rc):
    deg, clean = next(
        iter(make_batches(*train_pairs, rc.train.batch_size, epoch_seed(rc.train.seed, 0)))
    )
    return hashlib.sha256(deg.tobytes() + clean.tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def _train_one(rc, out_dir, log_name="train_log.csv"):
    """Shared train loop behind cmd_train and cmd_ablate; returns a result row."""
    out_dir.mkdir(parents=True, exist_ok=True)
    train_pairs, val_pairs = _load_train_val(rc)
    model = build_model(rc.model, seed=rc.train.seed)
    init_val = validate(model, val_pairs)
    n_params = param_count(model)
    print(
        f"[{rc.model.variant.value}] params={n_params} "
        f"train={len(train_pairs[0])} val={len(val_pairs[0])} "
        f"init val PSNR {init_val:.6f} dB"
    )
    ckpt = out_dir / "checkpoint_best.nafc"
    with open(out_dir / log_name, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "train_loss", "val_psnr"])

        def progress(row):
            writer.writerow([row.epoch, row.lr, row.train_loss, row.val_psnr])
            f.flush()
            print(
                f"[{rc.model.variant.value}] epoch {row.epoch:3d}  lr {row.lr:.3e}  "
                f"loss {row.train_loss:.6f}  val PSNR {row.val_psnr:.4f} dB"
            )

        logs, stop, _opt = fit(
            model, rc.train, train_pairs, val_pairs,
            checkpoint_path=ckpt, progress=progress,
        )
    result = {
        "variant": rc.model.variant.value,
        "param_count": n_params,
        "init_val_psnr": init_val,
        "epochs_run": len(logs),
        "best_epoch": stop.best_epoch,
        "best_val_psnr": stop.best_val_psnr,
        "checkpoint": str(ckpt),
        "first_batch_sha256": _first_batch_checksum(train_pairs, rc),
    }
    (out_dir / "results.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def cmd_train(rc):
    out_dir = Path(rc.output_dir)
    _echo_config(rc, out_dir)
    result = _train_one(rc, out_dir)
    print(
        f"done: best val PSNR {result['best_val_psnr']:.4f} dB "
        f"at epoch {result['best_epoch']} -> {result['checkpoint']}"
    )
    return 0


def cmd_eval(checkpoint_path, rc, out_dir=None):
    model, _opt, meta = load_checkpoint(checkpoint_path)
    test_pairs = _load_test(rc)
    report = evaluate_testset(model, test_pairs)
    variant = meta.get("variant", model.config.variant.value)
    print(f"checkpoint: {checkpoint_path}")
    print(f"variant: {variant}  images: {report.n_images}")
    print(f"mean PSNR: {report.mean_psnr:.2f} dB")
    print(f"mean SSIM: {report.mean_ssim:.4f}")
    out_dir = Path(out_dir) if out_dir else Path(checkpoint_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    row_path = out_dir / "eval_results.csv"
    with open(row_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "psnr_db", "ssim", "n_images", "param_count"])
        writer.writerow(
            [variant, report.mean_psnr, report.mean_ssim, report.n_images, param_count(model)]
        )
    print(f"results row -> {row_path}")
    return 0


_TABLE_FOOTNOTE = (
    "LPIPS: out of scope (requires pretrained perceptual-feature weights)."
)


def format_ablation_table(rows):
    """Aligned text table; the best PSNR and SSIM cells are flagged with '*'."""
    ok = [r for r in rows if r["status"] == "ok"]
    best_psnr = max((r["psnr"] for r in ok), default=None)
    best_ssim = max((r["ssim"] for r in ok), default=None)
    header = ["Variant", "PSNR (dB)", "SSIM", "Params", "Epochs", "Best epoch"]
    table = [header]
    for r in rows:
        if r["status"] != "ok":
            table.append([r["label"], "failed", "-", "-", "-", "-"])
            continue
        psnr_cell = f"{r['psnr']:.2f}" + ("*" if r["psnr"] == best_psnr else "")
        ssim_cell = f"{r['ssim']:.4f}" + ("*" if r["ssim"] == best_ssim else "")
        table.append(
            [
                r["label"],
                psnr_cell,
                ssim_cell,
                str(r["params"]),
                str(r["epochs_run"]),
                str(r["best_epoch"]),
            ]
        )
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for ri, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if ri == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(header))))
    lines.append("")
    lines.append(_TABLE_FOOTNOTE)
    return "\n".join(lines) + "\n"


def cmd_ablate(rc):
    out_dir = Path(rc.output_dir)
    _echo_config(rc, out_dir)
    variants = rc.variants if rc.variants else list(ALL_VARIANTS)
    test_pairs = _load_test(rc)
    rows = []
    reference_checksum = None
    for variant in variants:
        vdir = out_dir / variant.value
        vcfg = RunConfig(
            model=ModelConfig(
                base_width=rc.model.base_width,
                enc_blocks=rc.model.enc_blocks,
                mid_blocks=rc.model.mid_blocks,
                dec_blocks=rc.model.dec_blocks,
                variant=variant,
            ),
            train=rc.train,
            data=rc.data,
            variants=None,
            output_dir=str(vdir),
        )
        try:
            result = _train_one(vcfg, vdir)
            if reference_checksum is None:
                reference_checksum = result["first_batch_sha256"]
            elif result["first_batch_sha256"] != reference_checksum:
                raise RuntimeError(
                    "ablation fairness violation: first-batch checksum differs "
                    f"for {variant.value}"
                )
            model, _opt, _meta = load_checkpoint(result["checkpoint"])
            report = evaluate_testset(model, test_pairs)
            rows.append(
                {
                    "label": variant.label,
                    "variant": variant.value,
                    "status": "ok",
                    "psnr": report.mean_psnr,
                    "ssim": report.mean_ssim,
                    "params": result["param_count"],
                    "epochs_run": result["epochs_run"],
                    "best_epoch": result["best_epoch"],
                }
            )
            _write_sample_strips(out_dir / "samples", variant, model, test_pairs)
        except Exception as e:  # record the failure, keep ablating
            print(f"[{variant.value}] FAILED: {e}", file=sys.stderr)
            rows.append(
                {
                    "label": variant.label,
                    "variant": variant.value,
                    "status": f"failed: {e}",
                    "psnr": None,
                    "ssim": None,
                    "params": None,
                    "epochs_run": None,
                    "best_epoch": None,
                }
            )
    rows_for_status = [r for r in rows if r["status"] == "ok"]
    table = format_ablation_table(rows)
    print(table, end="")
    (out_dir / "ablation_table.txt").write_text(table)
    with open(out_dir / "ablation_table.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["variant", "status", "psnr_db", "ssim", "params", "epochs_run", "best_epoch"]
        )
        for r in rows:
            writer.writerow(
                [
                    r["variant"],
                    r["status"] if r["status"] == "ok" else "failed",
                    r["psnr"],
                    r["ssim"],
                    r["params"],
                    r["epochs_run"],
                    r["best_epoch"],
                ]
            )
    return 0 if rows_for_status else 1


def _write_sample_strips(samples_dir, variant, model, test_pairs, count=4):
    samples_dir.mkdir(parents=True, exist_ok=True)
    degraded, clean = test_pairs
    count = min(count, len(degraded))
    restored = restore_batch(model, degraded[:count])
    for i in range(count):
        strip = np.concatenate([clean[i], degraded[i], restored[i]], axis=2)
        write_image(strip, samples_dir / f"{variant.value}_sample{i}.ppm")


def cmd_restore(checkpoint_path, input_path, output_path):
    model, _opt, _meta = load_checkpoint(checkpoint_path)
    img = read_image(input_path)
    if img.shape[1:] != (32, 32):
        raise ValueError(
            f"{input_path}: expected a 32x32 image, got {img.shape[2]}x{img.shape[1]}"
        )
    restored = restore_batch(model, img[None])[0]
    write_image(restored, output_path)
    strip_path = Path(output_path).with_suffix(".strip.ppm")
    write_image(np.concatenate([img, restored], axis=2), strip_path)
    print(f"restored -> {output_path}")
    print(f"side-by-side -> {strip_path}")
    return 0


def cmd_gradcheck():
    results = run_suite()
    width = max(len(name) for name, _ in results)
    failures = []
    for name, err in results:
        status = "PASS" if err < TOLERANCE else "FAIL"
        if status == "FAIL":
            failures.append(name)
        print(f"{name.ljust(width)}  {err:.3e}  {status}")
    if failures:
        print(f"FAILED: {', '.join(failures)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed (tolerance {TOLERANCE:g})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _apply_overrides(rc, args, subset_target):
    if getattr(args, "seed", None) is not None:
        rc.train.seed = args.seed
    if getattr(args, "deterministic", False):
        rc.train.deterministic = True
    if getattr(args, "out", None):
        rc.output_dir = args.out
    subset = getattr(args, "subset", None)
    if subset is not None:
        setattr(rc.data, subset_target, subset)
    return rc


def _config_from_args(args, subset_target="subset_size"):
    rc = load_run_config(args.config) if args.config else parse_run_config({})
    return _apply_overrides(rc, args, subset_target)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="nafrestore",
        description="Train, evaluate, and ablate an activation-free restoration "
        "network on blur+noise degraded 32x32 images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="run config JSON path")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic mode")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--subset", type=int, help="cap the split size")

    p_train = sub.add_parser("train", help="train one variant")
    add_common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("checkpoint")
    add_common(p_eval)

    p_ablate = sub.add_parser("ablate", help="train and evaluate all variants")
    add_common(p_ablate)

    p_restore = sub.add_parser("restore", help="restore a single 32x32 pixmap")
    p_restore.add_argument("checkpoint")
    p_restore.add_argument("input")
    p_restore.add_argument("output")

    sub.add_parser("gradcheck", help="finite-difference check of every op")

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(_config_from_args(args))
        if args.command == "eval":
            rc = _config_from_args(args, subset_target="test_size")
            return cmd_eval(args.checkpoint, rc, out_dir=getattr(args, "out", None))
        if args.command == "ablate":
            return cmd_ablate(_config_from_args(args))
        if args.command == "restore":
            return cmd_restore(args.checkpoint, args.input, args.output)
        if args.command == "gradcheck":
            return cmd_gradcheck()
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())

"""MSE/Adam training loop with cosine schedule, early stopping, and checkpoints."""

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .blocks import ModelConfig, build_model, unet_forward
from .data import make_batches
from .metrics import psnr
from .tensor import Tape, Tensor, backward, mean_all, mul, sub

CHECKPOINT_MAGIC = b"NAFC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs {self.epochs} must be >= 1")
        if not 0.0 < self.lr_final <= self.lr_init:
            raise ValueError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size {self.batch_size} must be >= 1")


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, model, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros(p.shape, dtype=np.float32) for n, p in model.params.items()}
        self.v = {n: np.zeros(p.shape, dtype=np.float32) for n, p in model.params.items()}


@dataclass
class EarlyStopState:
    best_val_psnr: float = float("-inf")
    best_epoch: int = -1
    epochs_since_improve: int = 0


def early_stop_update(state, epoch, val_psnr, improve_eps=1e-4, patience=10):
    """Track the best epoch; return True exactly when patience is exhausted."""
    if val_psnr > state.best_val_psnr + improve_eps:
        state.best_val_psnr = val_psnr
        state.best_epoch = epoch
        state.epochs_since_improve = 0
        return False
    state.epochs_since_improve += 1
    return state.epochs_since_improve >= patience


def mse_loss(pred, target):
    """Mean squared difference as a scalar tensor; grad is 2*(pred-target)/N."""
    d = sub(pred, target)
    return mean_all(mul(d, d))


def cosine_lr(epoch, cfg):
    """Cosine decay from lr_init (epoch 0) to lr_final (last epoch)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_init
    t = epoch / (cfg.epochs - 1)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


def adam_step(model, opt, lr):
    """Bias-corrected Adam update; grads are left untouched for the caller."""
    for name, p in model.params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: missing gradient for parameter {name!r}")
    opt.t += 1
    bc1 = 1.0 - opt.beta1**opt.t
    bc2 = 1.0 - opt.beta2**opt.t
    for name, p in model.params.items():
        g = p.grad.astype(np.float64)
        m = opt.beta1 * opt.m[name].astype(np.float64) + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name].astype(np.float64) + (1.0 - opt.beta2) * g * g
        opt.m[name] = m.astype(np.float32)
        opt.v[name] = v.astype(np.float32)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p.data = (p.data.astype(np.float64) - step).astype(np.float32)


def train_epoch(model, opt, batches, lr):
    """One pass over the batches: zero grads, forward, MSE, backward, Adam."""
    losses = []
    for bi, (deg, clean) in enumerate(batches):
        model.zero_grads()
        with Tape() as tape:
            pred = unet_forward(Tensor(deg), model)
            loss = mse_loss(pred, Tensor(clean))
        value = float(loss.data.reshape(()))
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite training loss at batch {bi}")
        backward(tape, loss)
        adam_step(model, opt, lr)
        losses.append(value)
    if not losses:
        raise ValueError("train_epoch: no batches")
    return math.fsum(losses) / len(losses)


def validate(model, val_pairs, batch_size=64):
    """Mean per-image PSNR of clamped restorations over fixed degraded pairs."""
    degraded, clean = val_pairs
    values = []
    for start in range(0, len(degraded), batch_size):
        out = unet_forward(Tensor(degraded[start : start + batch_size]), model)
        restored = np.clip(out.data, 0.0, 1.0)
        for i, img in enumerate(restored):
            values.append(psnr(img, clean[start + i]))
    return math.fsum(values) / len(values)


def epoch_seed(seed, epoch):
    """Stable per-epoch shuffle seed derived from the run seed."""
    tag = f"epoch|{seed}|{epoch}".encode("utf-8")
    return int.from_bytes(hashlib.blake2s(tag, digest_size=8).digest(), "little")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_psnr: float


def fit(model, cfg, train_pairs, val_pairs, checkpoint_path=None, progress=None):
    """Full training run; returns (per-epoch logs, early-stop state, optimizer).

    The best-validation checkpoint is rewritten whenever validation improves.
    """
    opt = AdamState(model, cfg.beta1, cfg.beta2, cfg.eps)
    stop = EarlyStopState()
    logs = []
    train_d, train_c = train_pairs
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        batches = make_batches(train_d, train_c, cfg.batch_size, epoch_seed(cfg.seed, epoch))
        mean_loss = train_epoch(model, opt, batches, lr)
        val_psnr = validate(model, val_pairs)
        logs.append(EpochLog(epoch, lr, mean_loss, val_psnr))
        should_stop = early_stop_update(stop, epoch, val_psnr, patience=cfg.patience)
        if stop.best_epoch == epoch and checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                model,
                opt,
                meta={"epoch": epoch, "best_val_psnr": stop.best_val_psnr},
            )
        if progress is not None:
            progress(logs[-1])
        if should_stop:
            break
    return logs, stop, opt


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON header, raw little-endian f32
# payload for parameters and both Adam moment sets


class CheckpointError(Exception):
    pass


def _payload_entries(model, opt):
    for name, p in model.params.items():
        yield "param", name, p.data
    for name in model.params:
        yield "adam_m", name, opt.m[name]
    for name in model.params:
        yield "adam_v", name, opt.v[name]


def save_checkpoint(path, model, opt, meta=None):
    meta = dict(meta or {})
    payload = bytearray()
    tensors = []
    for kind, name, arr in _payload_entries(model, opt):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append(
            {
                "kind": kind,
                "name": name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    cfg = model.config
    header = {
        "version": CHECKPOINT_VERSION,
        "variant": cfg.variant.value,
        "model_config": {
            "base_width": cfg.base_width,
            "enc_blocks": list(cfg.enc_blocks),
            "mid_blocks": cfg.mid_blocks,
            "dec_blocks": list(cfg.dec_blocks),
            "variant": cfg.variant.value,
        },
        "adam": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t},
        "meta": meta,
        "tensors": tensors,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def _read_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise CheckpointError(f"truncated checkpoint: only {len(raw)} bytes")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}; not a checkpoint file")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    if len(raw) < 16 + header_len:
        raise CheckpointError("truncated checkpoint: header extends past end of file")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    payload = raw[16 + header_len :]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(
            f"truncated payload: {len(payload)} bytes, header declares "
            f"{header['payload_nbytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch; file is corrupt")
    return header, payload


def _extract(header, payload, kind):
    out = {}
    for entry in header["tensors"]:
        if entry["kind"] != kind:
            continue
        start, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * 4:
            raise CheckpointError(
                f"tensor {entry['name']}: {nbytes} bytes does not match shape {shape}"
            )
        arr = np.frombuffer(payload[start : start + nbytes], dtype="<f4").reshape(shape)
        out[entry["name"]] = arr.copy()
    return out


def load_checkpoint(path):
    """Rebuild (model, optimizer, meta) from a checkpoint file, bitwise."""
    header, payload = _read_checkpoint(path)
    config = ModelConfig(**header["model_config"])
    model = build_model(config, seed=0)
    params = _extract(header, payload, "param")
    _check_name_shapes(model, params, str(path))
    for name, arr in params.items():
        model.params[name].data = arr
    opt = AdamState(
        model,
        beta1=header["adam"]["beta1"],
        beta2=header["adam"]["beta2"],
        eps=header["adam"]["eps"],
    )
    opt.t = header["adam"]["t"]
    opt.m = _extract(header, payload, "adam_m")
    opt.v = _extract(header, payload, "adam_v")
    meta = dict(header["meta"])
    meta.setdefault("variant", header["variant"])
    return model, opt, meta


def _check_name_shapes(model, params, source):
    expected = {n: tuple(p.shape) for n, p in model.params.items()}
    got = {n: tuple(a.shape) for n, a in params.items()}
    if expected == got:
        return
    missing = sorted(set(expected) - set(got))
    unexpected = sorted(set(got) - set(expected))
    mismatched = sorted(
        n for n in set(expected) & set(got) if expected[n] != got[n]
    )
    parts = []
    if missing:
        parts.append(f"missing {missing[:4]}")
    if unexpected:
        parts.append(f"unexpected {unexpected[:4]}")
    if mismatched:
        parts.append(
            "shape mismatch "
            + str([(n, got[n], expected[n]) for n in mismatched[:4]])
        )
    raise CheckpointError(f"{source}: parameter name/shape mismatch: " + "; ".join(parts))


def load_checkpoint_into(path, model):
    """Load a checkpoint's parameters into an existing model of the same variant."""
    header, payload = _read_checkpoint(path)
    if header["variant"] != model.config.variant.value:
        raise CheckpointError(
            f"{path}: checkpoint variant {header['variant']} does not match "
            f"model variant {model.config.variant.value}"
        )
    params = _extract(header, payload, "param")
    _check_name_shapes(model, params, str(path))
    for name, arr in params.items():
        model.params[name].data = arr
    return dict(header["meta"])

"""CIFAR-10 binary ingestion and the deterministic blur+noise degradation pipeline.

Every random quantity (per-image blur/noise strengths, the noise field itself,
batch shuffles) is drawn from a counter-based Philox stream keyed by a hashed
(purpose, dataset seed, split, index) tag, so regeneration is bitwise
reproducible and the train/val/test splits never share a stream.
"""

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073  # 1 label byte + 3 x 1024 plane bytes (R, G, B), row-major
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

BLUR_SIGMA_MAX = 3.0
NOISE_SIGMA_MAX = 30.0  # pixel units on the 0..255 scale


@dataclass
class ImageRecord:
    index: int
    label: int
    clean: np.ndarray  # (3, 32, 32) float32 in [0, 1]


@dataclass(frozen=True)
class DegradationSpec:
    """Per-image degradation strengths and the seed of its noise field."""

    sigma_blur: float
    sigma_noise: float
    noise_seed: int

    def __post_init__(self):
        if not 0.0 <= self.sigma_blur <= BLUR_SIGMA_MAX:
            raise ValueError(f"sigma_blur {self.sigma_blur} outside [0, {BLUR_SIGMA_MAX}]")
        if not 0.0 <= self.sigma_noise <= NOISE_SIGMA_MAX:
            raise ValueError(f"sigma_noise {self.sigma_noise} outside [0, {NOISE_SIGMA_MAX}]")


@dataclass(frozen=True)
class DatasetSplit:
    """Index ranges of the train/validation carve-up of the training files."""

    train: tuple
    val: tuple

    @classmethod
    def standard(cls, n_records, val_size=5000):
        if n_records < 2:
            raise ValueError(f"need at least 2 training records, got {n_records}")
        val_size = min(val_size, n_records // 2)
        return cls(
            train=tuple(range(n_records - val_size)),
            val=tuple(range(n_records - val_size, n_records)),
        )


# ---------------------------------------------------------------------------
# seeded streams


def _stream(*parts):
    tag = "|".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2s(tag, digest_size=16).digest()
    return np.random.Philox(key=np.frombuffer(digest, dtype="<u8"))


def _stream_generator(*parts):
    return np.random.Generator(_stream(*parts))


def _uniforms(bitgen, count):
    # 53-bit uniforms in strict (0, 1); the +0.5 offset keeps log() finite.
    raw = bitgen.random_raw(count)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normals(seed, count):
    """Box-Muller normals over a counter-based Philox stream keyed by seed."""
    bitgen = _stream("noise-field", seed)
    half = (count + 1) // 2
    u = _uniforms(bitgen, 2 * half)
    r = np.sqrt(-2.0 * np.log(u[:half]))
    theta = (2.0 * np.pi) * u[half:]
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
    return z[:count]


def degradation_spec(dataset_seed, split, index):
    """The blur/noise strengths for one image; a pure function of its key."""
    u = _uniforms(_stream("degradation", dataset_seed, split, index), 2)
    noise_tag = f"noise-seed|{dataset_seed}|{split}|{index}".encode("utf-8")
    noise_seed = int.from_bytes(
        hashlib.blake2s(noise_tag, digest_size=8).digest(), "little"
    )
    return DegradationSpec(
        sigma_blur=float(u[0] * BLUR_SIGMA_MAX),
        sigma_noise=float(u[1] * NOISE_SIGMA_MAX),
        noise_seed=noise_seed,
    )


# ---------------------------------------------------------------------------
# binary format


def parse_cifar10_batch(data, start_index=0):
    """Decode one binary batch file into records; pixel order is preserved."""
    if len(data) % RECORD_BYTES != 0:
        expected = (len(data) // RECORD_BYTES) * RECORD_BYTES
        raise ValueError(
            f"batch file length {len(data)} is not a multiple of {RECORD_BYTES} "
            f"(nearest whole-record length {expected}); file is truncated or not "
            f"a CIFAR-10 binary batch"
        )
    n = len(data) // RECORD_BYTES
    arr = np.frombuffer(data, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = arr[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"record {start_index + i}: label byte {int(labels[i])} > 9")
    clean = (arr[:, 1:].reshape(n, *IMAGE_SHAPE).astype(np.float32)) / 255.0
    return [
        ImageRecord(index=start_index + i, label=int(labels[i]), clean=clean[i])
        for i in range(n)
    ]


def quantize_to_bytes(img):
    """Round-half-up quantization of [0, 1] reals to uint8."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def serialize_records(records):
    """Inverse of the parser; round-trips official files bitwise."""
    out = bytearray()
    for r in records:
        out.append(r.label)
        out.extend(quantize_to_bytes(r.clean).tobytes())
    return bytes(out)


def load_cifar10_dir(root):
    """Read the six binary-version files; returns (train_records, test_records)."""
    root = Path(root)
    expected = [root / f for f in TRAIN_FILES + (TEST_FILE,)]
    missing = [str(p) for p in expected if not p.is_file()]
    if missing:
        raise FileNotFoundError(
            f"dataset directory {root} is missing {len(missing)} file(s): "
            + ", ".join(missing)
        )
    train = []
    for f in TRAIN_FILES:
        train.extend(parse_cifar10_batch((root / f).read_bytes(), start_index=len(train)))
    test = parse_cifar10_batch((root / TEST_FILE).read_bytes())
    return train, test


# ---------------------------------------------------------------------------
# degradations


def gaussian_kernel_1d(sigma):
    """Normalized 1-D Gaussian taps with radius ceil(3*sigma); [1.0] for sigma=0."""
    if sigma < 0:
        raise ValueError(f"sigma {sigma} must be non-negative")
    if sigma == 0:
        return np.array([1.0])
    r = math.ceil(3.0 * sigma)
    i = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return w / w.sum()


def _correlate_rows_reflect(plane, kernel):
    # 1-D correlation along the last axis with mirror (no edge repeat) padding.
    r = (len(kernel) - 1) // 2
    if r == 0:
        return plane * kernel[0]
    padded = np.pad(plane, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(plane, dtype=np.float64)
    w = plane.shape[1]
    for d, kv in enumerate(kernel):
        out += kv * padded[:, d : d + w]
    return out


def gaussian_blur(img, sigma):
    """Separable Gaussian blur (horizontal then vertical) with reflect padding."""
    if not 0.0 <= sigma <= BLUR_SIGMA_MAX:
        raise ValueError(f"sigma {sigma} outside [0, {BLUR_SIGMA_MAX}]")
    img = np.asarray(img, dtype=np.float32)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel_1d(sigma)
    out = np.empty(img.shape, dtype=np.float32)
    for ch in range(img.shape[0]):
        rows = _correlate_rows_reflect(img[ch].astype(np.float64), k)
        out[ch] = _correlate_rows_reflect(rows.T, k).T
    return out


def add_gaussian_noise(img, sigma_noise, seed):
    """Add i.i.d. Gaussian noise of std sigma_noise/255, then clamp to [0, 1]."""
    if sigma_noise < 0:
        raise ValueError(f"sigma_noise {sigma_noise} must be non-negative")
    img = np.asarray(img, dtype=np.float32)
    if sigma_noise == 0:
        return img.copy()
    z = standard_normals(seed, img.size).reshape(img.shape)
    noisy = img.astype(np.float64) + z * (sigma_noise / 255.0)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def degrade(record, spec):
    """Blur first, then noise (optics before sensor); the target stays clean."""
    blurred = gaussian_blur(record.clean, spec.sigma_blur)
    return add_gaussian_noise(blurred, spec.sigma_noise, spec.noise_seed)


def degraded_pairs(records, dataset_seed, split, limit=None):
    """Degrade a record list into stacked (degraded, clean) float32 arrays."""
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ValueError(f"no records to degrade for split {split!r}")
    clean = np.stack([r.clean for r in records])
    degraded = np.stack(
        [degrade(r, degradation_spec(dataset_seed, split, r.index)) for r in records]
    )
    return degraded, clean


# ---------------------------------------------------------------------------
# batching


def batch_index_order(n, batch_size, epoch_seed):
    """Deterministic shuffled batch index lists; the final short batch is kept."""
    if n < 1:
        raise ValueError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError(f"batch_size {batch_size} must be >= 1")
    order = _stream_generator("batches", epoch_seed).permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def make_batches(degraded, clean, batch_size, epoch_seed):
    """Yield shuffled (degraded, clean) batches shaped (b, 3, 32, 32)."""
    if len(degraded) != len(clean):
        raise ValueError(f"pair count mismatch: {len(degraded)} vs {len(clean)}")
    for idx in batch_index_order(len(degraded), batch_size, epoch_seed):
        yield degraded[idx], clean[idx]


# ---------------------------------------------------------------------------
# degraded-set cache (advisory; recomputation must match)


def write_degraded_cache(degraded, path):
    """Store degraded images in record layout: zero label byte + quantized planes."""
    out = bytearray()
    for img in degraded:
        out.append(0)
        out.extend(quantize_to_bytes(img).tobytes())
    Path(path).write_bytes(bytes(out))


def read_degraded_cache(path):
    records = parse_cifar10_batch(Path(path).read_bytes())
    return np.stack([r.clean for r in records])


# ---------------------------------------------------------------------------
# synthetic corpus in the official binary layout (for demos and tests when the
# real archive is not on disk; the loader treats both identically)


def _synthetic_image(gen):
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    basis = np.stack([(1 - yy) * (1 - xx), (1 - yy) * xx, yy * (1 - xx), yy * xx])
    img = np.einsum("kc,khw->chw", gen.random((4, 3)), basis)
    for _ in range(int(gen.integers(2, 7))):
        color = gen.random(3)[:, None, None]
        cy, cx = gen.random(2) * 31.0
        if gen.random() < 0.5:
            rad = 2.0 + gen.random() * 9.0
            mask = ((yy * 31.0 - cy) ** 2 + (xx * 31.0 - cx) ** 2) < rad * rad
        else:
            hh = 2.0 + gen.random() * 12.0
            ww = 2.0 + gen.random() * 12.0
            mask = (np.abs(yy * 31.0 - cy) < hh) & (np.abs(xx * 31.0 - cx) < ww)
        alpha = 0.4 + 0.6 * gen.random()
        img = img * (1.0 - alpha * mask) + color * (alpha * mask)
    if gen.random() < 0.5:
        freq = 0.3 + gen.random() * 1.2
        angle = gen.random() * np.pi
        phase = gen.random() * 2.0 * np.pi
        wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) * 31.0 + phase)
        img = img + 0.06 * wave
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_synthetic_cifar10(root, n_train=2500, n_test=500, seed=0):
    """Write a procedural corpus as data_batch_1..5.bin + test_batch.bin."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    per_file = [n_train // 5 + (1 if i < n_train % 5 else 0) for i in range(5)]
    index = 0
    for fname, count in zip(TRAIN_FILES, per_file):
        out = bytearray()
        for _ in range(count):
            gen = _stream_generator("synth", seed, "train", index)
            out.append(int(gen.integers(0, 10)))
            out.extend(quantize_to_bytes(_synthetic_image(gen)).tobytes())
            index += 1
        (root / fname).write_bytes(bytes(out))
    out = bytearray()
    for i in range(n_test):
        gen = _stream_generator("synth", seed, "test", i)
        out.append(int(gen.integers(0, 10)))
        out.extend(quantize_to_bytes(_synthetic_image(gen)).tobytes())
    (root / TEST_FILE).write_bytes(bytes(out))
    return root

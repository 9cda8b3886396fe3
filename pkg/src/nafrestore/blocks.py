"""Activation-free residual blocks, their ablation variants, and the UNet model.

The baseline block uses multiplicative gating (SimpleGate) and a purely linear
channel attention (SCA) instead of conventional nonlinearities.  Four ablation
variants each change exactly one axis: A1 swaps the gate for GELU, A2 swaps
SCA for ECA, A3 swaps LayerNorm for GroupNorm, A4 drops attention entirely.
"""

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import erf, expit

from .tensor import (
    ConvParams,
    Tensor,
    add,
    channel_split,
    conv2d,
    global_avg_pool,
    mul,
    pixel_shuffle,
    record_op,
    accumulate_grad,
)


class VariantKind(Enum):
    BASELINE = "baseline"
    A1_GELU = "a1_gelu"
    A2_ECA = "a2_eca"
    A3_GROUPNORM = "a3_groupnorm"
    A4_NO_ATTENTION = "a4_no_attention"

    @classmethod
    def parse(cls, name):
        aliases = {
            "a1": cls.A1_GELU,
            "a2": cls.A2_ECA,
            "a3": cls.A3_GROUPNORM,
            "a4": cls.A4_NO_ATTENTION,
        }
        key = str(name).strip().lower()
        if key in aliases:
            return aliases[key]
        for v in cls:
            if key == v.value:
                return v
        raise ValueError(
            f"unknown variant {name!r}; expected one of "
            f"{[v.value for v in cls]} or a1..a4"
        )

    @property
    def label(self):
        return {
            VariantKind.BASELINE: "Baseline",
            VariantKind.A1_GELU: "A1: GELU activation",
            VariantKind.A2_ECA: "A2: ECA attention",
            VariantKind.A3_GROUPNORM: "A3: GroupNorm",
            VariantKind.A4_NO_ATTENTION: "A4: no attention",
        }[self]


ALL_VARIANTS = tuple(VariantKind)


@dataclass
class BlockConfig:
    """Shape and variant knobs for one residual block."""

    channels: int
    variant: VariantKind = VariantKind.BASELINE
    eca_kernel: int = 3
    gn_groups: int = 4

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 2 != 0:
            raise ValueError(f"block channels must be positive and even, got {self.channels}")
        if self.eca_kernel < 1 or self.eca_kernel % 2 == 0:
            raise ValueError(f"eca_kernel must be odd and positive, got {self.eca_kernel}")
        if self.gn_groups < 1:
            raise ValueError(f"gn_groups must be positive, got {self.gn_groups}")
        if self.variant is VariantKind.A3_GROUPNORM and self.channels % self.gn_groups != 0:
            raise ValueError(
                f"channels {self.channels} not divisible by gn_groups {self.gn_groups}"
            )


@dataclass
class ModelConfig:
    """Widths and block counts of the encoder-decoder restoration network."""

    base_width: int = 32
    enc_blocks: tuple = (2, 2)
    mid_blocks: int = 2
    dec_blocks: tuple = (2, 2)
    variant: VariantKind = VariantKind.BASELINE

    def __post_init__(self):
        self.enc_blocks = tuple(int(b) for b in self.enc_blocks)
        self.dec_blocks = tuple(int(b) for b in self.dec_blocks)
        if isinstance(self.variant, str):
            self.variant = VariantKind.parse(self.variant)
        if len(self.enc_blocks) != len(self.dec_blocks):
            raise ValueError(
                f"enc_blocks and dec_blocks must have equal length, "
                f"got {len(self.enc_blocks)} vs {len(self.dec_blocks)}"
            )
        if self.base_width <= 0 or self.base_width % 4 != 0:
            raise ValueError(f"base_width must be a positive multiple of 4, got {self.base_width}")
        if self.mid_blocks < 0 or any(b < 0 for b in self.enc_blocks + self.dec_blocks):
            raise ValueError("block counts must be non-negative")

    @property
    def stages(self):
        return len(self.enc_blocks)

    def block_config(self, channels):
        return BlockConfig(channels=channels, variant=self.variant)


class ModelState:
    """Ordered parameter map plus the config that defines its architecture."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def param_names(self):
        return list(self.params)

    def __repr__(self):
        return (
            f"ModelState(variant={self.config.variant.value}, "
            f"params={param_count(self)})"
        )


# ---------------------------------------------------------------------------
# normalization


def layer_norm_2d(x, gamma, beta, eps=1e-6):
    """Normalize across channels at every spatial position, then affine."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"layer_norm_2d: affine shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm_2d: eps={eps} must be positive")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(np.float32)
    inv32 = inv.astype(np.float32)
    gc = gamma.data.reshape(1, c, 1, 1)
    out = Tensor(gc * xhat + beta.data.reshape(1, c, 1, 1),
                 requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        g64 = g.astype(np.float64)
        xh = xhat.astype(np.float64)
        accumulate_grad(beta, g64.sum(axis=(0, 2, 3)))
        accumulate_grad(gamma, (g64 * xh).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = g64 * gc
            m1 = gh.mean(axis=1, keepdims=True)
            m2 = (gh * xh).mean(axis=1, keepdims=True)
            accumulate_grad(x, (gh - m1 - xh * m2) * inv32)

    record_op("layer_norm_2d", (x, gamma, beta), (out,), _backward)
    return out


def group_norm(x, groups, gamma, beta, eps=1e-6):
    """Normalize over (channels-in-group, h, w) per sample, per-channel affine."""
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if eps <= 0:
        raise ValueError(f"group_norm: eps={eps} must be positive")
    cg = c // groups
    xg = x.data.reshape(n, groups, cg, h, w).astype(np.float64)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).astype(np.float32).reshape(n, c, h, w)
    inv32 = inv.astype(np.float32)
    gc = gamma.data.reshape(1, c, 1, 1)
    out = Tensor(gc * xhat + beta.data.reshape(1, c, 1, 1),
                 requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        g64 = g.astype(np.float64)
        xh = xhat.astype(np.float64)
        accumulate_grad(beta, g64.sum(axis=(0, 2, 3)))
        accumulate_grad(gamma, (g64 * xh).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = (g64 * gc).reshape(n, groups, cg, h, w)
            xhg = xh.reshape(n, groups, cg, h, w)
            m1 = gh.mean(axis=(2, 3, 4), keepdims=True)
            m2 = (gh * xhg).mean(axis=(2, 3, 4), keepdims=True)
            dx = ((gh - m1 - xhg * m2) * inv32).reshape(n, c, h, w)
            accumulate_grad(x, dx)

    record_op("group_norm", (x, gamma, beta), (out,), _backward)
    return out


# ---------------------------------------------------------------------------
# activations and attention


def gelu(x):
    """Exact Gaussian-CDF GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd / np.sqrt(2.0)))).astype(np.float32)
    out = Tensor(xd * cdf, requires_grad=x.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        pdf = np.exp(-0.5 * xd.astype(np.float64) ** 2) / np.sqrt(2.0 * np.pi)
        accumulate_grad(x, g * (cdf + xd * pdf.astype(np.float32)))

    record_op("gelu", (x,), (out,), _backward)
    return out


def sigmoid(x):
    y = expit(x.data).astype(np.float32)
    out = Tensor(y, requires_grad=x.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        accumulate_grad(x, g * y * (1.0 - y))

    record_op("sigmoid", (x,), (out,), _backward)
    return out


def simple_gate(x):
    """Split channels in two halves and multiply them elementwise."""
    if x.shape[1] % 2 != 0:
        raise ValueError(f"simple_gate: channel count {x.shape[1]} is odd")
    a, b = channel_split(x)
    return mul(a, b)


def _channel_affine(s, w, b):
    # s: (n, c, 1, 1) pooled vector; out[n, c] = sum_k w[c, k] * s[n, k] + b[c]
    n, c = s.shape[0], s.shape[1]
    s2 = s.data.reshape(n, c).astype(np.float64)
    w64 = w.data.astype(np.float64)
    y = s2 @ w64.T + b.data.astype(np.float64)
    out = Tensor(y.reshape(n, c, 1, 1),
                 requires_grad=s.requires_grad or w.requires_grad or b.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(n, c).astype(np.float64)
        accumulate_grad(b, g2.sum(axis=0))
        accumulate_grad(w, g2.T @ s2)
        if s.requires_grad:
            accumulate_grad(s, (g2 @ w64).reshape(n, c, 1, 1))

    record_op("channel_affine", (s, w, b), (out,), _backward)
    return out


def sca(x, w, b):
    """Simplified channel attention: linear transform of the pooled vector,
    no sigmoid, so the per-channel scales may exceed 1 or go negative."""
    c = x.shape[1]
    if w.shape != (c, c):
        raise ValueError(f"sca: weight shape {w.shape} != ({c}, {c})")
    if b.shape != (c,):
        raise ValueError(f"sca: bias shape {b.shape} != ({c},)")
    scale = _channel_affine(global_avg_pool(x), w, b)
    return mul(x, scale)


def _channel_conv1d(s, kern):
    # 1-D cross-correlation over the channel axis with zero padding (k-1)/2.
    n, c = s.shape[0], s.shape[1]
    m = kern.shape[0]
    pad = (m - 1) // 2
    s2 = s.data.reshape(n, c).astype(np.float64)
    sp = np.pad(s2, ((0, 0), (pad, pad)))
    kd = kern.data.astype(np.float64)
    y = np.zeros((n, c), dtype=np.float64)
    for d in range(m):
        y += kd[d] * sp[:, d : d + c]
    out = Tensor(y.reshape(n, c, 1, 1),
                 requires_grad=s.requires_grad or kern.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(n, c).astype(np.float64)
        dk = np.array([(g2 * sp[:, d : d + c]).sum() for d in range(m)])
        accumulate_grad(kern, dk)
        if s.requires_grad:
            dsp = np.zeros_like(sp)
            for d in range(m):
                dsp[:, d : d + c] += kd[d] * g2
            accumulate_grad(s, dsp[:, pad : pad + c].reshape(n, c, 1, 1))

    record_op("channel_conv1d", (s, kern), (out,), _backward)
    return out


def eca(x, k1d):
    """Efficient channel attention: 1-D conv over the pooled channel vector,
    then sigmoid, so the per-channel scales stay in (0, 1)."""
    if k1d.data.ndim != 1 or k1d.shape[0] % 2 == 0:
        raise ValueError(f"eca: kernel must be 1-D with odd size, got shape {k1d.shape}")
    scale = sigmoid(_channel_conv1d(global_avg_pool(x), k1d))
    return mul(x, scale)


# ---------------------------------------------------------------------------
# blocks and the full model


def block_param_shapes(cfg):
    """Expected parameter shapes of one block, keyed by local name."""
    c = cfg.channels
    shapes = {
        "norm.gamma": (c,),
        "norm.beta": (c,),
        "pw1.weight": (2 * c, c, 1, 1),
        "pw1.bias": (2 * c,),
        "dw.weight": (2 * c, 1, 3, 3),
        "dw.bias": (2 * c,),
    }
    pw2_in = 2 * c if cfg.variant is VariantKind.A1_GELU else c
    shapes["pw2.weight"] = (c, pw2_in, 1, 1)
    shapes["pw2.bias"] = (c,)
    if cfg.variant is VariantKind.A2_ECA:
        shapes["eca.kernel"] = (cfg.eca_kernel,)
    elif cfg.variant is not VariantKind.A4_NO_ATTENTION:
        shapes["sca.weight"] = (c, c)
        shapes["sca.bias"] = (c,)
    return shapes


def _check_block_params(cfg, params):
    for name, shape in block_param_shapes(cfg).items():
        if name not in params:
            raise ValueError(f"block stage {name.split('.')[0]}: missing parameter {name}")
        got = params[name].shape
        if got != shape:
            raise ValueError(
                f"block stage {name.split('.')[0]}: parameter {name} has shape {got}, "
                f"expected {shape}"
            )


def naf_block_forward(x, cfg, params):
    """One residual block: norm, pointwise expand, depthwise conv, activation,
    pointwise project, channel attention, then add the block input back.

    The variant selects the norm (A3: GroupNorm), the activation (A1: GELU at
    double width) and the attention (A2: ECA, A4: none).
    """
    if x.shape[1] != cfg.channels:
        raise ValueError(
            f"block stage input: expected {cfg.channels} channels, got {x.shape[1]}"
        )
    _check_block_params(cfg, params)
    v = cfg.variant
    if v is VariantKind.A3_GROUPNORM:
        y = group_norm(x, cfg.gn_groups, params["norm.gamma"], params["norm.beta"])
    else:
        y = layer_norm_2d(x, params["norm.gamma"], params["norm.beta"])
    y = conv2d(y, ConvParams(params["pw1.weight"], params["pw1.bias"]))
    y = conv2d(y, ConvParams(params["dw.weight"], params["dw.bias"],
                             padding=1, groups=2 * cfg.channels))
    y = gelu(y) if v is VariantKind.A1_GELU else simple_gate(y)
    y = conv2d(y, ConvParams(params["pw2.weight"], params["pw2.bias"]))
    if v is VariantKind.A2_ECA:
        y = eca(y, params["eca.kernel"])
    elif v is not VariantKind.A4_NO_ATTENTION:
        y = sca(y, params["sca.weight"], params["sca.bias"])
    return add(y, x)


def _block_view(params, prefix, cfg):
    view = {}
    for key in block_param_shapes(cfg):
        name = prefix + key
        if name not in params:
            raise ValueError(f"model is missing parameter {name}")
        view[key] = params[name]
    return view


def unet_forward(x, model):
    """Restore an image batch: encoder-decoder over residual blocks with
    additive skip connections and a learned global residual.

    Encoder stages halve the spatial size with a stride-2 conv and double the
    channels; decoder stages upsample with a pointwise conv to 4x channels
    followed by pixel shuffling.  The final projection is added to the network
    input, so a zero-initialized projection makes the whole model an identity.
    """
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"unet_forward: expected (n, 3, h, w) input, got {x.shape}")
    n, _, h, w = x.shape
    factor = 1 << cfg.stages
    if h % factor != 0 or w % factor != 0:
        raise ValueError(
            f"unet_forward: spatial size {(h, w)} not divisible by 2^{cfg.stages}"
        )
    P = model.params

    def named_conv(prefix, y, **kw):
        return conv2d(y, ConvParams(P[prefix + ".weight"], P[prefix + ".bias"], **kw))

    y = named_conv("intro", x, padding=1)
    skips = []
    for si, nblocks in enumerate(cfg.enc_blocks):
        c = cfg.base_width << si
        bc = cfg.block_config(c)
        for bi in range(nblocks):
            y = naf_block_forward(y, bc, _block_view(P, f"enc{si}.b{bi}.", bc))
        skips.append(y)
        y = named_conv(f"down{si}", y, stride=2)
    bc = cfg.block_config(cfg.base_width << cfg.stages)
    for bi in range(cfg.mid_blocks):
        y = naf_block_forward(y, bc, _block_view(P, f"mid.b{bi}.", bc))
    for si in reversed(range(cfg.stages)):
        c = cfg.base_width << si
        y = named_conv(f"up{si}", y)
        y = pixel_shuffle(y, 2)
        y = add(y, skips[si])
        bc = cfg.block_config(c)
        for bi in range(cfg.dec_blocks[si]):
            y = naf_block_forward(y, bc, _block_view(P, f"dec{si}.b{bi}.", bc))
    y = named_conv("ending", y, padding=1)
    return add(x, y)


def param_count(model):
    """Total number of scalar parameters."""
    return int(sum(t.size for t in model.params.values()))


# ---------------------------------------------------------------------------
# initialization


def _init_rng(seed, name):
    # Per-parameter stream keyed by name so that equally-shaped parameters
    # receive identical values across variants built from the same seed.
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8").copy()
    key[0] ^= np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def _fan_in_uniform(seed, name, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    g = _init_rng(seed, name)
    return (g.random(shape) * 2.0 - 1.0) * bound


def build_model(config, seed=0):
    """Create a ModelState with deterministic, seed-keyed initialization.

    Conv weights draw from a fan-in-scaled uniform; norm affines are identity;
    attention starts neutral (SCA scale 1, ECA scale 0.5); the final
    projection starts at zero so the untrained model is the identity map.
    """
    params = {}

    def put(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    def put_conv(name, co, cig, k, zero=False):
        shape = (co, cig, k, k)
        if zero:
            put(name + ".weight", np.zeros(shape))
        else:
            put(name + ".weight", _fan_in_uniform(seed, name + ".weight", shape, cig * k * k))
        put(name + ".bias", np.zeros(co))

    def put_block(prefix, channels):
        bc = BlockConfig(channels=channels, variant=config.variant)
        for key, shape in block_param_shapes(bc).items():
            name = prefix + key
            if key == "norm.gamma":
                put(name, np.ones(shape))
            elif key in ("norm.beta", "eca.kernel", "sca.weight"):
                put(name, np.zeros(shape))
            elif key == "sca.bias":
                put(name, np.ones(shape))
            elif key.endswith(".bias"):
                put(name, np.zeros(shape))
            else:
                fan_in = int(np.prod(shape[1:]))
                put(name, _fan_in_uniform(seed, name, shape, fan_in))

    width = config.base_width
    put_conv("intro", width, 3, 3)
    for si, nblocks in enumerate(config.enc_blocks):
        c = width << si
        for bi in range(nblocks):
            put_block(f"enc{si}.b{bi}.", c)
        put_conv(f"down{si}", 2 * c, c, 2)
    mid_c = width << config.stages
    for bi in range(config.mid_blocks):
        put_block(f"mid.b{bi}.", mid_c)
    for si in reversed(range(config.stages)):
        c = width << si
        put_conv(f"up{si}", 4 * c, 2 * c, 1)
        for bi in range(config.dec_blocks[si]):
            put_block(f"dec{si}.b{bi}.", c)
    put_conv("ending", 3, width, 3, zero=True)
    return ModelState(config, params)

"""Finite-difference verification suite covering every differentiable op.

Each check builds a scalar-valued function around one op and compares taped
gradients against central differences (h=1e-3).  The model-level check
perturbs every parameter of a width-8 miniature network.  All checks must
stay under max relative error 1e-3.
"""

import hashlib

import numpy as np

from . import blocks
from . import tensor as tz
from .blocks import BlockConfig, ModelConfig, VariantKind, build_model, unet_forward
from .tensor import ConvParams, Tape, Tensor, backward, grad_check, sum_all
from .training import mse_loss

TOLERANCE = 1e-3
STEP = 1e-3


def _rng(tag):
    seed = int.from_bytes(hashlib.blake2s(tag.encode(), digest_size=4).digest(), "little")
    return np.random.default_rng(seed)


def _rand(gen, *shape):
    return (gen.random(shape) * 2.0 - 1.0).astype(np.float32)


def _sq_sum(t):
    # sum of squares keeps the probe sensitive even through mean-preserving ops
    return sum_all(tz.mul(t, t))


def _op_checks():
    gen = _rng("op-inputs")
    x4 = _rand(gen, 2, 4, 3, 3)
    y4 = _rand(gen, 2, 4, 3, 3)
    s4 = _rand(gen, 2, 4, 1, 1)
    checks = []

    def check(name, f, point):
        checks.append((name, lambda: grad_check(f, Tensor(point), h=STEP)))

    check("add", lambda t: sum_all(tz.add(t, Tensor(y4))), x4)
    check("mul", lambda t: sum_all(tz.mul(t, Tensor(y4))), x4)
    check("mul.broadcast", lambda t: sum_all(tz.mul(Tensor(x4), t)), s4)

    xc = _rand(gen, 1, 4, 5, 5)
    w_std = _rand(gen, 3, 4, 3, 3) * 0.5
    b_std = _rand(gen, 3)
    check(
        "conv2d.input",
        lambda t: _sq_sum(tz.conv2d(t, ConvParams(Tensor(w_std), Tensor(b_std), padding=1))),
        xc,
    )
    check(
        "conv2d.weight",
        lambda t: _sq_sum(tz.conv2d(Tensor(xc), ConvParams(t, Tensor(b_std), padding=1))),
        w_std,
    )
    check(
        "conv2d.bias",
        lambda t: _sq_sum(tz.conv2d(Tensor(xc), ConvParams(Tensor(w_std), t, padding=1))),
        b_std,
    )
    w_dw = _rand(gen, 4, 1, 3, 3) * 0.5
    check(
        "conv2d.depthwise",
        lambda t: _sq_sum(tz.conv2d(Tensor(xc), ConvParams(t, None, padding=1, groups=4))),
        w_dw,
    )
    w_s2 = _rand(gen, 2, 4, 2, 2) * 0.5
    xs2 = _rand(gen, 1, 4, 6, 6)
    check(
        "conv2d.stride2",
        lambda t: _sq_sum(tz.conv2d(t, ConvParams(Tensor(w_s2), None, stride=2))),
        xs2,
    )

    check("global_avg_pool", lambda t: _sq_sum(tz.global_avg_pool(t)), x4)
    check("channel_split", lambda t: _sq_sum(tz.channel_split(t)[0]), x4)
    check("pixel_shuffle", lambda t: _sq_sum(tz.pixel_shuffle(t, 2)), x4)
    xps = _rand(gen, 1, 2, 4, 4)
    check("pixel_unshuffle", lambda t: _sq_sum(tz.pixel_unshuffle(t, 2)), xps)
    check("sum_all", lambda t: sum_all(t), x4)
    check("mean_all", lambda t: tz.mean_all(tz.mul(t, t)), x4)

    check("gelu", lambda t: sum_all(blocks.gelu(t)), x4)
    check("sigmoid", lambda t: sum_all(blocks.sigmoid(t)), x4)
    check("simple_gate", lambda t: _sq_sum(blocks.simple_gate(t)), x4)

    gamma = Tensor(1.0 + 0.3 * _rand(gen, 4))
    beta = Tensor(0.3 * _rand(gen, 4))
    check(
        "layer_norm_2d.input",
        lambda t: _sq_sum(blocks.layer_norm_2d(t, gamma, beta)),
        x4,
    )
    check(
        "layer_norm_2d.affine",
        lambda t: _sq_sum(blocks.layer_norm_2d(Tensor(x4), t, beta)),
        gamma.data,
    )
    check("group_norm", lambda t: _sq_sum(blocks.group_norm(t, 2, gamma, beta)), x4)

    w_sca = Tensor(_rand(gen, 4, 4) * 0.5)
    b_sca = Tensor(1.0 + 0.2 * _rand(gen, 4))
    check("sca.input", lambda t: _sq_sum(blocks.sca(t, w_sca, b_sca)), x4)
    check("sca.weight", lambda t: _sq_sum(blocks.sca(Tensor(x4), t, b_sca)), w_sca.data)
    k_eca = Tensor(0.5 * _rand(gen, 3))
    check("eca.input", lambda t: _sq_sum(blocks.eca(t, k_eca)), x4)
    check("eca.kernel", lambda t: _sq_sum(blocks.eca(Tensor(x4), t)), k_eca.data)

    target = _rand(gen, 2, 4, 3, 3)
    check("mse_loss", lambda t: mse_loss(t, Tensor(target)), x4)

    for variant in VariantKind:
        cfg = BlockConfig(channels=4, variant=variant)
        checks.append(
            (
                f"naf_block_forward.{variant.value}",
                lambda c=cfg, v=variant: _block_param_check(c, v),
            )
        )
    return checks


def _random_block_params(cfg, gen):
    params = {}
    for key, shape in blocks.block_param_shapes(cfg).items():
        base = np.ones(shape) if key == "norm.gamma" else np.zeros(shape)
        params[key] = Tensor(base + 0.4 * (gen.random(shape) * 2.0 - 1.0),
                             requires_grad=True)
    return params


def _max_param_fd_error(params, loss_fn, h=STEP):
    """Max FD relative error over every coordinate of every given parameter."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = [
        p.grad.astype(np.float64) if p.grad is not None else np.zeros(p.shape)
        for p in params
    ]
    worst = 0.0
    for p, grads in zip(params, analytic):
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(loss_fn().data.reshape(()))
            p.data[idx] = orig - h
            fm = float(loss_fn().data.reshape(()))
            p.data[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = grads[idx]
            rel = abs(a - numeric) / max(1e-6, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst


def _block_param_check(cfg, variant):
    params = _random_block_params(cfg, _rng(f"block-{variant.value}"))
    x = _rand(_rng(f"block-x-{variant.value}"), 1, cfg.channels, 3, 3)
    target = _rand(_rng("block-target"), *x.shape)

    def loss_fn():
        out = blocks.naf_block_forward(Tensor(x), cfg, params)
        return mse_loss(out, Tensor(target))

    return _max_param_fd_error(list(params.values()), loss_fn)


def miniature_model_check(variant=VariantKind.BASELINE, h=STEP):
    """FD check over every parameter of a width-8 one-block-per-stage model."""
    config = ModelConfig(base_width=8, enc_blocks=(1,), mid_blocks=1,
                         dec_blocks=(1,), variant=variant)
    model = build_model(config, seed=11)
    gen = _rng(f"mini-{variant.value}")
    for p in model.params.values():
        # shift away from neutral init so every gradient path is live
        p.data = (p.data + 0.3 * (gen.random(p.shape) * 2.0 - 1.0)).astype(np.float32)
    x = gen.random((1, 3, 16, 16)).astype(np.float32)
    target = gen.random((1, 3, 16, 16)).astype(np.float32)

    def loss_fn():
        return mse_loss(unet_forward(Tensor(x), model), Tensor(target))

    return _max_param_fd_error(list(model.params.values()), loss_fn, h=h)


def run_suite():
    """Run every check; returns an ordered list of (name, max_rel_err)."""
    results = []
    for name, fn in _op_checks():
        results.append((name, fn()))
    results.append(("unet_forward.miniature", miniature_model_check()))
    return results

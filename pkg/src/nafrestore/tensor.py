"""Dense NCHW tensors with taped reverse-mode differentiation.

Feature maps are 4-D float32 arrays laid out (batch, channel, height, width).
Parameter tensors may be 1-D (biases, norm affines), 2-D (channel mixing
weights) or 4-D (convolution kernels).  Forward ops are pure functions; while
a Tape is active they append a backward rule, and ``backward`` replays the
rules in reverse to accumulate gradients.  Reductions inside convolution and
pooling accumulate in float64 and round the result back to float32.
"""

import numpy as np

_TAPE_STACK = []


class Tensor:
    """A float32 array, optionally gradient-tracked.

    ``data`` is immutable by convention once the tensor has been consumed by
    an op; ``grad`` is lazily allocated by the backward pass and accumulates
    additively until explicitly cleared.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def validate_finite(self, context=""):
        """Raise if any element is NaN/Inf (contract-violation check)."""
        if not np.all(np.isfinite(self.data)):
            bad = np.argwhere(~np.isfinite(self.data))[0]
            where = f" in {context}" if context else ""
            raise FloatingPointError(
                f"non-finite value{where} at coordinate {tuple(int(i) for i in bad)}"
            )

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops and their backward rules.

    Ops append entries in execution order, so inputs always precede their
    consumers; replaying entries in reverse accumulates each tensor's
    gradient exactly once per use.  A tape and the grads it populates are
    single-owner: do not run backward concurrently on the same tape.
    """

    def __init__(self):
        self._entries = []
        self._produced = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)


def record_op(name, inputs, outputs, backward_fn):
    """Register a backward rule for an op on the active tape, if any.

    ``backward_fn`` reads the outputs' grads and accumulates into the inputs'
    grads (via ``accumulate_grad``).  Recording is skipped when no tape is
    active or no input requires grad.
    """
    if not _TAPE_STACK:
        return
    if not any(t.requires_grad for t in inputs):
        return
    tape = _TAPE_STACK[-1]
    tape._entries.append((name, backward_fn))
    tape._produced.update(id(o) for o in outputs)


def accumulate_grad(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float32).reshape(t.shape).copy()
    else:
        t.grad += np.asarray(g, dtype=np.float32).reshape(t.shape)


def backward(tape, loss):
    """Populate grads of every tracked tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("backward before forward: loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for _name, fn in reversed(tape._entries):
        fn()


def _requires(*tensors):
    return any(t is not None and t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=_requires(a, b))

    def _backward():
        g = out.grad
        if g is None:
            return
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    record_op("add", (a, b), (out,), _backward)
    return out


def sub(a, b):
    """Elementwise difference of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, requires_grad=_requires(a, b))

    def _backward():
        g = out.grad
        if g is None:
            return
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    record_op("sub", (a, b), (out,), _backward)
    return out


def mul(a, b):
    """Elementwise product; ``b`` may be an (n, c, 1, 1) per-channel scale."""
    broadcast = False
    if a.shape != b.shape:
        if (
            a.data.ndim == 4
            and b.data.ndim == 4
            and b.shape == (a.shape[0], a.shape[1], 1, 1)
        ):
            broadcast = True
        else:
            raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    out = Tensor(a.data * b.data, requires_grad=_requires(a, b))

    def _backward():
        g = out.grad
        if g is None:
            return
        accumulate_grad(a, g * b.data)
        gb = g.astype(np.float64) * a.data
        if broadcast:
            gb = gb.sum(axis=(2, 3), keepdims=True)
        accumulate_grad(b, gb)

    record_op("mul", (a, b), (out,), _backward)
    return out


# ---------------------------------------------------------------------------
# convolution


class ConvParams:
    """Weights and geometry of one 2-D convolution.

    weight: (c_out, c_in // groups, k, k); bias: optional (c_out,).
    groups=1 is a standard conv, groups=c_in=c_out a depthwise conv and
    k=1 a pointwise conv.
    """

    __slots__ = ("weight", "bias", "stride", "padding", "groups")

    def __init__(self, weight, bias=None, stride=1, padding=0, groups=1):
        self.weight = weight
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)
        self.groups = int(groups)


def _conv_out_size(size, pad, k, stride, axis):
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d: non-integer output {axis} ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x, p):
    """Cross-correlation (no kernel flip) with zero padding."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D NCHW, got shape {x.shape}")
    w = p.weight
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: weight must be (c_out, c_in/groups, k, k), got {w.shape}")
    n, ci, h, wd = x.shape
    co, cig, k, _ = w.shape
    g, s, pad = p.groups, p.stride, p.padding
    if g < 1 or ci % g != 0 or co % g != 0:
        raise ValueError(f"conv2d: groups={g} must divide c_in={ci} and c_out={co}")
    if cig != ci // g:
        raise ValueError(
            f"conv2d: weight expects c_in/groups={cig} input channels per group, "
            f"input has {ci // g} (c_in={ci}, groups={g})"
        )
    if p.bias is not None and p.bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {p.bias.shape} != ({co},)")
    ho = _conv_out_size(h, pad, k, s, "height")
    wo = _conv_out_size(wd, pad, k, s, "width")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    depthwise = g == ci and ci == co
    L = ho * wo
    w64 = w.data.astype(np.float64)
    acc = np.zeros((n, co, L), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            tap = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            tap3 = tap.reshape(n, ci, L).astype(np.float64)
            if g == 1:
                acc += w64[:, :, i, j] @ tap3
            elif depthwise:
                acc += w64[:, 0, i, j][None, :, None] * tap3
            else:
                wg = w64[:, :, i, j].reshape(g, co // g, cig)
                tg = tap3.reshape(n, g, cig, L)
                acc += np.einsum("gok,ngkl->ngol", wg, tg).reshape(n, co, L)
    if p.bias is not None:
        acc += p.bias.data.astype(np.float64)[None, :, None]
    out = Tensor(acc.reshape(n, co, ho, wo).astype(np.float32),
                 requires_grad=_requires(x, w, p.bias))

    def _backward():
        gout = out.grad
        if gout is None:
            return
        g3 = gout.reshape(n, co, L).astype(np.float64)
        if p.bias is not None and p.bias.requires_grad:
            accumulate_grad(p.bias, g3.sum(axis=(0, 2)))
        need_x, need_w = x.requires_grad, w.requires_grad
        if not (need_x or need_w):
            return
        dxp = np.zeros(xp.shape, dtype=np.float64) if need_x else None
        dw = np.zeros(w.shape, dtype=np.float64) if need_w else None
        wb = w.data.astype(np.float64)
        for i in range(k):
            for j in range(k):
                tap3 = None
                if need_w:
                    tap = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
                    tap3 = tap.reshape(n, ci, L).astype(np.float64)
                if g == 1:
                    if need_w:
                        dw[:, :, i, j] = np.einsum("nol,ncl->oc", g3, tap3)
                    if need_x:
                        dtap = wb[:, :, i, j].T @ g3
                elif depthwise:
                    if need_w:
                        dw[:, 0, i, j] = (g3 * tap3).sum(axis=(0, 2))
                    if need_x:
                        dtap = wb[:, 0, i, j][None, :, None] * g3
                else:
                    gg = g3.reshape(n, g, co // g, L)
                    if need_w:
                        tg = tap3.reshape(n, g, cig, L)
                        dw[:, :, i, j] = np.einsum("ngol,ngkl->gok", gg, tg).reshape(co, cig)
                    if need_x:
                        wg = wb[:, :, i, j].reshape(g, co // g, cig)
                        dtap = np.einsum("gok,ngol->ngkl", wg, gg).reshape(n, ci, L)
                if need_x:
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dtap.reshape(
                        n, ci, ho, wo
                    )
        if need_w:
            accumulate_grad(w, dw)
        if need_x:
            if pad:
                accumulate_grad(x, dxp[:, :, pad : pad + h, pad : pad + wd])
            else:
                accumulate_grad(x, dxp)

    record_op("conv2d", (x, w) + ((p.bias,) if p.bias is not None else ()), (out,), _backward)
    return out


# ---------------------------------------------------------------------------
# pooling / channel rearrangement


def global_avg_pool(x):
    """Spatial mean per channel, shape (n, c, 1, 1)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: input must be 4-D NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError(f"global_avg_pool: empty spatial dims in shape {x.shape}")
    m = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    out = Tensor(m, requires_grad=x.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        accumulate_grad(x, np.broadcast_to(g.astype(np.float64) / (h * w), x.shape))

    record_op("global_avg_pool", (x,), (out,), _backward)
    return out


def channel_split(x):
    """Split channels into two halves; requires an even channel count."""
    if x.data.ndim != 4:
        raise ValueError(f"channel_split: input must be 4-D NCHW, got shape {x.shape}")
    c = x.shape[1]
    if c % 2 != 0:
        raise ValueError(f"channel_split: channel count {c} is odd")
    half = c // 2
    req = x.requires_grad
    first = Tensor(x.data[:, :half].copy(), requires_grad=req)
    second = Tensor(x.data[:, half:].copy(), requires_grad=req)

    def _backward():
        ga, gb = first.grad, second.grad
        if ga is None and gb is None:
            return
        if ga is None:
            ga = np.zeros_like(first.data)
        if gb is None:
            gb = np.zeros_like(second.data)
        accumulate_grad(x, np.concatenate([ga, gb], axis=1))

    record_op("channel_split", (x,), (first, second), _backward)
    return first, second


def pixel_shuffle(x, r):
    """Depth-to-space: (n, c, h, w) -> (n, c/r^2, r*h, r*w)."""
    if x.data.ndim != 4:
        raise ValueError(f"pixel_shuffle: input must be 4-D NCHW, got shape {x.shape}")
    if r < 1:
        raise ValueError(f"pixel_shuffle: factor {r} must be >= 1")
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    y = (
        x.data.reshape(n, co, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * r, w * r)
    )
    out = Tensor(y, requires_grad=x.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        gx = (
            g.reshape(n, co, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        accumulate_grad(x, gx)

    record_op("pixel_shuffle", (x,), (out,), _backward)
    return out


def pixel_unshuffle(x, r):
    """Space-to-depth, the exact inverse of ``pixel_shuffle``."""
    if x.data.ndim != 4:
        raise ValueError(f"pixel_unshuffle: input must be 4-D NCHW, got shape {x.shape}")
    if r < 1:
        raise ValueError(f"pixel_unshuffle: factor {r} must be >= 1")
    n, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ValueError(f"pixel_unshuffle: spatial dims {(h, w)} not divisible by {r}")
    ho, wo = h // r, w // r
    y = (
        x.data.reshape(n, c, ho, r, wo, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, ho, wo)
    )
    out = Tensor(y, requires_grad=x.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        gx = (
            g.reshape(n, c, r, r, ho, wo)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)
        )
        accumulate_grad(x, gx)

    record_op("pixel_unshuffle", (x,), (out,), _backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    """Sum of all elements as a (1, 1, 1, 1) tensor."""
    v = x.data.sum(dtype=np.float64)
    out = Tensor(np.full((1, 1, 1, 1), v), requires_grad=x.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        accumulate_grad(x, np.full(x.shape, float(g.reshape(()))))

    record_op("sum_all", (x,), (out,), _backward)
    return out


def mean_all(x):
    """Mean of all elements as a (1, 1, 1, 1) tensor."""
    v = x.data.mean(dtype=np.float64)
    out = Tensor(np.full((1, 1, 1, 1), v), requires_grad=x.requires_grad)

    def _backward():
        g = out.grad
        if g is None:
            return
        accumulate_grad(x, np.full(x.shape, float(g.reshape(())) / x.size))

    record_op("mean_all", (x,), (out,), _backward)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, x, h=1e-3):
    """Max relative error between taped gradients of ``f`` and central differences.

    ``f`` maps a Tensor to a scalar-shaped Tensor.  Relative error per
    coordinate is |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
    """
    if h <= 0:
        raise ValueError(f"grad_check: step h={h} must be positive")
    probe = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if y.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
    backward(tape, y)
    analytic = (
        probe.grad.astype(np.float64)
        if probe.grad is not None
        else np.zeros(x.shape, dtype=np.float64)
    )

    base = x.data.astype(np.float64)
    numeric = np.zeros_like(base)
    for idx in np.ndindex(x.shape):
        bumped = base.copy()
        bumped[idx] = base[idx] + h
        fp = float(f(Tensor(bumped)).data.reshape(()))
        bumped[idx] = base[idx] - h
        fm = float(f(Tensor(bumped)).data.reshape(()))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite value at coordinate {idx}")
        numeric[idx] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1e-6, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))

"""Reverse-mode automatic differentiation over a small numpy op set.

Eager tape: every op computes its numpy result immediately and, while a tape
is active, appends a node holding the output, the parent tensors, and a
backward closure. backward() replays the nodes in exact reverse recording
order, accumulating gradients in an id-keyed dict, so no gradient state
leaks between training steps. All intermediate activations stay alive on the
tape (store-all policy; no checkpointing or freeing).

The op set is exactly what the engine needs: broadcasting arithmetic,
pointwise nonlinearities, reductions, shape ops, a row shift, a row
permutation, dilated 2-D convolution, and a strided single-channel
transposed convolution.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError


class Tensor:
    """Array node in the compute graph; a leaf unless produced by an op."""

    __slots__ = ("data", "node_id")

    def __init__(self, data: np.ndarray, node_id: int | None = None):
        self.data = np.asarray(data)
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable leaf with a stable name used for checkpoints and gradients."""

    __slots__ = ("name",)

    def __init__(self, data: np.ndarray, name: str):
        super().__init__(np.asarray(data))
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Linear record of ops; context manager that activates recording."""

    def __init__(self, check_values: bool = False):
        self.nodes: list[_Node] = []
        self.params: dict[str, Parameter] = {}
        self.loss: Tensor | None = None
        # check_values: verify every node output is finite (slow path used to
        # locate the op that first produced a NaN/inf).
        self.check_values = check_values

    def register(self, params) -> None:
        """Register parameters so backward() reports a gradient for each."""
        for p in params:
            if p.name in self.params and self.params[p.name] is not p:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self.params[p.name] = p

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False


_ACTIVE: Tape | None = None


def _record(op: str, out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE
    if tape is not None:
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(out, parents, backward_fn, op))
        if tape.check_values and not np.all(np.isfinite(out_data)):
            raise NumericalError(
                f"non-finite value produced by op '{op}' at node {out.node_id}"
            )
    return out


def _wrap(x, like: Tensor | None = None) -> Tensor:
    """Wrap a constant as a leaf Tensor, matching the dtype of `like`."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    at = _wrap(a, like=b if isinstance(b, Tensor) else None)
    bt = _wrap(b, like=at)
    out = at.data + bt.data

    def bk(g):
        return _unbroadcast(g, at.data.shape), _unbroadcast(g, bt.data.shape)

    return _record("add", out, (at, bt), bk)


def sub(a, b) -> Tensor:
    at = _wrap(a, like=b if isinstance(b, Tensor) else None)
    bt = _wrap(b, like=at)
    out = at.data - bt.data

    def bk(g):
        return _unbroadcast(g, at.data.shape), _unbroadcast(-g, bt.data.shape)

    return _record("sub", out, (at, bt), bk)


def mul(a, b) -> Tensor:
    at = _wrap(a, like=b if isinstance(b, Tensor) else None)
    bt = _wrap(b, like=at)
    out = at.data * bt.data

    def bk(g):
        return (
            _unbroadcast(g * bt.data, at.data.shape),
            _unbroadcast(g * at.data, bt.data.shape),
        )

    return _record("mul", out, (at, bt), bk)


def div(a, b) -> Tensor:
    at = _wrap(a, like=b if isinstance(b, Tensor) else None)
    bt = _wrap(b, like=at)
    out = at.data / bt.data

    def bk(g):
        return (
            _unbroadcast(g / bt.data, at.data.shape),
            _unbroadcast(-g * at.data / (bt.data * bt.data), bt.data.shape),
        )

    return _record("div", out, (at, bt), bk)


def neg(a) -> Tensor:
    at = _wrap(a)

    def bk(g):
        return (-g,)

    return _record("neg", -at.data, (at,), bk)


# ---------------------------------------------------------------------------
# pointwise


def exp(a) -> Tensor:
    at = _wrap(a)
    out = np.exp(at.data)

    def bk(g):
        return (g * out,)

    return _record("exp", out, (at,), bk)


def log(a) -> Tensor:
    at = _wrap(a)

    def bk(g):
        return (g / at.data,)

    return _record("log", np.log(at.data), (at,), bk)


def sqrt(a) -> Tensor:
    at = _wrap(a)
    out = np.sqrt(at.data)

    def bk(g):
        return (g / (2.0 * out),)

    return _record("sqrt", out, (at,), bk)


def tanh(a) -> Tensor:
    at = _wrap(a)
    out = np.tanh(at.data)

    def bk(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (at,), bk)


def sigmoid(a) -> Tensor:
    at = _wrap(a)
    # stable two-sided form
    out = np.where(
        at.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(at.data))),
        np.exp(-np.abs(at.data)) / (1.0 + np.exp(-np.abs(at.data))),
    )

    def bk(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (at,), bk)


def relu(a) -> Tensor:
    at = _wrap(a)
    out = np.maximum(at.data, 0.0)

    def bk(g):
        return (g * (at.data > 0),)

    return _record("relu", out, (at,), bk)


def leaky_relu(a, slope: float) -> Tensor:
    at = _wrap(a)
    out = np.where(at.data >= 0, at.data, slope * at.data)

    def bk(g):
        return (g * np.where(at.data >= 0, 1.0, slope).astype(g.dtype),)

    return _record("leaky_relu", out, (at,), bk)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    at = _wrap(a)
    out = at.data.sum(axis=axis, keepdims=keepdims)

    def bk(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, at.data.shape).astype(at.data.dtype),)

    return _record("sum", out, (at,), bk)


def mean(a) -> Tensor:
    at = _wrap(a)
    n = at.data.size

    def bk(g):
        return (np.broadcast_to(np.asarray(g) / n, at.data.shape).astype(at.data.dtype),)

    return _record("mean", at.data.mean(), (at,), bk)


def reshape(a, shape) -> Tensor:
    at = _wrap(a)
    old = at.data.shape

    def bk(g):
        return (np.asarray(g).reshape(old),)

    return _record("reshape", at.data.reshape(shape), (at,), bk)


def transpose(a, axes) -> Tensor:
    at = _wrap(a)
    inv = np.argsort(axes)

    def bk(g):
        return (np.transpose(g, inv),)

    return _record("transpose", np.transpose(at.data, axes), (at,), bk)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    at = _wrap(a)
    idx = [slice(None)] * at.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bk(g):
        gx = np.zeros_like(at.data)
        gx[idx] = g
        return (gx,)

    return _record("narrow", at.data[idx], (at,), bk)


def shift_down(a) -> Tensor:
    """Shift rows (axis -2) down one step, filling the first row with zeros.

    Output row i equals input row i-1; the last input row falls off. This is
    what makes the per-row transform depend only on rows strictly above.
    """
    at = _wrap(a)
    x = at.data
    out = np.zeros_like(x)
    out[..., 1:, :] = x[..., :-1, :]

    def bk(g):
        gx = np.zeros_like(x)
        gx[..., :-1, :] = g[..., 1:, :]
        return (gx,)

    return _record("shift_down", out, (at,), bk)


def permute_rows(a, row_map: np.ndarray) -> Tensor:
    """Scatter rows along axis -2: out[row_map[i]] = in[i]."""
    at = _wrap(a)
    rm = np.asarray(row_map)
    out = np.empty_like(at.data)
    out[..., rm, :] = at.data

    def bk(g):
        return (np.asarray(g)[..., rm, :],)

    return _record("permute_rows", out, (at,), bk)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x, w, bias=None, dilation=(1, 1), pad=((0, 0), (0, 0))) -> Tensor:
    """Dilated 2-D convolution: x (C,H,W), w (O,C,kh,kw) -> (O,Ho,Wo).

    Padding is explicit per side: ((top, bottom), (left, right)). The caller
    chooses top-only height padding for causal stacks and symmetric width
    padding for same-width output.
    """
    xt, wt = _wrap(x), _wrap(w)
    xd, wd = xt.data, wt.data
    o_ch, c_ch, kh, kw = wd.shape
    if xd.shape[0] != c_ch:
        raise ValueError(f"channel mismatch: input {xd.shape[0]}, filter {c_ch}")
    dh, dw = dilation
    (pt, pb), (pl, pr) = pad
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
    h_out = xp.shape[1] - (kh - 1) * dh
    w_out = xp.shape[2] - (kw - 1) * dw
    out = np.zeros((o_ch, h_out, w_out), dtype=xd.dtype)
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, a * dh : a * dh + h_out, b * dw : b * dw + w_out]
            out += np.tensordot(wd[:, :, a, b], patch, axes=(1, 0))
    bt = None
    if bias is not None:
        bt = _wrap(bias)
        out += bt.data[:, None, None]

    def bk(g):
        g = np.asarray(g)
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                patch = xp[:, a * dh : a * dh + h_out, b * dw : b * dw + w_out]
                gw[:, :, a, b] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                gxp[:, a * dh : a * dh + h_out, b * dw : b * dw + w_out] += np.tensordot(
                    wd[:, :, a, b], g, axes=(0, 0)
                )
        gx = gxp[:, pt : pt + xd.shape[1], pl : pl + xd.shape[2]]
        if bt is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    parents = (xt, wt) if bt is None else (xt, wt, bt)
    return _record("conv2d", out, parents, bk)


def conv2d_transpose(x, k, bias=None, stride_t: int = 1, pad=(0, 0)) -> Tensor:
    """Single-channel transposed 2-D conv: x (F,T), k (kf,kt) -> (Fo,To).

    Stride 1 on the first axis, `stride_t` on the second. pad = (pad_f, pad_t)
    trims the scatter result per the usual transposed-conv convention:
    Fo = F + kf - 1 - 2*pad_f, To = (T-1)*stride_t + kt - 2*pad_t.
    """
    xt, kt_ = _wrap(x), _wrap(k)
    xd, kd = xt.data, kt_.data
    f_in, t_in = xd.shape
    kf, ktap = kd.shape
    pf, pt = pad
    f_out = f_in + kf - 1 - 2 * pf
    t_out = (t_in - 1) * stride_t + ktap - 2 * pt
    if f_out <= 0 or t_out <= 0:
        raise ValueError("transposed conv output would be empty")

    # per-tap source/destination slices; tap (a, b) maps x[fi, ti] to
    # out[fi + a - pf, ti*stride + b - pt]
    def tap_slices(a, b):
        fo0 = a - pf
        fi0 = max(0, -fo0)
        fi1 = min(f_in, f_out - fo0)
        to_of = b - pt
        ti0 = max(0, -(to_of // stride_t))  # ceil(-to_of / stride)
        ti1 = min(t_in, -((-(t_out - to_of)) // stride_t))  # ceil((t_out-to_of)/stride)
        if fi1 <= fi0 or ti1 <= ti0:
            return None
        return (
            slice(fi0, fi1),
            slice(ti0, ti1),
            slice(fi0 + fo0, fi1 + fo0),
            slice(ti0 * stride_t + to_of, (ti1 - 1) * stride_t + to_of + 1, stride_t),
        )

    out = np.zeros((f_out, t_out), dtype=xd.dtype)
    for a in range(kf):
        for b in range(ktap):
            sl = tap_slices(a, b)
            if sl is None:
                continue
            fi, ti, fo, to = sl
            out[fo, to] += kd[a, b] * xd[fi, ti]
    bt = None
    if bias is not None:
        bt = _wrap(bias)
        out += bt.data

    def bk(g):
        g = np.asarray(g)
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        for a in range(kf):
            for b in range(ktap):
                sl = tap_slices(a, b)
                if sl is None:
                    continue
                fi, ti, fo, to = sl
                gx[fi, ti] += kd[a, b] * g[fo, to]
                gk[a, b] = (g[fo, to] * xd[fi, ti]).sum()
        if bt is None:
            return gx, gk
        return gx, gk, np.asarray(g.sum(), dtype=bt.data.dtype)

    parents = (xt, kt_) if bt is None else (xt, kt_, bt)
    return _record("conv2d_transpose", out, parents, bk)


# ---------------------------------------------------------------------------
# recording and backward


def record_forward(loss_fn, params) -> tuple[Tensor, Tape]:
    """Run `loss_fn` under a fresh tape and return (loss, tape).

    The fast path checks only the final loss for finiteness. If the loss is
    non-finite, the closure is re-run with per-node checking to report the
    first op that produced a bad value; `loss_fn` must be deterministic for
    the rerun to be faithful.
    """
    tape = Tape()
    tape.register(params)
    with tape:
        loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        check_tape = Tape(check_values=True)
        check_tape.register(params)
        with check_tape:
            loss_fn()  # raises NumericalError at the offending node
        raise NumericalError("loss is non-finite but rerun did not reproduce it")
    tape.loss = loss
    return loss, tape


def backward(tape: Tape, loss: Tensor | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) for every registered parameter.

    Walks the tape in exact reverse recording order. Gradients live in a
    per-call dict keyed by tensor identity, so repeated backward calls and
    interleaved tapes cannot contaminate each other. Parameters that the
    loss does not depend on get zero gradients.
    """
    if loss is None:
        loss = tape.loss
    if loss is None:
        raise ValueError("no loss tensor recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.asarray(pg, dtype=parent.data.dtype)
            else:
                grads[id(parent)] = acc + pg
    return {
        name: grads.get(id(p), np.zeros_like(p.data)) for name, p in tape.params.items()
    }

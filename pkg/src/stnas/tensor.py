"""Dense rank-5 tensors with reverse-mode autodiff over a recorded tape.

Every value is a [N, C, T, H, W] array (float32 for training, float64 for
gradient checking).  Operations executed while a Tape is active append a
node holding the inputs and a backward rule; `backward` walks the tape in
reverse and accumulates gradients by summation over fan-out.

Convolution padding is "same": output extent = ceil(input / stride), total
padding = (out-1)*stride + (k-1)*dilation + 1 - in, split low = total // 2.
"""

from __future__ import annotations

import itertools
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Rng",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "finite_difference_check",
    "seeded_init",
    "set_deterministic",
    "deterministic_mode",
    "conv5d",
    "make_tensor",
]


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


# With the deterministic flag on, all reductions run in a fixed order and
# repeated runs are bit-identical.  The numpy/BLAS kernels used here are
# already fixed-order for a given machine, so the flag currently only gates
# whether future batch-parallel paths may be enabled.
_DETERMINISTIC = True


def set_deterministic(flag: bool) -> None:
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def deterministic_mode() -> bool:
    return _DETERMINISTIC


_slot_counter = itertools.count()


class Tensor:
    """Rank-5 array plus autodiff bookkeeping.

    `slot` is a process-unique id used as the key in gradient maps.
    `is_const_zero` marks outputs of the zero operation so consumers can
    skip arithmetic against them.
    """

    __slots__ = ("data", "requires_grad", "grad", "slot", "is_const_zero")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        data = np.asarray(data)
        if data.ndim != 5:
            raise ShapeError(f"tensors are rank-5, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.slot = next(_slot_counter)
        self.is_const_zero = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, slot={self.slot})"


def make_tensor(values, shape=None, dtype=np.float32, requires_grad=False) -> Tensor:
    """Build a rank-5 tensor from a flat list or array, mostly for tests."""
    arr = np.asarray(values, dtype=dtype)
    if shape is not None:
        arr = arr.reshape(shape)
    while arr.ndim < 5:
        arr = arr[..., None]
    return Tensor(arr, requires_grad=requires_grad)


class _Node:
    __slots__ = ("out", "inputs", "bwd", "name")

    def __init__(self, out, inputs, bwd, name):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.name = name


class Tape:
    """Ordered record of operations; inputs always precede their consumers.

    One tape is owned by one execution context and rebuilt per training
    step (define-by-run).  `check_finite=True` validates every recorded
    output, which is used by tests and the gradient checker.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite
        self._prev = None

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False

    def __len__(self):
        return len(self.nodes)


_active_tape: Tape | None = None


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable, name: str) -> Tensor:
    tape = _active_tape
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), bwd, name))
    if tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by {name}")
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Reverse-mode gradients of a scalar loss over a completed tape.

    Returns {slot: gradient array} for every differentiable tensor reached
    (restricted to `wrt` and its dependencies when given), and mirrors the
    map into each Tensor's `.grad`.  Fan-out accumulates by summation.
    """
    if loss.shape != (1, 1, 1, 1, 1):
        raise ShapeError(f"loss must be scalar-shaped [1,1,1,1,1], got {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")

    if wrt is not None:
        targets = {t.slot for t in wrt}
        reaches: dict[int, bool] = {}
        for node in tape.nodes:
            reaches[node.out.slot] = any(
                inp.slot in targets or reaches.get(inp.slot, False)
                for inp in node.inputs
            )

        def needs(t: Tensor) -> bool:
            return t.requires_grad and (t.slot in targets or reaches.get(t.slot, False))
    else:
        def needs(t: Tensor) -> bool:
            return t.requires_grad

    # grads maps slot -> (array, owned); arrays handed back by backward rules
    # may alias each other, so in-place accumulation only happens once the
    # stored array is a private copy.
    grads: dict[int, list] = {
        loss.slot: [np.ones((1, 1, 1, 1, 1), dtype=loss.data.dtype), True]
    }
    for node in reversed(tape.nodes):
        entry = grads.pop(node.out.slot, None)
        if entry is None or not needs(node.out):
            continue
        need_mask = tuple(needs(t) for t in node.inputs)
        in_grads = node.bwd(entry[0], need_mask)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            acc = grads.get(t.slot)
            if acc is None:
                grads[t.slot] = [ig, False]
            elif acc[1]:
                acc[0] += ig
            else:
                acc[0] = acc[0] + ig
                acc[1] = True

    # whatever is left after the walk was never produced on the tape: leaves
    result = {slot: entry[0] for slot, entry in grads.items() if slot != loss.slot}
    if wrt is not None:
        keep = {t.slot for t in wrt}
        result = {slot: g for slot, g in result.items() if slot in keep}
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.slot in result and t.slot not in seen:
                t.grad = result[t.slot]
                seen.add(t.slot)
    for slot, g in result.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for slot {slot}")
    return result


# ---------------------------------------------------------------------------
# deterministic RNG


class Rng:
    """Counter-based RNG (numpy Philox 4x64) with named substreams.

    The same (seed, stream, call sequence) yields identical values on every
    platform.  `position` counts draw calls for debugging / provenance.
    """

    algorithm = "philox4x64-numpy"

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream_name = stream
        key = (self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode()))
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.position = 0

    def stream(self, name: str) -> "Rng":
        """Independent child stream; derivation depends only on (seed, name)."""
        return Rng(self.seed, f"{self.stream_name}/{name}")

    def normal(self, shape, std=1.0, dtype=np.float32) -> np.ndarray:
        self.position += 1
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape, low, high, dtype=np.float32) -> np.ndarray:
        self.position += 1
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high) -> int:
        """One integer uniform on [low, high)."""
        self.position += 1
        return int(self._gen.integers(low, high))

    def integer_array(self, low, high, size) -> np.ndarray:
        self.position += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self._gen.permutation(n)

    def keep_mask(self, shape, drop_p: float, dtype=np.float32) -> np.ndarray:
        """1.0 with probability 1-drop_p else 0.0, elementwise."""
        self.position += 1
        return (self._gen.random(size=shape) >= drop_p).astype(dtype)


def seeded_init(kind: str, shape, rng: Rng, dtype=np.float32) -> Tensor:
    """Deterministic parameter initialization.

    conv-fan-in-normal: Normal(0, sqrt(2 / fan_in)), fan_in = C_in_per_group
    * kernel volume for a [C_out, C_in/g, kt, kh, kw] weight.
    linear-uniform: Uniform(+-sqrt(1 / fan_in)) for weight [K, C, 1, 1, 1]
    and bias [1, K, 1, 1, 1] (fan_in = C of the producing layer).
    alpha-small-normal: 1e-3 * standard normal.
    Draws fill the array in row-major order, one generator call per tensor.
    """
    shape = tuple(shape)
    if len(shape) != 5:
        raise ShapeError(f"init shapes are rank-5, got {shape}")
    if kind == "conv-fan-in-normal":
        fan_in = shape[1] * shape[2] * shape[3] * shape[4]
        if fan_in == 0:
            raise ValueError("zero fan-in")
        data = rng.normal(shape, std=float(np.sqrt(2.0 / fan_in)), dtype=dtype)
    elif kind == "linear-uniform":
        fan_in = shape[1] * shape[2] * shape[3] * shape[4]
        if fan_in == 0:
            raise ValueError("zero fan-in")
        bound = float(np.sqrt(1.0 / fan_in))
        data = rng.uniform(shape, -bound, bound, dtype=dtype)
    elif kind == "bn-gamma-one":
        data = np.ones(shape, dtype=dtype)
    elif kind == "bn-beta-zero":
        data = np.zeros(shape, dtype=dtype)
    elif kind == "alpha-small-normal":
        data = rng.normal(shape, std=1e-3, dtype=dtype)
    else:
        raise ValueError(f"unknown init kind {kind!r}")
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g, need):
        return (g if need[0] else None, g if need[1] else None)

    return _record(out, (a, b), bwd, "add")


def add_n(ts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors in list order."""
    if len(ts) == 1:
        return ts[0]
    acc = ts[0].data.copy()
    for t in ts[1:]:
        _same_shape(ts[0], t, "add_n")
        acc += t.data
    out = Tensor(acc)

    def bwd(g, need):
        return tuple(g if n else None for n in need)

    return _record(out, tuple(ts), bwd, "add_n")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g, need):
        return (g if need[0] else None, -g if need[1] else None)

    return _record(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g, need):
        return (
            g * b.data if need[0] else None,
            g * a.data if need[1] else None,
        )

    return _record(out, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))

    def bwd(g, need):
        return (g * a.data.dtype.type(c),)

    return _record(out, (a,), bwd, "scale")


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(1, 1, 1, 1, 1))

    def bwd(g, need):
        return (np.full(a.shape, g.reshape(())[()], dtype=a.data.dtype),)

    return _record(out, (a,), bwd, "sum_all")


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g, need):
        # subgradient 0 at exactly 0
        return (g * (a.data > 0),)

    return _record(out, (a,), bwd, "relu")


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    base = ts[0].shape
    for t in ts[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError("concat_channels: non-channel extents differ")
    out = Tensor(np.concatenate([t.data for t in ts], axis=1))
    sizes = [t.shape[1] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, need):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] if need[i] else None
            for i in range(len(ts))
        )

    return _record(out, tuple(ts), bwd, "concat_channels")


def gather_row(t: Tensor, i: int) -> Tensor:
    """Row i of a [R, K, 1, 1, 1] tensor as [K, 1, 1, 1, 1]."""
    out = Tensor(t.data[i].reshape(t.shape[1], 1, 1, 1, 1).copy())

    def bwd(g, need):
        full = np.zeros_like(t.data)
        full[i] = g.reshape(t.shape[1], 1, 1, 1)
        return (full,)

    return _record(out, (t,), bwd, "gather_row")


def softmax_rows(t: Tensor) -> Tensor:
    """Row-wise softmax over axis 1 of [R, K, 1, 1, 1], max-stabilized."""
    z = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p.astype(t.data.dtype))

    def bwd(g, need):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (t,), bwd, "softmax_rows")


def mixed_combine(ys: Sequence[Tensor], w: Tensor) -> Tensor:
    """Weighted sum  sum_i w[i] * ys[i]  with w shaped [k, 1, 1, 1, 1].

    Branches flagged `is_const_zero` are skipped in both directions (their
    value and weight-gradient contributions are exactly zero).
    """
    if w.shape[0] != len(ys):
        raise ShapeError(f"mixed_combine: {len(ys)} branches vs {w.shape[0]} weights")
    shape = None
    for y in ys:
        if shape is None:
            shape = y.shape
        elif y.shape != shape:
            raise ShapeError(f"mixed_combine: branch shapes differ: {shape} vs {y.shape}")
    wv = w.data.reshape(-1)
    acc = None
    for i, y in enumerate(ys):
        if y.is_const_zero:
            continue
        term = y.data * wv[i]
        acc = term if acc is None else acc + term
    if acc is None:
        acc = np.zeros(shape, dtype=w.data.dtype)
    out = Tensor(acc)

    def bwd(g, need):
        grads = []
        for i, y in enumerate(ys):
            if need[i] and not y.is_const_zero:
                grads.append(g * wv[i])
            else:
                grads.append(None)
        if need[-1]:
            dw = np.zeros_like(w.data)
            for i, y in enumerate(ys):
                if not y.is_const_zero:
                    dw[i, 0, 0, 0, 0] = np.einsum(
                        "ncthw,ncthw->", g, y.data, optimize=True
                    )
            grads.append(dw)
        else:
            grads.append(None)
        return tuple(grads)

    return _record(out, tuple(ys) + (w,), bwd, "mixed_combine")


# ---------------------------------------------------------------------------
# convolution


def _same_pad(extent: int, k: int, stride: int, dilation: int):
    out = -(-extent // stride)  # ceil
    span = (k - 1) * dilation + 1
    total = max((out - 1) * stride + span - extent, 0)
    return out, total // 2, total - total // 2


_mac_counter = [0]
_count_macs = [False]


def mac_instrumentation(flag: bool) -> None:
    """Enable counting of multiply-accumulates actually issued by conv/linear."""
    _count_macs[0] = flag
    _mac_counter[0] = 0


def mac_count() -> int:
    return _mac_counter[0]


def conv5d(
    x: Tensor,
    w: Tensor,
    stride=(1, 1, 1),
    dilation=(1, 1, 1),
    groups: int = 1,
) -> Tensor:
    """Cross-correlation with zero 'same' padding, no bias.

    x: [N, C_in, T, H, W];  w: [C_out, C_in/groups, kt, kh, kw] with odd
    kernel extents.  Output extents are ceil(input / stride).
    """
    N, Ci, T, H, W = x.shape
    Co, Cig, kt, kh, kw = w.shape
    st, sh, sw = stride
    dt, dh, dw_ = dilation
    if min(st, sh, sw) < 1 or min(dt, dh, dw_) < 1:
        raise ValueError("stride and dilation must be >= 1")
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    if Ci % groups or Co % groups or Cig != Ci // groups:
        raise ShapeError(
            f"conv5d: channels {Ci}->{Co} incompatible with groups={groups}, "
            f"weight expects {Cig} per group"
        )
    if groups != 1 and not (groups == Ci == Co):
        raise ValueError("conv5d supports groups=1 or depthwise (groups=C_in=C_out)")
    if x.data.dtype != w.data.dtype:
        raise TensorError("conv5d: mixed dtypes")

    To, pt0, pt1 = _same_pad(T, kt, st, dt)
    Ho, ph0, ph1 = _same_pad(H, kh, sh, dh)
    Wo, pw0, pw1 = _same_pad(W, kw, sw, dw_)
    if _count_macs[0]:
        _mac_counter[0] += Co * Cig * kt * kh * kw * (N * To * Ho * Wo) // 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt0, pt1), (ph0, ph1), (pw0, pw1)))
    taps = [(a, b, c) for a in range(kt) for b in range(kh) for c in range(kw)]

    def tap_view(arr, a, b, c):
        return arr[
            :,
            :,
            a * dt : a * dt + st * (To - 1) + 1 : st,
            b * dh : b * dh + sh * (Ho - 1) + 1 : sh,
            c * dw_ : c * dw_ + sw * (Wo - 1) + 1 : sw,
        ]

    col = None
    if groups == 1:
        # one big gather, then a batched GEMM; col is kept for the weight
        # gradient and released with the tape
        win = np.lib.stride_tricks.sliding_window_view(
            xp, ((kt - 1) * dt + 1, (kh - 1) * dh + 1, (kw - 1) * dw_ + 1), axis=(2, 3, 4)
        )
        win = win[:, :, ::st, ::sh, ::sw, ::dt, ::dh, ::dw_]
        col = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4)).reshape(
            N, Ci * kt * kh * kw, To * Ho * Wo
        )
        wmat = w.data.reshape(Co, Ci * kt * kh * kw)
        y = np.matmul(wmat, col).reshape(N, Co, To, Ho, Wo)
    else:
        # depthwise: per-tap fused multiply-add, no channel mixing
        y = np.zeros((N, Co, To, Ho, Wo), dtype=x.data.dtype)
        for a, b, c in taps:
            y += w.data[:, 0, a, b, c].reshape(1, Co, 1, 1, 1) * tap_view(xp, a, b, c)

    out = Tensor(y)

    def bwd(g, need):
        gx = gw = None
        gmat = g.reshape(N, Co, To * Ho * Wo)
        if need[1]:
            if groups == 1:
                gw = np.matmul(gmat, col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            else:
                gw = np.zeros_like(w.data)
                for a, b, c in taps:
                    gw[:, 0, a, b, c] = np.einsum(
                        "ncthw,ncthw->c", g, tap_view(xp, a, b, c), optimize=True
                    )
        if need[0]:
            gxp = np.zeros_like(xp)
            for a, b, c in taps:
                tgt = tap_view(gxp, a, b, c)
                if groups == 1:
                    m = w.data[:, :, a, b, c]  # [Co, Ci]
                    tgt += np.matmul(m.T, gmat).reshape(N, Ci, To, Ho, Wo)
                else:
                    tgt += w.data[:, 0, a, b, c].reshape(1, Co, 1, 1, 1) * g
            gx = gxp[:, :, pt0 : pt0 + T, ph0 : ph0 + H, pw0 : pw0 + W]
        return gx, gw

    return _record(out, (x, w), bwd, "conv5d")


# ---------------------------------------------------------------------------
# pooling


def _pool_prepare(x: Tensor, stride):
    N, C, T, H, W = x.shape
    st, sh, sw = stride
    To, pt0, pt1 = _same_pad(T, 1, st, 1)
    Ho, ph0, ph1 = _same_pad(H, 3, sh, 1)
    Wo, pw0, pw1 = _same_pad(W, 3, sw, 1)
    return (N, C, T, H, W, st, sh, sw, To, Ho, Wo, pt0, pt1, ph0, ph1, pw0, pw1)


def _pool_tap_view(arr, a, b, st, sh, sw, To, Ho, Wo):
    return arr[
        :,
        :,
        0 : st * (To - 1) + 1 : st,
        a : a + sh * (Ho - 1) + 1 : sh,
        b : b + sw * (Wo - 1) + 1 : sw,
    ]


def max_pool_1x3x3(x: Tensor, stride=(1, 1, 1)) -> Tensor:
    """Max over (1,3,3) windows, same padding; gradient goes to the first
    maximal element in (kh, kw) scan order."""
    (N, C, T, H, W, st, sh, sw, To, Ho, Wo, pt0, pt1, ph0, ph1, pw0, pw1) = _pool_prepare(x, stride)
    neg = np.finfo(x.data.dtype).min
    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (pt0, pt1), (ph0, ph1), (pw0, pw1)),
        constant_values=neg,
    )
    stacked = np.stack(
        [_pool_tap_view(xp, a, b, st, sh, sw, To, Ho, Wo) for a in range(3) for b in range(3)],
        axis=0,
    )
    arg = stacked.argmax(axis=0)  # first max in scan order
    y = np.take_along_axis(stacked, arg[None], axis=0)[0]
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g, need):
        gxp = np.zeros(xp.shape, dtype=x.data.dtype)
        for k in range(9):
            a, b = divmod(k, 3)
            tgt = _pool_tap_view(gxp, a, b, st, sh, sw, To, Ho, Wo)
            tgt += g * (arg == k)
        return (gxp[:, :, pt0 : pt0 + T, ph0 : ph0 + H, pw0 : pw0 + W],)

    return _record(out, (x,), bwd, "max_pool_1x3x3")


def avg_pool_1x3x3(x: Tensor, stride=(1, 1, 1)) -> Tensor:
    """Average over (1,3,3) windows, same padding, padded cells excluded
    from the divisor."""
    (N, C, T, H, W, st, sh, sw, To, Ho, Wo, pt0, pt1, ph0, ph1, pw0, pw1) = _pool_prepare(x, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt0, pt1), (ph0, ph1), (pw0, pw1)))
    ones = np.pad(
        np.ones((1, 1, T, H, W), dtype=x.data.dtype),
        ((0, 0), (0, 0), (pt0, pt1), (ph0, ph1), (pw0, pw1)),
    )
    acc = np.zeros((N, C, To, Ho, Wo), dtype=x.data.dtype)
    cnt = np.zeros((1, 1, To, Ho, Wo), dtype=x.data.dtype)
    for a in range(3):
        for b in range(3):
            acc += _pool_tap_view(xp, a, b, st, sh, sw, To, Ho, Wo)
            cnt += _pool_tap_view(ones, a, b, st, sh, sw, To, Ho, Wo)
    y = acc / cnt
    out = Tensor(y)

    def bwd(g, need):
        gn = g / cnt
        gxp = np.zeros(xp.shape, dtype=x.data.dtype)
        for a in range(3):
            for b in range(3):
                tgt = _pool_tap_view(gxp, a, b, st, sh, sw, To, Ho, Wo)
                tgt += gn
        return (gxp[:, :, pt0 : pt0 + T, ph0 : ph0 + H, pw0 : pw0 + W],)

    return _record(out, (x,), bwd, "avg_pool_1x3x3")


def global_avg_pool(x: Tensor) -> Tensor:
    N, C, T, H, W = x.shape
    vol = T * H * W
    out = Tensor((x.data.sum(axis=(2, 3, 4), keepdims=True) / vol).astype(x.data.dtype))

    def bwd(g, need):
        return (np.ascontiguousarray(np.broadcast_to(g / vol, x.shape)).astype(x.data.dtype),)

    return _record(out, (x,), bwd, "global_avg_pool")


# ---------------------------------------------------------------------------
# batch norm, linear, regularizers, loss


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, T, H, W).

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place: r <- (1-momentum) * r + momentum * batch.
    Eval mode uses the running buffers.  Affine transform applies only when
    gamma/beta are given.
    """
    N, C, T, H, W = x.shape
    m = N * T * H * W
    if training:
        mean = x.data.mean(axis=(0, 2, 3, 4))
        var = x.data.var(axis=(0, 2, 3, 4))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, C, 1, 1, 1)) * invstd.reshape(1, C, 1, 1, 1)
    if gamma is not None:
        y = xhat * gamma.data.reshape(1, C, 1, 1, 1) + beta.data.reshape(1, C, 1, 1, 1)
    else:
        y = xhat
    out = Tensor(y.astype(x.data.dtype))
    inputs = (x,) if gamma is None else (x, gamma, beta)

    def bwd(g, need):
        gg = g if gamma is None else g * gamma.data.reshape(1, C, 1, 1, 1)
        if training:
            sum_g = gg.sum(axis=(0, 2, 3, 4))
            sum_gx = np.einsum("ncthw,ncthw->c", gg, xhat, optimize=True)
            gx = (
                invstd.reshape(1, C, 1, 1, 1)
                * (gg - (sum_g.reshape(1, C, 1, 1, 1) + xhat * sum_gx.reshape(1, C, 1, 1, 1)) / m)
            ).astype(x.data.dtype)
        else:
            gx = (gg * invstd.reshape(1, C, 1, 1, 1)).astype(x.data.dtype)
        if gamma is None:
            return (gx if need[0] else None,)
        ggamma = gbeta = None
        if need[1]:
            ggamma = np.einsum("ncthw,ncthw->c", g, xhat, optimize=True).reshape(gamma.shape).astype(x.data.dtype)
        if need[2]:
            gbeta = g.sum(axis=(0, 2, 3, 4)).reshape(beta.shape).astype(x.data.dtype)
        return (gx if need[0] else None, ggamma, gbeta)

    return _record(out, inputs, bwd, "batch_norm")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer on pooled features.

    x: [N, C, 1, 1, 1];  w: [K, C, 1, 1, 1];  b: [1, K, 1, 1, 1].
    """
    N, C = x.shape[0], x.shape[1]
    K = w.shape[0]
    if w.shape[1] != C:
        raise ShapeError(f"linear: {C} features vs weight {w.shape}")
    xm = x.data.reshape(N, C)
    wm = w.data.reshape(K, C)
    if _count_macs[0]:
        _mac_counter[0] += N * K * C
    y = (xm @ wm.T + b.data.reshape(1, K)).reshape(N, K, 1, 1, 1)
    out = Tensor(y)

    def bwd(g, need):
        gm = g.reshape(N, K)
        gx = (gm @ wm).reshape(x.shape) if need[0] else None
        gw = (gm.T @ xm).reshape(w.shape) if need[1] else None
        gb = gm.sum(axis=0).reshape(b.shape) if need[2] else None
        return gx, gw, gb

    return _record(out, (x, w, b), bwd, "linear")


def dropout(x: Tensor, p: float, rng: Rng, training: bool) -> Tensor:
    """Inverted elementwise dropout; identity in eval mode or at p=0."""
    if not training or p == 0.0:
        return x
    mask = rng.keep_mask(x.shape, p, dtype=x.data.dtype) / x.data.dtype.type(1.0 - p)
    out = Tensor(x.data * mask)

    def bwd(g, need):
        return (g * mask,)

    return _record(out, (x,), bwd, "dropout")


def drop_path(x: Tensor, p: float, rng: Rng, training: bool) -> Tensor:
    """Per-sample stochastic depth: zero the whole tensor for a sample with
    probability p, scale survivors by 1/(1-p).  Identity in eval mode."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"drop_path probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    mask = rng.keep_mask((x.shape[0], 1, 1, 1, 1), p, dtype=x.data.dtype) / x.data.dtype.type(1.0 - p)
    out = Tensor(x.data * mask)

    def bwd(g, need):
        return (g * mask,)

    return _record(out, (x,), bwd, "drop_path")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized.

    logits: [N, K, 1, 1, 1]; labels: int array [N] with entries in [0, K).
    """
    N, K = logits.shape[0], logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (N,):
        raise ShapeError(f"labels shape {labels.shape} vs batch {N}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("label out of range")
    z = logits.data.reshape(N, K).astype(np.float64 if logits.data.dtype == np.float64 else np.float32)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(N), labels]).mean())
    out = Tensor(np.full((1, 1, 1, 1, 1), loss, dtype=logits.data.dtype))
    p = np.exp(z - lse[:, None])

    def bwd(g, need):
        d = p.copy()
        d[np.arange(N), labels] -= 1.0
        d *= g.reshape(()) / N
        return (d.reshape(logits.shape).astype(logits.data.dtype),)

    return _record(out, (logits,), bwd, "softmax_cross_entropy")


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    """Count of samples whose label is among the k largest logits.

    Ties are broken toward the lower class index (stable sort on -logit).
    """
    N = logits.shape[0]
    flat = logits.reshape(N, -1)
    order = np.argsort(-flat, axis=1, kind="stable")
    return int((order[:, :k] == np.asarray(labels)[:, None]).any(axis=1).sum())


def zeros_like_strided(x: Tensor, stride=(1, 1, 1)) -> Tensor:
    """All-zero tensor of the strided output shape; no gradient into x."""
    N, C, T, H, W = x.shape
    st, sh, sw = stride
    shape = (N, C, -(-T // st), -(-H // sh), -(-W // sw))
    out = Tensor(np.zeros(shape, dtype=x.data.dtype))
    out.is_const_zero = True
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
) -> float:
    """Max relative error between central differences and the tape gradient.

    f must map x to a scalar tensor.  Run in float64; eps in [1e-7, 1e-3].
    Error metric per component: |fd - ad| / max(|fd|, |ad|, 1e-8).
    """
    if x.data.dtype != np.float64:
        raise TensorError("finite_difference_check requires float64 input")
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps outside [1e-7, 1e-3]")
    x.requires_grad = True
    with Tape(check_finite=True) as tape:
        y = f(x)
    # no tape path from x to the loss means the gradient is identically zero
    g = backward(tape, y, wrt=[x]).get(x.slot, np.zeros_like(x.data))

    flat = x.data.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * eps)
    ad = g.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-8)
    return float(np.max(np.abs(fd - ad) / denom))

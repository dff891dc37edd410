"""Search-space operations and network-head primitives.

Each operation is a small layer chain over the tensor primitives.  The
spatial set is the first six kinds; temporal cells additionally use the two
factorized temporal convolutions (ReLU-Conv2D-Conv1D-BN).  Convolutions
carry no bias (batch norm follows every conv).
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as tt
from .tensor import Rng, Tensor


class OpKind(str, Enum):
    ZERO = "zero"
    IDENTITY = "identity"
    AVG_POOL = "avg_pool_1x3x3"
    MAX_POOL = "max_pool_1x3x3"
    SEP_CONV = "sep_conv_1x3x3"
    DIL_SEP_CONV = "dil_sep_conv_1x3x3"
    T_CONV_3_3X3 = "t_conv_3_3x3"
    T_CONV_3_1X1 = "t_conv_3_1x1"


SPATIAL_OPS = (
    OpKind.ZERO,
    OpKind.IDENTITY,
    OpKind.AVG_POOL,
    OpKind.MAX_POOL,
    OpKind.SEP_CONV,
    OpKind.DIL_SEP_CONV,
)
TEMPORAL_OPS = SPATIAL_OPS + (OpKind.T_CONV_3_3X3, OpKind.T_CONV_3_1X1)

# used by the random-wired generation constraint
CONV_KINDS = frozenset(
    {OpKind.SEP_CONV, OpKind.DIL_SEP_CONV, OpKind.T_CONV_3_3X3, OpKind.T_CONV_3_1X1}
)


class ForwardContext:
    """Per-forward execution settings: train/eval mode, RNG for stochastic
    regularizers, and the drop-path rate applied by discrete cells."""

    def __init__(self, training: bool, rng: Rng | None = None, drop_path_p: float = 0.0):
        self.training = training
        self.rng = rng
        self.drop_path_p = drop_path_p


EVAL_CTX = ForwardContext(training=False)


class Layer:
    """Base for parameterized blocks; parameters and buffers are named for
    checkpointing and the allocation-count oracle."""

    def parameters(self):
        return []

    def buffers(self):
        return []

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, c_in, c_out, kernel, stride=(1, 1, 1), dilation=(1, 1, 1),
                 groups=1, rng: Rng | None = None, dtype=np.float32):
        self.stride = tuple(stride)
        self.dilation = tuple(dilation)
        self.groups = groups
        shape = (c_out, c_in // groups) + tuple(kernel)
        self.w = tt.seeded_init("conv-fan-in-normal", shape, rng, dtype=dtype)

    def parameters(self):
        return [("w", self.w)]

    def __call__(self, x, ctx):
        return tt.conv5d(x, self.w, self.stride, self.dilation, self.groups)


class BatchNorm(Layer):
    def __init__(self, c, affine: bool, rng: Rng | None = None, dtype=np.float32):
        self.c = c
        self.affine = affine
        if affine:
            self.gamma = tt.seeded_init("bn-gamma-one", (1, c, 1, 1, 1), rng, dtype=dtype)
            self.beta = tt.seeded_init("bn-beta-zero", (1, c, 1, 1, 1), rng, dtype=dtype)
        else:
            self.gamma = self.beta = None
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)] if self.affine else []

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x, ctx):
        return tt.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=ctx.training,
        )


class Identity(Layer):
    kind = OpKind.IDENTITY

    def __call__(self, x, ctx):
        return x


class Zero(Layer):
    kind = OpKind.ZERO

    def __init__(self, stride=(1, 1, 1)):
        self.stride = tuple(stride)

    def __call__(self, x, ctx):
        return tt.zeros_like_strided(x, self.stride)


class FactorizedReduce(Layer):
    """Strided identity: two offset stride-s 1x1x1 convs concatenated, then BN.

    Requires even extents along every strided axis so the two halves line up.
    """

    kind = OpKind.IDENTITY

    def __init__(self, c, stride, affine, rng, dtype=np.float32):
        if c % 2:
            raise ValueError("factorized reduce needs an even channel count")
        self.stride = tuple(stride)
        self.conv_a = Conv(c, c // 2, (1, 1, 1), stride=stride, rng=rng, dtype=dtype)
        self.conv_b = Conv(c, c // 2, (1, 1, 1), stride=stride, rng=rng, dtype=dtype)
        self.bn = BatchNorm(c, affine, rng, dtype=dtype)

    def parameters(self):
        return _prefixed(("conv_a", self.conv_a), ("conv_b", self.conv_b), ("bn", self.bn))

    def buffers(self):
        return _prefixed_buffers(("bn", self.bn))

    def __call__(self, x, ctx):
        st, sh, sw = self.stride
        _check_even_for_stride(x.shape, self.stride, "factorized reduce")
        a = self.conv_a(x, ctx)
        shifted = _shift_slice(x, (1 if st > 1 else 0, 1 if sh > 1 else 0, 1 if sw > 1 else 0))
        b = self.conv_b(shifted, ctx)
        return self.bn(tt.concat_channels([a, b]), ctx)


def _shift_slice(x: Tensor, offsets) -> Tensor:
    ot, oh, ow = offsets
    if ot == oh == ow == 0:
        return x
    out = Tensor(np.ascontiguousarray(x.data[:, :, ot:, oh:, ow:]))

    def bwd(g, need):
        full = np.zeros_like(x.data)
        full[:, :, ot:, oh:, ow:] = g
        return (full,)

    return tt._record(out, (x,), bwd, "shift_slice")


def _check_even_for_stride(shape, stride, what):
    _, _, T, H, W = shape
    for extent, s, axis in ((T, stride[0], "T"), (H, stride[1], "H"), (W, stride[2], "W")):
        if s > 1 and extent % 2:
            raise ValueError(f"{what}: {axis} extent {extent} must be even for stride {s}")


class AvgPoolOp(Layer):
    kind = OpKind.AVG_POOL

    def __init__(self, c, stride, rng, dtype=np.float32):
        self.stride = tuple(stride)
        # parameter-free by design: BN without affine
        self.bn = BatchNorm(c, affine=False, rng=rng, dtype=dtype)

    def buffers(self):
        return _prefixed_buffers(("bn", self.bn))

    def __call__(self, x, ctx):
        return self.bn(tt.avg_pool_1x3x3(x, self.stride), ctx)


class MaxPoolOp(Layer):
    kind = OpKind.MAX_POOL

    def __init__(self, stride):
        self.stride = tuple(stride)

    def __call__(self, x, ctx):
        return tt.max_pool_1x3x3(x, self.stride)


class SepConv(Layer):
    """ReLU -> depthwise (1,3,3) -> pointwise (1,1,1) -> BN, applied once."""

    def __init__(self, c, stride, affine, rng, spatial_dilation=1, dtype=np.float32):
        self.kind = OpKind.DIL_SEP_CONV if spatial_dilation > 1 else OpKind.SEP_CONV
        d = spatial_dilation
        self.dw = Conv(c, c, (1, 3, 3), stride=stride, dilation=(1, d, d), groups=c,
                       rng=rng, dtype=dtype)
        self.pw = Conv(c, c, (1, 1, 1), rng=rng, dtype=dtype)
        self.bn = BatchNorm(c, affine, rng, dtype=dtype)
        self.leading_relu = True

    def parameters(self):
        return _prefixed(("dw", self.dw), ("pw", self.pw), ("bn", self.bn))

    def buffers(self):
        return _prefixed_buffers(("bn", self.bn))

    def tail(self, r, ctx):
        return self.bn(self.pw(self.dw(r, ctx), ctx), ctx)

    def __call__(self, x, ctx):
        return self.tail(tt.relu(x), ctx)


class TemporalConv(Layer):
    """ReLU -> 2D conv (1,k,k) C->C -> 1D temporal conv (3,1,1) C->C -> BN.

    Spatial stride is taken by the 2D conv, temporal stride by the 1D conv.
    """

    def __init__(self, c, spatial_kernel, stride, affine, rng, dtype=np.float32):
        self.kind = OpKind.T_CONV_3_3X3 if spatial_kernel == 3 else OpKind.T_CONV_3_1X1
        st, sh, sw = stride
        k = spatial_kernel
        self.conv2d = Conv(c, c, (1, k, k), stride=(1, sh, sw), rng=rng, dtype=dtype)
        self.conv1d = Conv(c, c, (3, 1, 1), stride=(st, 1, 1), rng=rng, dtype=dtype)
        self.bn = BatchNorm(c, affine, rng, dtype=dtype)
        self.leading_relu = True

    def parameters(self):
        return _prefixed(("conv2d", self.conv2d), ("conv1d", self.conv1d), ("bn", self.bn))

    def buffers(self):
        return _prefixed_buffers(("bn", self.bn))

    def tail(self, r, ctx):
        return self.bn(self.conv1d(self.conv2d(r, ctx), ctx), ctx)

    def __call__(self, x, ctx):
        return self.tail(tt.relu(x), ctx)


def _prefixed(*named_layers):
    out = []
    for prefix, layer in named_layers:
        for name, p in layer.parameters():
            out.append((f"{prefix}.{name}", p))
    return out


def _prefixed_buffers(*named_layers):
    out = []
    for prefix, layer in named_layers:
        for name, b in layer.buffers():
            out.append((f"{prefix}.{name}", b))
    return out


def build_op(kind: OpKind, c: int, stride=(1, 1, 1), affine: bool = True,
             rng: Rng | None = None, dtype=np.float32) -> Layer:
    """Construct one search-space operation at channel width c.

    Identity at stride > 1 becomes a factorized reduce; zero emits zeros of
    the strided output shape.
    """
    kind = OpKind(kind)
    if c < 1:
        raise ValueError("channel width must be >= 1")
    stride = tuple(stride)
    strided = any(s > 1 for s in stride)
    if kind is OpKind.ZERO:
        return Zero(stride)
    if kind is OpKind.IDENTITY:
        return FactorizedReduce(c, stride, affine, rng, dtype) if strided else Identity()
    if kind is OpKind.AVG_POOL:
        return AvgPoolOp(c, stride, rng, dtype)
    if kind is OpKind.MAX_POOL:
        return MaxPoolOp(stride)
    if kind is OpKind.SEP_CONV:
        return SepConv(c, stride, affine, rng, dtype=dtype)
    if kind is OpKind.DIL_SEP_CONV:
        return SepConv(c, stride, affine, rng, spatial_dilation=2, dtype=dtype)
    if kind is OpKind.T_CONV_3_3X3:
        return TemporalConv(c, 3, stride, affine, rng, dtype=dtype)
    if kind is OpKind.T_CONV_3_1X1:
        return TemporalConv(c, 1, stride, affine, rng, dtype=dtype)
    raise ValueError(f"unhandled op kind {kind}")


class ClassifierHead(Layer):
    """Global average pool -> dropout -> fully connected logits."""

    def __init__(self, c_in, n_classes, dropout_p, rng, dtype=np.float32):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.dropout_p = dropout_p
        self.w = tt.seeded_init("linear-uniform", (n_classes, c_in, 1, 1, 1), rng, dtype=dtype)
        bound = float(np.sqrt(1.0 / c_in))
        self.b = Tensor(rng.uniform((1, n_classes, 1, 1, 1), -bound, bound, dtype=dtype),
                        requires_grad=True)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]

    def __call__(self, x, ctx):
        pooled = tt.global_avg_pool(x)
        dropped = tt.dropout(pooled, self.dropout_p, ctx.rng, ctx.training)
        return tt.linear(dropped, self.w, self.b)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray):
    """Mean cross-entropy plus top-1 / top-5 hit counts for the batch."""
    loss = tt.softmax_cross_entropy(logits, labels)
    k5 = min(5, logits.shape[1])
    top1 = tt.topk_hits(logits.data, labels, 1)
    top5 = tt.topk_hits(logits.data, labels, k5)
    return loss, top1, top5


def drop_path(x: Tensor, p: float, rng: Rng, training: bool) -> Tensor:
    return tt.drop_path(x, p, rng, training)

"""Tape-based reverse-mode autodiff on numpy arrays.

The backward pass can optionally be recorded as graph operations, so the
gradient of a scalar with respect to an input is itself a differentiable
node (needed to train a discriminator whose loss contains the norm of its
own input gradient). Tapes are rebuilt per step; recorded values are never
mutated in place.
"""

from __future__ import annotations

import numpy as np

LOG_OFFSET = 1e-8    # added inside log() so adversarial losses never hit -inf
NORM_OFFSET = 1e-12  # inside the sqrt of l2norm, keeps its gradient finite at 0

PUBLIC_KINDS = frozenset({
    "add", "mul", "matmul", "affine", "tanh", "relu", "sigmoid", "log",
    "square", "sum", "mean", "concat", "clip", "l2norm",
})


class ShapeMismatchError(ValueError):
    def __init__(self, kind, shapes):
        super().__init__(f"{kind}: incompatible shapes {list(shapes)}")
        self.kind = kind
        self.shapes = shapes


class DomainError(ValueError):
    pass


class TensorNode:
    """One value in the computation graph.

    Leaves (op is None) are either constants or parameters
    (requires_grad=True). Non-leaves record the producing op and inputs;
    their requires_grad is inherited from the inputs.
    """

    __slots__ = ("values", "op", "inputs", "attrs", "requires_grad", "name")

    def __init__(self, values, op=None, inputs=(), attrs=None,
                 requires_grad=False, name=None):
        self.values = values
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        kind = self.op if self.op else ("param" if self.requires_grad else "const")
        return f"TensorNode({kind}, shape={self.shape})"

    # Operator sugar; everything routes through apply().
    def __add__(self, other):
        return apply("add", [self, _as_node(other)])

    __radd__ = __add__

    def __mul__(self, other):
        return apply("mul", [self, _as_node(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return apply("mul", [self, _as_node(-1.0)])

    def __sub__(self, other):
        return self + (-_as_node(other))

    def __rsub__(self, other):
        return _as_node(other) + (-self)

    def __truediv__(self, other):
        return _apply_private("div", [self, _as_node(other)])

    def __matmul__(self, other):
        return apply("matmul", [self, _as_node(other)])


def tensor(values, requires_grad=False, name=None, dtype=None):
    """Create a leaf node. Lists/scalars become float64 arrays by default."""
    arr = np.asarray(values, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return TensorNode(arr, requires_grad=requires_grad, name=name)


def _as_node(x):
    if isinstance(x, TensorNode):
        return x
    return tensor(x)


class GradientMap:
    """Parameter node -> gradient array; zeros for parameters the root
    never reached."""

    def __init__(self, grads):
        self._grads = grads  # id(param) -> (param, grad); holds the refs alive

    def get(self, param):
        entry = self._grads.get(id(param))
        if entry is None:
            return np.zeros(param.shape, dtype=param.values.dtype)
        return entry[1]

    def __contains__(self, param):
        return id(param) in self._grads

    def items(self):
        return self._grads.values()


# ---------------------------------------------------------------------------
# Executors: the same VJP rules run either on raw arrays (training) or on
# graph nodes (when a gradient must stay differentiable).
# ---------------------------------------------------------------------------

class _EagerExec:
    graph = False

    @staticmethod
    def v(x):
        return x.values if isinstance(x, TensorNode) else x

    def add(self, a, b):
        return self.v(a) + self.v(b)

    def mul(self, a, b):
        return self.v(a) * self.v(b)

    def div(self, a, b):
        return self.v(a) / self.v(b)

    def neg(self, a):
        return -self.v(a)

    def matmul(self, a, b):
        return self.v(a) @ self.v(b)

    def transpose(self, a):
        return self.v(a).T

    def sum(self, a, axis=None, keepdims=False):
        return np.sum(self.v(a), axis=axis, keepdims=keepdims)

    def reshape(self, a, shape):
        return self.v(a).reshape(shape)

    def slice(self, a, key):
        return self.v(a)[key]

    def scatter_slice(self, a, shape, key):
        out = np.zeros(shape, dtype=np.asarray(self.v(a)).dtype)
        out[key] = self.v(a)
        return out

    def im2col(self, a, kh, kw, stride):
        return _im2col_values(self.v(a), kh, kw, stride)

    def col2im(self, a, x_shape, kh, kw, stride):
        return _col2im_values(self.v(a), x_shape, kh, kw, stride)

    def unbroadcast(self, g, shape):
        return _unbroadcast_values(self.v(g), shape)


class _GraphExec:
    graph = True

    @staticmethod
    def v(x):
        return _as_node(x)

    def add(self, a, b):
        return apply("add", [self.v(a), self.v(b)])

    def mul(self, a, b):
        return apply("mul", [self.v(a), self.v(b)])

    def div(self, a, b):
        return _apply_private("div", [self.v(a), self.v(b)])

    def neg(self, a):
        return -self.v(a)

    def matmul(self, a, b):
        return apply("matmul", [self.v(a), self.v(b)])

    def transpose(self, a):
        return _apply_private("transpose", [self.v(a)])

    def sum(self, a, axis=None, keepdims=False):
        return apply("sum", [self.v(a)], axis=axis, keepdims=keepdims)

    def reshape(self, a, shape):
        return _apply_private("reshape", [self.v(a)], shape=tuple(shape))

    def slice(self, a, key):
        return _apply_private("slice", [self.v(a)], key=key)

    def scatter_slice(self, a, shape, key):
        return _apply_private("scatter_slice", [self.v(a)], shape=tuple(shape), key=key)

    def im2col(self, a, kh, kw, stride):
        return _apply_private("im2col", [self.v(a)], kh=kh, kw=kw, stride=stride)

    def col2im(self, a, x_shape, kh, kw, stride):
        return _apply_private("col2im", [self.v(a)], x_shape=tuple(x_shape),
                              kh=kh, kw=kw, stride=stride)

    def unbroadcast(self, g, shape):
        g = self.v(g)
        if g.shape == tuple(shape):
            return g
        # sum away broadcast axes, mirroring numpy's broadcast rules
        extra = len(g.shape) - len(shape)
        if extra > 0:
            g = self.sum(g, axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = self.sum(g, axis=axes, keepdims=True)
        return self.reshape(g, shape)


def _unbroadcast_values(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _im2col_values(x, kh, kw, stride):
    # x is channels-last (B, H, W, C); returns (B*OH*OW, kh*kw*C)
    b, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i:i + stride * oh:stride,
                                       j:j + stride * ow:stride, :]
    return cols.reshape(b * oh * ow, kh * kw * c)


def _col2im_values(cols, x_shape, kh, kw, stride):
    b, h, w, c = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = cols.reshape(b, oh, ow, kh, kw, c)
    x = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            x[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += \
                cols[:, :, :, i, j, :]
    return x


# ---------------------------------------------------------------------------
# Operation table: forward on arrays, vjp via an executor.
# ---------------------------------------------------------------------------

def _fw_add(attrs, a, b):
    return a + b


def _vjp_add(E, g, inputs, out):
    a, b = inputs
    return (E.unbroadcast(g, a.shape), E.unbroadcast(g, b.shape))


def _fw_mul(attrs, a, b):
    return a * b


def _vjp_mul(E, g, inputs, out):
    a, b = inputs
    return (E.unbroadcast(E.mul(g, b), a.shape),
            E.unbroadcast(E.mul(g, a), b.shape))


def _fw_div(attrs, a, b):
    return a / b


def _vjp_div(E, g, inputs, out):
    a, b = inputs
    ga = E.unbroadcast(E.div(g, b), a.shape)
    gb = E.unbroadcast(E.neg(E.div(E.mul(g, out), b)), b.shape)
    return (ga, gb)


def _fw_matmul(attrs, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", (a.shape, b.shape))
    return a @ b


def _vjp_matmul(E, g, inputs, out):
    a, b = inputs
    return (E.matmul(g, E.transpose(b)), E.matmul(E.transpose(a), g))


def _fw_affine(attrs, x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatchError("affine", (x.shape, w.shape, b.shape))
    return x @ w + b


def _vjp_affine(E, g, inputs, out):
    x, w, b = inputs
    return (E.matmul(g, E.transpose(w)),
            E.matmul(E.transpose(x), g),
            E.sum(g, axis=0))


def _fw_tanh(attrs, x):
    return np.tanh(x)


def _vjp_tanh(E, g, inputs, out):
    return (E.mul(g, E.add(1.0, E.neg(E.mul(out, out)))),)


def _fw_relu(attrs, x):
    return np.maximum(x, 0.0)


def _vjp_relu(E, g, inputs, out):
    x = inputs[0]
    mask = (x.values > 0).astype(x.values.dtype)
    return (E.mul(g, mask),)


def _fw_sigmoid(attrs, x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _vjp_sigmoid(E, g, inputs, out):
    return (E.mul(g, E.mul(out, E.add(1.0, E.neg(out)))),)


def _fw_log(attrs, x):
    if np.any(x + LOG_OFFSET <= 0):
        raise DomainError("log: input not strictly positive after safety offset")
    return np.log(x + LOG_OFFSET)


def _vjp_log(E, g, inputs, out):
    x = inputs[0]
    return (E.div(g, E.add(x, LOG_OFFSET)),)


def _fw_square(attrs, x):
    return x * x


def _vjp_square(E, g, inputs, out):
    x = inputs[0]
    return (E.mul(g, E.mul(2.0, x)),)


def _fw_sum(attrs, x):
    return np.sum(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _bcast_reduced(E, g, attrs, in_shape):
    axis = attrs.get("axis")
    keepdims = attrs.get("keepdims", False)
    if axis is None:
        return E.mul(g, np.ones(in_shape))
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        kd = list(in_shape)
        for ax in axes:
            kd[ax] = 1
        g = E.reshape(g, kd)
    return E.mul(g, np.ones(in_shape))


def _vjp_sum(E, g, inputs, out):
    return (_bcast_reduced(E, g, out.attrs, inputs[0].shape),)


def _fw_mean(attrs, x):
    return np.mean(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _vjp_mean(E, g, inputs, out):
    n = inputs[0].size // max(out.size, 1)
    g = E.mul(g, 1.0 / n)
    return (_bcast_reduced(E, g, out.attrs, inputs[0].shape),)


def _fw_concat(attrs, *xs):
    axis = attrs.get("axis", 0)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim:
            raise ShapeMismatchError("concat", tuple(x.shape for x in xs))
    return np.concatenate(xs, axis=axis)


def _vjp_concat(E, g, inputs, out):
    axis = out.attrs.get("axis", 0)
    grads = []
    start = 0
    for x in inputs:
        n = x.shape[axis]
        key = tuple(slice(None) if d != axis else slice(start, start + n)
                    for d in range(len(x.shape)))
        grads.append(E.slice(g, key))
        start += n
    return tuple(grads)


def _fw_clip(attrs, x):
    return np.clip(x, attrs["lo"], attrs["hi"])


def _vjp_clip(E, g, inputs, out):
    x = inputs[0]
    mask = ((x.values > out.attrs["lo"]) & (x.values < out.attrs["hi"]))
    return (E.mul(g, mask.astype(x.values.dtype)),)


def _fw_l2norm(attrs, x):
    return np.sqrt(np.sum(x * x, axis=attrs.get("axis")) + NORM_OFFSET)


def _vjp_l2norm(E, g, inputs, out):
    x = inputs[0]
    axis = out.attrs.get("axis")
    if axis is None:
        return (E.mul(x, E.div(g, out)),)
    kd = list(x.shape)
    kd[axis] = 1
    ratio = E.reshape(E.div(g, out), kd)
    return (E.mul(x, ratio),)


def _fw_minimum(attrs, a, b):
    return np.minimum(a, b)


def _vjp_minimum(E, g, inputs, out):
    a, b = inputs
    mask = (a.values <= b.values).astype(a.values.dtype)
    return (E.unbroadcast(E.mul(g, mask), a.shape),
            E.unbroadcast(E.mul(g, 1.0 - mask), b.shape))


def _fw_transpose(attrs, x):
    return x.T


def _vjp_transpose(E, g, inputs, out):
    return (E.transpose(g),)


def _fw_reshape(attrs, x):
    return x.reshape(attrs["shape"])


def _vjp_reshape(E, g, inputs, out):
    return (E.reshape(g, inputs[0].shape),)


def _fw_slice(attrs, x):
    return x[attrs["key"]]


def _vjp_slice(E, g, inputs, out):
    return (E.scatter_slice(g, inputs[0].shape, out.attrs["key"]),)


def _fw_scatter_slice(attrs, x):
    out = np.zeros(attrs["shape"], dtype=x.dtype)
    out[attrs["key"]] = x
    return out


def _vjp_scatter_slice(E, g, inputs, out):
    return (E.slice(g, out.attrs["key"]),)


def _fw_im2col(attrs, x):
    return _im2col_values(x, attrs["kh"], attrs["kw"], attrs["stride"])


def _vjp_im2col(E, g, inputs, out):
    a = out.attrs
    return (E.col2im(g, inputs[0].shape, a["kh"], a["kw"], a["stride"]),)


def _fw_col2im(attrs, x):
    return _col2im_values(x, attrs["x_shape"], attrs["kh"], attrs["kw"], attrs["stride"])


def _vjp_col2im(E, g, inputs, out):
    a = out.attrs
    return (E.im2col(g, a["kh"], a["kw"], a["stride"]),)


_OPS = {
    "add": (_fw_add, _vjp_add),
    "mul": (_fw_mul, _vjp_mul),
    "div": (_fw_div, _vjp_div),
    "matmul": (_fw_matmul, _vjp_matmul),
    "affine": (_fw_affine, _vjp_affine),
    "tanh": (_fw_tanh, _vjp_tanh),
    "relu": (_fw_relu, _vjp_relu),
    "sigmoid": (_fw_sigmoid, _vjp_sigmoid),
    "log": (_fw_log, _vjp_log),
    "square": (_fw_square, _vjp_square),
    "sum": (_fw_sum, _vjp_sum),
    "mean": (_fw_mean, _vjp_mean),
    "concat": (_fw_concat, _vjp_concat),
    "clip": (_fw_clip, _vjp_clip),
    "l2norm": (_fw_l2norm, _vjp_l2norm),
    "minimum": (_fw_minimum, _vjp_minimum),
    "transpose": (_fw_transpose, _vjp_transpose),
    "reshape": (_fw_reshape, _vjp_reshape),
    "slice": (_fw_slice, _vjp_slice),
    "scatter_slice": (_fw_scatter_slice, _vjp_scatter_slice),
    "im2col": (_fw_im2col, _vjp_im2col),
    "col2im": (_fw_col2im, _vjp_col2im),
}

_BINARY_ELEMWISE = frozenset({"add", "mul", "div", "minimum"})


def _apply_private(kind, inputs, **attrs):
    fw, _ = _OPS[kind]
    if kind in _BINARY_ELEMWISE:
        a, b = inputs[0].values, inputs[1].values
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeMismatchError(kind, (a.shape, b.shape)) from None
    values = fw(attrs, *(x.values for x in inputs))
    requires = any(x.requires_grad for x in inputs)
    return TensorNode(values, op=kind, inputs=tuple(inputs), attrs=attrs,
                      requires_grad=requires)


def apply(kind, inputs, **attrs):
    """Build a graph node for one of the public operation kinds."""
    if kind not in PUBLIC_KINDS:
        raise ValueError(f"unknown operation kind: {kind!r}")
    if kind == "clip" and ("lo" not in attrs or "hi" not in attrs):
        raise ValueError("clip needs lo= and hi=")
    inputs = [_as_node(x) for x in inputs]
    return _apply_private(kind, inputs, **attrs)


def minimum(a, b):
    """Elementwise min of two nodes, differentiable a.e."""
    return _apply_private("minimum", [_as_node(a), _as_node(b)])


# ---------------------------------------------------------------------------
# Backward passes
# ---------------------------------------------------------------------------

def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    return order


def _run_backward(root, create_graph):
    E = _GraphExec() if create_graph else _EagerExec()
    order = _toposort(root)
    seed = np.ones(root.shape, dtype=root.values.dtype)
    adjoint = {id(root): _as_node(seed) if create_graph else seed}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or node.op is None:
            continue
        vjps = _OPS[node.op][1](E, g, node.inputs, node)
        for inp, gi in zip(node.inputs, vjps):
            if not inp.requires_grad or gi is None:
                continue
            prev = adjoint.get(id(inp))
            if prev is None:
                adjoint[id(inp)] = gi
            else:
                adjoint[id(inp)] = E.add(prev, gi)
    return adjoint, order


def backward(root):
    """Gradients of a scalar node w.r.t. every reachable parameter leaf.

    Returns a GradientMap; parameters the root does not depend on read
    back as zero arrays.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    adjoint, order = _run_backward(root, create_graph=False)
    grads = {}
    for node in order:
        if node.op is None and node.requires_grad and id(node) in adjoint:
            g = adjoint[id(node)]
            if g.shape != node.shape:
                g = np.broadcast_to(g, node.shape).astype(node.values.dtype)
            grads[id(node)] = (node, g)
    return GradientMap(grads)


def input_gradient(scalar, wrt):
    """d scalar / d wrt as a graph node, itself differentiable again."""
    if scalar.size != 1:
        raise ValueError("input_gradient needs a scalar node")
    if not wrt.requires_grad:
        raise ValueError("wrt must have requires_grad=True to receive a gradient")
    adjoint, _ = _run_backward(scalar, create_graph=True)
    g = adjoint.get(id(wrt))
    if g is None:
        raise ValueError("wrt does not influence the scalar")
    return g


def finite_diff_check(f, params, eps=1e-5):
    """Max relative error between backward() and central differences.

    f is a deterministic callable building a fresh scalar node from the
    given parameter leaves. Relative error uses max(1, |fd|, |ad|) as the
    denominator so near-zero gradients compare absolutely.
    """
    grads = backward(f(params))
    worst = 0.0
    for p in params:
        ad = grads.get(p)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params).values.item()
            flat[i] = orig - eps
            lo = f(params).values.item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            a = ad.reshape(-1)[i]
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if err > worst:
                worst = err
    return worst

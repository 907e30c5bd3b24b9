"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations in execution order; ``Tape.backward``
replays them in strict reverse order and accumulates vector-Jacobian products.
Each tape supports exactly one backward pass. Tensors and tapes are confined
to a single worker; detached tensors (plain values) may be shared freely.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse, e.g. a second backward pass on a consumed tape."""


_STATE = threading.local()

# Finite checks catch numeric blow-ups (e.g. exp overflow at low temperature)
# at the op that produced them instead of propagating garbage.
FINITE_CHECKS = True


def tune_allocator() -> bool:
    """Stop glibc from trimming and re-mapping the large numpy temporaries
    this engine churns through; roughly a 4x speedup on warp-heavy graphs.

    Safe to call more than once. Returns False where glibc is unavailable.
    """
    import ctypes

    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 256 * 1024 * 1024)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 16 * 1024 * 1024)  # M_TOP_PAD
        return True
    except OSError:
        return False


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


_TAPE_COUNTER = 0


class Tape:
    """Ordered record of primitive ops; consumed by one backward pass."""

    def __init__(self) -> None:
        global _TAPE_COUNTER
        _TAPE_COUNTER += 1
        self._uid = _TAPE_COUNTER
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def _record(self, out: "Tensor", parents: tuple["Tensor", ...], backward) -> None:
        out.node_id = len(self._nodes)
        out.tape_uid = self._uid
        self._nodes.append((out, parents, backward))
        for p in parents:
            # anything not produced on this tape acts as a leaf of this tape
            if p.requires_grad and p.tape_uid != self._uid:
                self._leaves.setdefault(id(p), p)

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every recorded leaf.

        Returns a map from leaf tensor to its gradient array and also adds the
        gradient into each leaf's ``.grad``.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self._nodes):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            for parent, gpar in zip(parents, backward(gout)):
                if gpar is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = gpar if acc is None else acc + gpar
        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            elif g.shape != leaf.data.shape:
                g = np.broadcast_to(g, leaf.data.shape).copy()
            result[leaf] = g
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return result


class Tensor:
    """Dense float64 array plus a slot in the active differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape_uid")

    # keep numpy from consuming Tensors in mixed expressions; reflected
    # operators on Tensor handle those instead
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape_uid: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape._record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` to undo numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"'{op}' cannot broadcast operands of shapes {a.shape} and {b.shape}"
        ) from None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "subtract")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "subtract")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "multiply")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), backward, "multiply")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "divide")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _make(ad / bd, (a, b), backward, "divide")


def negative(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "negative")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeMismatchError(
            f"'matmul' got incompatible shapes {a.shape} and {b.shape}"
        )
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if ad.ndim == 1:
            gb = np.multiply.outer(ad, g) if bd.ndim > 1 else g * ad
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(np.matmul(ad, bd), (a, b), backward, "matmul")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    e = float(exponent)
    return _make(ad**e, (a,), lambda g: (g * e * ad ** (e - 1.0),), "power")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # the far-negative tail rounds through inf to an exact 0, which is the
    # correct limit, so the plain form is safe
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def _restore_axes(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        return (_restore_axes(g, shape, axis, keepdims).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax % len(shape)] for ax in axes]))

    def backward(g):
        return (_restore_axes(g, shape, axis, keepdims) / count,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        return (_unbroadcast(g, old),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast_to")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "getitem")


def concatenate(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    data = np.concatenate([p.data for p in parts], axis=axis)
    return _make(data, tuple(parts), backward, "concatenate")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones_like(ad, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi

    def backward(g):
        return (g * inside,)

    return _make(out, (a,), backward, "clamp")


def relu(a) -> Tensor:
    return clamp(a, lo=0.0)


def select_by_weight(w, a, b) -> Tensor:
    """Differentiable blend w*a + (1-w)*b, no comparisons involved."""
    w = as_tensor(w)
    return add(multiply(w, a), multiply(subtract(1.0, w), b))


def stop_grad(a) -> Tensor:
    """Forward identity whose backward contribution is exactly zero."""
    a = as_tensor(a)
    return Tensor(a.data)


def straight_through(hard, soft) -> Tensor:
    """Forward the hard value bit-for-bit; route the backward pass to soft."""
    hard, soft = as_tensor(hard), as_tensor(soft)
    if hard.shape != soft.shape:
        raise ShapeMismatchError(
            f"'straight_through' needs equal shapes, got {hard.shape} and {soft.shape}"
        )
    return _make(hard.data.copy(), (soft,), lambda g: (g,), "straight_through")


def softmax(a, axis=-1) -> Tensor:
    """Row softmax, numerically stabilised by a detached max shift."""
    a = as_tensor(a)
    shift = subtract(a, Tensor(a.data.max(axis=axis, keepdims=True)))
    e = exp(shift)
    return divide(e, sum_(e, axis=axis, keepdims=True))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shift = subtract(a, Tensor(a.data.max(axis=axis, keepdims=True)))
    return subtract(shift, log(sum_(exp(shift), axis=axis, keepdims=True)))


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) with (F,C,kh,kw), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(
            f"'conv2d' got incompatible shapes {x.shape} and {w.shape}"
        )
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    patches = windows[:, :, ::stride, ::stride]  # B,C,Ho,Wo,kh,kw
    wd = w.data
    out = np.einsum("bchwij,fcij->bfhw", patches, wd, optimize=True)

    need_x, need_w = x.requires_grad, w.requires_grad

    def backward(g):
        gw = np.einsum("bfhw,bchwij->fcij", g, patches, optimize=True) if need_w else None
        if not need_x:
            return None, gw
        gxp = np.zeros_like(xp)
        # scatter the kernel-weighted output gradient back onto input windows
        gx_cols = np.einsum("bfhw,fcij->bchwij", g, wd, optimize=True)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += gx_cols[
                    :, :, :, :, i, j
                ]
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


_MESH_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _mesh(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    got = _MESH_CACHE.get((h, w))
    if got is None:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        my, mx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
        got = (mx.ravel(), my.ravel())
        _MESH_CACHE[(h, w)] = got
    return got


def affine_sample(x, a, b, c, d, tx, ty) -> Tensor:
    """Inverse affine warp with bilinear sampling and zero fill.

    Samples image (B,C,H,W) at source coords A @ p + t for centered output
    coords p, with per-image coefficients a,b,c,d,tx,ty of shape (B,).
    Differentiable in the image and in all six coefficients.
    """
    x = as_tensor(x)
    coeffs = tuple(as_tensor(v) for v in (a, b, c, d, tx, ty))
    B, C, H, W = x.shape
    mx, my = _mesh(H, W)
    av, bv, cv, dv, txv, tyv = (np.broadcast_to(v.data, (B,))[:, None] for v in coeffs)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    gx = av * mx + bv * my + txv + cx  # (B, H*W)
    gy = cv * mx + dv * my + tyv + cy
    _check_finite(gx, "affine_sample")
    _check_finite(gy, "affine_sample")

    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    # zero-pad by one pixel; clipping far-out indices lands on the border zeros
    Wp, Hp = W + 2, H + 2
    xp = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x.data
    flat = xp.ravel()
    x0i = np.clip(x0.astype(np.int32) + 1, 0, Wp - 1)
    x1i = np.minimum(x0i + 1, Wp - 1)
    y0i = np.clip(y0.astype(np.int32) + 1, 0, Hp - 1)
    y1i = np.minimum(y0i + 1, Hp - 1)
    npix = H * W
    plane = ((np.arange(B, dtype=np.int32)[:, None, None] * C
              + np.arange(C, dtype=np.int32)[None, :, None]) * (Hp * Wp))

    def gather(yi, xi):
        idx = plane + (yi * Wp + xi)[:, None]
        return flat[idx], idx

    v00, i00 = gather(y0i, x0i)
    v01, i01 = gather(y0i, x1i)
    v10, i10 = gather(y1i, x0i)
    v11, i11 = gather(y1i, x1i)
    # bilinear as two nested lerps; the intermediates feed the backward pass
    dtop = v01 - v00
    dbot = v11 - v10
    top = v00 + fx * dtop
    bot = v10 + fx * dbot
    dver = bot - top
    out = (top + fy * dver).reshape(B, C, H, W)

    need_image = x.requires_grad
    need_coeffs = any(c.requires_grad for c in coeffs)

    def backward(g):
        gf = g.reshape(B, C, npix)
        gimage = None
        if need_image:
            gfy = gf * fy
            gtop = gf - gfy
            g01 = gtop * fx
            g11 = gfy * fx
            gimg = np.bincount(
                np.concatenate([i.ravel() for i in (i00, i01, i10, i11)]),
                weights=np.concatenate(
                    [(gtop - g01).ravel(), g01.ravel(), (gfy - g11).ravel(), g11.ravel()]
                ),
                minlength=B * C * Hp * Wp,
            )
            gimage = gimg.reshape(B, C, Hp, Wp)[:, :, 1:-1, 1:-1]
        if not need_coeffs:
            return (gimage, None, None, None, None, None, None)
        gx_grad = ((gf - gf * fy) * dtop + gf * fy * dbot).sum(1)
        gy_grad = (gf * dver).sum(1)
        coeff_grads = (
            (gx_grad * mx).sum(1),
            (gx_grad * my).sum(1),
            (gy_grad * mx).sum(1),
            (gy_grad * my).sum(1),
            gx_grad.sum(1),
            gy_grad.sum(1),
        )
        return (gimage,) + tuple(
            _unbroadcast(cg, co.shape) for cg, co in zip(coeff_grads, coeffs)
        )

    return _make(out, (x,) + coeffs, backward, "affine_sample")


_SMOOTH_STENCIL = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0


def smooth3x3(x) -> Tensor:
    """Fixed 3x3 smoothing stencil with replicate padding."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += _SMOOTH_STENCIL[i, j] * xp[:, :, i : i + H, j : j + W]

    def backward(g):
        gp = np.zeros((B, C, H + 2, W + 2), dtype=np.float64)
        for i in range(3):
            for j in range(3):
                gp[:, :, i : i + H, j : j + W] += _SMOOTH_STENCIL[i, j] * g
        gx = gp[:, :, 1:-1, 1:-1].copy()
        # adjoint of replicate padding folds the border back in
        gx[:, :, 0, :] += gp[:, :, 0, 1:-1]
        gx[:, :, -1, :] += gp[:, :, -1, 1:-1]
        gx[:, :, :, 0] += gp[:, :, 1:-1, 0]
        gx[:, :, :, -1] += gp[:, :, 1:-1, -1]
        gx[:, :, 0, 0] += gp[:, :, 0, 0]
        gx[:, :, 0, -1] += gp[:, :, 0, -1]
        gx[:, :, -1, 0] += gp[:, :, -1, 0]
        gx[:, :, -1, -1] += gp[:, :, -1, -1]
        return (gx,)

    return _make(out, (x,), backward, "smooth3x3")


def grid_sample(x, gx, gy) -> Tensor:
    """Bilinear sampling of (B,C,H,W) at pixel coordinates gx, gy (B,Ho,Wo).

    Out-of-bounds source pixels contribute zero. Differentiable in the image
    and in both coordinate fields.
    """
    x, gx, gy = as_tensor(x), as_tensor(gx), as_tensor(gy)
    if x.ndim != 4 or gx.shape != gy.shape or gx.shape[0] != x.shape[0]:
        raise ShapeMismatchError(
            f"'grid_sample' got shapes {x.shape}, {gx.shape}, {gy.shape}"
        )
    B, C, H, W = x.shape
    xd, gxd, gyd = x.data, gx.data, gy.data
    x0 = np.floor(gxd)
    y0 = np.floor(gyd)
    fx = gxd - x0
    fy = gyd - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    flat = xd.reshape(B, C, H * W)
    npix = gxd[0].size

    def corner(yi, xi):
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        idx = np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
        vals = np.take_along_axis(
            flat, np.broadcast_to(idx.reshape(B, 1, -1), (B, C, npix)), axis=2
        ).reshape(B, C, *yi.shape[1:])
        return vals * valid[:, None], valid, idx

    v00, m00, i00 = corner(y0i, x0i)
    v01, m01_, i01 = corner(y0i, x0i + 1)
    v10, m10, i10 = corner(y0i + 1, x0i)
    v11, m11, i11 = corner(y0i + 1, x0i + 1)

    w00 = ((1 - fy) * (1 - fx))[:, None]
    w01 = ((1 - fy) * fx)[:, None]
    w10 = (fy * (1 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    # flat index of plane (b, c) so scatter-add can run as one bincount
    plane = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)

    def backward(g):
        gimg = np.zeros(B * C * H * W, dtype=np.float64)
        gflat2 = g.reshape(B, C, npix)
        for weight, mask, idx in (
            (w00, m00, i00),
            (w01, m01_, i01),
            (w10, m10, i10),
            (w11, m11, i11),
        ):
            contrib = gflat2 * weight.reshape(B, 1, npix) * mask.reshape(B, 1, npix)
            combined = plane + idx.reshape(B, 1, npix)
            gimg += np.bincount(
                combined.ravel(), weights=contrib.ravel(), minlength=B * C * H * W
            )
        ggx = (g * ((1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10))).sum(axis=1)
        ggy = (g * ((1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01))).sum(axis=1)
        return gimg.reshape(B, C, H, W), ggx, ggy

    return _make(out, (x, gx, gy), backward, "grid_sample")

"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs on numpy arrays in 64-bit precision. A ``Tensor`` wraps one
array plus an optional gradient buffer; applying an operation records a
backward closure and the parent tensors, forming an implicit DAG. Calling
``backward()`` on a scalar root walks that DAG once in reverse topological
order and accumulates gradients into every reachable tensor that requires
them.

Conventions fixed here so tests are deterministic:

* relu (and the clamp hinge) has derivative 0 at the kink,
* max-style reductions route their gradient to the first (lowest-index)
  argmax along the reduced axis,
* convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "RunningStats",
    "constant",
    "concat",
    "linear",
    "conv2d",
    "batch_norm",
    "global_avg_pool",
    "box_sum2d",
    "amax",
    "l2_normalize",
    "grad_check",
    "GradCheckResult",
    "record_pattern",
]

# When a list is installed here, piecewise ops append their branch decisions
# (relu signs, argmax winners, ...) during the forward pass. grad_check uses
# this to notice when a finite-difference probe straddles a nonsmooth point.
_pattern_sink: list | None = None


def record_pattern(arr: np.ndarray) -> None:
    """Log a branch-decision array for the active pattern recording, if any."""
    if _pattern_sink is not None:
        _pattern_sink.append(np.asarray(arr).copy())


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A dense float64 array that participates in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        # Leaves that require grad always carry a zero buffer, so tensors off
        # every path to the root report a zero gradient after backward.
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._backward_done = False

    # -- construction ----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = np.zeros_like(data) if out.requires_grad else None
        out._backward_done = False
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- backward --------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode accumulation from this scalar root.

        One backward per forward: calling this twice on the same root raises,
        because the recorded closures would double-accumulate.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran on this root; re-run the forward pass first")
        self._backward_done = True
        if not self.requires_grad:
            return  # constant root: every leaf keeps its zero gradient

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic operators --------------------------------------------

    def __add__(self, other):
        return _add(self, _lift(other))

    def __radd__(self, other):
        return _add(_lift(other), self)

    def __sub__(self, other):
        return _add(self, -_lift(other))

    def __rsub__(self, other):
        return _add(_lift(other), -self)

    def __neg__(self):
        out_data = -self.data

        def backward(g):
            if self.requires_grad:
                self.grad -= g

        return Tensor._from_op(out_data, (self,), backward)

    def __mul__(self, other):
        return _mul(self, _lift(other))

    def __rmul__(self, other):
        return _mul(_lift(other), self)

    def __truediv__(self, other):
        return _div(self, _lift(other))

    def __rtruediv__(self, other):
        return _div(_lift(other), self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        out_data = self.data ** e

        def backward(g):
            if self.requires_grad:
                self.grad += g * e * self.data ** (e - 1.0)

        return Tensor._from_op(out_data, (self,), backward)

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
        out_data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g

        return Tensor._from_op(out_data, (a, b), backward)

    def __getitem__(self, idx):
        idx = _normalize_index(idx)
        out_data = self.data[idx]
        advanced = _is_advanced_index(idx)

        def backward(g):
            if not self.requires_grad:
                return
            if advanced:
                np.add.at(self.grad, idx, g)  # repeated indices must accumulate
            else:
                self.grad[idx] += g

        out = Tensor._from_op(np.ascontiguousarray(out_data), (self,), backward)
        return out

    # -- elementwise functions -------------------------------------------

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)
        record_pattern(self.data > 0.0)

        def backward(g):
            if self.requires_grad:
                self.grad += g * (self.data > 0.0)  # subgradient at 0 is 0

        return Tensor._from_op(out_data, (self,), backward)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self.grad += g * out_data

        return Tensor._from_op(out_data, (self,), backward)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise ValueError("log of non-positive value")
        out_data = np.log(self.data)

        def backward(g):
            if self.requires_grad:
                self.grad += g / self.data

        return Tensor._from_op(out_data, (self,), backward)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                self.grad += g * 0.5 / out_data

        return Tensor._from_op(out_data, (self,), backward)

    def softplus(self) -> "Tensor":
        out_data = np.logaddexp(0.0, self.data)

        def backward(g):
            if self.requires_grad:
                self.grad += g / (1.0 + np.exp(-self.data))

        return Tensor._from_op(out_data, (self,), backward)

    def clamp_min(self, floor: float) -> "Tensor":
        out_data = np.maximum(self.data, floor)
        record_pattern(self.data > floor)

        def backward(g):
            if self.requires_grad:
                self.grad += g * (self.data > floor)

        return Tensor._from_op(out_data, (self,), backward)

    # -- reductions and shape --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = np.sum(self.data, axis=axis, keepdims=keepdims)
        in_shape = self.data.shape

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self.grad += g  # scalar broadcasts
            elif keepdims:
                self.grad += np.broadcast_to(g, in_shape)
            else:
                self.grad += np.broadcast_to(np.expand_dims(g, axis), in_shape)

        return Tensor._from_op(np.asarray(out_data), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self.grad += g.reshape(in_shape)

        return Tensor._from_op(out_data, (self,), backward)

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError("T is defined for 2-D tensors")
        out_data = self.data.T.copy()

        def backward(g):
            if self.requires_grad:
                self.grad += g.T

        return Tensor._from_op(out_data, (self,), backward)


def constant(data) -> Tensor:
    """A tensor outside the gradient graph."""
    return Tensor(data, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    return int(np.prod([shape[a] for a in axis]))


def _normalize_index(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return tuple(np.asarray(i) if isinstance(i, (list, np.ndarray)) else i for i in idx)


def _is_advanced_index(idx) -> bool:
    return any(isinstance(i, np.ndarray) and i.ndim > 0 for i in idx)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return Tensor._from_op(out_data, (a, b), backward)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return Tensor._from_op(out_data, (a, b), backward)


def _div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data / b.data
    except ValueError as exc:
        raise ValueError(f"div: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return Tensor._from_op(out_data, (a, b), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along `axis`; the backward pass splits the gradient."""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of no tensors")
    for t in tensors[1:]:
        ref, cur = list(tensors[0].shape), list(t.shape)
        del ref[axis], cur[axis]
        if ref != cur:
            raise ValueError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.grad += g[tuple(sl)]

    return Tensor._from_op(out_data, tuple(tensors), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias). Omit `bias` for the bias-free contract."""
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias shape {bias.shape} does not match output width {weight.shape[1]}")
        out = out + bias
    return out


def amax(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; gradient goes to the first argmax only."""
    out_data = np.max(t.data, axis=axis, keepdims=keepdims)
    idx = np.argmax(t.data, axis=axis)  # first occurrence wins ties
    record_pattern(idx)

    def backward(g):
        if not t.requires_grad:
            return
        gk = g if keepdims else np.expand_dims(g, axis)
        scatter = np.zeros_like(t.data)
        np.put_along_axis(scatter, np.expand_dims(idx, axis), gk, axis=axis)
        t.grad += scatter

    return Tensor._from_op(np.asarray(out_data), (t,), backward)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(row norm, eps); zero rows come back as zero rows."""
    if v.ndim != 2:
        raise ValueError("l2_normalize expects a [n, d] tensor")
    norms = (v * v).sum(axis=1, keepdims=True).sqrt().clamp_min(eps)
    return v / norms


# -- spatial primitives ----------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of x[n,c,h,w] with weight[c',c,kh,kw], zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects x[n,c,h,w] and weight[c',c,kh,kw]")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {cin}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [n, c, ho, wo, kh, kw]
    out_data = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))  # [n, c', ho, wo]

    def backward(g):
        if weight.requires_grad:
            # [c', c, kh, kw] <- sum over n, ho, wo
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            weight.grad += dw
        if x.requires_grad:
            dwin = np.tensordot(g, weight.data, axes=([1], [0]))  # [n, ho, wo, c, kh, kw]
            dxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[
                        ..., i, j
                    ].transpose(0, 3, 1, 2)
            x.grad += dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp

    return Tensor._from_op(out_data, (x, weight), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [n,c,h,w] -> [n,c]."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects x[n,c,h,w]")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            x.grad += g[:, :, None, None] / (h * w)

    return Tensor._from_op(out_data, (x,), backward)


def box_sum2d(x: Tensor, k: int) -> Tensor:
    """Sum over the k x k window centered at each pixel, truncated at borders.

    Works on the trailing two axes. Zero padding of the summed values is
    exactly the truncation policy: out-of-bounds positions contribute nothing.
    The operator is self-adjoint, so backward is the same box sum.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError("box_sum2d window size must be odd and >= 1")
    out_data = _box_sum(x.data, k)

    def backward(g):
        if x.requires_grad:
            x.grad += _box_sum(g, k)

    return Tensor._from_op(out_data, (x,), backward)


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return a.copy()
    r = k // 2
    h, w = a.shape[-2], a.shape[-1]
    pad = [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)]
    ap = np.pad(a, pad)
    out = np.zeros_like(a)
    for i in range(k):  # fixed accumulation order keeps results bitwise stable
        for j in range(k):
            out += ap[..., i : i + h, j : j + w]
    return out


# -- batch normalization ---------------------------------------------------


class RunningStats:
    """Exponential running mean/var for one batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.count = 0

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray, momentum: float) -> None:
        self.mean = (1.0 - momentum) * self.mean + momentum * mean
        self.var = (1.0 - momentum) * self.var + momentum * var_unbiased
        self.count += 1


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor | None,
    stats: RunningStats | None,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_running: bool | None = None,
) -> Tensor:
    """Batch normalization over the channel axis of [n,c] or [n,c,h,w].

    Train mode normalizes by batch statistics and (by default) folds them
    into `stats`; eval mode normalizes by the running statistics. `beta=None`
    is the shift-free variant used by the BNNeck.
    """
    if x.ndim not in (2, 4):
        raise ValueError("batch_norm expects [n,c] or [n,c,h,w]")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ValueError(f"gamma shape {gamma.shape} does not match {c} channels")
    def spread(v):  # [c] -> broadcastable against x
        return v.reshape((1, c) + (1,) * (x.ndim - 2))

    if mode == "train":
        m = int(np.prod([x.shape[a] for a in axes]))
        if m < 2:
            raise ValueError("batch_norm train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, used for normalization
        if update_running is None:
            update_running = True
        if update_running:
            if stats is None:
                raise ValueError("train mode asked to update running stats but none were given")
            stats.update(mean, var * m / (m - 1), momentum)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - spread(mean)) * spread(inv)
        out_data = spread(gamma.data) * xhat
        if beta is not None:
            out_data = out_data + spread(beta.data)

        def backward(g):
            if gamma.requires_grad:
                gamma.grad += (g * xhat).sum(axis=axes)
            if beta is not None and beta.requires_grad:
                beta.grad += g.sum(axis=axes)
            if x.requires_grad:
                dxhat = g * spread(gamma.data)
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                x.grad += spread(inv) / m * (m * dxhat - spread(s1) - xhat * spread(s2))

        parents = (x, gamma) if beta is None else (x, gamma, beta)
        return Tensor._from_op(out_data, parents, backward)

    if mode == "eval":
        if stats is None:
            raise RuntimeError("batch_norm eval mode before any running stats exist")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - spread(stats.mean)) * spread(inv)
        out_data = spread(gamma.data) * xhat
        if beta is not None:
            out_data = out_data + spread(beta.data)

        def backward(g):
            if gamma.requires_grad:
                gamma.grad += (g * xhat).sum(axis=axes)
            if beta is not None and beta.requires_grad:
                beta.grad += g.sum(axis=axes)
            if x.requires_grad:
                x.grad += g * spread(gamma.data * inv)

        parents = (x, gamma) if beta is None else (x, gamma, beta)
        return Tensor._from_op(out_data, parents, backward)

    raise ValueError(f"unknown batch_norm mode {mode!r}")


# -- finite-difference checking --------------------------------------------


class GradCheckResult(float):
    """The maximum relative error, annotated with coordinate counts."""

    n_checked: int
    n_skipped: int

    def __new__(cls, err: float, n_checked: int, n_skipped: int):
        out = super().__new__(cls, err)
        out.n_checked = n_checked
        out.n_skipped = n_skipped
        return out


def _eval_with_pattern(f) -> tuple[float, list[np.ndarray]]:
    global _pattern_sink
    sink: list[np.ndarray] = []
    _pattern_sink = sink
    try:
        val = f().item()
    finally:
        _pattern_sink = None
    return val, sink


def _patterns_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f,
    params,
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> GradCheckResult:
    """Compare analytic gradients of `f` against central finite differences.

    `f` is a zero-argument callable returning a scalar Tensor and closing over
    `params` (a list of leaf Tensors). Returns the maximum relative error
    max |g - g_fd| / max(1e-8, |g| + |g_fd|) over the checked coordinates
    (as a float subclass carrying `n_checked` / `n_skipped`). When
    `max_coords_per_param` is set, that many coordinates are sampled per
    parameter instead of sweeping all of them.

    With `skip_kinks=True`, a coordinate whose +/-h evaluations disagree on
    any piecewise branch decision (a relu sign, a max winner, a clamp side)
    is skipped rather than compared: at such points the function is not
    differentiable in the probed interval and the finite-difference quotient
    is meaningless. The caller should assert `n_skipped` stays small so the
    check cannot silently turn vacuous.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("grad_check parameters must require gradients")
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    n_checked = 0
    n_skipped = 0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            if skip_kinks:
                flat[i] = orig + h
                hi, pat_hi = _eval_with_pattern(f)
                flat[i] = orig - h
                lo, pat_lo = _eval_with_pattern(f)
                flat[i] = orig
                if not _patterns_equal(pat_hi, pat_lo):
                    n_skipped += 1
                    continue
            else:
                flat[i] = orig + h
                hi = f().item()
                flat[i] = orig - h
                lo = f().item()
                flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("non-finite value at a perturbed point")
            fd = (hi - lo) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(1e-8, abs(gflat[i]) + abs(fd))
            n_checked += 1
            if err > worst:
                worst = err
    return GradCheckResult(worst, n_checked, n_skipped)

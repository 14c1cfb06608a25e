"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Supports exactly the op vocabulary the embedding model and its training
objective need: affine, dilated same-length conv1d, relu, row softmax,
elementwise arithmetic, concat/stack, activity-masked renormalization,
weighted mean/std pooling, batch norm, elementwise cosine, and a fused
softmax cross-entropy. Every forward output is checked finite and reported
with its op id otherwise.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyTargetActivity, NumericError, ShapeError

# floor applied to the pre-sqrt variance term; gradient is 0 at the clamp
VAR_EPS = 1e-9
BN_EPS = 1e-5


class Tensor:
    """Array value tracked by a tape; parameters set requires_grad."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("op_id", "out", "backward")

    def __init__(self, op_id, out, backward):
        self.op_id = op_id
        self.out = out
        self.backward = backward


class Tape:
    """Ordered forward record; backward() walks it in exact reverse order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._n = 0

    def _emit(self, op: str, data: np.ndarray, backward) -> Tensor:
        self._n += 1
        op_id = f"{op}#{self._n}"
        if not np.all(np.isfinite(data)):
            raise NumericError(op_id)
        out = Tensor(data)
        self.nodes.append(_Node(op_id, out, backward))
        return out

    # ---- linear algebra ----

    def affine(self, W: Tensor, x: Tensor, b: Tensor) -> Tensor:
        """W @ x + b; x may be a vector (n,) or a matrix (n, T)."""
        if W.data.ndim != 2 or W.data.shape[1] != x.data.shape[0]:
            raise ShapeError(f"affine: W {W.data.shape} does not match x {x.data.shape}")
        if b.data.shape != (W.data.shape[0],):
            raise ShapeError(f"affine: bias {b.data.shape} does not match W {W.data.shape}")
        y = W.data @ x.data
        y = y + (b.data if x.data.ndim == 1 else b.data[:, None])

        def back(g):
            if x.data.ndim == 1:
                return [(W, np.outer(g, x.data)), (x, W.data.T @ g), (b, g)]
            return [(W, g @ x.data.T), (x, W.data.T @ g), (b, g.sum(axis=1))]

        return self._emit("affine", y, back)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape[-1] != b.data.shape[0]:
            raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
        y = a.data @ b.data

        def back(g):
            return [(a, g @ b.data.T), (b, a.data.T @ g)]

        return self._emit("matmul", y, back)

    def transpose(self, x: Tensor) -> Tensor:
        return self._emit("transpose", x.data.T.copy(), lambda g: [(x, g.T)])

    def conv1d(self, W: Tensor, x: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
        """Dilated 1-D convolution with zero padding preserving length.

        x: (C_in, T), W: (C_out, C_in, k), b: (C_out,) -> (C_out, T).
        """
        c_out, c_in, k = W.data.shape
        if x.data.ndim != 2 or x.data.shape[0] != c_in:
            raise ShapeError(f"conv1d: x {x.data.shape} does not match W {W.data.shape}")
        T = x.data.shape[1]
        span = dilation * (k - 1)
        left = span // 2
        xp = np.zeros((c_in, T + span), dtype=x.data.dtype)
        xp[:, left:left + T] = x.data
        # im2col: (C_in * k, T)
        cols = np.empty((c_in * k, T), dtype=x.data.dtype)
        for tap in range(k):
            off = tap * dilation
            cols[tap * c_in:(tap + 1) * c_in] = xp[:, off:off + T]
        Wm = W.data.transpose(2, 1, 0).reshape(c_in * k, c_out).T  # (C_out, C_in*k)
        y = Wm @ cols + b.data[:, None]

        def back(g):
            dWm = g @ cols.T                       # (C_out, C_in*k)
            dW = dWm.T.reshape(k, c_in, c_out).transpose(2, 1, 0)
            dcols = Wm.T @ g                       # (C_in*k, T)
            dxp = np.zeros_like(xp)
            for tap in range(k):
                off = tap * dilation
                dxp[:, off:off + T] += dcols[tap * c_in:(tap + 1) * c_in]
            return [(W, dW), (x, dxp[:, left:left + T]), (b, g.sum(axis=1))]

        return self._emit("conv1d", y, back)

    # ---- elementwise ----

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0  # subgradient 0 at exactly 0
        return self._emit("relu", x.data * mask, lambda g: [(x, g * mask)])

    def cosine(self, x: Tensor) -> Tensor:
        return self._emit("cosine", np.cos(x.data),
                          lambda g: [(x, -np.sin(x.data) * g)])

    def sqrt(self, x: Tensor) -> Tensor:
        y = np.sqrt(x.data)
        return self._emit("sqrt", y, lambda g: [(x, g * 0.5 / y)])

    def clamp_min(self, x: Tensor, floor: float) -> Tensor:
        mask = x.data > floor  # subgradient 0 at the clamp
        return self._emit("clamp_min", np.maximum(x.data, floor),
                          lambda g: [(x, g * mask)])

    def _check_same_shape(self, op, a, b):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"{op}: shapes {a.data.shape} vs {b.data.shape}")

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_same_shape("add", a, b)
        return self._emit("add", a.data + b.data, lambda g: [(a, g), (b, g)])

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_same_shape("sub", a, b)
        return self._emit("sub", a.data - b.data, lambda g: [(a, g), (b, -g)])

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_same_shape("mul", a, b)
        return self._emit("mul", a.data * b.data,
                          lambda g: [(a, g * b.data), (b, g * a.data)])

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_same_shape("div", a, b)
        return self._emit("div", a.data / b.data,
                          lambda g: [(a, g / b.data),
                                     (b, -g * a.data / (b.data * b.data))])

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self._emit("scale", x.data * c, lambda g: [(x, g * c)])

    def shift(self, x: Tensor, c: float) -> Tensor:
        return self._emit("shift", x.data + c, lambda g: [(x, g)])

    def where_const(self, x: Tensor, mask: np.ndarray, fill: float) -> Tensor:
        """Keep x where mask, otherwise the constant fill; grad flows on mask."""
        if mask.shape != x.data.shape:
            raise ShapeError(f"where_const: mask {mask.shape} vs x {x.data.shape}")
        y = np.where(mask, x.data, fill)
        return self._emit("where_const", y, lambda g: [(x, g * mask)])

    def mask_cols(self, x: Tensor, z: np.ndarray) -> Tensor:
        """Zero columns of (D, T) x where the binary vector z is 0."""
        if x.data.ndim != 2 or z.shape != (x.data.shape[1],):
            raise ShapeError(f"mask_cols: x {x.data.shape} vs z {z.shape}")
        zf = z.astype(x.data.dtype)
        return self._emit("mask_cols", x.data * zf[None, :],
                          lambda g: [(x, g * zf[None, :])])

    # ---- shape assembly ----

    def concat(self, parts: list[Tensor], axis: int = 0) -> Tensor:
        y = np.concatenate([p.data for p in parts], axis=axis)
        sizes = [p.data.shape[axis] for p in parts]
        offs = np.cumsum([0] + sizes)

        def back(g):
            out = []
            for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                out.append((p, g[tuple(sl)]))
            return out

        return self._emit("concat", y, back)

    def stack_rows(self, rows: list[Tensor]) -> Tensor:
        y = np.stack([r.data for r in rows], axis=0)
        return self._emit("stack_rows", y,
                          lambda g: [(r, g[i]) for i, r in enumerate(rows)])

    def broadcast_col(self, v: Tensor, T: int) -> Tensor:
        """(D,) -> (D, T) by tiling; backward sums over time."""
        if v.data.ndim != 1:
            raise ShapeError("broadcast_col expects a vector")
        y = np.repeat(v.data[:, None], T, axis=1)
        return self._emit("broadcast_col", y, lambda g: [(v, g.sum(axis=1))])

    # ---- reductions / statistics ----

    def sum(self, x: Tensor) -> Tensor:
        return self._emit("sum", np.asarray(x.data.sum()),
                          lambda g: [(x, np.full_like(x.data, g))])

    def dot_const(self, x: Tensor, w: np.ndarray) -> Tensor:
        if w.shape != x.data.shape:
            raise ShapeError("dot_const: shape mismatch")
        return self._emit("dot_const", np.asarray((x.data * w).sum()),
                          lambda g: [(x, g * w)])

    def mean_over_time(self, h: Tensor) -> Tensor:
        if h.data.ndim != 2:
            raise ShapeError("mean_over_time expects (D, T)")
        T = h.data.shape[1]
        return self._emit("mean_over_time", h.data.mean(axis=1),
                          lambda g: [(h, np.repeat(g[:, None], T, axis=1) / T)])

    def std_over_time(self, h: Tensor, mu: Tensor) -> Tensor:
        """Per-channel standard deviation over frames, clamped before sqrt."""
        T = h.data.shape[1]
        v = (h.data * h.data).mean(axis=1) - mu.data * mu.data
        y = np.sqrt(np.maximum(v, 0.0))
        inv = np.zeros_like(y)
        ok = v > VAR_EPS
        inv[ok] = 0.5 / y[ok]

        def back(g):
            dv = g * inv
            return [(h, dv[:, None] * 2.0 * h.data / T), (mu, -2.0 * mu.data * dv)]

        return self._emit("std_over_time", y, back)

    def weighted_mean(self, h: Tensor, a: Tensor) -> Tensor:
        if h.data.shape != a.data.shape:
            raise ShapeError("weighted_mean: h and a must share (D, T)")
        return self._emit("weighted_mean", (h.data * a.data).sum(axis=1),
                          lambda g: [(h, a.data * g[:, None]),
                                     (a, h.data * g[:, None])])

    def weighted_std(self, h: Tensor, a: Tensor, mu: Tensor) -> Tensor:
        """sqrt(sum(a*h*h) - mu*mu), clamped at 0 with zero subgradient there."""
        if h.data.shape != a.data.shape:
            raise ShapeError("weighted_std: h and a must share (D, T)")
        v = (a.data * h.data * h.data).sum(axis=1) - mu.data * mu.data
        y = np.sqrt(np.maximum(v, 0.0))
        inv = np.zeros_like(y)
        ok = v > VAR_EPS
        inv[ok] = 0.5 / y[ok]

        def back(g):
            dv = g * inv
            return [(h, dv[:, None] * 2.0 * a.data * h.data),
                    (a, dv[:, None] * h.data * h.data),
                    (mu, -2.0 * mu.data * dv)]

        return self._emit("weighted_std", y, back)

    # ---- normalizations ----

    def row_softmax(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            raise ShapeError("row_softmax expects a 2-D input")
        shifted = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return [(x, y * (g - (g * y).sum(axis=1, keepdims=True)))]

        return self._emit("row_softmax", y, back)

    def masked_renormalize(self, a: Tensor, z: np.ndarray) -> Tensor:
        """Zero attention columns where z == 0 and renormalize each row.

        z is a binary vector over the T columns; requires at least one
        active column and positive row mass on the active columns.
        """
        if a.data.ndim != 2 or z.shape != (a.data.shape[1],):
            raise ShapeError(f"masked_renormalize: a {a.data.shape} vs z {z.shape}")
        if int(z.sum()) == 0:
            raise EmptyTargetActivity("no active frame to renormalize over")
        zf = z.astype(a.data.dtype)
        m = a.data * zf[None, :]
        s = m.sum(axis=1, keepdims=True)
        if np.any(s <= 0):
            raise NumericError("masked_renormalize", "zero attention mass on active frames")
        y = m / s

        def back(g):
            dm = (g - (g * y).sum(axis=1, keepdims=True)) / s
            return [(a, dm * zf[None, :])]

        return self._emit("masked_renormalize", y, back)

    def l2norm_rows(self, x: Tensor) -> Tensor:
        """Normalize each row (or a single vector) to unit L2 norm."""
        v = x.data if x.data.ndim == 2 else x.data[None, :]
        n = np.maximum(np.sqrt((v * v).sum(axis=1, keepdims=True)), 1e-12)
        y2 = v / n
        y = y2 if x.data.ndim == 2 else y2[0]

        def back(g):
            g2 = g if x.data.ndim == 2 else g[None, :]
            dx = (g2 - y2 * (g2 * y2).sum(axis=1, keepdims=True)) / n
            return [(x, dx if x.data.ndim == 2 else dx[0])]

        return self._emit("l2norm_rows", y, back)

    def batch_norm(self, x: Tensor, gamma: Tensor, beta: Tensor,
                   state: "BatchNormState", training: bool) -> Tensor:
        """Per-channel normalization of (D, T) over the time axis.

        Training mode uses batch statistics and updates the running ones in
        place; inference mode is the affine map with the stored statistics.
        """
        if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[0],):
            raise ShapeError("batch_norm: expects x (D, T) with per-channel gamma/beta")
        if training:
            T = x.data.shape[1]
            mu = x.data.mean(axis=1)
            var = x.data.var(axis=1)
            ivar = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x.data - mu[:, None]) * ivar[:, None]
            mom = state.momentum
            state.mean[...] = mom * state.mean + (1.0 - mom) * mu
            state.var[...] = mom * state.var + (1.0 - mom) * var
            y = gamma.data[:, None] * xhat + beta.data[:, None]

            def back(g):
                dxhat = g * gamma.data[:, None]
                dvar = (dxhat * (x.data - mu[:, None])).sum(axis=1) * (-0.5) * ivar ** 3
                dmu = -(dxhat.sum(axis=1)) * ivar + dvar * (-2.0) * (
                    x.data - mu[:, None]).mean(axis=1)
                dx = dxhat * ivar[:, None] + dvar[:, None] * 2.0 * (
                    x.data - mu[:, None]) / T + dmu[:, None] / T
                return [(x, dx), (gamma, (g * xhat).sum(axis=1)),
                        (beta, g.sum(axis=1))]

            return self._emit("batch_norm", y, back)

        ivar = 1.0 / np.sqrt(state.var + BN_EPS)
        xhat = (x.data - state.mean[:, None]) * ivar[:, None]
        y = gamma.data[:, None] * xhat + beta.data[:, None]

        def back(g):
            return [(x, g * (gamma.data * ivar)[:, None]),
                    (gamma, (g * xhat).sum(axis=1)), (beta, g.sum(axis=1))]

        return self._emit("batch_norm", y, back)

    def cross_entropy_mean(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        """Mean softmax cross-entropy over rows of (B, C) logits."""
        if logits.data.ndim != 2:
            raise ShapeError("cross_entropy_mean expects (B, C) logits")
        B, C = logits.data.shape
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (B,):
            raise ShapeError("labels must have one entry per logits row")
        if labels.min() < 0 or labels.max() >= C:
            raise ShapeError(f"label out of range for {C} classes")
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        nll = -(shifted[np.arange(B), labels]
                - np.log(e.sum(axis=1)))
        y = np.asarray(nll.mean())

        def back(g):
            d = p.copy()
            d[np.arange(B), labels] -= 1.0
            return [(logits, d * (g / B))]

        return self._emit("cross_entropy_mean", y, back)


def backward(tape: Tape, loss: Tensor, params: list[Tensor]) -> dict[str, np.ndarray]:
    """Reverse-walk the tape from a scalar loss; returns name -> gradient.

    Parameters the loss never touched get zero gradients.
    """
    if loss.data.shape != ():
        raise ShapeError("backward requires a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise ShapeError("loss tensor is not an output of this tape")
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gc in node.backward(g):
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gc
            else:
                grads[key] = np.array(gc, dtype=t.data.dtype, copy=True)
    out = {}
    for p in params:
        if p.name is None:
            raise ShapeError("parameters passed to backward must be named")
        out[p.name] = grads.get(id(p), np.zeros_like(p.data))
    return out


def gradcheck(fn, inputs: list[Tensor], eps: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    fn(*inputs) must build a fresh tape and return (tape, scalar_loss).
    Returns max over coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    for i, t in enumerate(inputs):
        if t.name is None:
            t.name = f"arg{i}"
    tape, loss = fn(*inputs)
    grads = backward(tape, loss, [t for t in inputs if t.requires_grad])
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        an = grads[t.name]
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            _, lp = fn(*inputs)
            flat[j] = orig - eps
            _, lm = fn(*inputs)
            flat[j] = orig
            fd = (float(lp.data) - float(lm.data)) / (2.0 * eps)
            if not np.isfinite(fd):
                raise NumericError("gradcheck", "non-finite finite-difference estimate")
            a = an.reshape(-1)[j]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return worst


class BatchNormState:
    """Running mean/var for one batch-norm layer; mutated during training."""

    def __init__(self, dim: int, momentum: float = 0.9):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum

    def copy(self) -> "BatchNormState":
        st = BatchNormState(self.mean.size, self.momentum)
        st.mean[...] = self.mean
        st.var[...] = self.var
        return st

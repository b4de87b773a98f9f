"""Minimal dense-tensor core with reverse-mode differentiation.

Tensors hold float64 numpy arrays (row-major). Each op that sees a
grad-requiring input records a backward closure; ``backward(loss)`` walks the
recorded graph in reverse topological order and accumulates gradients by
summation. Ops are deliberately coarse (attention, layer norm and the losses
are single graph nodes) so that a full model forward stays a few hundred
nodes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class ContractError(ValueError):
    """A precondition outside of pure shape agreement was violated."""


class DegenerateInputError(ValueError):
    """Input is in the op's domain boundary (e.g. zero-norm vector)."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where the contract forbids one."""


_grad_enabled = True

# Verification hook: when nonzero, gelu's backward is deliberately skewed by
# this amount so gradient-check negative controls have something to catch.
_grad_corruption = 0.0


def set_grad_corruption(amount: float) -> None:
    global _grad_corruption
    _grad_corruption = float(amount)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "aux")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.aux = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the closure only when grads can flow."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * bd)
        if b.requires_grad:
            b.accumulate_grad(g * ad)

    return _result(ad * bd, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _result(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim != 2:
        raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {ad.shape} @ {bd.shape}")

    def bwd(g):
        if ad.ndim == 1:
            if a.requires_grad:
                a.accumulate_grad(g @ bd.T)
            if b.requires_grad:
                b.accumulate_grad(np.outer(ad, g))
        else:
            if a.requires_grad:
                a.accumulate_grad(g @ bd.T)
            if b.requires_grad:
                b.accumulate_grad(ad.T @ g)

    return _result(ad @ bd, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x of rank 1 or 2; b is a vector of the output width."""
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or bd.ndim != 1 or wd.shape[1] != bd.shape[0]:
        raise ShapeError(f"affine: bad parameter shapes {wd.shape}, {bd.shape}")
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"affine: input width {xd.shape} vs weight {wd.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g @ wd.T)
        if w.requires_grad:
            w.accumulate_grad(np.outer(xd, g) if xd.ndim == 1 else xd.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g if g.ndim == 1 else g.sum(axis=0))

    return _result(xd @ wd + bd, (x, w, b), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    # tanh form of the Gaussian-error-linear unit; smooth everywhere, which
    # keeps central-difference checks clean.
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * x2 * xd))
    half_1pt = 0.5 * (1.0 + t)

    def bwd(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * _GELU_A * x2)
            local = half_1pt + 0.5 * xd * (1.0 - t * t) * du
            if _grad_corruption:
                local = local + _grad_corruption
            x.accumulate_grad(g * local)

    return _result(xd * half_1pt, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * (xd > 0.0))

    return _result(np.maximum(xd, 0.0), (x,), bwd)


NONLINEARITIES = {"gelu": gelu, "relu": relu}


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} vs width {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gd
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx - m1 - xhat * m2))

    return _result(xhat * gd + beta.data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim:
        raise ShapeError(f"concat: ranks differ: {ad.shape} vs {bd.shape}")
    for ax in range(ad.ndim):
        if ax != axis and ad.shape[ax] != bd.shape[ax]:
            raise ShapeError(f"concat: shapes {ad.shape} and {bd.shape} on axis {axis}")
    split = ad.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        if a.requires_grad:
            a.accumulate_grad(ga)
        if b.requires_grad:
            b.accumulate_grad(gb)

    return _result(np.concatenate([ad, bd], axis=axis), (a, b), bwd)


def stack_rows(tensors) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack_rows: empty input")
    shape0 = tensors[0].shape
    for t in tensors:
        if t.shape != shape0:
            raise ShapeError(f"stack_rows: shapes {shape0} vs {t.shape}")

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(g[i])

    return _result(np.stack([t.data for t in tensors]), tensors, bwd)


def row(x: Tensor, i: int) -> Tensor:
    xd = x.data
    if xd.ndim != 2 or not (0 <= i < xd.shape[0]):
        raise ShapeError(f"row: index {i} into shape {xd.shape}")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(xd)
            gx[i] = g
            x.accumulate_grad(gx)

    return _result(xd[i].copy(), (x,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    xd = x.data
    if xd.ndim != 2 or not (0 <= start <= stop <= xd.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] of shape {xd.shape}")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(xd)
            gx[start:stop] = g
            x.accumulate_grad(gx)

    return _result(xd[start:stop].copy(), (x,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data
    if td.ndim != 2:
        raise ShapeError(f"embedding_lookup: table rank {td.ndim}")
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise ContractError(f"embedding_lookup: id out of range for table {td.shape}")

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(td)
            np.add.at(gt, ids, g)
            table.accumulate_grad(gt)

    return _result(td[ids], (table,), bwd)


def max_over_rows(x: Tensor) -> Tensor:
    """Column-wise max over the leading axis (first max wins on ties)."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"max_over_rows: rank {xd.ndim}")
    idx = np.argmax(xd, axis=0)
    cols = np.arange(xd.shape[1])

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(xd)
            gx[idx, cols] = g
            x.accumulate_grad(gx)

    return _result(xd[idx, cols].copy(), (x,), bwd)


def segment_max(x: Tensor, segment_size: int) -> Tensor:
    """Column-wise max over consecutive equal-length row segments.

    x: (s * segment_size, d) -> (s, d); within each segment the first
    maximum receives the gradient, matching max_over_rows.
    """
    xd = x.data
    if xd.ndim != 2 or segment_size < 1 or xd.shape[0] % segment_size:
        raise ShapeError(f"segment_max: shape {xd.shape} by {segment_size}")
    s = xd.shape[0] // segment_size
    d = xd.shape[1]
    view = xd.reshape(s, segment_size, d)
    idx = np.argmax(view, axis=1)  # (s, d)
    rows = np.arange(s)[:, None]
    cols = np.arange(d)[None, :]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(view)
            gx[rows, idx, cols] = g
            x.accumulate_grad(gx.reshape(xd.shape))

    return _result(view[rows, idx, cols].copy(), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g) / n))

    return _result(np.asarray(x.data.mean()), (x,), bwd)


# ---------------------------------------------------------------------------
# attention / normalized scores


def _softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"softmax_rows: rank {xd.ndim}")
    s = _softmax_last(xd)

    def bwd(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=-1, keepdims=True)
            x.accumulate_grad(s * (g - dot))

    return _result(s, (x,), bwd)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention over already-projected q/k/v matrices.

    q: (Kq, d), k and v: (Kk, d). The width is split into ``num_heads`` heads
    of d/num_heads each, scaled by 1/sqrt(d/num_heads). The per-head
    attention weights are stashed on ``out.aux`` for inspection.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 2 or kd.ndim != 2 or vd.ndim != 2:
        raise ShapeError("multihead_attention: all inputs must be rank 2")
    kq, d = qd.shape
    kk = kd.shape[0]
    if kd.shape != (kk, d) or vd.shape != (kk, d):
        raise ShapeError(
            f"multihead_attention: shapes {qd.shape}, {kd.shape}, {vd.shape}"
        )
    if d % num_heads != 0:
        raise ContractError(f"multihead_attention: width {d} not divisible by {num_heads}")
    dh = d // num_heads
    qh = qd.reshape(kq, num_heads, dh).transpose(1, 0, 2)
    kh = kd.reshape(kk, num_heads, dh).transpose(1, 0, 2)
    vh = vd.reshape(kk, num_heads, dh).transpose(1, 0, 2)
    inv_sqrt = 1.0 / math.sqrt(dh)
    attn = _softmax_last(qh @ kh.transpose(0, 2, 1) * inv_sqrt)
    out = (attn @ vh).transpose(1, 0, 2).reshape(kq, d)

    def bwd(g):
        gh = g.reshape(kq, num_heads, dh).transpose(1, 0, 2)
        if v.requires_grad:
            gv = attn.transpose(0, 2, 1) @ gh
            v.accumulate_grad(gv.transpose(1, 0, 2).reshape(kk, d))
        if q.requires_grad or k.requires_grad:
            da = gh @ vh.transpose(0, 2, 1)
            ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                gq = (ds @ kh) * inv_sqrt
                q.accumulate_grad(gq.transpose(1, 0, 2).reshape(kq, d))
            if k.requires_grad:
                gk = (ds.transpose(0, 2, 1) @ qh) * inv_sqrt
                k.accumulate_grad(gk.transpose(1, 0, 2).reshape(kk, d))

    res = _result(out, (q, k, v), bwd)
    res.aux = attn
    return res


_NORM_FLOOR = 1e-30


def cosine(u: Tensor, v: Tensor) -> Tensor:
    ud, vd = u.data, v.data
    if ud.ndim != 1 or ud.shape != vd.shape:
        raise ShapeError(f"cosine: shapes {ud.shape} and {vd.shape}")
    nu = float(np.linalg.norm(ud))
    nv = float(np.linalg.norm(vd))
    if nu < _NORM_FLOOR or nv < _NORM_FLOOR:
        raise DegenerateInputError("cosine: zero-norm input vector")
    s = float(ud @ vd) / (nu * nv)

    def bwd(g):
        if u.requires_grad:
            u.accumulate_grad(g * (vd / (nu * nv) - s * ud / (nu * nu)))
        if v.requires_grad:
            v.accumulate_grad(g * (ud / (nu * nv) - s * vd / (nv * nv)))

    return _result(np.asarray(s), (u, v), bwd)


def cosine_rows(m: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of every row of m (K, d) against the vector v (d,)."""
    md, vd = m.data, v.data
    if md.ndim != 2 or vd.ndim != 1 or md.shape[1] != vd.shape[0]:
        raise ShapeError(f"cosine_rows: shapes {md.shape} and {vd.shape}")
    nr = np.linalg.norm(md, axis=1)
    nv = float(np.linalg.norm(vd))
    if nv < _NORM_FLOOR or np.any(nr < _NORM_FLOOR):
        raise DegenerateInputError("cosine_rows: zero-norm input vector")
    s = (md @ vd) / (nr * nv)

    def bwd(g):
        if m.requires_grad:
            gm = (g / (nr * nv))[:, None] * vd[None, :] - (g * s / nr ** 2)[:, None] * md
            m.accumulate_grad(gm)
        if v.requires_grad:
            gv = (g / (nr * nv)) @ md - (g * s).sum() * vd / nv ** 2
            v.accumulate_grad(gv)

    return _result(s, (m, v), bwd)


# ---------------------------------------------------------------------------
# classification losses


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    z = logits.data
    if z.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: rank {z.ndim}")
    if not (0 <= target < z.shape[0]):
        raise ContractError(f"softmax_cross_entropy: target {target} of {z.shape[0]}")
    zs = z - z.max()
    lse = math.log(np.exp(zs).sum())
    loss = lse - zs[target]
    p = _softmax_last(z)

    def bwd(g):
        if logits.requires_grad:
            gz = p.copy()
            gz[target] -= 1.0
            logits.accumulate_grad(g * gz)

    return _result(np.asarray(loss), (logits,), bwd)


def softmax_cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of each row of (m, C) logits vs integer targets."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy_rows: {z.shape} vs {targets.shape}")
    if targets.min() < 0 or targets.max() >= z.shape[1]:
        raise ContractError("softmax_cross_entropy_rows: target out of range")
    m = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = float((lse - zs[np.arange(m), targets]).mean())
    p = _softmax_last(z)

    def bwd(g):
        if logits.requires_grad:
            gz = p.copy()
            gz[np.arange(m), targets] -= 1.0
            logits.accumulate_grad(g * gz / m)

    return _result(np.asarray(loss), (logits,), bwd)


def _log_softmax_1d(z: np.ndarray) -> np.ndarray:
    zs = z - z.max()
    return zs - math.log(np.exp(zs).sum())


def kl_divergence_logits(p_logits: np.ndarray, q_logits: Tensor) -> Tensor:
    """KL(softmax(p_logits) || softmax(q_logits)), p side constant.

    Both log-distributions go through the same code path, so equal logits
    give exactly zero.
    """
    z = q_logits.data
    p_logits = np.asarray(p_logits, dtype=np.float64)
    if z.ndim != 1 or p_logits.shape != z.shape:
        raise ShapeError(f"kl_divergence_logits: {p_logits.shape} vs {z.shape}")
    logp = _log_softmax_1d(p_logits)
    logq = _log_softmax_1d(z)
    p = np.exp(logp)
    loss = float((p * (logp - logq)).sum())
    q = np.exp(logq)

    def bwd(g):
        if q_logits.requires_grad:
            q_logits.accumulate_grad(g * (q - p))

    return _result(np.asarray(loss), (q_logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass and verification


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad tensor.

    Gradients accumulate across calls; callers zero them between steps.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    # interior buffers are per-call scratch; only leaves accumulate across calls
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.accumulate_grad(np.asarray(1.0))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(f, params, epsilon: float = 1e-5):
    """Compare analytic gradients of f(params) against central differences.

    ``f`` maps the live ParamStore to a scalar Tensor. Returns
    ``(max_relative_error, per_param_errors)`` where the error metric is
    |analytic - central| / max(1, |central|), maximized over entries.
    """
    if epsilon <= 0.0:
        raise ContractError("finite_diff_check: epsilon must be positive")
    params.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data):
        raise NumericalError("finite_diff_check: non-finite loss")
    backward(loss)
    analytic = {}
    for name, p in params.items():
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)

    errors = {}
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            err = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                lp = f(params).item()
                flat[i] = orig - epsilon
                lm = f(params).item()
                flat[i] = orig
                fd = (lp - lm) / (2.0 * epsilon)
                an = analytic[name].reshape(-1)[i]
                err = max(err, abs(an - fd) / max(1.0, abs(fd)))
            errors[name] = err
            worst = max(worst, err)
    return worst, errors

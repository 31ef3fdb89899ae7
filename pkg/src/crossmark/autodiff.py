"""Minimal reverse-mode autodiff on numpy arrays.

Only the operations the patch encoder and its contrastive objective need:
batched 3x3 convolution, group normalization, leaky ReLU, affine layers,
row gathering/concatenation, and cosine similarities. Every op records a
closure on a tape; ``Tensor.backward()`` walks the tape in reverse
topological order. Arrays keep their dtype, so the same graph runs in
float32 for training and float64 for finite-difference checks.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.grad is not None})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        # Gradients are only ever reassigned, never mutated in place, so
        # holding views (e.g. from broadcast_to) is safe.
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self):
        """Reverse-mode sweep from a scalar; fills ``grad`` on every leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        if self._backward is None:
            raise ValueError("backward() before any recorded forward (no graph attached)")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(np.sum(a.data, keepdims=False), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.data.shape))

    return _make(np.mean(a.data), (a,), backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """max(x, slope*x); gradient is 1 for x > 0, slope for x <= 0."""
    pos = x.data > 0
    out = x.data * x.data.dtype.type(slope)
    np.copyto(out, x.data, where=pos)

    def backward(g):
        if x.requires_grad:
            gx = g * x.data.dtype.type(slope)
            np.copyto(gx, g, where=pos)
            x._accumulate(gx)

    return _make(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x (N, F_in) -> (N, F_out) with weight (F_out, F_in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(f"linear: shape mismatch x{x.data.shape} w{weight.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ValueError(f"linear: bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(out, (x, weight, bias), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def concat_rows(tensors: list[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """out[...] = x[index[...]]; backward scatter-adds into x."""
    index = np.asarray(index)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, index.ravel(), g.reshape(-1, *x.data.shape[1:]))
            x._accumulate(gx)

    return _make(x.data[index], (x,), backward)


# -- convolution -------------------------------------------------------------

_K = 3  # all convolutions are 3x3, zero padding 1


def _pad1(x: np.ndarray) -> np.ndarray:
    """Zero padding of 1 on the two trailing axes (calloc beats np.pad here)."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    return xp


def _im2col(xp: np.ndarray, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*9, h_out*w_out) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, _K, _K, h_out, w_out), dtype=xp.dtype)
    for i in range(_K):
        for j in range(_K):
            cols[:, :, i, j] = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols.reshape(n, c * _K * _K, h_out * w_out)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Batched 3x3 cross-correlation, zero padding 1, stride 1 or 2.

    x (N, C_in, H, W), weight (C_out, C_in, 3, 3), bias (C_out,);
    output spatial size is ceil(H / stride).
    """
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be (N, C, H, W), got {x.data.shape}")
    c_out, c_in, kh, kw = weight.data.shape
    if (kh, kw) != (_K, _K) or c_in != x.data.shape[1]:
        raise ValueError(f"conv2d: weight {weight.data.shape} incompatible with input {x.data.shape}")
    if bias.data.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")
    n, _, h, w = x.data.shape
    h_out = -(-h // stride)
    w_out = -(-w // stride)
    xp = _pad1(x.data)
    cols = _im2col(xp, stride, h_out, w_out)
    w_mat = weight.data.reshape(c_out, c_in * _K * _K)
    out = np.matmul(w_mat[None], cols).reshape(n, c_out, h_out, w_out) + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, c_out, h_out * w_out)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            # Recompute cols rather than keeping them alive on the tape.
            cols_b = _im2col(_pad1(x.data), stride, h_out, w_out)
            gw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T[None], g2)  # (N, C_in*9, L)
            gcols = gcols.reshape(n, c_in, _K, _K, h_out, w_out)
            gxp = np.zeros((n, c_in, h + 2, w + 2), dtype=g.dtype)
            for i in range(_K):
                for j in range(_K):
                    gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gcols[:, :, i, j]
            x._accumulate(gxp[:, :, 1 : h + 1, 1 : w + 1])

    return _make(out, (x, weight, bias), backward)


# -- group normalization -----------------------------------------------------


def group_norm(x: Tensor, scale_p: Tensor, shift_p: Tensor, groups: int = 8, eps: float = 1e-5) -> Tensor:
    """Per-group standardization (population variance) + per-channel affine.

    x (N, C, H, W); channel count must divide evenly into ``groups``.
    """
    if x.data.ndim != 4:
        raise ValueError(f"group_norm: input must be (N, C, H, W), got {x.data.shape}")
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if scale_p.data.shape != (c,) or shift_p.data.shape != (c,):
        raise ValueError("group_norm: scale/shift must be per-channel vectors")
    cg = c // groups
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    s1 = np.einsum("ngm->ng", xg)
    s2 = np.einsum("ngm,ngm->ng", xg, xg)
    mu = s1 / m
    var = np.maximum(s2 / m - mu * mu, 0.0)
    inv_std = 1.0 / np.sqrt(var + eps)  # (n, groups)
    # Fold normalization and affine into one per-(sample, channel) map.
    inv_c = np.repeat(inv_std, cg, axis=1)
    mu_c = np.repeat(mu, cg, axis=1)
    a = inv_c * scale_p.data[None, :]
    b = shift_p.data[None, :] - mu_c * a
    out = x.data * a[:, :, None, None] + b[:, :, None, None]

    def backward(g):
        xhat = ((x.data.reshape(n, c, -1) - mu_c[:, :, None]) * inv_c[:, :, None]).reshape(n, c, h, w)
        if shift_p.requires_grad:
            shift_p._accumulate(g.sum(axis=(0, 2, 3)))
        if scale_p.requires_grad:
            scale_p._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = (g * scale_p.data[None, :, None, None]).reshape(n, groups, -1)
            xhat_g = xhat.reshape(n, groups, -1)
            m1 = gh.mean(axis=2, keepdims=True)
            m2 = (gh * xhat_g).mean(axis=2, keepdims=True)
            gx = inv_std[:, :, None] * (gh - m1 - xhat_g * m2)
            x._accumulate(gx.reshape(n, c, h, w))

    return _make(out, (x, scale_p, shift_p), backward)


# -- similarities ------------------------------------------------------------


def cosine_pairs(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (N, D) stacks -> (N,)."""
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ValueError(f"cosine_pairs: need matching (N, D), got {a.data.shape} vs {b.data.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    dot = np.einsum("nd,nd->n", a.data, b.data)
    cos = dot / (na * nb)

    def backward(g):
        if a.requires_grad:
            ga = (b.data / (na * nb)[:, None] - a.data * (cos / na**2)[:, None]) * g[:, None]
            a._accumulate(ga)
        if b.requires_grad:
            gb = (a.data / (na * nb)[:, None] - b.data * (cos / nb**2)[:, None]) * g[:, None]
            b._accumulate(gb)

    return _make(cos, (a, b), backward)


def cosine_stack(a: Tensor, stack: Tensor) -> Tensor:
    """Cosine of each row of a (N, D) against its (N, M, D) stack -> (N, M)."""
    if a.data.ndim != 2 or stack.data.ndim != 3 or stack.data.shape[::2] != (a.data.shape[0], a.data.shape[1]):
        raise ValueError(f"cosine_stack: shapes {a.data.shape} vs {stack.data.shape}")
    na = np.linalg.norm(a.data, axis=1)  # (N,)
    ns = np.linalg.norm(stack.data, axis=2)  # (N, M)
    if np.any(na == 0) or np.any(ns == 0):
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    dot = np.einsum("nd,nmd->nm", a.data, stack.data)
    cos = dot / (na[:, None] * ns)

    def backward(g):
        if a.requires_grad:
            ga = np.einsum("nm,nmd->nd", g / (na[:, None] * ns), stack.data)
            ga -= a.data * np.einsum("nm,nm->n", g, cos)[:, None] / (na**2)[:, None]
            a._accumulate(ga)
        if stack.requires_grad:
            gs = a.data[:, None, :] * (g / (na[:, None] * ns))[:, :, None]
            gs -= stack.data * (g * cos / ns**2)[:, :, None]
            stack._accumulate(gs)

    return _make(cos, (a, stack), backward)


def nce_softmax_loss(pos_sims: Tensor, neg_sims: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over anchors of -log softmax(positive | positive + negatives).

    pos_sims (N,), neg_sims (N, M); similarities are divided by the
    temperature before the stabilized log-sum-exp.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if neg_sims.data.ndim != 2 or neg_sims.data.shape[0] != pos_sims.data.shape[0]:
        raise ValueError(f"nce_softmax_loss: shapes {pos_sims.data.shape} vs {neg_sims.data.shape}")
    if neg_sims.data.shape[1] == 0:
        raise ValueError("nce_softmax_loss: at least one negative per anchor is required")
    n = pos_sims.data.shape[0]
    alpha = pos_sims.data / temperature  # (N,)
    alpha_neg = neg_sims.data / temperature  # (N, M)
    m = np.maximum(alpha, alpha_neg.max(axis=1))
    lse = m + np.log(np.exp(alpha - m) + np.exp(alpha_neg - m[:, None]).sum(axis=1))
    loss = float(np.mean(lse - alpha))

    def backward(g):
        g = float(g)
        p_pos = np.exp(alpha - lse)
        if pos_sims.requires_grad:
            pos_sims._accumulate(g * (p_pos - 1.0) / (n * temperature))
        if neg_sims.requires_grad:
            p_neg = np.exp(alpha_neg - lse[:, None])
            neg_sims._accumulate(g * p_neg / (n * temperature))

    return _make(np.asarray(loss, dtype=pos_sims.data.dtype), (pos_sims, neg_sims), backward)

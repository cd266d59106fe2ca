"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the result remembers its parents and a closure mapping the output
gradient to input gradients; :func:`backward` walks that DAG in reverse
topological order.

Layers that carry a leading *group* axis (``W`` of shape ``[G, O, I]``) let
several independent networks share one graph. The ensemble uses this to run
all members in a single pass while keeping their parameters disjoint.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

#: Names of differentiable ops, used by the gradient-check suite.
REGISTRY: dict[str, Callable] = {}


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no graph inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def register(fn):
    REGISTRY[fn.__name__] = fn
    return fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        # float32 inputs stay float32 so a model can opt into single precision
        self.data = arr if arr.dtype in FLOAT_DTYPES else arr.astype(DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# --------------------------------------------------------------------------
# elementwise


@register
def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


@register
def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


@register
def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


@register
def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


@register
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


@register
def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


@register
def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


# --------------------------------------------------------------------------
# shape


@register
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


@register
def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward)


@register
def take(a: Tensor, indices, axis: int) -> Tensor:
    """Select entries ``indices`` along ``axis`` (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape

    def backward(g):
        out = np.zeros(src, dtype=a.data.dtype)
        np.add.at(out, (slice(None),) * (axis % len(src)) + (idx,), g)
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward)


@register
def pick(a: Tensor, index, axis: int) -> Tensor:
    """Pick one entry along ``axis`` per leading position.

    ``index`` has shape ``a.shape[:axis]``; the result drops ``axis``.
    """
    axis = axis % a.ndim
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != a.shape[:axis]:
        raise ValueError(f"pick: index shape {idx.shape} != {a.shape[:axis]}")
    full = idx.reshape(idx.shape + (1,) * (a.ndim - axis))
    out = np.take_along_axis(a.data, full, axis=axis)
    out = np.squeeze(out, axis=axis)
    src = a.shape

    def backward(g):
        res = np.zeros(src, dtype=a.data.dtype)
        np.put_along_axis(res, full, np.expand_dims(g, axis), axis=axis)
        return (res,)

    return _make(out, (a,), backward)


# --------------------------------------------------------------------------
# reductions


@register
def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    return _make(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),),
    )


@register
def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# --------------------------------------------------------------------------
# softmax family (always over the last axis)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@register
def softmax(a: Tensor) -> Tensor:
    y = np.exp(_log_softmax(a.data))

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward)


@register
def log_softmax(a: Tensor) -> Tensor:
    y = _log_softmax(a.data)
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), backward)


# --------------------------------------------------------------------------
# layers


@register
def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``y = x Wᵀ + b``.

    Plain form: ``x [..., I]``, ``W [O, I]``, ``b [O]``.
    Grouped form: ``x [G, B, I]``, ``W [G, O, I]``, ``b [G, O]``.
    """
    xd, Wd, bd = x.data, W.data, b.data
    if Wd.ndim == 2:
        if xd.shape[-1] != Wd.shape[1] or bd.shape != (Wd.shape[0],):
            raise ValueError(f"linear: x {xd.shape}, W {Wd.shape}, b {bd.shape} do not conform")
        y = xd @ Wd.T + bd

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xd.reshape(-1, xd.shape[-1])
            return g @ Wd, g2.T @ x2, g2.sum(axis=0)

    elif Wd.ndim == 3:
        if (
            xd.ndim != 3
            or xd.shape[0] != Wd.shape[0]
            or xd.shape[2] != Wd.shape[2]
            or bd.shape != Wd.shape[:2]
        ):
            raise ValueError(f"linear: x {xd.shape}, W {Wd.shape}, b {bd.shape} do not conform")
        y = np.matmul(xd, Wd.transpose(0, 2, 1)) + bd[:, None, :]

        def backward(g):
            return np.matmul(g, Wd), np.matmul(g.transpose(0, 2, 1), xd), g.sum(axis=1)

    else:
        raise ValueError(f"linear: weight must be 2-D or 3-D, got {Wd.shape}")
    return _make(y, (x, W, b), backward)


def _conv_out(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


@register
def conv2d(x: Tensor, K: Tensor, b: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation. ``x [B,C,H,W]``, ``K [O,C,kh,kw]``, ``b [O]``.

    Grouped form adds a leading axis G to all three arguments. ``padding`` is
    ``"valid"`` or ``"same"`` (the latter requires stride 1 and odd kernels).
    """
    xd, Kd, bd = x.data, K.data, b.data
    grouped = Kd.ndim == 5
    if not grouped:
        xd, Kd, bd = xd[None], Kd[None], bd[None]
    if xd.ndim != 5 or Kd.ndim != 5 or xd.shape[0] != Kd.shape[0] or xd.shape[2] != Kd.shape[2]:
        raise ValueError(f"conv2d: x {x.shape} and kernel {K.shape} do not conform")
    G, B, C, H, Wd = xd.shape
    O, kh, kw = Kd.shape[1], Kd.shape[3], Kd.shape[4]
    if bd.shape != (G, O):
        raise ValueError(f"conv2d: bias {b.shape} does not match kernel {K.shape}")
    if padding == "same":
        if stride != 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("conv2d: same padding needs stride 1 and odd kernel")
        ph, pw = kh // 2, kw // 2
        xp = np.pad(xd, ((0, 0), (0, 0), (0, 0), (ph, ph), (pw, pw)))
    elif padding == "valid":
        ph = pw = 0
        xp = xd
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    Hp, Wp = xp.shape[3], xp.shape[4]
    if kh > Hp or kw > Wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {Hp}x{Wp}")
    Ho, Wo = _conv_out(Hp, kh, stride), _conv_out(Wp, kw, stride)
    Kmat = Kd.reshape(G, O, C * kh * kw)
    if G > 1 and xp.strides[0] == 0:
        # the same input is fed to every group: unfold it once, one wide matmul
        win = sliding_window_view(xp[0], (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols0 = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
        y = (cols0 @ Kmat.reshape(G * O, -1).T).reshape(B, Ho, Wo, G, O) + bd
        y = y.transpose(3, 0, 4, 1, 2)
        cols = np.broadcast_to(cols0, (G,) + cols0.shape)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(3, 4))[:, :, :, ::stride, ::stride]
        # [G,B,C,Ho,Wo,kh,kw] -> [G, B*Ho*Wo, C*kh*kw]
        cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(G, B * Ho * Wo, C * kh * kw)
        y = np.matmul(cols, Kmat.transpose(0, 2, 1)) + bd[:, None, :]
        y = y.reshape(G, B, Ho, Wo, O).transpose(0, 1, 4, 2, 3)

    def backward(g):
        if not grouped:
            g = g[None]
        g2 = g.transpose(0, 1, 3, 4, 2).reshape(G, B * Ho * Wo, O)
        dK = np.matmul(g2.transpose(0, 2, 1), cols).reshape(G, O, C, kh, kw)
        db = g2.sum(axis=1)
        dcols = np.matmul(g2, Kmat).reshape(G, B, Ho, Wo, C, kh, kw)
        dxp = np.zeros((G, B, C, Hp, Wp), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                    :, :, :, :, :, i, j
                ].transpose(0, 1, 4, 2, 3)
        dx = dxp[:, :, :, ph : Hp - ph, pw : Wp - pw]
        if not grouped:
            return dx[0], dK[0], db[0]
        return dx, dK, db

    if not grouped:
        y = y[0]
    return _make(np.ascontiguousarray(y), (x, K, b), backward)


@register
def dueling(v: Tensor, adv: Tensor) -> Tensor:
    """Per-atom dueling logits ``v[...,k] + adv[...,a,k] - mean_a adv[...,a,k]``.

    ``v [..., K]``, ``adv [..., A, K]`` -> ``[..., A, K]``.
    """
    if v.shape != adv.shape[:-2] + adv.shape[-1:]:
        raise ValueError(f"dueling: value {v.shape} and advantage {adv.shape} do not conform")
    ad = adv.data
    out = v.data[..., None, :] + ad - ad.mean(axis=-2, keepdims=True)

    def backward(g):
        return g.sum(axis=-2), g - g.mean(axis=-2, keepdims=True)

    return _make(out, (v, adv), backward)


# --------------------------------------------------------------------------
# losses (per row over the last axis unless stated)


def _as_float(x) -> np.ndarray:
    arr = np.asarray(x)
    return arr if arr.dtype in FLOAT_DTYPES else arr.astype(DTYPE)


def sum_tolerance(dtype) -> float:
    """How far a probability vector of this dtype may sum from one."""
    return 1e-9 if np.dtype(dtype) == np.float64 else 1e-5


def _check_target(target: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Validate a target distribution, then match the prediction's dtype."""
    t = _as_float(target)
    if np.any(t < 0):
        raise ValueError("target distribution has negative mass")
    if not np.allclose(t.sum(axis=-1), 1.0, rtol=0, atol=sum_tolerance(t.dtype)):
        raise ValueError("target distribution does not sum to 1")
    return t.astype(like.dtype, copy=False)


def _xlogx(t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = t[pos] * np.log(t[pos])
    return out


@register
def kl_categorical(target, logits: Tensor) -> Tensor:
    """``KL(target || softmax(logits))`` per row, with ``0 log 0 = 0``."""
    t = _check_target(target, logits.data)
    if t.shape != logits.shape:
        raise ValueError(f"kl_categorical: target {t.shape} vs logits {logits.shape}")
    ls = _log_softmax(logits.data)
    out = (_xlogx(t) - t * ls).sum(axis=-1)
    p = np.exp(ls)

    def backward(g):
        return ((p - t) * g[..., None],)

    return _make(out, (logits,), backward)


@register
def soft_cross_entropy(target, logits: Tensor) -> Tensor:
    """``-sum_k target_k log softmax(logits)_k`` per row."""
    t = _check_target(target, logits.data)
    if t.shape != logits.shape:
        raise ValueError(f"soft_cross_entropy: target {t.shape} vs logits {logits.shape}")
    ls = _log_softmax(logits.data)
    p = np.exp(ls)

    def backward(g):
        return ((p - t) * g[..., None],)

    return _make(-(t * ls).sum(axis=-1), (logits,), backward)


@register
def cross_entropy(labels, logits: Tensor) -> Tensor:
    """``-log softmax(logits)[label]`` per row."""
    lab = np.asarray(labels, dtype=np.intp)
    K = logits.shape[-1]
    if lab.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: labels {lab.shape} vs logits {logits.shape}")
    if np.any(lab < 0) or np.any(lab >= K):
        raise ValueError(f"cross_entropy: label out of range [0, {K})")
    ls = _log_softmax(logits.data)
    onehot = np.zeros_like(ls)
    np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
    p = np.exp(ls)

    def backward(g):
        return ((p - onehot) * g[..., None],)

    return _make(-(ls * onehot).sum(axis=-1), (logits,), backward)


@register
def kl_probs(target, probs: Tensor) -> Tensor:
    """``KL(target || probs)`` per row for an already-normalized ``probs``."""
    t = _check_target(target, probs.data)
    if t.shape != probs.shape:
        raise ValueError(f"kl_probs: target {t.shape} vs probs {probs.shape}")
    pd = probs.data
    if np.any(pd[t > 0] <= 0):
        raise ValueError("kl_probs: zero probability under positive target mass")
    safe = np.where(t > 0, pd, 1.0)
    out = (_xlogx(t) - t * np.log(safe)).sum(axis=-1)

    def backward(g):
        return (-(t / safe) * g[..., None],)

    return _make(out, (probs,), backward)


@register
def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise Huber loss with unit threshold; ``target`` is a constant."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"smooth_l1: pred {pred.shape} vs target {t.shape}")
    d = pred.data - t
    ad = np.abs(d)
    small = ad <= 1.0
    out = np.where(small, 0.5 * d * d, ad - 0.5)
    dg = np.where(small, d, np.sign(d))
    return _make(out, (pred,), lambda g: (g * dg,))


def loss_smooth_l1(pred: float, target: float) -> float:
    if not (np.isfinite(pred) and np.isfinite(target)):
        raise ValueError("smooth_l1: non-finite input")
    return float(smooth_l1(Tensor([pred]), [target]).data[0])


def loss_kl_categorical(target, logits) -> float:
    return float(kl_categorical(target, as_tensor(logits)).data)


def loss_cross_entropy(label: int, logits) -> float:
    return float(cross_entropy(np.asarray(label), as_tensor(logits)).data)


# --------------------------------------------------------------------------
# differentiation


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` for ``params``; unreachable params get zeros."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


# --------------------------------------------------------------------------
# optimisation


def global_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.vdot(g, g))
    return float(np.sqrt(total))


def clip_global_norm(grads: list[np.ndarray], max_norm: float = 10.0) -> list[np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return [g * factor for g in grads]


class AdamState:
    """Per-parameter first/second moments and a shared step counter."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1.5e-4, dtype=DTYPE):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], st: AdamState) -> None:
    """In-place Adam update with bias correction."""
    for name, p in params.items():
        if grads[name].shape != p.shape or st.m[name].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for {name}: {p.shape} vs {grads[name].shape}")
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1**st.step
    c2 = 1.0 - b2**st.step
    for name, p in params.items():
        g = grads[name]
        m = st.m[name]
        v = st.v[name]
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # lr * m_hat / (sqrt(v_hat) + eps), fused to limit temporaries
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += st.eps
        np.divide(m, tmp, out=tmp)
        tmp *= st.lr / c1
        p -= tmp


def xavier_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)

"""Dense layers, conditional batch norm, losses and Adam on plain float64 arrays.

Every op comes as a forward/backward pair. Activations may carry leading batch
axes, e.g. ``(B, N, F)`` for B shapes with N query points each; weights are
always 2-D and biases have shape ``(1, d)``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

CBN_EPS = 1e-5
CBN_MOMENTUM = 0.9
PROB_CLAMP = 1e-12


def glorot_uniform(rng, d_in, d_out):
    a = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-a, a, size=(d_in, d_out))


class ParamSet:
    """Ordered collection of named trainable arrays with matching gradient slots."""

    def __init__(self):
        self._values = OrderedDict()
        self._grads = OrderedDict()

    def add(self, name, value):
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self._values[name]

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name):
        return self._grads[name]

    def accumulate(self, name, g):
        gslot = self._grads[name]
        if g.shape != gslot.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {gslot.shape}")
        gslot += g

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0.0)

    def set_value(self, name, value):
        self._values[name][...] = value

    def copy(self):
        out = ParamSet()
        for k, v in self._values.items():
            out.add(k, v)
            out._grads[k][...] = self._grads[k]
        return out

    def n_scalars(self):
        return sum(v.size for v in self._values.values())

    def equal(self, other):
        return (self.names() == other.names()
                and all(np.array_equal(self[k], other[k]) for k in self))


# --- dense -----------------------------------------------------------------

def dense_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise ValueError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    # one 2-D GEMM is much faster than numpy's batched matmul over (B, N, d)
    y = x.reshape(-1, x.shape[-1]) @ W
    y += b[0]
    return y.reshape(x.shape[:-1] + (W.shape[1],))


def dense_backward(x, W, dy):
    """Return (dx, dW, db) for ``y = x W + b``."""
    if x.shape[-1] != W.shape[0] or dy.shape != x.shape[:-1] + (W.shape[1],):
        raise ValueError(f"dense backward shape mismatch: x {x.shape}, W {W.shape}, dy {dy.shape}")
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = (dy2 @ W.T).reshape(x.shape)
    return dx, x2.T @ dy2, dy2.sum(axis=0, keepdims=True)


# --- activations -----------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return dy * (x > 0)


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - 2.0 ** -53


def sigmoid(x):
    """Overflow-free logistic function, clamped so the result stays strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(y, _SIG_LO, _SIG_HI)


def sigmoid_backward(y, dy):
    return dy * y * (1.0 - y)


# --- conditional batch norm -----------------------------------------------

@dataclass
class CbnParams:
    """The two latent-conditioned affine maps plus running moments of one CBN layer.

    Arrays are shared with the owning ParamSet / buffer dict, so updates are
    visible in both places.
    """

    w_gamma: np.ndarray
    b_gamma: np.ndarray
    w_beta: np.ndarray
    b_beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = CBN_EPS
    momentum: float = CBN_MOMENTUM

    @classmethod
    def identity(cls, latent_dim, features):
        return cls(np.zeros((latent_dim, features)), np.ones((1, features)),
                   np.zeros((latent_dim, features)), np.zeros((1, features)),
                   np.zeros(features), np.ones(features))


@dataclass
class CbnCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    c: np.ndarray
    train: bool
    w_gamma: np.ndarray = field(repr=False, default=None)
    w_beta: np.ndarray = field(repr=False, default=None)


def _latent_rows(c, f_in):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"latent must be 2-D (B, L), got shape {c.shape}")
    if f_in.ndim == 2:
        if c.shape[0] != 1:
            raise ValueError(f"2-D features take a single latent row, got {c.shape}")
    elif f_in.ndim == 3:
        if c.shape[0] != f_in.shape[0]:
            raise ValueError(f"latent batch {c.shape[0]} != feature batch {f_in.shape[0]}")
    else:
        raise ValueError(f"features must be (N, F) or (B, N, F), got {f_in.shape}")
    return c


def _expand(v, f_in):
    # (B, F) -> broadcastable against f_in
    return v if f_in.ndim == 2 else v[:, None, :]


def cbn_forward(f_in, c, p, mode="train"):
    """``gamma(c) * (f_in - mu) / sqrt(var + eps) + beta(c)``.

    Moments are per feature over every row of the batch (all query points of
    all shapes). In train mode they are batch statistics and the running
    estimates are updated; in eval mode the running estimates are used.
    """
    c = _latent_rows(c, f_in)
    F = f_in.shape[-1]
    if p.w_gamma.shape != (c.shape[1], F) or p.w_beta.shape != (c.shape[1], F):
        raise ValueError(f"CBN maps {p.w_gamma.shape} do not fit latent {c.shape} / features {F}")
    gamma = c @ p.w_gamma + p.b_gamma
    beta = c @ p.w_beta + p.b_beta
    if mode == "train":
        rows = f_in.reshape(-1, F)
        if len(rows) < 2:
            raise ValueError("CBN in train mode needs at least 2 rows to form batch moments")
        mu = rows.mean(axis=0)
        var = ((rows - mu) ** 2).mean(axis=0)
        p.running_mean *= p.momentum
        p.running_mean += (1.0 - p.momentum) * mu
        p.running_var *= p.momentum
        p.running_var += (1.0 - p.momentum) * var
        train = True
    elif mode == "eval":
        mu, var, train = p.running_mean, p.running_var, False
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.eps)
    x_hat = (f_in - mu) * inv_std
    out = _expand(gamma, f_in) * x_hat + _expand(beta, f_in)
    return out, CbnCache(x_hat, inv_std, gamma, c, train, p.w_gamma, p.w_beta)


def cbn_backward(cache, d_out):
    """Return ``(d_fin, {"w_gamma", "b_gamma", "w_beta", "b_beta"}, d_c)``."""
    xh = cache.x_hat
    F = xh.shape[-1]
    red = (0,) if xh.ndim == 2 else (1,)
    d_gamma = (d_out * xh).sum(axis=red)
    d_beta = d_out.sum(axis=red)
    if xh.ndim == 2:
        d_gamma, d_beta = d_gamma[None], d_beta[None]
    grads = {
        "w_gamma": cache.c.T @ d_gamma,
        "b_gamma": d_gamma.sum(axis=0, keepdims=True),
        "w_beta": cache.c.T @ d_beta,
        "b_beta": d_beta.sum(axis=0, keepdims=True),
    }
    d_c = d_gamma @ cache.w_gamma.T + d_beta @ cache.w_beta.T
    d_xh = d_out * _expand(cache.gamma, xh)
    if cache.train:
        dx2 = d_xh.reshape(-1, F)
        xh2 = xh.reshape(-1, F)
        d_fin = cache.inv_std * (dx2 - dx2.mean(axis=0) - xh2 * (dx2 * xh2).mean(axis=0))
        d_fin = d_fin.reshape(xh.shape)
    else:
        d_fin = d_xh * cache.inv_std
    return d_fin, grads, d_c


# --- losses ----------------------------------------------------------------

def bce_loss(p, y):
    """Mean binary cross-entropy on probabilities and its gradient w.r.t. ``p``."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    dp = (-y / p + (1.0 - y) / (1.0 - p)) / n
    return float(loss), dp


def bce_with_logits(z, y):
    """``bce_loss(sigmoid(z), y)`` evaluated stably; returns (loss, d_z)."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    # -[y log s + (1-y) log(1-s)] = softplus(z) - y z
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(loss), (sigmoid(z) - y) / z.size


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **hyper):
        st = cls(**hyper)
        for k, val in params.items():
            st.m[k] = np.zeros_like(val)
            st.v[k] = np.zeros_like(val)
        return st


def adam_step(params, state):
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = params.grad(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        tmp = g * g
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        tmp *= 1.0 - b2
        v += tmp
        # theta -= lr * (m / c1) / (sqrt(v / c2) + eps), without temporaries
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        theta -= tmp
    params.zero_grad()
    return params, state

"""Occupancy decoder, PointNet encoder and convolutional silhouette encoder.

Each network registers its weights in a shared :class:`ParamSet` under a name
prefix, so an encoder and a decoder can be trained by a single Adam state and
serialized into a single checkpoint.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import CbnParams, ParamSet, dense_backward, dense_forward, glorot_uniform, relu


@dataclass(frozen=True)
class DecoderConfig:
    latent_dim: int = 256
    hidden: int = 256
    blocks: int = 5


@dataclass(frozen=True)
class PointNetConfig:
    widths: tuple = (64, 128, 512)
    latent_dim: int = 512
    n_points: int = 300


@dataclass(frozen=True)
class ImageEncoderConfig:
    resolution: int = 32
    channels: tuple = (8, 16, 32, 64)
    latent_dim: int = 256


def _add_dense(params, rng, name, d_in, d_out, zero=False):
    w = np.zeros((d_in, d_out)) if zero else glorot_uniform(rng, d_in, d_out)
    params.add(f"{name}.W", w)
    params.add(f"{name}.b", np.zeros((1, d_out)))


def _dense(params, name, x):
    return dense_forward(x, params[f"{name}.W"], params[f"{name}.b"])


def _dense_back(params, name, x, dy):
    dx, dW, db = dense_backward(x, params[f"{name}.W"], dy)
    params.accumulate(f"{name}.W", dW)
    params.accumulate(f"{name}.b", db)
    return dx


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

class OccupancyDecoder:
    """Point-wise occupancy field conditioned on a latent code through CBN.

    lift FC(3->F), ``blocks`` x [CBN-ReLU-FC-CBN-ReLU-FC + skip],
    CBN-ReLU-FC(F->1), sigmoid.
    """

    def __init__(self, cfg, params, buffers, rng, prefix="dec"):
        self.cfg, self.params, self.buffers, self.prefix = cfg, params, buffers, prefix
        F, L = cfg.hidden, cfg.latent_dim
        _add_dense(params, rng, f"{prefix}.fc_p", 3, F)
        for i in range(cfg.blocks):
            for j in range(2):
                self._add_cbn(f"{prefix}.block{i}.cbn{j}")
                _add_dense(params, rng, f"{prefix}.block{i}.fc{j}", F, F)
        self._add_cbn(f"{prefix}.cbn_out")
        _add_dense(params, rng, f"{prefix}.fc_out", F, 1, zero=True)

    def _add_cbn(self, name):
        F, L = self.cfg.hidden, self.cfg.latent_dim
        ident = CbnParams.identity(L, F)
        self.params.add(f"{name}.w_gamma", ident.w_gamma)
        self.params.add(f"{name}.b_gamma", ident.b_gamma)
        self.params.add(f"{name}.w_beta", ident.w_beta)
        self.params.add(f"{name}.b_beta", ident.b_beta)
        self.buffers[f"{name}.running_mean"] = ident.running_mean
        self.buffers[f"{name}.running_var"] = ident.running_var

    def cbn(self, name):
        p, b = self.params, self.buffers
        return CbnParams(p[f"{name}.w_gamma"], p[f"{name}.b_gamma"],
                         p[f"{name}.w_beta"], p[f"{name}.b_beta"],
                         b[f"{name}.running_mean"], b[f"{name}.running_var"])

    def _cbn_back(self, name, cache, d):
        d_in, grads, d_c = nn.cbn_backward(cache, d)
        for k, g in grads.items():
            self.params.accumulate(f"{name}.{k}", g)
        return d_in, d_c

    def forward(self, points, c, mode="eval"):
        """Logits of shape ``points.shape[:-1] + (1,)`` and a backward cache.

        ``points`` is (N, 3) with ``c`` of shape (1, L), or (B, N, 3) with (B, L).
        """
        c = np.asarray(c, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"latent has shape {c.shape}, decoder expects (B, {self.cfg.latent_dim})")
        pre = self.prefix
        tape = []
        x = _dense(self.params, f"{pre}.fc_p", points)
        for i in range(self.cfg.blocks):
            x_in = x
            steps = []
            h = x
            for j in range(2):
                name = f"{pre}.block{i}.cbn{j}"
                a, cc = nn.cbn_forward(h, c, self.cbn(name), mode)
                r = relu(a)
                h = _dense(self.params, f"{pre}.block{i}.fc{j}", r)
                steps.append((cc, a, r))
            x = x_in + h
            tape.append(steps)
        a, cc = nn.cbn_forward(x, c, self.cbn(f"{pre}.cbn_out"), mode)
        r = relu(a)
        logits = _dense(self.params, f"{pre}.fc_out", r)
        return logits, (points, tape, (cc, a, r))

    def backward(self, cache, d_logits):
        """Accumulate parameter gradients; return d(latent) of shape (B, L)."""
        points, tape, (cc, a, r) = cache
        pre = self.prefix
        d = _dense_back(self.params, f"{pre}.fc_out", r, d_logits)
        d = nn.relu_backward(a, d)
        d, d_c = self._cbn_back(f"{pre}.cbn_out", cc, d)
        for i in reversed(range(self.cfg.blocks)):
            d_skip = d
            for j in (1, 0):
                cc, a, r = tape[i][j]
                d = _dense_back(self.params, f"{pre}.block{i}.fc{j}", r, d)
                d = nn.relu_backward(a, d)
                d, dc = self._cbn_back(f"{pre}.block{i}.cbn{j}", cc, d)
                d_c = d_c + dc
            d = d + d_skip
        _dense_back(self.params, f"{pre}.fc_p", points, d)
        return d_c

    def probabilities(self, points, c, mode="eval"):
        logits, _ = self.forward(points, c, mode)
        return nn.sigmoid(logits)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class PointNetEncoder:
    """Shared per-point MLP, feature-wise max over points, FC head."""

    def __init__(self, cfg, params, rng, prefix="enc"):
        self.cfg, self.params, self.prefix = cfg, params, prefix
        d = 3
        for i, w in enumerate(cfg.widths):
            _add_dense(params, rng, f"{prefix}.mlp{i}", d, w)
            d = w
        _add_dense(params, rng, f"{prefix}.head", d, cfg.latent_dim)

    def forward(self, clouds):
        """(B, P, 3) clouds -> (B, L) latents."""
        x = np.asarray(clouds, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.cfg.n_points, 3):
            raise ValueError(f"PointNet expects clouds of {self.cfg.n_points} points, got shape {x.shape}")
        layers = []
        for i in range(len(self.cfg.widths)):
            a = _dense(self.params, f"{self.prefix}.mlp{i}", x)
            layers.append((x, a))
            x = relu(a)
        arg = np.argmax(x, axis=1)  # (B, W); first maximiser on ties
        pooled = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
        z = _dense(self.params, f"{self.prefix}.head", pooled)
        return z, (layers, x.shape, arg, pooled)

    def backward(self, cache, d_z):
        layers, shape, arg, pooled = cache
        d_pool = _dense_back(self.params, f"{self.prefix}.head", pooled, d_z)
        d = np.zeros(shape)
        np.put_along_axis(d, arg[:, None, :], d_pool[:, None, :], axis=1)
        for i in reversed(range(len(layers))):
            x, a = layers[i]
            d = nn.relu_backward(a, d)
            d = _dense_back(self.params, f"{self.prefix}.mlp{i}", x, d)
        return d


def _patches(x):
    """3x3, stride 2, zero-pad 1 patches of NHWC ``x`` -> (B, Ho, Wo, 9*C)."""
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    Ho, Wo = win.shape[1], win.shape[2]
    # win: (B, Ho, Wo, C, 3, 3) -> (B, Ho, Wo, 3, 3, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B, Ho, Wo, 9 * C)


def _patches_backward(d_cols, in_shape):
    B, H, W, C = in_shape
    Ho, Wo = d_cols.shape[1], d_cols.shape[2]
    d_cols = d_cols.reshape(B, Ho, Wo, 3, 3, C)
    dxp = np.zeros((B, H + 2, W + 2, C))
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * Ho:2, kj:kj + 2 * Wo:2, :] += d_cols[:, :, :, ki, kj, :]
    return dxp[:, 1:-1, 1:-1, :]


class ImageEncoder:
    """Stride-2 3x3 conv stack with ReLU, flattened into an FC layer."""

    def __init__(self, cfg, params, rng, prefix="enc"):
        self.cfg, self.params, self.prefix = cfg, params, prefix
        c_in, res = 1, cfg.resolution
        for i, c in enumerate(cfg.channels):
            _add_dense(params, rng, f"{prefix}.conv{i}", 9 * c_in, c)
            c_in, res = c, (res + 1) // 2
        _add_dense(params, rng, f"{prefix}.fc", res * res * c_in, cfg.latent_dim)

    def forward(self, images):
        """(B, R, R) silhouettes -> (B, L) latents."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        R = self.cfg.resolution
        if x.shape[1:] != (R, R):
            raise ValueError(f"image encoder expects {R}x{R} silhouettes, got shape {x.shape}")
        x = x[..., None]
        layers = []
        for i in range(len(self.cfg.channels)):
            cols = _patches(x)
            a = _dense(self.params, f"{self.prefix}.conv{i}", cols)
            layers.append((x.shape, cols, a))
            x = relu(a)
        flat = x.reshape(x.shape[0], -1)
        z = _dense(self.params, f"{self.prefix}.fc", flat)
        return z, (layers, x.shape, flat)

    def backward(self, cache, d_z):
        layers, last_shape, flat = cache
        d = _dense_back(self.params, f"{self.prefix}.fc", flat, d_z).reshape(last_shape)
        for i in reversed(range(len(layers))):
            in_shape, cols, a = layers[i]
            d = nn.relu_backward(a, d)
            d_cols = _dense_back(self.params, f"{self.prefix}.conv{i}", cols, d)
            d = _patches_backward(d_cols, in_shape)
        return d[..., 0]


# ---------------------------------------------------------------------------
# full encoder + decoder network
# ---------------------------------------------------------------------------

EVAL_BLOCK = 1024


def stage_arch(stage, *, hidden=256, blocks=5, reduced=None):
    """Architecture descriptor for stage 1 (image) or stage 2 (point cloud)."""
    if stage == 1:
        arch = {"stage": 1, "encoder": "image", "latent_dim": 256, "blocks": blocks,
                "widths": {"hidden": hidden, "conv": [8, 16, 32, 64], "image_res": 32}}
    elif stage == 2:
        arch = {"stage": 2, "encoder": "pointnet", "latent_dim": 512, "blocks": blocks,
                "widths": {"hidden": hidden, "pointnet": [64, 128, 512], "n_points": 300}}
    else:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if reduced:
        arch = copy.deepcopy(arch)
        arch.update({k: v for k, v in reduced.items() if k != "widths"})
        arch["widths"].update(reduced.get("widths", {}))
    return arch


class OccupancyNetwork:
    """Encoder + conditional decoder sharing one parameter set."""

    def __init__(self, arch, seed=0):
        self.arch = copy.deepcopy(arch)
        self.params = ParamSet()
        self.buffers = {}
        rng = np.random.default_rng(seed)
        w = arch["widths"]
        L = arch["latent_dim"]
        if arch["encoder"] == "image":
            self.encoder = ImageEncoder(
                ImageEncoderConfig(w["image_res"], tuple(w["conv"]), L), self.params, rng)
        elif arch["encoder"] == "pointnet":
            self.encoder = PointNetEncoder(
                PointNetConfig(tuple(w["pointnet"]), L, w["n_points"]), self.params, rng)
        else:
            raise ValueError(f"unknown encoder {arch['encoder']!r}")
        self.decoder = OccupancyDecoder(
            DecoderConfig(L, w["hidden"], arch["blocks"]), self.params, self.buffers, rng)

    @property
    def latent_dim(self):
        return self.arch["latent_dim"]

    @property
    def stage(self):
        return self.arch["stage"]

    def encode(self, inputs):
        z, _ = self.encoder.forward(inputs)
        return z

    def loss_and_grad(self, inputs, points, labels):
        """Minibatch BCE on (B, N) labels; accumulates gradients, returns (loss, logits)."""
        z, enc_cache = self.encoder.forward(inputs)
        logits, dec_cache = self.decoder.forward(points, z, mode="train")
        loss, d_logits = nn.bce_with_logits(logits, np.asarray(labels, float).reshape(logits.shape))
        d_z = self.decoder.backward(dec_cache, d_logits)
        self.encoder.backward(enc_cache, d_z)
        return loss, logits

    def predict(self, points, latent, block=EVAL_BLOCK):
        """Eval-mode occupancy probabilities of (M, 3) points for one (1, L) latent.

        Points are evaluated in zero-padded blocks of exactly ``block`` rows.
        BLAS picks its kernel by matrix shape, so a fixed shape is what makes
        each point's value independent of how many others share the call.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(pts)
        padded = np.zeros((-(-n // block) * block, 3))
        padded[:n] = pts
        out = np.empty(len(padded))
        for s in range(0, len(padded), block):
            out[s:s + block] = self.decoder.probabilities(padded[s:s + block], latent, "eval")[:, 0]
        return out[:n]

    def state_equal(self, other):
        return (self.params.equal(other.params)
                and self.buffers.keys() == other.buffers.keys()
                and all(np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers))

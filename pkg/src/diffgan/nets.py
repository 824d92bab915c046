"""Desk-scale generator and timestep-conditioned discriminator.

Weights are stored at unit variance and scaled by ``1/sqrt(fan_in)`` in the
forward pass (equalized learning rate), so one Adam learning rate suits every
layer.
"""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from diffgan import tensor as T
from diffgan.errors import ArgumentError, ConfigError, DimensionError, NumericError


class ParamSet(dict):
    """Ordered ``name -> TapeVar`` mapping of trainable leaves."""

    def new(self, name: str, value) -> T.TapeVar:
        if name in self:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = T.param(value)
        self[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Treat the parameters as constants inside the block."""
        for p in self.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in self.values():
                p.requires_grad = True


class Dense:
    def __init__(self, ps: ParamSet, name: str, n_in: int, n_out: int, rng: T.Rng,
                 dtype=np.float32, bias_init: float = 0.0):
        self.n_in, self.n_out = n_in, n_out
        self.weight = ps.new(f"{name}.weight", rng.normal((n_in, n_out)).astype(dtype))
        self.bias = ps.new(f"{name}.bias", np.full(n_out, bias_init, dtype=dtype))
        self.gain = 1.0 / math.sqrt(n_in)

    def __call__(self, x: T.TapeVar) -> T.TapeVar:
        if x.value.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"dense layer expects [N, {self.n_in}], got {x.shape}")
        return T.add_bias(T.matmul(x, T.scale(self.weight, self.gain)), self.bias)


class Conv:
    def __init__(self, ps: ParamSet, name: str, c_in: int, c_out: int, k: int, rng: T.Rng,
                 stride: int = 1, dtype=np.float32):
        self.weight = ps.new(f"{name}.weight", rng.normal((c_out, c_in, k, k)).astype(dtype))
        self.bias = ps.new(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.stride, self.pad = stride, k // 2
        self.gain = 1.0 / math.sqrt(c_in * k * k)

    def __call__(self, x: T.TapeVar) -> T.TapeVar:
        y = T.conv2d(x, T.scale(self.weight, self.gain), self.stride, self.pad)
        return T.add_bias(y, self.bias)


def modulated_conv(x: T.TapeVar, s: T.TapeVar, weight: T.TapeVar, pad: int,
                   demodulate: bool = True, eps: float = 1e-8) -> T.TapeVar:
    """Convolve each sample with its own style-scaled, demodulated kernel.

    The per-sample kernel ``w[o,c] * s[n,c]`` is applied by scaling the input
    channels instead, and the demodulation factor
    ``1/sqrt(sum_c s[n,c]^2 sum_k w[o,c,k]^2 + eps)`` scales the output channels.
    """
    if not np.all(np.isfinite(s.value)):
        raise NumericError("modulated_conv: non-finite style")
    o, c = weight.shape[:2]
    if s.shape != (x.shape[0], c):
        raise DimensionError(f"modulated_conv: style {s.shape} for input {x.shape}")
    y = T.conv2d(T.channel_mul(x, s), weight, 1, pad)
    if not demodulate:
        return y
    wsq = T.sum_axis(T.reshape(T.square(weight), (o, c, -1)), 2)
    energy = T.matmul(T.square(s), T.transpose(wsq))
    demod = T.power(T.add(energy, T.constant(np.asarray(eps, dtype=energy.value.dtype))), -0.5)
    return T.channel_mul(y, demod)


class ModulatedConvLayer:
    def __init__(self, ps: ParamSet, name: str, w_dim: int, c_in: int, c_out: int, k: int,
                 rng: T.Rng, demodulate: bool = True, eps: float = 1e-8, dtype=np.float32):
        self.affine = Dense(ps, f"{name}.affine", w_dim, c_in, rng, dtype, bias_init=1.0)
        self.weight = ps.new(f"{name}.weight", rng.normal((c_out, c_in, k, k)).astype(dtype))
        self.bias = ps.new(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.demodulate, self.eps, self.pad = demodulate, eps, k // 2
        self.gain = 1.0 / math.sqrt(c_in * k * k)

    def __call__(self, x: T.TapeVar, style: T.TapeVar) -> T.TapeVar:
        s = self.affine(style)
        y = modulated_conv(x, s, T.scale(self.weight, self.gain), self.pad,
                           self.demodulate, self.eps)
        return y


def modulated_conv_forward(x: T.TapeVar, style: T.TapeVar, layer: ModulatedConvLayer) -> T.TapeVar:
    return layer(x, style)


class MappingNet:
    """MLP from latent ``z`` to style ``w``; ``depth=0`` is the identity."""

    def __init__(self, ps: ParamSet, z_dim: int, w_dim: int, depth: int, rng: T.Rng,
                 dtype=np.float32):
        if depth == 0 and z_dim != w_dim:
            raise ConfigError("mapping depth 0 needs z_dim == w_dim")
        if not 0 <= depth <= 8:
            raise ConfigError(f"mapping depth must lie in [0, 8], got {depth}")
        self.z_dim, self.w_dim, self.depth = z_dim, w_dim, depth
        dims = [z_dim] + [w_dim] * depth
        self.layers = [Dense(ps, f"mapping.{i}", dims[i], dims[i + 1], rng.child("map", i), dtype)
                       for i in range(depth)]

    def __call__(self, z: T.TapeVar) -> T.TapeVar:
        if z.value.ndim != 2 or z.shape[1] != self.z_dim:
            raise DimensionError(f"mapping expects [N, {self.z_dim}], got {z.shape}")
        w = z
        for layer in self.layers:
            w = T.leaky_relu(layer(w))
        return w


def mapping_forward(mapping: MappingNet, z: T.TapeVar) -> T.TapeVar:
    return mapping(z)


@dataclass
class NetConfig:
    """Architecture knobs shared by generator and discriminator."""

    arch: str = "conv"  # conv | mlp
    channels: int = 1
    resolution: int = 28
    z_dim: int = 64
    w_dim: int = 64
    map_depth: int = 2
    fmaps: float = 0.5
    ch_base: int = 1024
    ch_max: int = 64
    n_blocks: int = 0  # 0 = halve while the size stays even and above 4
    mbstd_group: int = 8
    t_embed: int = 32
    t_max: int = 1000
    hidden: int = 128  # mlp only
    mlp_layers: int = 3  # mlp only

    def block_count(self) -> int:
        if self.n_blocks:
            return self.n_blocks
        n, r = 0, self.resolution
        while r % 2 == 0 and r > 4:
            r //= 2
            n += 1
        return n

    def base_resolution(self) -> int:
        n = self.block_count()
        if self.resolution % (2 ** n):
            raise ConfigError(f"resolution {self.resolution} not divisible by 2^{n}")
        return self.resolution // 2 ** n

    def ch(self, res: int) -> int:
        return int(min(max(self.fmaps * self.ch_base / res, 8), self.ch_max))


class _Net:
    def __init__(self):
        self.params = ParamSet()

    def copy(self):
        return copy.deepcopy(self)


class Generator(_Net):
    """Mapping network, dense head, upsampling modulated-conv blocks, tanh output."""

    def __init__(self, cfg: NetConfig, rng: T.Rng, dtype=np.float32):
        super().__init__()
        self.cfg, self.dtype = cfg, dtype
        ps = self.params
        self.mapping = MappingNet(ps, cfg.z_dim, cfg.w_dim, cfg.map_depth, rng.child("mapping"), dtype)
        if cfg.arch == "mlp":
            dims = [cfg.w_dim] + [cfg.hidden] * cfg.mlp_layers
            self.hidden = [Dense(ps, f"g.fc{i}", dims[i], dims[i + 1], rng.child("g.fc", i), dtype)
                           for i in range(cfg.mlp_layers)]
            self.out = Dense(ps, "g.out", dims[-1], cfg.channels, rng.child("g.out"), dtype)
            return
        base = cfg.base_resolution()
        self.base = base
        c0 = cfg.ch(base)
        self.head = Dense(ps, "g.head", cfg.w_dim, c0 * base * base, rng.child("g.head"), dtype)
        self.blocks = []
        res, c_prev = base, c0
        for i in range(cfg.block_count()):
            res *= 2
            c = cfg.ch(res)
            conv = ModulatedConvLayer(ps, f"g.b{res}.conv", cfg.w_dim, c_prev, c, 3,
                                      rng.child("g.conv", res), dtype=dtype)
            strength = ps.new(f"g.b{res}.noise_strength", np.zeros(c, dtype=dtype))
            self.blocks.append((res, conv, strength))
            c_prev = c
        self.to_img = ModulatedConvLayer(ps, "g.to_img", cfg.w_dim, c_prev, cfg.channels, 1,
                                         rng.child("g.to_img"), demodulate=False, dtype=dtype)

    def __call__(self, z: T.TapeVar, rng: T.Rng | None = None) -> T.TapeVar:
        cfg = self.cfg
        w = self.mapping(z)
        if cfg.arch == "mlp":
            h = w
            for layer in self.hidden:
                h = T.leaky_relu(layer(h))
            return T.reshape(self.out(h), (z.shape[0], cfg.channels, 1, 1))
        n = z.shape[0]
        c0 = cfg.ch(self.base)
        x = T.leaky_relu(T.reshape(self.head(w), (n, c0, self.base, self.base)))
        for res, conv, strength in self.blocks:
            x = conv(T.upsample2x(x), w)
            if rng is not None:
                noise = rng.child("noise", res).normal((n, 1, res, res), dtype=x.value.dtype)
                noise = np.broadcast_to(noise, x.shape)
                x = T.add(x, T.channel_mul(T.constant(noise), strength))
            x = T.leaky_relu(T.add_bias(x, conv.bias))
        x = T.add_bias(self.to_img(x, w), self.to_img.bias)
        return T.tanh(x)


def generator_forward(g: Generator, z: T.TapeVar, rng: T.Rng | None = None) -> T.TapeVar:
    """Run ``g`` (including its mapping network) on latents ``z``.

    Per-pixel noise is drawn from ``rng``; with ``rng=None`` no noise is injected.
    """
    if z.value.ndim != 2 or z.shape[1] != g.cfg.z_dim:
        raise ConfigError(f"generator expects z of shape [N, {g.cfg.z_dim}], got {z.shape}")
    return g(z, rng)


class Discriminator(_Net):
    """Downsampling conv blocks (or an MLP) with an additive timestep embedding."""

    def __init__(self, cfg: NetConfig, rng: T.Rng, dtype=np.float32, mbstd: bool = True):
        super().__init__()
        self.cfg, self.dtype, self.mbstd = cfg, dtype, mbstd
        ps = self.params
        if cfg.arch == "mlp":
            dims = [cfg.channels] + [cfg.hidden] * cfg.mlp_layers
            self.hidden = [Dense(ps, f"d.fc{i}", dims[i], dims[i + 1], rng.child("d.fc", i), dtype)
                           for i in range(cfg.mlp_layers)]
            feat = cfg.hidden
        else:
            res = cfg.resolution
            self.from_img = Conv(ps, "d.from_img", cfg.channels, cfg.ch(res), 1,
                                 rng.child("d.from_img"), dtype=dtype)
            self.blocks = []
            for _ in range(cfg.block_count()):
                self.blocks.append(Conv(ps, f"d.b{res}.down", cfg.ch(res), cfg.ch(res // 2), 3,
                                        rng.child("d.down", res), stride=2, dtype=dtype))
                res //= 2
            c = cfg.ch(res)
            self.final_conv = Conv(ps, "d.final_conv", c + int(mbstd), c, 3,
                                   rng.child("d.final_conv"), dtype=dtype)
            feat = c * 2
            self.final_dense = Dense(ps, "d.final_dense", c * res * res, feat,
                                     rng.child("d.final_dense"), dtype)
        self.feat = feat
        self.temb1 = Dense(ps, "d.temb.0", 1, cfg.t_embed, rng.child("d.temb", 0), dtype)
        self.temb2 = Dense(ps, "d.temb.1", cfg.t_embed, feat, rng.child("d.temb", 1), dtype)
        self.out = Dense(ps, "d.out", feat, 1, rng.child("d.out"), dtype)

    def features(self, y: T.TapeVar) -> T.TapeVar:
        cfg = self.cfg
        if cfg.arch == "mlp":
            h = T.reshape(y, (y.shape[0], -1))
            for layer in self.hidden:
                h = T.leaky_relu(layer(h))
            return h
        x = T.leaky_relu(self.from_img(y))
        for block in self.blocks:
            x = T.leaky_relu(block(x))
        if self.mbstd:
            x = T.minibatch_stddev(x, cfg.mbstd_group)
        x = T.leaky_relu(self.final_conv(x))
        x = T.reshape(x, (x.shape[0], -1))
        return T.leaky_relu(self.final_dense(x))

    def __call__(self, y: T.TapeVar, t) -> T.TapeVar:
        cfg = self.cfg
        n = y.shape[0]
        expect = (cfg.channels, 1, 1) if cfg.arch == "mlp" else (
            cfg.channels, cfg.resolution, cfg.resolution)
        if y.shape[1:] != expect:
            raise DimensionError(f"discriminator expects [N, {expect}], got {y.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        if np.any(t < 0) or np.any(t > cfg.t_max):
            raise ArgumentError(f"discriminator: t outside [0, {cfg.t_max}]")
        h = self.features(y)
        tn = T.constant((t / cfg.t_max).reshape(n, 1).astype(y.value.dtype))
        emb = self.temb2(T.leaky_relu(self.temb1(tn)))
        return self.out(T.add(h, emb))


def discriminator_forward(d: Discriminator, y: T.TapeVar, t) -> T.TapeVar:
    return d(y, t)


def ema_update(ema_params: dict, live_params: dict, decay: float) -> None:
    """``ema <- decay * ema + (1 - decay) * live`` for each parameter."""
    if not 0 <= decay < 1:
        raise ArgumentError(f"ema decay must lie in [0, 1), got {decay}")
    if ema_params.keys() != live_params.keys():
        raise DimensionError("ema_update: parameter names differ")
    for name, e in ema_params.items():
        live = live_params[name]
        if e.shape != live.shape:
            raise DimensionError(f"ema_update: {name} has shapes {e.shape} vs {live.shape}")
        dt = e.value.dtype.type
        e.value = dt(decay) * e.value + dt(1.0 - decay) * live.value


def ema_decay(batch: int, halflife_kimg: float) -> float:
    """Per-step decay giving a half-life of ``halflife_kimg`` thousand images."""
    if halflife_kimg <= 0:
        return 0.0
    return 0.5 ** (batch / (halflife_kimg * 1000.0))

"""ResNet generators, PatchGAN discriminators and the cycle-GAN loss terms."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

ModelParams = "OrderedDict[str, Tensor]"

INIT_STD = 0.02
NORM_EPS = 1e-5


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    base_channels: int = 64
    n_residual_blocks: int = 6
    image_size: int = 64

    def validate(self):
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.n_residual_blocks < 1:
            raise ValueError("n_residual_blocks must be >= 1")
        if self.image_size < 4 or self.image_size % 4:
            raise ValueError(f"image_size must be a positive multiple of 4, got {self.image_size}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    base_channels: int = 64
    n_layers: int = 3

    def validate(self):
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")


def _generator_layout(spec: GeneratorSpec):
    """(name, kind, cin, cout, k) for every conv of the generator, in order."""
    b = spec.base_channels
    layers = [("stem", "conv", spec.in_channels, b, 7),
              ("down1", "conv", b, 2 * b, 3),
              ("down2", "conv", 2 * b, 4 * b, 3)]
    for i in range(spec.n_residual_blocks):
        layers += [(f"res{i}.conv1", "conv", 4 * b, 4 * b, 3),
                   (f"res{i}.conv2", "conv", 4 * b, 4 * b, 3)]
    layers += [("up1", "convT", 4 * b, 2 * b, 3),
               ("up2", "convT", 2 * b, b, 3),
               ("out", "conv", b, spec.in_channels, 7)]
    return layers


def _discriminator_layout(spec: DiscriminatorSpec):
    layers, cin = [], spec.in_channels
    for i in range(spec.n_layers):
        cout = spec.base_channels * 2 ** i
        layers.append((f"layer{i}", "conv", cin, cout, 4))
        cin = cout
    layers.append(("final", "conv", cin, 1, 4))
    return layers


def _init(layout, seed: int, dtype) -> OrderedDict:
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, kind, cin, cout, k in layout:
        shape = (cout, cin, k, k) if kind == "conv" else (cin, cout, k, k)
        params[f"{name}.w"] = Tensor(rng.normal(0.0, INIT_STD, shape).astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return params


def build_generator(spec: GeneratorSpec, seed: int, dtype=None) -> OrderedDict:
    spec.validate()
    return _init(_generator_layout(spec), seed, dtype or tc.default_dtype())


def build_discriminator(spec: DiscriminatorSpec, seed: int, dtype=None) -> OrderedDict:
    spec.validate()
    return _init(_discriminator_layout(spec), seed, dtype or tc.default_dtype())


def count_parameters(params) -> int:
    return sum(t.data.size for t in params.values())


def _block(x, params, name, stride=1, pad=None):
    return tc.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride, pad)


def _norm_relu(x):
    return tc.relu(tc.instance_norm(x, NORM_EPS))


def _n_res_blocks(params) -> int:
    return sum(1 for k in params if k.endswith(".conv1.w"))


def generator_forward(params, x: Tensor) -> Tensor:
    """Map an (N,3,S,S) batch in [-1,1] to a translated batch of the same shape."""
    cin = params["stem.w"].shape[1]
    if x.data.ndim != 4 or x.shape[1] != cin:
        raise ValueError(f"generator expects (N,{cin},S,S) input, got {x.shape}")
    if x.shape[2] != x.shape[3] or x.shape[2] % 4 or x.shape[2] < 8:
        raise ValueError(f"generator needs square tiles with side a multiple of 4, got {x.shape[2:]}")
    h = _norm_relu(_block(x, params, "stem", pad=("reflect", 3)))
    h = _norm_relu(_block(h, params, "down1", 2, ("zero", 1)))
    h = _norm_relu(_block(h, params, "down2", 2, ("zero", 1)))
    for i in range(_n_res_blocks(params)):
        r = _norm_relu(_block(h, params, f"res{i}.conv1", pad=("reflect", 1)))
        r = _norm_relu(_block(r, params, f"res{i}.conv2", pad=("reflect", 1)))
        h = tc.add(h, r)
    for name in ("up1", "up2"):
        h = _norm_relu(tc.conv_transpose2d(h, params[f"{name}.w"], params[f"{name}.b"], 2, 1, 1))
    return tc.tanh(_block(h, params, "out", pad=("reflect", 3)))


def discriminator_forward(params, x: Tensor) -> Tensor:
    """Patch logits (N,1,h,w) for an image batch."""
    cin = params["layer0.w"].shape[1]
    if x.data.ndim != 4 or x.shape[1] != cin:
        raise ValueError(f"discriminator expects (N,{cin},S,S) input, got {x.shape}")
    n_layers = sum(1 for k in params if k.startswith("layer") and k.endswith(".w"))
    h = x
    for i in range(n_layers):
        h = _block(h, params, f"layer{i}", 2, ("zero", 1))
        if i:
            h = tc.instance_norm(h, NORM_EPS)
        h = tc.leaky_relu(h)
    return _block(h, params, "final", 1, ("zero", 1))


def discriminator_extent(size: int, n_layers: int) -> int:
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    return size + 2 - 4 + 1


# -- losses -----------------------------------------------------------------

def adv_loss_generator(logits_on_fake: Tensor) -> Tensor:
    """Least-squares generator loss: mean((logits - 1)^2)."""
    return tc.reduce_loss(logits_on_fake, 1.0, "mse")


def adv_loss_discriminator(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    if logits_real.shape != logits_fake.shape:
        raise ValueError(f"logit maps differ: {logits_real.shape} vs {logits_fake.shape}")
    real = tc.reduce_loss(logits_real, 1.0, "mse")
    fake = tc.reduce_loss(logits_fake, 0.0, "mse")
    return tc.scale(tc.add(real, fake), 0.5)


def cycle_loss(d: Tensor, d_cyc: Tensor, h: Tensor, h_cyc: Tensor) -> Tensor:
    return tc.add(tc.reduce_loss(d_cyc, d, "l1"), tc.reduce_loss(h_cyc, h, "l1"))


def full_objective(adv_r: Tensor, adv_a: Tensor, cyc: Tensor, lam: float) -> Tensor:
    """adv_r + adv_a + lam * cyc."""
    if not math.isfinite(lam) or lam < 0:
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    for t in (adv_r, adv_a, cyc):
        if not np.isfinite(t.data).all():
            raise tc.NonFiniteError("full_objective: non-finite term")
    total = tc.add(adv_r, adv_a)
    if lam == 0:
        return total
    return tc.add(total, tc.scale(cyc, lam))

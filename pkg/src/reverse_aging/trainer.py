"""Alternating generator/discriminator optimization of the cycle-GAN objective."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .models import (DiscriminatorSpec, GeneratorSpec, adv_loss_discriminator,
                     adv_loss_generator, build_discriminator, build_generator,
                     cycle_loss, discriminator_forward, full_objective,
                     generator_forward)
from .tensor_core import Tensor

log = logging.getLogger(__name__)

MAGIC = b"AGLN"
FORMAT_VERSION = 1
MODEL_NAMES = ("R", "A", "CD", "CH")


class TrainingAborted(RuntimeError):
    """A loss went non-finite; ``record`` holds the diagnostic values."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    lam: float = 10.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pool_size: int = 50
    iterations: int = 2000
    seed: int = 0
    checkpoint_every: int = 0
    smooth_window: int = 300
    smooth_stride: int = 10

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("generator", "discriminator")}
        d["generator"] = dict(self.generator.__dict__)
        d["discriminator"] = dict(self.discriminator.__dict__)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        gen = GeneratorSpec(**d.pop("generator"))
        disc = DiscriminatorSpec(**d.pop("discriminator"))
        return cls(generator=gen, discriminator=disc, **d)


# -- optimizer --------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def init(self, params):
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def step(self, params, grads: dict):
        """In-place update; ``grads`` maps parameter name to gradient array."""
        self.step_count += 1
        t = self.step_count
        dt = next(iter(params.values())).dtype.type
        b1, b2 = dt(self.beta1), dt(self.beta2)
        lr_t = dt(self.lr * math.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t))
        eps = dt(self.eps)
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr_t * m / (np.sqrt(v) + eps)


# -- image pool -------------------------------------------------------------

@dataclass
class ImagePool:
    """Buffer of past generator outputs shown to the discriminator."""
    capacity: int = 50
    stored: list = field(default_factory=list)

    def query(self, fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.capacity <= 0:
            return fake
        if len(self.stored) < self.capacity:
            self.stored.append(fake.copy())
            return fake
        if rng.random() < 0.5:
            return fake
        i = int(rng.integers(len(self.stored)))
        old = self.stored[i]
        self.stored[i] = fake.copy()
        return old

    def digest(self) -> str:
        h = hashlib.sha256()
        for img in self.stored:
            h.update(np.ascontiguousarray(img).tobytes())
        return h.hexdigest()


def pool_query(pool: ImagePool, fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return pool.query(fake, rng)


# -- state --------------------------------------------------------------------

@dataclass
class LossRecord:
    iter: int
    loss_g: float
    loss_cyc: float
    loss_d_h: float
    loss_d_d: float

    def as_row(self):
        return [self.iter, self.loss_g, self.loss_cyc, self.loss_d_h, self.loss_d_d]


@dataclass
class LossLog:
    records: list = field(default_factory=list)

    def append(self, rec: LossRecord):
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError(f"loss log iterations must increase: {rec.iter} after {self.records[-1].iter}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def series(self, key: str) -> list[tuple[int, float]]:
        return [(r.iter, getattr(r, key)) for r in self.records]


@dataclass
class TrainState:
    config: TrainConfig
    params: dict            # model name -> OrderedDict[str, Tensor]
    optimizers: dict        # "G" (R and A jointly), "CD", "CH" -> Adam
    pool_D: ImagePool
    pool_H: ImagePool
    rng: np.random.Generator
    iteration: int = 0

    @property
    def params_R(self):
        return self.params["R"]

    @property
    def params_A(self):
        return self.params["A"]

    @property
    def params_CD(self):
        return self.params["CD"]

    @property
    def params_CH(self):
        return self.params["CH"]


def _joint(params_r, params_a) -> OrderedDict:
    joint = OrderedDict((f"R/{k}", v) for k, v in params_r.items())
    joint.update((f"A/{k}", v) for k, v in params_a.items())
    return joint


def init_state(config: TrainConfig) -> TrainState:
    ss = np.random.SeedSequence(config.seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(5)]
    params = {
        "R": build_generator(config.generator, seeds[0], np.float32),
        "A": build_generator(config.generator, seeds[1], np.float32),
        "CD": build_discriminator(config.discriminator, seeds[2], np.float32),
        "CH": build_discriminator(config.discriminator, seeds[3], np.float32),
    }
    opts = {}
    for key, named in (("G", _joint(params["R"], params["A"])), ("CD", params["CD"]), ("CH", params["CH"])):
        opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
        opt.init(named)
        opts[key] = opt
    return TrainState(config, params, opts, ImagePool(config.pool_size), ImagePool(config.pool_size),
                      np.random.default_rng(seeds[4]))


def _detached(params) -> OrderedDict:
    return OrderedDict((k, v.detach()) for k, v in params.items())


def _named_grads(params, grads) -> dict:
    return {k: grads[t.node_id] for k, t in params.items()}


def train_step(state: TrainState, d: np.ndarray, h: np.ndarray) -> tuple[TrainState, LossRecord]:
    """One generator update followed by one update of each discriminator.

    ``d`` and ``h`` are (1,3,S,S) float arrays in [-1,1]. Losses are recorded
    from the forward passes that precede the parameter updates.
    """
    cfg = state.config
    real_d, real_h = Tensor(d.astype(np.float32)), Tensor(h.astype(np.float32))
    p = state.params
    try:
        fake_h = generator_forward(p["R"], real_d)
        fake_d = generator_forward(p["A"], real_h)
        rec_d = generator_forward(p["A"], fake_h)
        rec_h = generator_forward(p["R"], fake_d)
        adv_r = adv_loss_generator(discriminator_forward(_detached(p["CH"]), fake_h))
        adv_a = adv_loss_generator(discriminator_forward(_detached(p["CD"]), fake_d))
        cyc = cycle_loss(real_d, rec_d, real_h, rec_h)
        loss_g = full_objective(adv_r, adv_a, cyc, cfg.lam)
    except tc.NonFiniteError as exc:
        raise TrainingAborted(f"iteration {state.iteration + 1}: {exc}") from exc
    joint = _joint(p["R"], p["A"])
    g_grads = _named_grads(joint, tc.backward(loss_g, wrt=joint.values()))

    pooled_h = state.pool_H.query(fake_h.data, state.rng)
    pooled_d = state.pool_D.query(fake_d.data, state.rng)
    losses_d, d_grads = {}, {}
    for key, real, pooled in (("CH", real_h, pooled_h), ("CD", real_d, pooled_d)):
        params = p[key]
        try:
            loss = adv_loss_discriminator(discriminator_forward(params, real),
                                          discriminator_forward(params, Tensor(pooled)))
        except tc.NonFiniteError as exc:
            raise TrainingAborted(f"iteration {state.iteration + 1}: {exc}") from exc
        losses_d[key] = loss.item()
        d_grads[key] = _named_grads(params, tc.backward(loss, wrt=params.values()))

    record = LossRecord(state.iteration + 1, loss_g.item(), cyc.item(), losses_d["CH"], losses_d["CD"])
    if not all(math.isfinite(v) for v in record.as_row()):
        raise TrainingAborted(f"iteration {record.iter}: non-finite loss", record)
    state.optimizers["G"].step(joint, g_grads)
    state.optimizers["CH"].step(p["CH"], d_grads["CH"])
    state.optimizers["CD"].step(p["CD"], d_grads["CD"])
    state.iteration += 1
    return state, record


# -- loss smoothing -----------------------------------------------------------

def smooth_log(values: Sequence[float] | LossLog, window: int = 300, stride: int = 10,
               key: str = "loss_g", iters: Sequence[int] | None = None) -> list[tuple[int, float]]:
    """Trailing moving average, emitted at every ``stride``-th record.

    The point at record position i (1-based) averages records
    ``max(1, i - window + 1) .. i``.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if isinstance(values, LossLog):
        iters = [r.iter for r in values.records]
        values = [getattr(r, key) for r in values.records]
    values = [float(v) for v in values]
    if iters is None:
        iters = range(1, len(values) + 1)
    out = []
    for i in range(stride, len(values) + 1, stride):
        lo = max(0, i - window)
        out.append((int(iters[i - 1]), math.fsum(values[lo:i]) / (i - lo)))
    return out


def write_loss_csv(log_: LossLog, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "loss_g", "loss_cyc", "loss_d_h", "loss_d_d"])
        for r in log_.records:
            w.writerow([r.iter] + [repr(v) for v in r.as_row()[1:]])


def read_loss_csv(path) -> LossLog:
    out = LossLog()
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(LossRecord(int(row["iter"]), float(row["loss_g"]), float(row["loss_cyc"]),
                                  float(row["loss_d_h"]), float(row["loss_d_d"])))
    return out


def write_smoothed_csv(series, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "value"])
        for it, v in series:
            w.writerow([it, repr(v)])


# -- checkpoints --------------------------------------------------------------

def _state_tensors(state: TrainState) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for model in MODEL_NAMES:
        for name, t in state.params[model].items():
            out[f"params/{model}/{name}"] = t.data
    for key, opt in state.optimizers.items():
        for name in opt.m:
            out[f"adam/{key}/m/{name}"] = opt.m[name]
            out[f"adam/{key}/v/{name}"] = opt.v[name]
    for key, pool in (("D", state.pool_D), ("H", state.pool_H)):
        for i, img in enumerate(pool.stored):
            out[f"pool/{key}/{i}"] = img
    return out


def save_checkpoint(state: TrainState, path) -> None:
    tensors = _state_tensors(state)
    entries, offset = OrderedDict(), 0
    for name, arr in tensors.items():
        nbytes = arr.size * arr.itemsize
        entries[name] = {"shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                         "offset": offset, "nbytes": nbytes}
        offset += nbytes
    header = {
        "iteration": state.iteration,
        "seed": state.config.seed,
        "config": state.config.to_dict(),
        "rng": state.rng.bit_generator.state,
        "adam_steps": {k: o.step_count for k, o in state.optimizers.items()},
        "pool_digests": {"D": state.pool_D.digest(), "H": state.pool_H.digest()},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = memoryview(raw)[12 + hlen:]
    expected = sum(e["nbytes"] for e in header["tensors"].values())
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {expected}")
    arrays = {}
    for name, e in header["tensors"].items():
        dt = np.dtype("<" + e["dtype"]) if e["dtype"][0] in "fiu" else np.dtype(e["dtype"])
        if int(np.prod(e["shape"])) * dt.itemsize != e["nbytes"]:
            raise CheckpointError(f"{path}: tensor {name} shape {e['shape']} disagrees with its byte count")
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[name] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))

    config = TrainConfig.from_dict(header["config"])
    state = init_state(config)
    for model in MODEL_NAMES:
        for name, t in state.params[model].items():
            key = f"params/{model}/{name}"
            if key not in arrays or arrays[key].shape != t.shape:
                raise CheckpointError(f"{path}: missing or misshapen tensor {key}")
            t.data = arrays[key].copy()
    for key, opt in state.optimizers.items():
        opt.step_count = header["adam_steps"][key]
        for name in opt.m:
            opt.m[name] = arrays[f"adam/{key}/m/{name}"].copy()
            opt.v[name] = arrays[f"adam/{key}/v/{name}"].copy()
    for key, pool in (("D", state.pool_D), ("H", state.pool_H)):
        n = sum(1 for k in arrays if k.startswith(f"pool/{key}/"))
        pool.stored = [arrays[f"pool/{key}/{i}"].copy() for i in range(n)]
        if pool.digest() != header["pool_digests"][key]:
            raise CheckpointError(f"{path}: pool {key} digest mismatch")
    state.rng.bit_generator.state = header["rng"]
    state.iteration = header["iteration"]
    return state


# -- training loop ------------------------------------------------------------

def train(config: TrainConfig, domain_d: Sequence[np.ndarray], domain_h: Sequence[np.ndarray],
          state: TrainState | None = None, checkpoint_dir=None,
          on_record: Callable[[LossRecord], None] | None = None) -> tuple[TrainState, LossLog]:
    """Train until the state reaches iteration ``config.iterations``.

    ``domain_d``/``domain_h`` hold (3,S,S) tiles in [-1,1]; one tile per domain
    is drawn uniformly with replacement from the state's RNG each step.
    Checkpoints land in ``checkpoint_dir`` every ``checkpoint_every`` steps
    and once at the end.
    """
    if len(domain_d) == 0 or len(domain_h) == 0:
        raise ValueError("both domains need at least one tile")
    if state is None:
        state = init_state(config)
    losses = LossLog()
    target = config.iterations
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    while state.iteration < target:
        i = int(state.rng.integers(len(domain_d)))
        j = int(state.rng.integers(len(domain_h)))
        state, rec = train_step(state, domain_d[i][None], domain_h[j][None])
        losses.append(rec)
        if on_record is not None:
            on_record(rec)
        if ckpt_dir is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(state, ckpt_dir / f"ckpt_{state.iteration:06d}.agln")
        if state.iteration % 100 == 0:
            log.info("iter %d loss_g %.4f cyc %.4f d_h %.4f d_d %.4f", *rec.as_row())
    if ckpt_dir is not None:
        save_checkpoint(state, ckpt_dir / "final.agln")
    return state, losses

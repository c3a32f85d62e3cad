"""Gradient extraction and the moment-averaged training loop.

The optimizer is AdamW-style (decoupled weight decay), learning rate follows a
linear warmup into a cosine decay, and the global gradient norm is clipped. A
clip threshold of zero freezes the parameters entirely (dry-run mode); a loss
above the divergence threshold aborts with an error rather than continuing on
garbage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor
from ..structio import AtomicSystem
from .config import ModelConfig, TrainConfig
from .loss import EnergyStandardizer, Targets, multitask_loss
from .model import GraphCache, build_cache, forward, heads
from .params import ModelParams, init_params


def gradients(loss: Tensor, params: ModelParams) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; returns a fresh grad array per tensor."""
    params.zero_grads()
    loss.backward()
    return {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items()}


def lr_at(step: int, total_steps: int, tc: TrainConfig) -> float:
    """Linear warmup from warmup_factor * lr_max, then cosine to the floor."""
    warmup = max(int(math.ceil(tc.warmup_frac * total_steps)), 1)
    if step < warmup:
        frac = step / warmup
        return tc.lr_max * (tc.warmup_factor + (1.0 - tc.warmup_factor) * frac)
    span = max(total_steps - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    floor = tc.lr_max * tc.min_lr_factor
    return floor + 0.5 * (tc.lr_max - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainSample:
    """One structure with its cache prebuilt (static-geometry tasks only)."""
    system: AtomicSystem
    targets: Targets
    cache: GraphCache


def prepare_samples(data: list[tuple[AtomicSystem, Targets]], cfg: ModelConfig) -> list[TrainSample]:
    return [TrainSample(s, t, build_cache(s.numbers, s.positions, s.lattice, cfg))
            for s, t in data]


def make_supervised_loss(cfg: ModelConfig, tc: TrainConfig,
                         standardizer: EnergyStandardizer | None = None):
    """Batch loss for fixed-geometry supervision (energies, forces, properties,
    labels); each sample's head set follows its own targets."""

    def batch_loss(params: ModelParams, batch: list[TrainSample],
                   rng: np.random.Generator) -> Tensor:
        total = None
        for sample in batch:
            feats = forward(sample.cache, params, cfg)
            bundle = heads(feats, sample.cache, params, cfg, modes=sample.targets.modes())
            loss, _ = multitask_loss(bundle, sample.targets, tc.loss_weights, standardizer)
            total = loss if total is None else total + loss
        return total * (1.0 / len(batch))

    return batch_loss


def train(dataset: list, batch_loss, cfg: ModelConfig, tc: TrainConfig,
          params: ModelParams | None = None):
    """Generic loop: shuffle, batch, backprop, clip, update. Returns
    (params, history) where history has one row per epoch."""
    if not dataset:
        raise ValueError("empty dataset")
    if params is None:
        params = init_params(cfg, tc.seed)
    rng = np.random.default_rng(tc.seed)

    n = len(dataset)
    bs = min(tc.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * tc.epochs

    m = np.zeros(params.n_params)
    v = np.zeros(params.n_params)
    adam_t = 0
    history: list[dict] = []
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            batch = [dataset[i] for i in order[b * bs:(b + 1) * bs]]
            params.zero_grads()
            loss = batch_loss(params, batch, rng)
            value = loss.item()
            if not np.isfinite(value) or value > tc.divergence_threshold:
                raise RuntimeError(f"training diverged at epoch {epoch} step {b}: loss={value:g}")
            epoch_losses.append(value)
            loss.backward()
            lr = lr_at(step, total_steps, tc)
            step += 1
            if tc.clip_norm == 0.0 or lr == 0.0:
                continue
            grad = params.grad_flat()
            norm = float(np.linalg.norm(grad))
            if norm > tc.clip_norm:
                grad *= tc.clip_norm / norm
            adam_t += 1
            m = tc.beta1 * m + (1.0 - tc.beta1) * grad
            v = tc.beta2 * v + (1.0 - tc.beta2) * grad * grad
            mhat = m / (1.0 - tc.beta1 ** adam_t)
            vhat = v / (1.0 - tc.beta2 ** adam_t)
            theta = params.flat()
            theta -= lr * (mhat / (np.sqrt(vhat) + tc.eps) + tc.weight_decay * theta)
            params.set_flat(theta)
        history.append({"epoch": epoch, "loss": float(np.mean(epoch_losses)), "lr": lr})
    return params, history


def write_loss_csv(history: list[dict], path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,lr\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['loss']:.10g},{row['lr']:.10g}\n")

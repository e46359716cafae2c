"""Adam optimizer, learning-rate schedules, and the training loop.

The optimizer is plain Adam with L2 weight decay folded into the gradient
(``g + wd * p``) before the moment updates — the classic coupled form — with
a ``decoupled_weight_decay`` switch that instead subtracts ``lr * wd * p``
directly from the parameter after the Adam step. Batch-norm running
statistics are not parameters and are never decayed or stepped.

Two schedules cover the two training regimes:

* ``lr_multistep`` — piecewise-constant decay by 10x at fixed epoch
  milestones.
* ``lr_warmup_cosine`` — linear warmup from 0 to the base rate, a cosine
  decay down to a small floor, then a final linear ramp to exactly 0.

One call to ``train`` drives everything: P x K batch sampling, augmentation,
the three forward branches, the composite loss, a single joint backward
pass, and one Adam step over all parameters. All randomness flows from a
single seeded generator in a fixed draw order, so a (seed, config, dataset)
triple reproduces checkpoints and logs bitwise.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from geomattn.autodiff import Tensor
from geomattn.data import (
    AugmentConfig,
    ReidDataset,
    augment,
    make_rotation_sample,
    pk_sample_batch,
)
from geomattn.losses import LossWeights, NonFiniteLossError, overall_loss
from geomattn.model import ThreeBranchNet
from geomattn.serialization import save_checkpoint

__all__ = [
    "OptimConfig",
    "OptState",
    "TrainConfig",
    "adam_step",
    "lr_multistep",
    "lr_warmup_cosine",
    "lr_at_epoch",
    "preset",
    "train",
    "train_epoch",
]


@dataclass(frozen=True)
class OptimConfig:
    """Adam hyperparameters and the learning-rate schedule.

    ``schedule`` selects between ``"multistep"`` (decay 10x at each epoch in
    ``milestones``) and ``"warmup_cosine"`` (linear 0 -> lr0 over
    ``warmup_epochs``, cosine lr0 -> lr_floor until ``cosine_end_epoch``,
    then linear lr_floor -> 0 at ``epochs``).
    """

    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decoupled_weight_decay: bool = False
    schedule: str = "multistep"
    epochs: int = 80
    milestones: tuple[int, ...] = (20, 40, 60)
    warmup_epochs: int = 10
    cosine_end_epoch: int = 100
    lr_floor: float = 1e-7

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.schedule not in ("multistep", "warmup_cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if tuple(sorted(self.milestones)) != tuple(self.milestones):
            raise ValueError(f"milestones must be sorted, got {self.milestones}")
        if self.schedule == "warmup_cosine":
            if not (0 < self.warmup_epochs < self.cosine_end_epoch <= self.epochs):
                raise ValueError(
                    "need 0 < warmup_epochs < cosine_end_epoch <= epochs, got "
                    f"{self.warmup_epochs}, {self.cosine_end_epoch}, {self.epochs}"
                )
        if self.lr_floor < 0:
            raise ValueError(f"lr_floor must be non-negative, got {self.lr_floor}")


class OptState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, params: dict[str, Tensor]):
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict[str, Tensor], state: OptState, cfg: OptimConfig, lr: float) -> None:
    """One in-place Adam update over every parameter, reading ``p.grad``.

    Raises ``FloatingPointError`` naming the offending parameter if any
    gradient is non-finite; parameters are untouched in that case.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient buffer")
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.sum(~np.isfinite(p.grad)))
            raise FloatingPointError(
                f"non-finite gradient for {name!r}: {bad}/{p.grad.size} entries "
                f"(|g| max finite = {np.max(np.abs(p.grad[np.isfinite(p.grad)]), initial=0.0):.3e})"
            )
    state.t += 1
    t = state.t
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        if cfg.weight_decay != 0.0 and not cfg.decoupled_weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay != 0.0 and cfg.decoupled_weight_decay:
            p.data -= lr * cfg.weight_decay * p.data


def lr_multistep(epoch: int, cfg: OptimConfig) -> float:
    """lr0 scaled by 0.1 for every milestone at or before ``epoch``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    drops = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr0 * 0.1**drops


def lr_warmup_cosine(epoch: int, cfg: OptimConfig) -> float:
    """Linear warmup, cosine decay to the floor, final linear ramp to zero."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    w, c, e = cfg.warmup_epochs, cfg.cosine_end_epoch, cfg.epochs
    if epoch < w:
        return cfg.lr0 * epoch / w
    if epoch < c:
        frac = (epoch - w) / (c - w)
        return cfg.lr_floor + (cfg.lr0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
    if epoch >= e:
        return 0.0
    return cfg.lr_floor * (e - epoch) / (e - c)


def lr_at_epoch(epoch: int, cfg: OptimConfig) -> float:
    if cfg.schedule == "multistep":
        return lr_multistep(epoch, cfg)
    return lr_warmup_cosine(epoch, cfg)


@dataclass(frozen=True)
class TrainConfig:
    """End-to-end training recipe: batch shape, loss weights, optimizer."""

    P: int = 4
    K: int = 4
    tau: float = 0.5
    smoothing_eps: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at the end
    mixed_triplet_pool: bool = False  # reserved; not implemented

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError(f"need P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.mixed_triplet_pool:
            raise NotImplementedError(
                "mixed_triplet_pool (cross-branch triplet mining) is reserved "
                "and not implemented"
            )


_PRESETS = {
    # Large-regime recipe: long multistep run, moderate margin.
    "veri": TrainConfig(
        P=7,
        K=4,
        tau=0.5,
        optim=OptimConfig(schedule="multistep", epochs=80, milestones=(20, 40, 60)),
    ),
    # Large-regime recipe: warmup + cosine, wider margin, bigger batches.
    "vehicleid": TrainConfig(
        P=10,
        K=4,
        tau=0.7,
        optim=OptimConfig(
            schedule="warmup_cosine",
            epochs=120,
            warmup_epochs=10,
            cosine_end_epoch=100,
        ),
    ),
    # Desk-scale recipe sized for the synthetic sprite corpus: short run,
    # small batches, higher base rate so the tiny model converges quickly.
    "desk": TrainConfig(
        P=4,
        K=4,
        tau=0.5,
        optim=OptimConfig(
            lr0=1e-3,
            schedule="multistep",
            epochs=30,
            milestones=(15, 25),
        ),
    ),
}


def preset(name: str) -> TrainConfig:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return _PRESETS[name]


def _log_line(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_epoch(
    model: ThreeBranchNet,
    dataset: ReidDataset,
    cfg: TrainConfig,
    state: OptState,
    epoch: int,
    rng: np.random.Generator,
    log_fh=None,
) -> dict[str, float]:
    """One epoch: sample, augment, three branches, one loss, one Adam step.

    Returns the mean loss breakdown over the epoch's steps. Draw order per
    step is fixed (batch sampling, then augmentation, then rotation labels)
    so a seeded generator reproduces the run exactly.
    """
    lr = lr_at_epoch(epoch, cfg.optim)
    params = model.parameters()
    label_map = {ident: i for i, ident in enumerate(dataset.identities())}
    steps = max(1, len(dataset) // (cfg.P * cfg.K))
    totals: dict[str, float] = {}
    for step in range(steps):
        samples = pk_sample_batch(dataset, cfg.P, cfg.K, rng)
        images = np.stack([augment(s.image, rng, cfg.augment).data for s in samples])
        labels = np.array([label_map[s.identity] for s in samples])
        rotations = [make_rotation_sample(s, rng) for s in samples]
        rot_images = np.stack([r.image_rot.data for r in rotations])
        rot_labels = np.array([r.pseudo_label for r in rotations])

        x = Tensor(images, requires_grad=False)
        gb, shallow = model.global_branch_forward(x)
        ab, _ = model.attention_branch_forward(x, shallow)
        ssl_logits = model.ssl_branch_forward(Tensor(rot_images, requires_grad=False))

        try:
            total, parts = overall_loss(
                gb,
                ab,
                ssl_logits,
                labels,
                rot_labels,
                cfg.weights,
                cfg.tau,
                smoothing_eps=cfg.smoothing_eps,
            )
        except NonFiniteLossError:
            print(
                f"aborting at epoch {epoch} step {step}: non-finite loss on "
                f"identities {sorted(set(labels.tolist()))}",
                file=sys.stderr,
            )
            raise

        model.zero_grad()
        total.backward()
        adam_step(params, state, cfg.optim, lr)

        record = {
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "L_tri_gb": parts["tri_gb"],
            "L_sce_gb": parts["sce_gb"],
            "L_tri_ab": parts["tri_ab"],
            "L_sce_ab": parts["sce_ab"],
            "L_rot": parts["rot"],
            "total": parts["total"],
        }
        _log_line(log_fh, record)
        for key in ("L_tri_gb", "L_sce_gb", "L_tri_ab", "L_sce_ab", "L_rot", "total"):
            totals[key] = totals.get(key, 0.0) + record[key]
    return {k: v / steps for k, v in totals.items()}


def train(
    model: ThreeBranchNet,
    dataset: ReidDataset,
    cfg: TrainConfig,
    checkpoint_path=None,
    log_path=None,
) -> list[dict[str, float]]:
    """Full training run; returns the per-epoch mean loss breakdowns."""
    rng = np.random.default_rng(cfg.seed)
    state = OptState(model.parameters())
    history: list[dict[str, float]] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.optim.epochs):
            history.append(train_epoch(model, dataset, cfg, state, epoch, rng, log_fh))
            if (
                checkpoint_path is not None
                and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0
            ):
                save_checkpoint(checkpoint_path, model)
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return history

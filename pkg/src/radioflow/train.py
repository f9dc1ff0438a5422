"""Conditional flow-matching training with condition dropout, EMA and AdamW.

One optimizer step per mini-batch: draw x0 and t per sample, build x_t and
u_t, drop conditions to the null map with probability ``p_uncond``,
regress the network output onto u_t, clip, AdamW, then update the EMA
shadow. The learning rate follows a linear warmup and cosine decay over
the total step count.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import flow
from . import numeric as nm
from .metrics import evaluate
from .model import ModelConfig, ModelState, forward, save_checkpoint
from .sample import SampleConfig
from .scene import Dataset

logger = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    pass


class CheckpointCorruption(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 2e-3
    warmup_steps: int = 100
    ema_decay: float = 0.999
    use_ema: bool = True
    p_uncond: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0
    val_interval: int = 0  # epochs; 0 disables
    save_interval: int = 0  # epochs; 0 saves only at the end
    val_guidance: float = 1.5
    val_samples: int = 16
    kinetic_samples: int = 2

    def __post_init__(self):
        if not 0 <= self.p_uncond < 1:
            raise ValueError("p_uncond must lie in [0, 1)")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    val: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, step, nmse)
    kinetic: list[tuple[int, float]] = field(default_factory=list)  # (step, energy)

    def record(self, step: int, loss: float, lr: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("step indices must increase")
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def to_csv(self, path: Path | None = None) -> str:
        val_by_step = {s: v for _, s, v in self.val}
        rows = ["step,loss,lr,val_nmse"]
        for s, l, r in zip(self.steps, self.losses, self.lrs):
            v = val_by_step.get(s)
            rows.append(f"{s},{l!r},{r!r},{'' if v is None else repr(v)}")
        text = "\n".join(rows) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def read_log_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def lr_schedule(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear ramp 0 -> lr over ``warmup_steps``, then cosine to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = config.warmup_steps
    if warm > 0 and step < warm:
        return config.lr * step / warm
    span = max(total_steps - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def cfg_dropout(c: np.ndarray, p_uncond: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each sample's condition by the all-zeros null map with probability ``p_uncond``.

    A single (C, H, W) condition is treated as a batch of one.
    """
    if not 0 <= p_uncond < 1:
        raise ValueError("p_uncond must lie in [0, 1)")
    c = np.asarray(c, dtype=np.float64)
    single = c.ndim == 3
    batch = c[None] if single else c
    drop = rng.random(len(batch)) < p_uncond
    out = np.where(drop[:, None, None, None], 0.0, batch)
    return out[0] if single else out


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> None:
    """In place: ema <- decay * ema + (1 - decay) * params."""
    if ema.keys() != params.keys():
        raise CheckpointCorruption("EMA and model parameter names differ")
    for k, p in params.items():
        e = ema[k]
        if e.shape != p.shape:
            raise CheckpointCorruption(f"EMA shape {e.shape} != parameter shape {p.shape} for {k}")
        e *= decay
        e += (1.0 - decay) * p


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float,
    moments: AdamWState,
) -> None:
    """AdamW in place: bias-corrected moments, decoupled weight decay."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k}; step aborted")
    moments.t += 1
    c1 = 1.0 - BETA1**moments.t
    c2 = 1.0 - BETA2**moments.t
    for k, g in grads.items():
        m, v, p = moments.m[k], moments.v[k], params[k]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS) + lr * weight_decay * p


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def loss_and_grads(cfg: ModelConfig, params: dict[str, np.ndarray], sample: flow.FlowSample, cond):
    """CFM loss and its gradient with respect to every parameter."""
    leaves = {k: nm.Tensor(v, requires_grad=True) for k, v in params.items()}
    with nm.Tape() as tape:
        loss = flow.cfm_loss(lambda x, t, c: forward(cfg, leaves, x, t, c), sample, cond)
    g = tape.backward(loss, wrt=leaves.values())
    return loss.item(), {k: g[t] for k, t in leaves.items()}


@dataclass
class TrainResult:
    state: ModelState
    log: TrainLog
    checkpoint: Path | None = None


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: Path | None = None,
    val_dataset: Dataset | None = None,
    schedule: flow.PathSchedule = flow.PathSchedule(),
) -> TrainResult:
    """Run the full optimization loop; returns final parameters, EMA shadow and log.

    When ``out_dir`` is given, checkpoints go to ``out_dir/checkpoint.rfck``
    (written atomically) and the log to ``out_dir/train_log.csv``. A
    non-finite loss aborts with :class:`TrainingError`; the last checkpoint
    on disk stays intact.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if dataset.cond_channels != model_config.cond_channels:
        raise ValueError(
            f"dataset has {dataset.cond_channels} condition channels ({dataset.mode}); "
            f"model expects {model_config.cond_channels}"
        )
    model_config.check_spatial(*dataset.hw)
    tc = train_config
    order_rng, noise_rng, drop_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(tc.seed).spawn(3)
    )
    state = ModelState.create(model_config, seed=tc.seed, with_ema=tc.use_ema)
    moments = AdamWState.zeros_like(state.params)
    log = TrainLog()
    n = len(dataset)
    per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * per_epoch
    ckpt = Path(out_dir) / "checkpoint.rfck" if out_dir is not None else None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    x1_all = dataset.targets[:, None]
    step = 0
    for epoch in range(1, tc.epochs + 1):
        perm = order_rng.permutation(n)
        for b in range(per_epoch):
            idx = np.sort(perm[b * tc.batch_size : (b + 1) * tc.batch_size])
            c = dataset.conditions[idx]
            sample = flow.make_flow_sample(x1_all[idx], c, noise_rng, schedule)
            c_in = cfg_dropout(c, tc.p_uncond, drop_rng)
            loss, grads = loss_and_grads(model_config, state.params, sample, c_in)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}; last good checkpoint kept at {ckpt}")
            if tc.grad_clip:
                clip_global_norm(grads, tc.grad_clip)
            lr = lr_schedule(step, tc, total)
            optimizer_step(state.params, grads, lr, tc.weight_decay, moments)
            if state.ema is not None:
                ema_update(state.ema, state.params, tc.ema_decay)
            log.record(step, loss, lr)
            step += 1

        if tc.val_interval and val_dataset is not None and epoch % tc.val_interval == 0:
            _validate(state, val_dataset, tc, epoch, step - 1, log)
        if ckpt is not None and tc.save_interval and epoch % tc.save_interval == 0:
            save_checkpoint(state, ckpt, {"epoch": epoch, "step": step, "train": asdict(tc)})
        logger.info("epoch %d/%d loss %.5f", epoch, tc.epochs, np.mean(log.losses[-per_epoch:]))

    if ckpt is not None:
        save_checkpoint(state, ckpt, {"epoch": tc.epochs, "step": step, "train": asdict(tc)})
        log.to_csv(Path(out_dir) / "train_log.csv")
    return TrainResult(state, log, ckpt)


def _validate(state: ModelState, val: Dataset, tc: TrainConfig, epoch: int, step: int, log: TrainLog) -> None:
    sub = val.subset(range(min(tc.val_samples, len(val))))
    report = evaluate(state, sub, SampleConfig(steps=1, guidance=tc.val_guidance, use_ema=True, seed=0))
    val_nmse = report.aggregate()["nmse"]
    log.val.append((epoch, step, val_nmse))
    ke = flow.kinetic_energy(
        state.field(use_ema=True), sub.targets[:, None], sub.conditions, tc.kinetic_samples, np.random.default_rng(epoch)
    )
    log.kinetic.append((step, ke))
    logger.info("epoch %d val nmse %.5f kinetic %.3f", epoch, val_nmse, ke)

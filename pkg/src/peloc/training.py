"""Training engine: MAE loss, gradients, decoupled-weight-decay optimizer,
cosine schedule with linear warmup, early stopping, and the epoch loop.

The schedule's total step count is fixed up front as epochs x train-set size
(batch size 1), so early stopping never changes the learning-rate curve.
Validation MAE is measured in seconds, after denormalizing offsets.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import net
from .errors import NumericalError
from .ingest import SessionAudioCache
from .windowing import WindowPlan, denormalize_offset, materialize

PAPER_SEEDS = (42, 78, 123)


@dataclass
class TrainConfig:
    lr_peak: float = 1e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    epochs: int = 10
    batch_size: int = 1
    patience: int = 3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seeds: tuple[int, ...] = PAPER_SEEDS
    pretrain_steps: int = 1000
    pretrain_lr: float = 1e-3
    pretrain_window_s: float = 60.0

    def validate(self) -> None:
        if not 0 < self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size != 1:
            raise ValueError("batch size is fixed at 1")


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val_mae: float = math.inf
    epochs_without_improvement: int = 0


def mae_loss(pred: float, target: float) -> tuple[float, float]:
    """|pred - target| and its subgradient in pred (0 at the kink)."""
    diff = pred - target
    return abs(diff), float(np.sign(diff))


def gradients(model: net.BoundaryRegressor, example, target: float,
              pad_to=None) -> tuple[float, dict[str, torch.Tensor]]:
    """Reverse-mode gradients of the MAE loss for all trainable parameters."""
    params = net.trainable_parameters(model)
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    pred = model(example, pad_to=pad_to)
    loss = torch.abs(pred - torch.as_tensor(target, dtype=pred.dtype))
    loss.backward()
    grads = {}
    for name, p in params.items():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericalError("non-finite gradient", where=name)
        grads[name] = g
    loss_val = float(loss.detach())
    if not math.isfinite(loss_val):
        raise NumericalError("non-finite loss", where="loss")
    return loss_val, grads


def cosine_lr(step: float, total_steps: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr_peak over warmup_ratio * total_steps, then
    a cosine decay to 0 over the remaining steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_ratio * total_steps
    if step < warmup:
        return cfg.lr_peak * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: TrainState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected moment update plus decoupled decay:
    w <- w * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if cfg.weight_decay:
            p.mul_(1.0 - lr * cfg.weight_decay)
        p.sub_(lr * m_hat / (v_hat.sqrt() + cfg.eps))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae_seconds: float
    lr_last: float


@dataclass
class TrainResult:
    best_state: dict
    best_val_mae: float
    best_epoch: int
    history: list[EpochRecord]
    stopped_early: bool


class ExampleSet:
    """Window plans plus on-demand featurization through a session cache.

    Features pass through float16 unconditionally (harmless ~0.01 rounding
    on log energies) so that memoized and recomputed examples are
    bit-identical; examples are memoized up to a memory budget and
    recomputed from session audio past it."""

    def __init__(self, plans: list[WindowPlan], audio_paths: dict[str, str],
                 cache: SessionAudioCache | None = None, feature_cache_mb: float = 512.0):
        self.plans = plans
        self.audio_paths = audio_paths
        self.cache = cache or SessionAudioCache()
        self._budget = int(feature_cache_mb * 2 ** 20)
        self._used = 0
        self._memo: dict[int, object] = {}

    def __len__(self):
        return len(self.plans)

    def materialize(self, plan: WindowPlan):
        kept = self._memo.get(id(plan))
        if kept is None:
            example = materialize(plan, self.cache.get(self.audio_paths[plan.spec.session_id]))
            kept = copy.copy(example)
            kept.audio = example.audio.astype(np.float16)
            if self._used + kept.audio.nbytes <= self._budget:
                self._memo[id(plan)] = kept
                self._used += kept.audio.nbytes
        out = copy.copy(kept)
        out.audio = kept.audio.astype(np.float32)
        return out


def validation_mae_seconds(model: net.BoundaryRegressor, val_set: ExampleSet) -> float:
    """Mean |denormalized prediction - true timestamp| in seconds, eval mode,
    fixed iteration order."""
    errs = []
    for plan in val_set.plans:
        example = val_set.materialize(plan)
        pred = model.predict(example)
        t_hat = denormalize_offset(pred, plan.spec.t_start, plan.spec.duration_D)
        errs.append(abs(t_hat - plan.t_abs))
    return float(np.mean(errs))


def energy_statistics(mel: torch.Tensor, stride: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token band energies and the window's mean band-energy spectrum.
    Label-free: both are computable from frames alone."""
    n_mels = mel.shape[1]
    n_a = mel.shape[0] // stride
    band = mel[:n_a * stride].reshape(n_a, stride, n_mels).mean(dim=1)
    return band, band.mean(dim=0)


def pretrain_base(model: net.BoundaryRegressor, example_set: ExampleSet,
                  cfg: TrainConfig, seed: int = 0) -> None:
    """Self-supervised pretraining of the frozen-to-be base on frame-energy
    prediction, standing in for the large-scale pretraining of a production
    audio-language encoder. Throwaway probes regress each audio token's own
    band energies from its hidden state, and the window's mean band-energy
    spectrum from the EOS hidden state; the second target teaches the base
    to aggregate audio content at the readout token. No boundary labels are
    consulted; probes are discarded; head parameters are untouched."""
    if cfg.pretrain_steps <= 0 or len(example_set) == 0:
        return
    torch.manual_seed(seed)
    d, n_mels = model.cfg.d_model, model.cfg.n_mels
    probe_tok = torch.nn.Linear(d, n_mels)
    probe_eos = torch.nn.Linear(d, n_mels)
    params = {n: p for n, p in model.named_parameters() if not n.startswith("head.")}
    for tag, probe in (("ptok", probe_tok), ("peos", probe_eos)):
        params.update({f"{tag}.{n}": p for n, p in probe.named_parameters()})
    opt_state = TrainState()
    opt_cfg = TrainConfig(weight_decay=0.0)
    order = np.random.default_rng(seed).permutation(len(example_set))
    stride = model.cfg.audio_stride
    model.train()
    for step in range(cfg.pretrain_steps):
        plan = example_set.plans[order[step % len(order)]]
        example = example_set.materialize(plan)
        x, pad_mask, n_real = model._embed(example, None)
        for block in model.blocks:
            x = block(x, None)
        mel = (torch.as_tensor(example.audio) - net.MEL_MEAN) / net.MEL_STD
        band, summary = energy_statistics(mel, stride)
        n_a = band.shape[0]
        loss = (torch.mean((probe_tok(x[1:1 + n_a]) - band) ** 2)
                + torch.mean((probe_eos(x[n_real - 1]) - summary) ** 2))
        for p in params.values():
            p.grad = None
        loss.backward()
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                 for n, p in params.items()}
        adamw_step(params, grads, opt_state, lr=cfg.pretrain_lr, cfg=opt_cfg)
    model.zero_grad(set_to_none=True)


def train(model: net.BoundaryRegressor, train_set: ExampleSet, val_set: ExampleSet,
          cfg: TrainConfig, seed: int) -> TrainResult:
    """Epoch loop with per-epoch seeded shuffling, validation MAE in seconds,
    best-checkpoint tracking, and patience-based early stopping."""
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train/val example sets must be non-empty")
    torch.manual_seed(seed)
    total_steps = cfg.epochs * len(train_set)
    params = net.trainable_parameters(model)
    state = TrainState()
    history: list[EpochRecord] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_epoch = 0
    shuffler = np.random.default_rng(seed)
    stopped_early = False
    lr = 0.0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffler.permutation(len(train_set))
        losses = []
        for idx in order:
            plan = train_set.plans[idx]
            example = train_set.materialize(plan)
            lr = cosine_lr(state.step, total_steps, cfg)
            try:
                loss, grads = gradients(model, example, plan.target_offset)
            except NumericalError as e:
                e.last_good_state = best_state
                raise
            adamw_step(params, grads, state, lr, cfg)
            losses.append(loss)
        val_mae = validation_mae_seconds(model, val_set)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_mae, lr))
        if val_mae < state.best_val_mae:
            state.best_val_mae = val_mae
            state.epochs_without_improvement = 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_epoch = epoch
        else:
            state.epochs_without_improvement += 1
            if state.epochs_without_improvement >= cfg.patience:
                stopped_early = True
                break
    model.load_state_dict(best_state)
    return TrainResult(best_state=best_state, best_val_mae=state.best_val_mae,
                       best_epoch=best_epoch, history=history, stopped_early=stopped_early)

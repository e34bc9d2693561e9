"""Optimizer, learning-rate schedule and the pretraining / fine-tuning loops.

Every random choice made during training (epoch order, mix masks) is drawn
from a generator seeded by ``(seed, epoch, step, ...)`` so a run resumed
from a checkpoint sees exactly the same stream as an uninterrupted one.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_module_state, module_state
from .config import ModelConfig, TrainSchedule
from .data import StandardizationStats, resize_patch, standardize, stats_from_patches
from .errors import ConfigError, DataLoadError, NumericDivergenceError
from .masking import DEFAULT_MIX_RATIO, sample_mask
from .network import FloodPairClassifier, MixAutoencoder, MultiLabelClassifier
from .objectives import (
    MetricReport,
    ReconTargets,
    aggregate_macro_micro,
    binary_cross_entropy_logits,
    binary_metrics,
    multilabel_soft_margin_loss,
    weighted_dual_reconstruction_loss,
)
from .radiometry import compute_weight_map

log = logging.getLogger(__name__)

WEIGHT_MODES = ("sar", "uniform")
NO_DECAY_KEYS = ("pos_embed", "mask_token", "relative_position_bias_table")


# --------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, schedule: TrainSchedule) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to 0 at the last step."""
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    if step < warm:
        return schedule.peak_lr * step / warm
    progress = (step - warm) / (total - warm)
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(param: torch.Tensor, grad: torch.Tensor, m: torch.Tensor, v: torch.Tensor, t: int,
               lr: float, schedule: TrainSchedule, decay: bool = True) -> None:
    """One in-place AdamW update of ``param`` and its moments; ``t`` is 1-based."""
    b1, b2 = schedule.betas
    m.mul_(b1).add_(grad, alpha=1 - b1)
    v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    if decay and schedule.weight_decay:
        param.mul_(1 - lr * schedule.weight_decay)
    denom = (v / bc2).sqrt_().add_(schedule.eps)
    param.addcdiv_(m, denom, value=-lr / bc1)


class AdamW:
    """AdamW over named parameters with checkpointable moments."""

    def __init__(self, named_params, schedule: TrainSchedule, lr_scale: Optional[dict] = None):
        self.schedule = schedule
        self.params = {n: p for n, p in named_params if p.requires_grad}
        # per-parameter lr multipliers; absent names use 1
        self.lr_scale = dict(lr_scale or {})
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.t = 0

    @staticmethod
    def decays(name: str, p: torch.Tensor) -> bool:
        return p.ndim >= 2 and not any(k in name for k in NO_DECAY_KEYS)

    def step(self, lr: float) -> None:
        for n, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericDivergenceError(f"non-finite gradient for {n}; step aborted")
        self.t += 1
        with torch.no_grad():
            for n, p in self.params.items():
                if p.grad is None:
                    continue
                adamw_step(p, p.grad, self.m[n], self.v[n], self.t, lr * self.lr_scale.get(n, 1.0),
                           self.schedule, self.decays(n, p))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def load(self, m: dict, v: dict, t: int, prefix: str = "") -> None:
        with torch.no_grad():
            for n in self.params:
                if prefix + n in m:
                    self.m[n].copy_(torch.from_numpy(m[prefix + n]))
                    self.v[n].copy_(torch.from_numpy(v[prefix + n]))
        self.t = t


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed % 2**63)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def step_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed % 2**64, *keys])


# --------------------------------------------------------------------------
# reports


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunReport:
    kind: str
    epochs: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    source: str = field(default_factory=source_fingerprint)

    @property
    def losses(self) -> list:
        return [e["mean_loss"] for e in self.epochs]

    def summary(self) -> dict:
        return {"kind": self.kind, "epochs": len(self.epochs), "final_loss": self.losses[-1] if self.epochs else None,
                "metrics": self.metrics, "wall_time": self.wall_time, "config": self.config, "source": self.source}

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{self.kind}_epochs.jsonl", "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (out_dir / f"{self.kind}_summary.json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")


class CheckpointKeeper:
    """Write one checkpoint per epoch, keep the last ``keep`` plus the best."""

    def __init__(self, out_dir, keep: int = 2):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.keep = keep
        self.saved = []
        self.best = math.inf
        self.last_path = None

    def save(self, ck: Checkpoint, epoch: int, score: float) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = ck.save(self.out_dir / f"ckpt-epoch{epoch:04d}.swck")
        self.last_path = path
        self.saved.append(path)
        while len(self.saved) > self.keep:
            self.saved.pop(0).unlink(missing_ok=True)
        if score <= self.best:
            self.best = score
            ck.save(self.out_dir / "best.swck")
        ck.save(self.out_dir / "last.swck")


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainData:
    """Standardized inputs ``x`` (n, 2, S, S) and loss weights ``w`` (n, S, S)."""

    x: np.ndarray
    w: np.ndarray
    ids: list
    stats: StandardizationStats

    def __len__(self):
        return len(self.ids)


def prepare_pretrain_data(patches: Sequence, input_size: int, weight_mode: str = "sar",
                          stats: Optional[StandardizationStats] = None) -> PretrainData:
    """Resize, compute weight maps from raw dB, and standardize."""
    if weight_mode not in WEIGHT_MODES:
        raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}, got {weight_mode!r}")
    if not patches:
        raise DataLoadError("no pretraining patches")
    resized = [resize_patch(p, input_size) for p in patches]
    if stats is None:
        stats = stats_from_patches(resized)
    x = np.stack([standardize(p, stats) for p in resized])
    if weight_mode == "sar":
        w = np.stack([compute_weight_map(p) for p in resized]).astype(np.float32)
    else:
        w = np.ones((len(resized), input_size, input_size), dtype=np.float32)
    return PretrainData(x, w, [p.id for p in resized], stats)


def mix_batch(data: PretrainData, idx_a, idx_b, masks):
    """Mixed inputs and reconstruction targets for pairs ``(idx_a[j], idx_b[j])``.

    ``masks`` holds the unit grids.  Source ``a`` is shown at 0-units and is
    reconstructed at 1-units; ``b`` the other way round.
    """
    unit = torch.from_numpy(np.stack([m.unit_grid for m in masks]).astype(np.int64))
    pix = torch.from_numpy(np.stack([m.pixels() for m in masks]).astype(np.float32))
    xa = torch.from_numpy(data.x[idx_a])
    xb = torch.from_numpy(data.x[idx_b])
    wa = torch.from_numpy(data.w[idx_a])
    wb = torch.from_numpy(data.w[idx_b])
    sel = pix.unsqueeze(1).bool()
    mixed = torch.where(sel, xb, xa)
    # (1 - m) term: b hidden at 0-units; m term: a hidden at 1-units
    weights = torch.where(pix.bool(), wa, wb)
    targets = ReconTargets(t1=xb, t2=xa, mask=pix, weights=weights, units=masks[0].unit_grid.size)
    return mixed, unit, targets


def _pretrain_batches(n: int, batch: int, seed: int, epoch: int):
    order = step_rng(seed, epoch).permutation(n)
    steps = n // batch
    for k in range(steps):
        yield k, order[k * batch:(k + 1) * batch]


def _pretrain_loss(model, data, idx, seed, tag, ratio, cfg):
    half = len(idx) // 2
    masks = [sample_mask(cfg.mask_grid, ratio, step_rng(seed, *tag, j), cfg.mask_unit) for j in range(half)]
    mixed, unit, targets = mix_batch(data, idx[:half], idx[half:2 * half], masks)
    pred_a, pred_b = model(mixed, unit)
    return weighted_dual_reconstruction_loss(pred_b, pred_a, targets)


def validation_loss(model, data: PretrainData, cfg: ModelConfig, seed: int, batch: int,
                    ratio: float = DEFAULT_MIX_RATIO) -> float:
    """Mean reconstruction loss over fixed, seed-determined pairs and masks."""
    model.eval()
    losses = []
    with torch.no_grad():
        for k, idx in _pretrain_batches(len(data), batch, seed, 2**31):
            losses.append(float(_pretrain_loss(model, data, idx, seed, (2**31, k), ratio, cfg)))
    model.train()
    return float(np.mean(losses)) if losses else math.nan


def pretrain(data: PretrainData, cfg: ModelConfig, schedule: TrainSchedule, *,
             val_data: Optional[PretrainData] = None, out_dir=None, resume: Optional[Checkpoint] = None,
             stop_epoch: Optional[int] = None, deterministic: bool = True, ratio: float = DEFAULT_MIX_RATIO,
             weight_mode: str = "sar", on_epoch: Optional[Callable] = None):
    """Mixed-autoencoder pretraining with the weighted dual-reconstruction loss.

    ``schedule.steps_per_epoch`` is derived from the data (``len(data) //
    batch_size``).  ``stop_epoch`` ends the run early without altering the
    learning-rate schedule, which makes split runs possible together with
    ``resume``.

    Returns:
        (Checkpoint, RunReport)
    """
    if schedule.batch_size < 2 or schedule.batch_size % 2:
        raise ConfigError("pretraining batch size must be even (two images per mixed sample)")
    steps = len(data) // schedule.batch_size
    if steps < 1:
        raise DataLoadError(f"{len(data)} patches cannot fill one batch of {schedule.batch_size}")
    schedule = schedule.replace(steps_per_epoch=steps)
    set_determinism(schedule.seed, deterministic)
    model = MixAutoencoder(cfg)
    opt = AdamW(model.named_parameters(), schedule)
    start_step = 0
    if resume is not None:
        load_module_state(model, resume.params)
        opt.load(resume.adam_m, resume.adam_v, resume.meta.get("adam_t", resume.step))
        start_step = resume.step
    keeper = CheckpointKeeper(out_dir)
    report = RunReport("pretrain", config={"model": cfg.to_json(), "schedule": schedule.to_json(),
                                           "weight_mode": weight_mode, "mix_ratio": ratio})
    t0 = time.perf_counter()
    end_epoch = schedule.total_epochs if stop_epoch is None else stop_epoch
    seed = schedule.seed
    model.train()
    for epoch in range(start_step // steps, end_epoch):
        losses = []
        for k, idx in _pretrain_batches(len(data), schedule.batch_size, seed, epoch):
            step = epoch * steps + k
            try:
                loss = _pretrain_loss(model, data, idx, seed, (epoch, k), ratio, cfg)
                if not torch.isfinite(loss):
                    raise NumericDivergenceError(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr_at(step, schedule))
            except NumericDivergenceError as exc:
                raise NumericDivergenceError(f"step {step}: {exc}", keeper.last_path) from exc
            losses.append(loss.item())
        rec = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr_at((epoch + 1) * steps, schedule)}
        if val_data is not None and len(val_data) >= schedule.batch_size:
            rec["val_loss"] = validation_loss(model, val_data, cfg, seed, schedule.batch_size, ratio)
        report.epochs.append(rec)
        log.info("pretrain epoch %d loss %.5f", epoch, rec["mean_loss"])
        ck = _snapshot(model, opt, cfg, (epoch + 1) * steps, seed)
        keeper.save(ck, epoch, rec.get("val_loss", rec["mean_loss"]))
        if on_epoch is not None:
            on_epoch(rec)
    report.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        report.write(out_dir)
    return _snapshot(model, opt, cfg, end_epoch * steps, seed), report


def _snapshot(model, opt: AdamW, cfg, step, seed) -> Checkpoint:
    return Checkpoint(
        cfg, module_state(model),
        {n: t.detach().numpy().copy() for n, t in opt.m.items()},
        {n: t.detach().numpy().copy() for n, t in opt.v.items()},
        {"step": int(step), "seed": int(seed), "adam_t": int(opt.t)},
    )


# --------------------------------------------------------------------------
# fine-tuning


def _init_encoder(model, checkpoint: Optional[Checkpoint]) -> None:
    if checkpoint is None:
        return
    enc = {k[len("encoder."):]: v for k, v in checkpoint.params.items() if k.startswith("encoder.")}
    if not enc:
        raise ConfigError("checkpoint holds no encoder parameters")
    load_module_state(model.encoder, enc)


def _run_finetune(model, loss_fn, n, schedule: TrainSchedule, head_only: bool, kind: str,
                  cfg, out_dir, on_epoch=None):
    if head_only:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    steps = max(1, math.ceil(n / schedule.batch_size))
    schedule = schedule.replace(steps_per_epoch=steps)
    head_scale = {n: schedule.head_lr_scale for n, _ in model.named_parameters() if n.startswith("head.")}
    opt = AdamW(model.named_parameters(), schedule, head_scale)
    keeper = CheckpointKeeper(out_dir)
    report = RunReport(kind, config={"model": cfg.to_json(), "schedule": schedule.to_json(), "head_only": head_only})
    t0 = time.perf_counter()
    model.train()
    for epoch in range(schedule.total_epochs):
        order = step_rng(schedule.seed, epoch).permutation(n)
        losses = []
        for k in range(steps):
            idx = np.sort(order[k * schedule.batch_size:(k + 1) * schedule.batch_size])
            loss = loss_fn(model, idx)
            if not torch.isfinite(loss):
                raise NumericDivergenceError(f"non-finite {kind} loss at epoch {epoch}", keeper.last_path)
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(epoch * steps + k, schedule))
            losses.append(loss.item())
        rec = {"epoch": epoch, "mean_loss": float(np.mean(losses))}
        report.epochs.append(rec)
        keeper.save(_snapshot(model, opt, cfg, (epoch + 1) * steps, schedule.seed), epoch, rec["mean_loss"])
        if on_epoch is not None:
            on_epoch(rec)
    report.wall_time = time.perf_counter() - t0
    return _snapshot(model, opt, cfg, schedule.total_steps, schedule.seed), report


@dataclass
class LabeledData:
    x: np.ndarray  # (n, 2, S, S) standardized
    y: np.ndarray  # (n, K) 0/1

    def __len__(self):
        return len(self.x)


def prepare_labeled(patches, labels, cfg: ModelConfig, stats: StandardizationStats) -> LabeledData:
    y = np.zeros((len(patches), cfg.label_count), dtype=np.float32)
    for i, lab in enumerate(labels):
        lab = list(lab or [])
        if any(l >= cfg.label_count for l in lab):
            raise ConfigError(f"label index {max(lab)} >= label_count {cfg.label_count}")
        y[i, lab] = 1
    x = np.stack([standardize(resize_patch(p, cfg.input_size), stats) for p in patches])
    return LabeledData(x, y)


def predict_multilabel(model: MultiLabelClassifier, data: LabeledData, batch: int = 32) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(data), batch):
            out.append(torch.sigmoid(model(torch.from_numpy(data.x[s:s + batch]))).double().numpy())
    model.train()
    return np.concatenate(out)


def evaluate_multilabel(model, data: LabeledData, batch: int = 32) -> MetricReport:
    return aggregate_macro_micro(predict_multilabel(model, data, batch), data.y)


def finetune_classify(checkpoint: Optional[Checkpoint], train: LabeledData, test: LabeledData, cfg: ModelConfig,
                      schedule: TrainSchedule, *, head_only: bool = False, deterministic: bool = True,
                      out_dir=None, on_epoch=None):
    """Fine-tune encoder + linear head with the multi-label soft margin loss.

    ``checkpoint=None`` trains from random initialization (the control arm).

    Returns:
        (Checkpoint, MetricReport, RunReport)
    """
    if len(train) == 0:
        raise DataLoadError("empty classification training set")
    if train.y.shape[1] != cfg.label_count:
        raise ConfigError(f"data has {train.y.shape[1]} labels, model expects {cfg.label_count}")
    set_determinism(schedule.seed, deterministic)
    model = MultiLabelClassifier(cfg)
    _init_encoder(model, checkpoint)

    def loss_fn(m, idx):
        return multilabel_soft_margin_loss(m(torch.from_numpy(train.x[idx])), torch.from_numpy(train.y[idx]))

    ck, report = _run_finetune(model, loss_fn, len(train), schedule, head_only, "classify", cfg, out_dir, on_epoch)
    metrics = evaluate_multilabel(model, test)
    report.metrics = metrics.to_json()
    if out_dir is not None:
        report.write(out_dir)
    return ck, metrics, report


@dataclass
class PairData:
    ref: np.ndarray  # (n, 2, 4S, 4S)
    qry: np.ndarray
    y: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.y)


def prepare_pairs(pairs, stats: Optional[StandardizationStats] = None):
    """Standardize flood pairs; statistics default to the pairs' own pixels."""
    if not pairs:
        raise DataLoadError("empty flood pair set")
    if stats is None:
        seen, uniq = set(), []
        for p in pairs:
            for patch in (p.reference, p.query):
                if patch.id not in seen:
                    seen.add(patch.id)
                    uniq.append(patch)
        stats = stats_from_patches(uniq)
    ref = np.stack([standardize(p.reference, stats) for p in pairs])
    qry = np.stack([standardize(p.query, stats) for p in pairs])
    return PairData(ref, qry, np.array([p.label for p in pairs], dtype=np.int64)), stats


def predict_flood(model: FloodPairClassifier, data: PairData, batch: int = 4) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(data), batch):
            logits = model(torch.from_numpy(data.ref[s:s + batch]), torch.from_numpy(data.qry[s:s + batch]))
            out.append(logits.double().numpy())
    model.train()
    return np.concatenate(out)


def evaluate_flood(model, data: PairData, batch: int = 4) -> MetricReport:
    logits = predict_flood(model, data, batch)
    pred = (logits[:, 1] > logits[:, 0]).astype(int)
    return MetricReport(binary=binary_metrics(pred, data.y))


def finetune_flood(checkpoint: Optional[Checkpoint], train: PairData, test: PairData, cfg: ModelConfig,
                   schedule: TrainSchedule, *, head_only: bool = False, deterministic: bool = True,
                   out_dir=None, on_epoch=None):
    """Fine-tune the pairwise flood classifier with softmax cross-entropy.

    Returns:
        (Checkpoint, MetricReport, RunReport)
    """
    if len(train) == 0:
        raise DataLoadError("empty flood pair set")
    set_determinism(schedule.seed, deterministic)
    model = FloodPairClassifier(cfg)
    _init_encoder(model, checkpoint)

    def loss_fn(m, idx):
        logits = m(torch.from_numpy(train.ref[idx]), torch.from_numpy(train.qry[idx]))
        return binary_cross_entropy_logits(logits, torch.from_numpy(train.y[idx]))

    ck, report = _run_finetune(model, loss_fn, len(train), schedule, head_only, "flood", cfg, out_dir, on_epoch)
    metrics = evaluate_flood(model, test)
    report.metrics = metrics.to_json()
    if out_dir is not None:
        report.write(out_dir)
    return ck, metrics, report

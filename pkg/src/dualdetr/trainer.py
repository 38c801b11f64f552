"""Optimization loop, parameter EMA and windowed inference."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import VideoRecord, Window, make_windows
from .errors import MatchingError, TrainingError
from .evaluation import Detections, EvalReport, assemble_predictions, det_map, seg_map
from .losses import Targets, total_loss
from .model import DualDETR

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_model(cfg: RunConfig) -> DualDETR:
    seed_everything(cfg.train.seed)
    return DualDETR(cfg).to(_DTYPES[cfg.train.dtype])


class ModelEMA:
    """Exponential moving average of parameters with a warm-up ramp on the decay."""

    def __init__(self, model: torch.nn.Module, decay: float = 0.999, tau: float = 2000.0):
        self.ema = copy.deepcopy(model).eval()
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.decay, self.tau, self.updates = decay, tau, 0

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        self.updates += 1
        d = self.decay * (1 - math.exp(-self.updates / self.tau))
        for e, p in zip(self.ema.parameters(), model.parameters()):
            e.mul_(d).add_(p.detach(), alpha=1 - d)


def collate(windows: Sequence[Window], dtype=torch.float32):
    x = torch.from_numpy(np.stack([w.features for w in windows])).to(dtype)
    mask = torch.from_numpy(np.stack([w.mask for w in windows]))
    targets = [Targets(torch.from_numpy(w.intervals).to(dtype), torch.from_numpy(w.labels))
               for w in windows]
    return x, (None if mask.all() else mask), targets


@dataclass
class TrainResult:
    model: DualDETR
    ema_model: DualDETR | None
    log: list[dict] = field(default_factory=list)

    @property
    def eval_model(self) -> DualDETR:
        return self.ema_model if self.ema_model is not None else self.model


def training_windows(videos: Iterable[VideoRecord], cfg: RunConfig) -> list[Window]:
    wins = []
    for v in videos:
        for w in make_windows(v, cfg.data.window, cfg.data.train_stride_ratio,
                              cfg.model.num_classes):
            if len(w.labels) > cfg.model.num_queries:
                log.warning("dropping window %s@%d: %d actions exceed %d queries",
                            w.video_id, w.start, len(w.labels), cfg.model.num_queries)
                continue
            wins.append(w)
    return wins


def epoch_lr(cfg: RunConfig, epoch: int) -> float:
    t = cfg.train
    if epoch >= t.epochs - t.lr_drop_epochs:
        return t.lr * t.lr_drop_factor
    return t.lr


def train(videos: Sequence[VideoRecord], cfg: RunConfig, model: DualDETR | None = None,
          epochs: int | None = None, on_epoch=None) -> TrainResult:
    """Train on all windows of ``videos``; deterministic for a fixed seed."""
    cfg.validate(check_paths=False)
    t = cfg.train
    dtype = _DTYPES[t.dtype]
    model = model or build_model(cfg)
    model.train()
    windows = training_windows(videos, cfg)
    if not windows:
        raise TrainingError("no training windows")
    opt = torch.optim.AdamW(model.parameters(), lr=t.lr, weight_decay=t.weight_decay)
    ema = ModelEMA(model, t.ema_decay) if t.ema else None
    rng = np.random.default_rng(t.seed)
    history = []
    n_epochs = t.epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        lr = epoch_lr(cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(windows))
        sums = {"total": 0.0, "cls": 0.0, "iou": 0.0, "l1": 0.0}
        n_batches = 0
        started = time.perf_counter()
        for b0 in range(0, len(order), t.batch_size):
            batch = [windows[i] for i in order[b0:b0 + t.batch_size]]
            x, mask, targets = collate(batch, dtype)
            out = model(x, mask)
            names = ", ".join(f"{w.video_id}@{w.start}" for w in batch)
            try:
                loss = total_loss(out.layers, out.enc_detections, targets, cfg.loss)
            except MatchingError as exc:
                raise TrainingError(
                    f"matching failed at epoch {epoch + 1}, windows [{names}]: {exc}") from exc
            if not torch.isfinite(loss.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, windows [{names}]: {loss.per_layer}")
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            if t.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), t.clip_norm)
            opt.step()
            if ema is not None:
                ema.update(model)
            for k, v in loss.as_dict().items():
                sums[k] += v
            n_batches += 1
        record = {"epoch": epoch + 1, "lr": lr,
                  **{k: v / n_batches for k, v in sums.items()},
                  "seconds": time.perf_counter() - started}
        history.append(record)
        log.info("epoch %d loss %.4f (cls %.4f iou %.4f l1 %.4f) %.1fs", record["epoch"],
                 record["total"], record["cls"], record["iou"], record["l1"], record["seconds"])
        if on_epoch is not None:
            on_epoch(record)
    model.eval()
    return TrainResult(model, ema.ema if ema else None, history)


@torch.no_grad()
def predict_windows(model: DualDETR, windows: Sequence[Window], batch_size: int = 16
                    ) -> list[tuple[str, float, float, Detections]]:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for b0 in range(0, len(windows), batch_size):
        batch = windows[b0:b0 + batch_size]
        x, mask, _ = collate(batch, dtype)
        final = model(x, mask).final
        for k, w in enumerate(batch):
            out.append((w.video_id, w.offset_seconds, w.span_seconds,
                        Detections(final.intervals[k].double().numpy(),
                                   final.scores[k].double().numpy())))
    return out


def predict_videos(model: DualDETR, videos: Sequence[VideoRecord], cfg: RunConfig,
                   stride_ratio: float | None = None) -> dict[str, Detections]:
    ratio = cfg.data.infer_stride_ratio if stride_ratio is None else stride_ratio
    windows = [w for v in videos for w in make_windows(v, cfg.data.window, ratio)]
    return assemble_predictions(predict_windows(model, windows, cfg.train.batch_size))


def evaluate(model: DualDETR, videos: Sequence[VideoRecord], cfg: RunConfig) -> EvalReport:
    preds = predict_videos(model, videos, cfg)
    gts = {v.video_id: v.annotations for v in videos}
    report = det_map(preds, gts, cfg.model.num_classes)
    frame_rate = 1.0 / videos[0].snippet_stride_seconds
    report.seg_map = seg_map(preds, gts, {v.video_id: v.duration_seconds for v in videos},
                             frame_rate, cfg.model.num_classes)
    return report

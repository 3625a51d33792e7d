"""Batch assembly, the optimisation loop, early stopping and resumable checkpoints."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, dump_config, loads_config
from .engine import AdamState, adam_step, clip_global_norm, load_checkpoint, resolve_dtype, save_checkpoint
from .errors import NonFiniteError
from .losses import TERMS, LossBreakdown, batch_losses
from .model import DesignModel, Example, build_model

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", *TERMS, "total", "val_total", "lr")
MAX_CONSECUTIVE_SKIPS = 3


def make_batches(dataset: Sequence, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True) -> list[list]:
    """Split ``dataset`` into batches; the order is a deterministic function of ``(seed, epoch)``.

    The final partial batch is kept.
    """
    if len(dataset) == 0:
        raise ValueError("make_batches: empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    return [[dataset[i] for i in order[s : s + batch_size]] for s in range(0, len(dataset), batch_size)]


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


@dataclass
class EpochResult:
    mean: dict[str, float]
    batch_totals: list[float]
    skipped: int
    grad_norms: list[float]


def _mean_breakdowns(rows: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in (*TERMS, "total")}


def train_epoch(
    model: DesignModel,
    batches: Sequence[Sequence[Example]],
    cfg: RunConfig,
    state: AdamState,
    epoch: int = 0,
) -> EpochResult:
    """One pass over ``batches``: forward, loss, backward, clip, Adam step.

    Dropout is active. A batch with a non-finite loss is skipped; three in a
    row abort the epoch with :class:`NonFiniteError`.
    """
    lr = cfg.train.lr_at(epoch)
    params = [p for p in model.parameters()]
    rows, totals, norms = [], [], []
    skipped = consecutive = 0
    for b, batch in enumerate(batches):
        torch.manual_seed(_batch_seed(cfg.train.seed, epoch, b))
        outputs = [model(ex, train=True) for ex in batch]
        try:
            loss = batch_losses(model, batch, outputs, cfg.loss)
        except NonFiniteError as exc:
            skipped += 1
            consecutive += 1
            log.warning("epoch %d batch %d skipped: %s", epoch, b, exc)
            if consecutive >= MAX_CONSECUTIVE_SKIPS:
                raise NonFiniteError(f"{MAX_CONSECUTIVE_SKIPS} consecutive non-finite batches; aborting") from exc
            continue
        consecutive = 0
        grads = torch.autograd.grad(loss.total, params, allow_unused=True)
        grads, pre = clip_global_norm(grads, cfg.train.clip)
        adam_step(params, grads, state, lr)
        row = loss.as_floats()
        rows.append(row)
        totals.append(row["total"])
        norms.append(pre)
    if not rows:
        raise NonFiniteError(f"epoch {epoch}: every batch was skipped")
    return EpochResult(_mean_breakdowns(rows), totals, skipped, norms)


@torch.no_grad()
def evaluate_loss(model: DesignModel, examples: Sequence[Example], cfg: RunConfig) -> dict[str, float]:
    """Mean batch loss with dropout off, batches in dataset order."""
    rows = []
    for batch in make_batches(examples, cfg.train.batch_size, 0, shuffle=False):
        outputs = [model(ex, train=False) for ex in batch]
        rows.append(batch_losses(model, batch, outputs, cfg.loss).as_floats())
    return _mean_breakdowns(rows)


class EarlyStopping:
    """Tracks the best value seen; ``step`` returns True once ``patience`` epochs pass without improvement."""

    def __init__(self, patience: int, best: float = math.inf, bad_epochs: int = 0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = best
        self.bad_epochs = bad_epochs

    def step(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def model_tensors(model: DesignModel) -> dict[str, torch.Tensor]:
    return {f"param/{k}": v for k, v in model.state_dict().items()}


def save_model(path, model: DesignModel, cfg: RunConfig, extra: dict | None = None, state: AdamState | None = None) -> None:
    tensors = model_tensors(model)
    meta = {"config": dump_config(cfg), "precision": cfg.train.precision, **(extra or {})}
    if state is not None and state.m:
        for k, (m, v) in enumerate(zip(state.m, state.v)):
            tensors[f"adam_m/{k}"] = m
            tensors[f"adam_v/{k}"] = v
        meta["adam_step"] = state.step
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[DesignModel, RunConfig, dict, AdamState]:
    """Rebuild the model (and optimiser state, if stored) from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    cfg = loads_config(meta["config"])
    dtype = resolve_dtype(cfg.train.precision)
    model = build_model(cfg.model, cfg.train.dropout, cfg.train.seed, dtype)
    sd = {k[len("param/") :]: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(sd)
    state = AdamState()
    n = sum(1 for k in tensors if k.startswith("adam_m/"))
    if n:
        state.m = [torch.as_tensor(tensors[f"adam_m/{k}"], dtype=dtype) for k in range(n)]
        state.v = [torch.as_tensor(tensors[f"adam_v/{k}"], dtype=dtype) for k in range(n)]
        state.step = int(meta["adam_step"])
    return model, cfg, meta, state


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    model: DesignModel  # parameters restored to the best validation epoch
    best_epoch: int
    best_val: float
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOG_COLUMNS})


def fit(
    model: DesignModel,
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    cfg: RunConfig,
    out_dir=None,
    resume_from=None,
    stop_after: int | None = None,
    callback=None,
) -> FitResult:
    """Train with per-epoch lr decay and early stopping on the validation total.

    With ``out_dir`` set, writes ``last.ckpt`` (resumable), ``best.ckpt``,
    ``history.csv`` and ``config.ini`` after every epoch. ``stop_after``
    interrupts after that many epochs in this call (used to exercise resume).
    ``callback(epoch, model, row)`` may return True to stop.
    """
    if not train_set or not val_set:
        raise ValueError("fit needs non-empty training and validation sets")
    tc = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")

    state = AdamState()
    history: list[dict] = []
    stopper = EarlyStopping(tc.patience)
    best_epoch, best_params = -1, copy.deepcopy(model.state_dict())
    start = 0
    if resume_from is not None:
        loaded, _, meta, state = load_model(resume_from)
        model.load_state_dict(loaded.state_dict())
        history = meta["history"]
        start = meta["epoch"] + 1
        stopper = EarlyStopping(tc.patience, meta["best_val"], meta["bad_epochs"])
        best_epoch = meta["best_epoch"]
        best_path = Path(resume_from).with_name("best.ckpt")
        if best_path.exists():
            best_params = load_model(best_path)[0].state_dict()

    stopped = False
    ran = 0
    for epoch in range(start, tc.max_epochs):
        if stop_after is not None and ran >= stop_after:
            break
        batches = make_batches(train_set, tc.batch_size, tc.seed, epoch)
        res = train_epoch(model, batches, cfg, state, epoch)
        val = evaluate_loss(model, val_set, cfg)
        row = {"epoch": epoch, **res.mean, "val_total": val["total"], "lr": tc.lr_at(epoch)}
        history.append(row)
        ran += 1
        stop = stopper.step(val["total"])
        if stopper.improved:
            best_epoch = epoch
            best_params = copy.deepcopy(model.state_dict())
        log.info("epoch %d loss %.4f val %.4f lr %.3e", epoch, res.mean["total"], val["total"], row["lr"])
        if out is not None:
            meta = {
                "epoch": epoch,
                "history": history,
                "best_val": stopper.best,
                "bad_epochs": stopper.bad_epochs,
                "best_epoch": best_epoch,
            }
            save_model(out / "last.ckpt", model, cfg, meta, state)
            if stopper.improved:
                save_model(out / "best.ckpt", model, cfg, {"epoch": epoch})
            _write_log(out / "history.csv", history)
        if stop:
            stopped = True
            break
        if callback is not None and callback(epoch, model, row):
            break

    if out is not None and not history:
        save_model(out / "best.ckpt", model, cfg, {"epoch": -1})
        _write_log(out / "history.csv", history)
    model.load_state_dict(best_params)
    return FitResult(model, best_epoch, stopper.best, history, stopped)

"""Desk-scale learning runs: memorising a few complexes and generalising to held-out seeds."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .engine import resolve_dtype
from .metrics import auroc
from .model import DesignModel, Example, build_model, prepare_example
from .synthetic import SynthParams, generate_dataset
from .training import fit

log = logging.getLogger(__name__)


@torch.no_grad()
def design_scores(model: DesignModel, examples: Sequence[Example]) -> tuple[float, float]:
    """(argmax AAR, contact AUROC) pooled over every CDR position, dropout off."""
    hits, probs, labels = [], [], []
    for ex in examples:
        out = model(ex, train=False)
        hits.append(out.logits.argmax(dim=1).numpy() == ex.true_seq)
        probs.append(out.contact_probs.double().numpy())
        labels.append(ex.labels)
    return float(np.concatenate(hits).mean()), auroc(np.concatenate(probs), np.concatenate(labels))


@dataclass
class RunSummary:
    epochs: int
    aar: float
    auroc: float
    seconds: float
    trace: list[tuple[int, float, float]] = field(default_factory=list)


def overfit_run(
    n_complexes: int = 4,
    max_epochs: int = 300,
    seed: int = 0,
    precision: str = "float32",
    aar_target: float = 0.95,
    auroc_target: float = 0.99,
    params: SynthParams | None = None,
) -> RunSummary:
    """Train on ``n_complexes`` and score the training set after each epoch.

    Stops once both targets are exceeded. Early stopping is disabled; the
    training set doubles as the validation set.
    """
    params = params or SynthParams(cdr_len=10, antigen_len=30)
    cfg = RunConfig()
    cfg = replace(cfg, train=replace(cfg.train, max_epochs=max_epochs, precision=precision, seed=seed, patience=max_epochs + 1))
    data = [prepare_example(c, cfg.model) for c in generate_dataset(n_complexes, seed, params)]
    model = build_model(cfg.model, cfg.train.dropout, seed, resolve_dtype(precision))
    trace = []
    last = {"aar": 0.0, "auroc": float("nan"), "epoch": -1}

    def cb(epoch, m, row):
        a, u = design_scores(m, data)
        trace.append((epoch, a, u))
        last.update(aar=a, auroc=u, epoch=epoch)
        log.info("overfit epoch %d loss %.3f aar %.3f auroc %.4f", epoch, row["total"], a, u)
        return a > aar_target and u > auroc_target

    t0 = time.perf_counter()
    fit(model, data, data, cfg, callback=cb)
    return RunSummary(last["epoch"] + 1, last["aar"], last["auroc"], time.perf_counter() - t0, trace)


def generalization_run(
    n_train: int = 50,
    n_val: int = 10,
    max_epochs: int = 100,
    seed: int = 0,
    val_seed: int = 100_000,
    precision: str = "float32",
    params: SynthParams | None = None,
) -> RunSummary:
    """Fit on ``n_train`` complexes with early stopping and score contacts on ``n_val`` held-out ones.

    Training seeds are ``seed .. seed + n_train - 1`` and validation seeds
    start at ``val_seed``; the two ranges must not overlap.
    """
    if val_seed < seed + n_train and seed < val_seed + n_val:
        raise ValueError("training and validation seed ranges overlap")
    params = params or SynthParams()
    cfg = RunConfig()
    cfg = replace(cfg, train=replace(cfg.train, max_epochs=max_epochs, precision=precision, seed=seed))
    train = [prepare_example(c, cfg.model) for c in generate_dataset(n_train, seed, params)]
    val = [prepare_example(c, cfg.model) for c in generate_dataset(n_val, val_seed, params)]
    model = build_model(cfg.model, cfg.train.dropout, seed, resolve_dtype(precision))
    trace = []

    def cb(epoch, m, row):
        a, u = design_scores(m, val)
        trace.append((epoch, a, u))
        log.info("generalization epoch %d val %.3f aar %.3f auroc %.4f", epoch, row["val_total"], a, u)
        return False

    t0 = time.perf_counter()
    res = fit(model, train, val, cfg, callback=cb)
    a, u = design_scores(res.model, val)
    return RunSummary(len(res.history), a, u, time.perf_counter() - t0, trace)

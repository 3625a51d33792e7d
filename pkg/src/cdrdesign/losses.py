"""The seven training objectives and their weighted combination."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossWeights
from .encoder import invariant_node_features
from .errors import EmptySetError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

TERMS = ("seq", "coord", "contact", "fp", "pair", "dock", "aux")


def _tensor(x, dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def contact_weights(c_hat: torch.Tensor, alpha: float, detach: bool = True) -> torch.Tensor:
    """Per-position cross-entropy weights ``1 + alpha * c_hat``."""
    c = c_hat.detach() if detach else c_hat
    return 1.0 + alpha * c


def weighted_ce(logits: torch.Tensor, target, c_hat: torch.Tensor, alpha: float, detach: bool = True) -> torch.Tensor:
    """Contact-weighted cross-entropy averaged over labelled positions.

    Positions whose target is unknown (negative) are dropped from both the
    sum and the count.
    """
    target = torch.as_tensor(np.asarray(target), dtype=torch.long)
    if logits.shape[0] != target.shape[0] or c_hat.shape[0] != target.shape[0]:
        raise ShapeError("weighted_ce: logits, targets and contact probabilities differ in length")
    known = target >= 0
    if not bool(known.all()):
        log.warning("weighted_ce: %d unknown target(s) excluded", int((~known).sum()))
    if not bool(known.any()):
        return logits.sum() * 0.0
    logp = torch.log_softmax(logits[known], dim=-1)
    nll = -logp.gather(1, target[known][:, None]).squeeze(1)
    w = contact_weights(c_hat[known], alpha, detach)
    return (w * nll).sum() / int(known.sum())


def focal_contact_loss(
    c_hat: torch.Tensor, labels, gamma: float = 2.0, logits: torch.Tensor | None = None
) -> torch.Tensor:
    """Focal binary cross-entropy on contact probabilities.

    When ``logits`` are given the log terms are taken from them directly,
    which stays finite where the sigmoid saturates.
    """
    y = _tensor(labels, c_hat.dtype)
    if y.shape != c_hat.shape:
        raise ShapeError("focal_contact_loss: labels and probabilities differ in shape")
    if logits is not None:
        log_p, log_q = F.logsigmoid(logits), F.logsigmoid(-logits)
    else:
        log_p, log_q = torch.log(c_hat), torch.log1p(-c_hat)
    p_correct = torch.where(y > 0.5, c_hat, 1.0 - c_hat)
    bce = -(y * log_p + (1.0 - y) * log_q)
    return ((1.0 - p_correct) ** gamma * bce).mean()


def positive_pairs(descriptors: np.ndarray, threshold: float) -> np.ndarray:
    """Ordered pairs ``(i, j)``, ``i != j``, whose descriptor cosine similarity exceeds ``threshold``."""
    d = np.asarray(descriptors, dtype=float)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    unit = np.divide(d, norm, out=np.zeros_like(d), where=norm > 0)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    return np.argwhere(sim > threshold)


def fingerprint_loss(fps: torch.Tensor, descriptors, tau: float = 0.1, threshold: float = 0.9) -> torch.Tensor:
    """InfoNCE over all CDR positions in a batch; positives share a similar antigen environment.

    The denominator runs over every other position in the batch (the anchor
    itself is excluded). Returns 0 when no pair qualifies.
    """
    if fps.shape[0] < 2:
        return fps.sum() * 0.0
    pairs = positive_pairs(descriptors, threshold)
    if len(pairs) == 0:
        return fps.sum() * 0.0
    sim = fps @ fps.T / tau
    eye = torch.eye(fps.shape[0], dtype=torch.bool)
    log_denom = torch.logsumexp(sim.masked_fill(eye, -math.inf), dim=1)
    i = torch.as_tensor(pairs[:, 0])
    j = torch.as_tensor(pairs[:, 1])
    return -(sim[i, j] - log_denom[i]).mean()


def huber(x: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def coord_loss(pred: torch.Tensor, true, delta: float = 1.0) -> torch.Tensor:
    """Per-residue sum of component-wise Huber terms, averaged over CDR positions."""
    true = _tensor(true, pred.dtype)
    if pred.shape != true.shape:
        raise ShapeError(f"coord_loss: shapes {tuple(pred.shape)} vs {tuple(true.shape)}")
    return huber(pred - true, delta).sum(dim=1).mean()


def pair_loss(h_cdr_pooled: torch.Tensor, h_ag_pooled: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """InfoNCE matching each complex's pooled CDR embedding to its own antigen (dot-product similarity)."""
    if h_cdr_pooled.shape != h_ag_pooled.shape:
        raise ShapeError("pair_loss: pooled embedding shapes differ")
    sim = h_cdr_pooled @ h_ag_pooled.T / tau
    return -(torch.diagonal(sim) - torch.logsumexp(sim, dim=1)).mean()


def dock_loss(pred_cdr: torch.Tensor, epitope, cutoff: float = 8.0) -> torch.Tensor:
    """Mean hinge on each CDR residue's nearest-epitope distance beyond ``cutoff``."""
    epitope = _tensor(epitope, pred_cdr.dtype).reshape(-1, 3)
    if epitope.shape[0] == 0:
        raise EmptySetError("dock_loss needs a non-empty epitope")
    diff = pred_cdr[:, None, :] - epitope[None, :, :]
    d = torch.sqrt((diff * diff).sum(-1) + 1e-18)
    return torch.clamp(d.min(dim=1).values - cutoff, min=0.0).mean()


def aux_loss(readout: torch.Tensor, raw_feats) -> torch.Tensor:
    """Mean squared error between a linear readout of CDR embeddings and their input features.

    The target is the 108-d node feature vector with the frame block in its
    rotation-invariant form, so the loss is unchanged by rigid motion.
    """
    raw = _tensor(raw_feats, readout.dtype)
    if readout.shape != raw.shape:
        raise ShapeError("aux_loss: readout and feature shapes differ")
    return ((readout - raw) ** 2).mean()


@dataclass
class LossBreakdown:
    seq: torch.Tensor
    coord: torch.Tensor
    contact: torch.Tensor
    fp: torch.Tensor
    pair: torch.Tensor
    dock: torch.Tensor
    aux: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def total_loss(terms: dict[str, torch.Tensor], w: LossWeights) -> LossBreakdown:
    """Weighted sum: sequence term plus each auxiliary term times its lambda."""
    for name in TERMS:
        if name not in terms:
            raise KeyError(f"missing loss term {name!r}")
        if not torch.isfinite(torch.as_tensor(terms[name])).all():
            raise NonFiniteError(f"loss term {name!r} is not finite")
    total = (
        terms["seq"]
        + w.lambda_coord * terms["coord"]
        + w.lambda_contact * terms["contact"]
        + w.lambda_fp * terms["fp"]
        + w.lambda_pair * terms["pair"]
        + w.lambda_dock * terms["dock"]
        + w.lambda_aux * terms["aux"]
    )
    return LossBreakdown(**{k: terms[k] for k in TERMS}, total=total)


def batch_losses(model, examples, outputs, w: LossWeights) -> LossBreakdown:
    """Losses for a batch: per-complex terms averaged over complexes, contrastive terms at batch scope."""
    if not examples:
        raise ValueError("empty batch")
    per = {k: [] for k in ("seq", "coord", "contact", "dock", "aux")}
    for ex, out in zip(examples, outputs):
        per["seq"].append(
            weighted_ce(out.logits, ex.true_seq, out.contact_probs, w.contact_alpha, w.detach_contact_weight)
        )
        per["coord"].append(coord_loss(out.cdr_ca, ex.true_cdr_ca, w.huber_delta))
        per["contact"].append(focal_contact_loss(out.contact_probs, ex.labels, w.focal_gamma, out.contact_logits))
        epi = out.coords[torch.as_tensor(ex.graph.epitope_positions), 1]
        per["dock"].append(dock_loss(out.cdr_ca, epi, w.dock_cutoff))
        gt = ex.tensors(out.h_cdr.dtype)
        raw = invariant_node_features(gt.node_feats, gt.prev_residue)[torch.as_tensor(ex.graph.cdr_positions)]
        per["aux"].append(aux_loss(model.aux_readout(out.h_cdr), raw))
    terms = {k: torch.stack(v).mean() for k, v in per.items()}
    fps = torch.cat([o.fingerprints for o in outputs], dim=0)
    desc = np.concatenate([ex.descriptors for ex in examples], axis=0)
    terms["fp"] = fingerprint_loss(fps, desc, w.tau_fp, w.fp_threshold)
    pooled_cdr = torch.stack([o.h_cdr.mean(dim=0) for o in outputs])
    pooled_ag = torch.stack([o.h_ag.mean(dim=0) for o in outputs])
    terms["pair"] = pair_loss(pooled_cdr, pooled_ag, w.tau_pair)
    return total_loss(terms, w)

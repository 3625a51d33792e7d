"""Distance-biased cross-attention and the contact-first decoder stages."""

from __future__ import annotations

import numpy as np
import torch

from .engine import Mlp, softmax
from .errors import EmptySetError, ShapeError
from .geometry import RbfSpec, neighbour_order, pairwise_distances, rbf_expand
from .structure import Complex


def distance_bias(d, sigma: float):
    """Gaussian spatial prior ``exp(-d^2 / (2 sigma^2))``; accepts floats or tensors."""
    if isinstance(d, torch.Tensor):
        return torch.exp(-(d**2) / (2.0 * sigma**2))
    return float(np.exp(-(float(d) ** 2) / (2.0 * sigma**2)))


def rbf_torch(d: torch.Tensor, spec: RbfSpec) -> torch.Tensor:
    mu = torch.as_tensor(spec.centers, dtype=d.dtype)
    return torch.exp(-((d[..., None] - mu) ** 2) / (2.0 * spec.width**2))


def distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix; the small offset keeps the gradient finite at d = 0."""
    diff = a[:, None, :] - b[None, :, :]
    return torch.sqrt((diff * diff).sum(-1) + 1e-18)


def cross_attention(
    h_cdr: torch.Tensor,
    h_ag: torch.Tensor,
    x_cdr: torch.Tensor,
    x_ag: torch.Tensor,
    W_q: torch.Tensor,
    W_k: torch.Tensor,
    W_v: torch.Tensor,
    heads: int,
    sigma: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Multi-head CDR->antigen attention with a shared Gaussian distance bias.

    Returns ``(o, weights)`` where ``o = [h_cdr, head_1, ..., head_H]`` and
    ``weights`` has shape (H, L, M).
    """
    L, M = h_cdr.shape[0], h_ag.shape[0]
    if M == 0:
        raise EmptySetError("cross_attention over an empty antigen")
    if L == 0:
        raise EmptySetError("cross_attention with no CDR positions")
    hd = W_q.shape[0] // heads
    q = (h_cdr @ W_q.T).reshape(L, heads, hd).transpose(0, 1)
    k = (h_ag @ W_k.T).reshape(M, heads, hd).transpose(0, 1)
    v = (h_ag @ W_v.T).reshape(M, heads, hd).transpose(0, 1)
    bias = distance_bias(distances(x_cdr, x_ag), sigma)
    scores = q @ k.transpose(1, 2) / np.sqrt(hd) + bias[None]
    weights = softmax(scores, dim=-1)
    attended = (weights @ v).transpose(0, 1).reshape(L, heads * hd)
    return torch.cat([h_cdr, attended], dim=-1), weights


def knn_indices(dist: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` nearest columns per row (fewer if the row is shorter); ties to lower index."""
    k = min(k, dist.shape[1])
    order = neighbour_order(dist.detach().cpu().numpy())[:, :k]
    return torch.as_tensor(order, dtype=torch.long)


def environment_descriptor(c: Complex, cdr_pos: int, k: int, rbf: RbfSpec) -> np.ndarray:
    """Composition and distance profile of the ``k`` antigen residues nearest a CDR position.

    Returns a 20-bin amino-acid histogram (sums to 1 over known types)
    followed by the RBF expansion of the sorted Cα distances, mean-pooled.
    """
    if not c.antigen:
        raise EmptySetError("environment_descriptor needs a non-empty antigen")
    ca = c.cdr_ca()[cdr_pos]
    d = pairwise_distances(ca[None], c.antigen_ca())[0]
    k = min(k, len(d))
    nearest = neighbour_order(d)[:k]
    hist = np.zeros(20)
    for j in nearest:
        aa = c.antigen[j].aa
        if aa >= 0:
            hist[aa] += 1.0
    if hist.sum() > 0:
        hist /= hist.sum()
    profile = rbf_expand(np.sort(d[nearest]), rbf).mean(axis=0)
    return np.concatenate([hist, profile])


def contact_context_aggregate(
    h_ag: torch.Tensor, dist: torch.Tensor, knn: torch.Tensor, proj_w: torch.Tensor, proj_b: torch.Tensor, rbf: RbfSpec
) -> torch.Tensor:
    """Mean over each CDR position's nearest antigen residues of ``proj(rbf(d)) * h_ag``."""
    d_sel = torch.gather(dist, 1, knn)  # (L, K)
    filt = rbf_torch(d_sel, rbf) @ proj_w.T + proj_b  # (L, K, D)
    return (filt * h_ag[knn]).mean(dim=1)


def predict_contacts(h_cdr, a, d_min, f, mlp_ct: Mlp, rbf: RbfSpec, train: bool = False):
    """Contact probabilities (and their logits) from the four concatenated inputs."""
    n = {h_cdr.shape[0], a.shape[0], d_min.shape[0], f.shape[0]}
    if len(n) != 1:
        raise ShapeError("predict_contacts inputs are not aligned on CDR positions")
    logits = mlp_ct(torch.cat([h_cdr, a, rbf_torch(d_min, rbf), f], dim=-1), train).squeeze(-1)
    return torch.sigmoid(logits), logits


def inject_complementarity(
    h_cdr, h_ag, knn, c_hat, o_attn, gate_w, gate_b, mlp_proj: Mlp, train: bool = False
):
    """Gated antigen injection; returns ``(z, enriched, gate)``.

    ``enriched = h + g * c * proj(mean of nearest antigen embeddings)`` and
    ``z = [enriched, c * o_attn]``; a contact probability of exactly zero
    leaves ``h`` untouched and zeroes the attention block.
    """
    h_local = h_ag[knn].mean(dim=1)
    gate = torch.sigmoid(torch.cat([h_cdr, c_hat[:, None]], dim=-1) @ gate_w + gate_b)
    enriched = h_cdr + (gate * c_hat)[:, None] * mlp_proj(h_local, train)
    z = torch.cat([enriched, c_hat[:, None] * o_attn], dim=-1)
    return z, enriched, gate

"""Full design model: graph -> encoder -> cross-attention -> three decoder stages -> logits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import heads
from .config import ModelConfig
from .encoder import Encoder, GraphTensors, graph_tensors
from .engine import Mlp, MlpSpec, init_affine
from .graph import NODE_FEAT_DIM, HeteroGraph, build_graph
from .structure import (
    AMINO_ACIDS,
    UNKNOWN,
    Complex,
    compute_contact_labels,
    interpolate_cdr_coordinates,
    mask_cdr_sequence,
)


@dataclass
class Example:
    """A complex prepared for training or inference.

    ``native`` is the reference structure; ``input`` is what the model sees
    (CDR sequence masked, CDR coordinates optionally re-initialised).
    """

    native: Complex
    input: Complex
    graph: HeteroGraph
    labels: np.ndarray
    true_seq: np.ndarray
    true_cdr_ca: np.ndarray
    descriptors: np.ndarray
    _tensors: dict = field(default_factory=dict, repr=False)

    @property
    def id(self) -> str:
        return self.native.id

    def tensors(self, dtype: torch.dtype) -> GraphTensors:
        if dtype not in self._tensors:
            self._tensors[dtype] = graph_tensors(self.graph, dtype)
        return self._tensors[dtype]


def prepare_example(native: Complex, cfg: ModelConfig | None = None) -> Example:
    cfg = cfg or ModelConfig()
    model_in = mask_cdr_sequence(native)
    if cfg.cdr_init == "interpolate":
        model_in = interpolate_cdr_coordinates(model_in)
    graph = build_graph(model_in, cfg.graph)
    L = native.cdr_len
    desc = np.stack(
        [heads.environment_descriptor(native, k, cfg.decoder.knn_k, cfg.decoder.rbf) for k in range(L)]
    )
    return Example(
        native=native,
        input=model_in,
        graph=graph,
        labels=compute_contact_labels(native),
        true_seq=native.cdr_sequence(),
        true_cdr_ca=native.cdr_ca(),
        descriptors=desc,
    )


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (L, 20)
    contact_probs: torch.Tensor  # (L,)
    contact_logits: torch.Tensor  # (L,)
    fingerprints: torch.Tensor  # (L, F)
    attn_out: torch.Tensor  # (L, D + H*Dh), skip block first
    attn_weights: torch.Tensor  # (H, L, M)
    enriched: torch.Tensor  # (L, D)
    z: torch.Tensor  # (L, 2D)
    gate: torch.Tensor  # (L,)
    h: torch.Tensor  # (N, D) encoder embeddings
    h_cdr: torch.Tensor
    h_ag: torch.Tensor
    coords: torch.Tensor  # (N, 4, 3) updated backbone
    cdr_ca: torch.Tensor  # (L, 3)
    ag_ca: torch.Tensor  # (M, 3)
    d_min: torch.Tensor  # (L,)


class DesignModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, dropout: float = 0.0, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        torch.manual_seed(seed)
        enc, att, dec = cfg.encoder, cfg.attention, cfg.decoder
        D = enc.hidden_dim
        HD = att.heads * att.head_dim
        self.encoder = Encoder(enc, dropout)
        self.W_q = nn.Parameter(init_affine(D, HD)[0])
        self.W_k = nn.Parameter(init_affine(D, HD)[0])
        self.W_v = nn.Parameter(init_affine(D, HD)[0])
        self.mlp_fp = Mlp(MlpSpec((D + HD, dec.fingerprint_hidden, dec.fingerprint_dim), dropout=dropout))
        W, b = init_affine(dec.rbf_count, D)
        self.ctx_proj_w = nn.Parameter(W)
        self.ctx_proj_b = nn.Parameter(b)
        self.mlp_ct = Mlp(
            MlpSpec((2 * D + dec.rbf_count + dec.fingerprint_dim, *dec.contact_hidden, 1), dropout=dropout)
        )
        self.gate_w = nn.Parameter(torch.zeros(D + 1, dtype=torch.float64))
        self.gate_b = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.mlp_proj = Mlp(MlpSpec((D, dec.proj_hidden, D), dropout=dropout))
        self.mlp_seq = Mlp(MlpSpec((D + HD, dec.seq_hidden, 20), dropout=dropout))
        W, b = init_affine(D, NODE_FEAT_DIM)
        self.aux_w = nn.Parameter(W)
        self.aux_b = nn.Parameter(b)

    @property
    def dtype(self) -> torch.dtype:
        return self.W_q.dtype

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, ex: Example, train: bool = False, contact_override: torch.Tensor | None = None) -> ForwardOutput:
        """Run the full pipeline on a prepared example.

        ``contact_override`` replaces the predicted contact probabilities
        before injection (used to probe the gating).
        """
        cfg = self.cfg
        gt = ex.tensors(self.dtype)
        g = ex.graph
        h, coords = self.encoder(gt, train)
        cdr = torch.as_tensor(g.cdr_positions, dtype=torch.long)
        ag = torch.as_tensor(g.antigen_positions, dtype=torch.long)
        h_cdr, h_ag = h[cdr], h[ag]
        x_cdr, x_ag = coords[cdr, 1], coords[ag, 1]

        o, weights = heads.cross_attention(
            h_cdr, h_ag, x_cdr, x_ag, self.W_q, self.W_k, self.W_v, cfg.attention.heads, cfg.attention.sigma
        )
        D = h_cdr.shape[1]
        o_attn = o[:, D:]
        fp = self.mlp_fp(o, train)

        dist = heads.distances(x_cdr, x_ag)
        knn = heads.knn_indices(dist, cfg.decoder.knn_k)
        a = heads.contact_context_aggregate(h_ag, dist, knn, self.ctx_proj_w, self.ctx_proj_b, cfg.decoder.rbf)
        d_min = dist.min(dim=1).values
        c_hat, c_logit = heads.predict_contacts(h_cdr, a, d_min, fp, self.mlp_ct, cfg.decoder.rbf, train)
        c_used = c_hat if contact_override is None else contact_override.to(c_hat.dtype)

        z, enriched, gate = heads.inject_complementarity(
            h_cdr, h_ag, knn, c_used, o_attn, self.gate_w, self.gate_b, self.mlp_proj, train
        )
        logits = self.mlp_seq(z, train)
        return ForwardOutput(
            logits=logits,
            contact_probs=c_hat,
            contact_logits=c_logit,
            fingerprints=fp,
            attn_out=o,
            attn_weights=weights,
            enriched=enriched,
            z=z,
            gate=gate,
            h=h,
            h_cdr=h_cdr,
            h_ag=h_ag,
            coords=coords,
            cdr_ca=x_cdr,
            ag_ca=x_ag,
            d_min=d_min,
        )

    def aux_readout(self, h_cdr: torch.Tensor) -> torch.Tensor:
        return h_cdr @ self.aux_w.T + self.aux_b


def decode(out: ForwardOutput) -> list[int]:
    """Per-position argmax; ties resolve to the lowest amino-acid index."""
    logits = out.logits.detach().cpu().numpy()
    return [int(np.argmax(row)) for row in logits]


def decode_string(out: ForwardOutput) -> str:
    return "".join(AMINO_ACIDS[i] for i in decode(out))


def model_forward(c: Complex, model: DesignModel, train: bool = False) -> ForwardOutput:
    return model(prepare_example(c, model.cfg), train)


def build_model(cfg: ModelConfig | None = None, dropout: float = 0.0, seed: int = 0, dtype: torch.dtype = torch.float64) -> DesignModel:
    return DesignModel(cfg, dropout, seed).to(dtype)


__all__ = [
    "DesignModel",
    "Example",
    "ForwardOutput",
    "UNKNOWN",
    "build_model",
    "decode",
    "decode_string",
    "model_forward",
    "prepare_example",
]

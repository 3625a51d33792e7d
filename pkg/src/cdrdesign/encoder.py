"""Dual-path feature encoder and the relation-aware virtual-node EGNN.

Only CDR residues and virtual nodes move during coordinate updates; framework,
light chain, antigen and delimiter tokens keep their input coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import EncoderConfig
from .engine import Mlp, MlpSpec, init_affine, scatter_add
from .errors import NonFiniteError, ShapeError
from .graph import (
    EDGE_FEAT_DIM,
    N_EDGE_TYPES,
    NODE_BLOCKS,
    NODE_FEAT_DIM,
    RESIDUE_EDGE_TYPES,
    TOKEN_EDGE_TYPES,
    EdgeType,
    HeteroGraph,
)

GEOM_BLOCKS = ("bond_rbf", "angles", "frame", "position")
CHEM_BLOCKS = ("aa", "segment")
GEOM_DIM = sum(NODE_BLOCKS[b].stop - NODE_BLOCKS[b].start for b in GEOM_BLOCKS)
CHEM_DIM = sum(NODE_BLOCKS[b].stop - NODE_BLOCKS[b].start for b in CHEM_BLOCKS)

# Edge types that can deliver a coordinate update: their receivers include
# CDR residues or virtual nodes. Light-chain and antigen delimiter edges only
# reach frozen nodes, so they get no coordinate MLP.
COORD_EDGE_TYPES = tuple(t for t in EdgeType if t not in (EdgeType.GLOB_LC, EdgeType.GLOB_AG))


@dataclass
class GraphTensors:
    """Tensor view of a :class:`HeteroGraph` ready for the encoder."""

    node_feats: torch.Tensor  # (n_res, 108)
    prev_residue: torch.Tensor  # (n_res,)
    epitope_mask: torch.Tensor  # (n_res,) bool
    coords: torch.Tensor  # (N, 4, 3)
    recv: torch.Tensor  # (E,) all edges, grouped by type in EdgeType order
    send: torch.Tensor
    etype: torch.Tensor
    type_slices: list  # EdgeType -> slice into the edge arrays
    residue_edge_feats: torch.Tensor  # rows for residue-type edges, in edge order
    inv_counts: torch.Tensor  # (E,) 1 / |N_t(receiver)| for each edge
    movable: torch.Tensor  # (N,) bool
    n_residues: int
    frames: torch.Tensor  # (E, 3, 3) local axes used for the message geometry term

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]


def graph_tensors(g: HeteroGraph, dtype: torch.dtype = torch.float64) -> GraphTensors:
    recv, send, etype, slices = [], [], [], []
    start = 0
    for t in EdgeType:
        e = g.edges[t]
        recv.append(e[:, 0])
        send.append(e[:, 1])
        etype.append(np.full(len(e), int(t)))
        slices.append(slice(start, start + len(e)))
        start += len(e)
    recv = np.concatenate(recv).astype(np.int64)
    send = np.concatenate(send).astype(np.int64)
    etype = np.concatenate(etype).astype(np.int64)
    counts = np.zeros((g.n_nodes, N_EDGE_TYPES))
    np.add.at(counts, (recv, etype), 1.0)
    inv = 1.0 / counts[recv, etype] if len(recv) else np.zeros(0)
    res_feats = np.concatenate([g.edge_feats[t] for t in RESIDUE_EDGE_TYPES], axis=0)
    epi = np.zeros(g.n_residues, dtype=bool)
    epi[g.epitope_positions] = True
    movable = np.zeros(g.n_nodes, dtype=bool)
    movable[g.cdr_positions] = True
    movable[g.virtual_positions] = True
    node_feats = torch.as_tensor(g.node_feats, dtype=dtype)
    recv_t, send_t = torch.as_tensor(recv), torch.as_tensor(send)
    return GraphTensors(
        node_feats=node_feats,
        prev_residue=torch.as_tensor(g.prev_residue, dtype=torch.long),
        epitope_mask=torch.as_tensor(epi),
        coords=torch.as_tensor(g.coords, dtype=dtype),
        recv=recv_t,
        send=send_t,
        etype=torch.as_tensor(etype),
        type_slices=slices,
        residue_edge_feats=torch.as_tensor(res_feats, dtype=dtype),
        inv_counts=torch.as_tensor(inv, dtype=dtype),
        movable=torch.as_tensor(movable),
        n_residues=g.n_residues,
        frames=edge_frames(node_feats, recv_t, send_t),
    )


def invariant_frame_block(node_feats: torch.Tensor, prev_residue: torch.Tensor) -> torch.Tensor:
    """Dot products between each residue's frame axes and its predecessor's.

    The raw frame block holds global-frame unit vectors, which rotate with the
    structure; the 3x3 matrix of axis dot products does not. Chain-initial
    residues get zeros.
    """
    frames = node_feats[:, NODE_BLOCKS["frame"]].reshape(-1, 3, 3)
    has_prev = prev_residue >= 0
    prev = frames[prev_residue.clamp(min=0)]
    rel = prev @ frames.transpose(1, 2)
    return rel.reshape(-1, 9) * has_prev[:, None].to(frames.dtype)


def invariant_node_features(node_feats: torch.Tensor, prev_residue: torch.Tensor) -> torch.Tensor:
    """The 108-d features with the frame block in its rotation-invariant form."""
    out = node_feats.clone()
    out[:, NODE_BLOCKS["frame"]] = invariant_frame_block(node_feats, prev_residue)
    return out


def split_features(node_feats: torch.Tensor, prev_residue: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Geometric and chemical input blocks for the dual-path MLP."""
    if node_feats.shape[-1] != NODE_FEAT_DIM:
        raise ShapeError(f"node features must be {NODE_FEAT_DIM}-d, got {node_feats.shape[-1]}")
    geom = torch.cat(
        [
            node_feats[:, NODE_BLOCKS["bond_rbf"]],
            node_feats[:, NODE_BLOCKS["angles"]],
            invariant_frame_block(node_feats, prev_residue),
            node_feats[:, NODE_BLOCKS["position"]],
        ],
        dim=-1,
    )
    chem = torch.cat([node_feats[:, NODE_BLOCKS["aa"]], node_feats[:, NODE_BLOCKS["segment"]]], dim=-1)
    return geom, chem


def outer_product_features(dx: torch.Tensor, scale: float = 1.0, frames: torch.Tensor | None = None) -> torch.Tensor:
    """Flattened ``dx dx^T`` per row (9 values), with ``dx`` measured in units of ``scale``.

    When ``frames`` (E, 3, 3), rows = axes, is given, ``dx`` is first expressed
    in those local axes. The global-frame outer product transforms as
    ``R M R^T`` under rotation; the frame-local one is invariant.
    """
    g = dx / scale
    if frames is not None:
        g = torch.einsum("eab,eb->ea", frames, g)
    return (g[:, :, None] * g[:, None, :]).reshape(-1, 9)


def egnn_message(
    msg_mlp: Mlp, h_i, h_j, x_i, x_j, e_ij, train: bool = False, scale: float = 1.0, frames: torch.Tensor | None = None
) -> torch.Tensor:
    """Messages for a batch of edges from receiver/sender states and edge features."""
    geo = outer_product_features(x_i - x_j, scale, frames)
    return msg_mlp(torch.cat([h_i, h_j, geo, e_ij], dim=-1), train)


def edge_frames(node_feats: torch.Tensor, recv: torch.Tensor, send: torch.Tensor) -> torch.Tensor:
    """Backbone frame per edge: the receiver's, or the sender's when the receiver is a token or virtual node.

    Every edge has at least one residue endpoint. Residue frames come from
    the input backbone and stay valid because residues only translate.
    """
    n_res = node_feats.shape[0]
    frames = node_feats[:, NODE_BLOCKS["frame"]].reshape(-1, 3, 3)
    owner = torch.where(recv < n_res, recv, send)
    if bool((owner >= n_res).any()):
        raise ShapeError("edge between two non-residue nodes has no backbone frame")
    return frames[owner]


def egnn_node_update(node_mlp: Mlp, W: torch.Tensor, h: torch.Tensor, type_sums: torch.Tensor, train: bool = False) -> torch.Tensor:
    """Residual update from per-type message sums ``type_sums`` (N, T, Dm) and projections ``W`` (T, D, Dm)."""
    projected = torch.einsum("ntm,tdm->nd", type_sums, W)
    return h + node_mlp(torch.cat([h, projected], dim=-1), train)


def egnn_coord_update(x, dx, weights, recv, inv_counts, movable) -> torch.Tensor:
    """``x + sum_t mean_j dx_ij * w_ij`` for movable nodes; frozen nodes are returned unchanged."""
    delta = scatter_add(dx * (weights * inv_counts)[:, None], recv, x.shape[0])
    return x + delta * movable[:, None].to(x.dtype)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, dropout: float = 0.0):
        super().__init__()
        self.cfg = cfg
        d_in, D, Dm = cfg.embed_dim_in, cfg.hidden_dim, cfg.message_dim
        self.mlp_geom = Mlp(MlpSpec((GEOM_DIM, cfg.geom_hidden, cfg.geom_hidden), dropout=dropout))
        self.mlp_chem = Mlp(MlpSpec((CHEM_DIM, cfg.chem_hidden, cfg.chem_hidden), dropout=dropout))
        self.mlp_fuse = Mlp(MlpSpec((cfg.geom_hidden + cfg.chem_hidden, cfg.fuse_hidden, d_in), dropout=dropout))
        bound = 1.0 / np.sqrt(d_in)
        self.e_epi = nn.Parameter((torch.rand(d_in, dtype=torch.float64) * 2 - 1) * bound)
        self.global_h = nn.Parameter((torch.rand(3, d_in, dtype=torch.float64) * 2 - 1) * bound)
        self.virtual_h = nn.Parameter((torch.rand(cfg.n_virtual, d_in, dtype=torch.float64) * 2 - 1) * bound)
        eb = 1.0 / np.sqrt(EDGE_FEAT_DIM)
        self.token_edge_feats = nn.Parameter(
            (torch.rand(len(TOKEN_EDGE_TYPES), EDGE_FEAT_DIM, dtype=torch.float64) * 2 - 1) * eb
        )
        W, b = init_affine(d_in, D)
        self.lift_w = nn.Parameter(W)
        self.lift_b = nn.Parameter(b)
        self.msg_mlps = nn.ModuleList()
        self.node_mlps = nn.ModuleList()
        self.type_proj = nn.ParameterList()
        self.coord_mlps = nn.ModuleList()
        for _ in range(cfg.n_layers):
            self.msg_mlps.append(
                nn.ModuleDict(
                    {t.name.lower(): Mlp(MlpSpec((2 * D + 9 + EDGE_FEAT_DIM, Dm, Dm), dropout=dropout)) for t in EdgeType}
                )
            )
            self.node_mlps.append(Mlp(MlpSpec((2 * D, D, D), dropout=dropout)))
            proj = torch.stack([init_affine(Dm, D)[0] for _ in range(N_EDGE_TYPES)])
            self.type_proj.append(nn.Parameter(proj))
            self.coord_mlps.append(
                nn.ModuleDict(
                    {
                        t.name.lower(): Mlp(
                            MlpSpec((Dm, cfg.coord_hidden, 1), dropout=dropout), out_scale=cfg.coord_init_scale
                        )
                        for t in COORD_EDGE_TYPES
                    }
                )
            )

    def encode_features(self, gt: GraphTensors, train: bool = False) -> torch.Tensor:
        """32-d embeddings for residues, then the 3 delimiter tokens, then the virtual nodes."""
        geom, chem = split_features(gt.node_feats, gt.prev_residue)
        h = self.mlp_fuse(torch.cat([self.mlp_geom(geom, train), self.mlp_chem(chem, train)], dim=-1), train)
        h = h + gt.epitope_mask[:, None].to(h.dtype) * self.e_epi
        return torch.cat([h, self.global_h, self.virtual_h], dim=0)

    def edge_features(self, gt: GraphTensors) -> torch.Tensor:
        parts = [gt.residue_edge_feats]
        for k, t in enumerate(TOKEN_EDGE_TYPES):
            n = gt.type_slices[t].stop - gt.type_slices[t].start
            parts.append(self.token_edge_feats[k].expand(n, -1))
        return torch.cat(parts, dim=0)

    def layer(self, l: int, h, x, e, gt: GraphTensors, train: bool):
        cfg = self.cfg
        recv, send = gt.recv, gt.send
        dx = x[recv] - x[send]
        msgs = []
        for t in EdgeType:
            sl = gt.type_slices[t]
            r, s = recv[sl], send[sl]
            msgs.append(
                egnn_message(
                    self.msg_mlps[l][t.name.lower()], h[r], h[s], x[r], x[s], e[sl], train, cfg.geometry_scale, gt.frames[sl]
                )
            )
        m = torch.cat(msgs)
        N, T = h.shape[0], N_EDGE_TYPES
        type_sums = scatter_add(m, recv * T + gt.etype, N * T).reshape(N, T, -1)
        h_new = egnn_node_update(self.node_mlps[l], self.type_proj[l], h, type_sums, train)
        parts = []
        for t in EdgeType:
            mt = m[gt.type_slices[t]]
            if t in COORD_EDGE_TYPES:
                parts.append(self.coord_mlps[l][t.name.lower()](mt, train).squeeze(-1))
            else:
                parts.append(mt.new_zeros(mt.shape[0]))
        weights = torch.cat(parts)
        x_new = egnn_coord_update(x, dx, weights, recv, gt.inv_counts, gt.movable)
        return h_new, x_new

    def forward(self, gt: GraphTensors, train: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Return embeddings (N, D) and updated backbone coordinates (N, 4, 3)."""
        h0 = self.encode_features(gt, train)
        h = h0 @ self.lift_w.T + self.lift_b
        x0 = gt.coords[:, 1, :]
        x = x0
        e = self.edge_features(gt)
        for l in range(self.cfg.n_layers):
            h, x = self.layer(l, h, x, e, gt, train)
            if not (torch.isfinite(h).all() and torch.isfinite(x).all()):
                raise NonFiniteError(f"encoder layer {l}: non-finite embeddings or coordinates")
        coords = gt.coords + (x - x0)[:, None, :]
        return h, coords

"""Heterogeneous residue graph: typed edges, delimiter tokens, virtual nodes, raw features.

Node order is fixed: heavy-chain residues, light-chain residues, antigen
residues, the three delimiter tokens (BOH, BOL, BOA), then the virtual nodes.
An edge ``(i, j)`` means node ``i`` receives a message from neighbour ``j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import GraphConstructionError
from .geometry import (
    RbfSpec,
    backbone_frames_batch,
    bond_angles_batch,
    dihedrals_batch,
    neighbour_order,
    pairwise_distances,
    rbf_expand,
    rotation_to_quaternion,
)
from .structure import UNKNOWN, Complex

log = logging.getLogger(__name__)


class NodeKind(IntEnum):
    HC = 0
    LC = 1
    AG = 2
    GLOBAL_BOH = 3
    GLOBAL_BOL = 4
    GLOBAL_BOA = 5
    VIRTUAL = 6


class EdgeType(IntEnum):
    INTRA_RADIAL = 0
    INTRA_SEQ = 1
    INTRA_KNN = 2
    INTER_RADIAL = 3
    INTER_KNN = 4
    GLOB_HC = 5
    GLOB_LC = 6
    GLOB_AG = 7
    VN_EPITOPE = 8
    VN_CDR = 9


N_EDGE_TYPES = len(EdgeType)
RESIDUE_EDGE_TYPES = (
    EdgeType.INTRA_RADIAL,
    EdgeType.INTRA_SEQ,
    EdgeType.INTRA_KNN,
    EdgeType.INTER_RADIAL,
    EdgeType.INTER_KNN,
)
# Edge types whose features are learnable vectors rather than geometry.
TOKEN_EDGE_TYPES = tuple(t for t in EdgeType if t not in RESIDUE_EDGE_TYPES)

# Node feature layout (widths sum to 108).
AA_DIM, BOND_RBF_BINS, ANGLE_DIM, FRAME_DIM, POS_DIM, SEG_DIM = 20, 16, 12, 9, 16, 3
NODE_FEAT_DIM = AA_DIM + 3 * BOND_RBF_BINS + ANGLE_DIM + FRAME_DIM + POS_DIM + SEG_DIM
NODE_BLOCKS = {
    "aa": slice(0, 20),
    "bond_rbf": slice(20, 68),
    "angles": slice(68, 80),
    "frame": slice(80, 89),
    "position": slice(89, 105),
    "segment": slice(105, 108),
}
# Edge feature layout (widths sum to 151).
EDGE_RBF_BINS = 8
EDGE_FEAT_DIM = N_EDGE_TYPES + 3 + 16 * EDGE_RBF_BINS + 4 + 6
EDGE_BLOCKS = {
    "type": slice(0, 10),
    "rel_pos": slice(10, 13),
    "atom_rbf": slice(13, 141),
    "quaternion": slice(141, 145),
    "direction": slice(145, 151),
}


@dataclass(frozen=True)
class GraphConfig:
    radial_cutoff: float = 10.0
    knn_k: int = 8
    inter_radial_cutoff: float = 12.0
    inter_knn_k: int = 8
    n_virtual: int = 3
    bond_rbf: RbfSpec = field(default_factory=lambda: RbfSpec.uniform(0.5, 3.0, BOND_RBF_BINS))
    edge_rbf: RbfSpec = field(default_factory=lambda: RbfSpec.uniform(0.0, 20.0, EDGE_RBF_BINS))

    def __post_init__(self):
        if self.radial_cutoff <= 0 or self.inter_radial_cutoff <= 0:
            raise ValueError("cutoffs must be positive")
        if self.knn_k < 1 or self.inter_knn_k < 1:
            raise ValueError("k must be >= 1")
        if self.n_virtual < 1:
            raise ValueError("n_virtual must be >= 1")
        if self.bond_rbf.count != BOND_RBF_BINS or self.edge_rbf.count != EDGE_RBF_BINS:
            raise ValueError("RBF bin counts are fixed by the feature layout")


@dataclass
class HeteroGraph:
    kinds: np.ndarray  # (N,) NodeKind values
    refs: np.ndarray  # (N,) residue index within its chain, or token / virtual id
    coords: np.ndarray  # (N, 4, 3); token and virtual nodes replicate one point
    edges: dict  # EdgeType -> (E_t, 2) int array of (receiver, sender)
    edge_feats: dict  # residue EdgeType -> (E_t, 151)
    node_feats: np.ndarray  # (n_residues, 108)
    prev_residue: np.ndarray  # (n_residues,) preceding residue in the same chain, or -1
    cdr_positions: np.ndarray
    antigen_positions: np.ndarray
    epitope_positions: np.ndarray
    n_residues: int

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)

    @property
    def global_positions(self) -> np.ndarray:
        return np.arange(self.n_residues, self.n_residues + 3)

    @property
    def virtual_positions(self) -> np.ndarray:
        return np.arange(self.n_residues + 3, self.n_nodes)

    def num_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())


def _stack_atoms(c: Complex) -> np.ndarray:
    chains = [r.atoms for r in (*c.heavy, *c.light, *c.antigen)]
    return np.array(chains).reshape(-1, 4, 3)


def _chain_slices(c: Complex) -> list[np.ndarray]:
    nh, nl, na = len(c.heavy), len(c.light), len(c.antigen)
    return [np.arange(0, nh), np.arange(nh, nh + nl), np.arange(nh + nl, nh + nl + na)]


def sinusoidal_position(index: np.ndarray, dim: int = POS_DIM) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = np.asarray(index, dtype=float)[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _chain_angle_block(atoms: np.ndarray) -> np.ndarray:
    """Sin/cos of three backbone bond angles and phi, psi, omega for one chain."""
    n = len(atoms)
    out = np.zeros((n, ANGLE_DIM))
    if n == 0:
        return out
    N, CA, C = atoms[:, 0], atoms[:, 1], atoms[:, 2]
    angles = np.zeros((n, 6))
    defined = np.zeros((n, 6), dtype=bool)
    # N-CA-C is always defined
    a, ok = bond_angles_batch(N, CA, C)
    angles[:, 1], defined[:, 1] = a, ok
    if n > 1:
        a, ok = bond_angles_batch(C[:-1], N[1:], CA[1:])  # C(i-1)-N-CA
        angles[1:, 0], defined[1:, 0] = a, ok
        a, ok = bond_angles_batch(CA[:-1], C[:-1], N[1:])  # CA-C-N(i+1)
        angles[:-1, 2], defined[:-1, 2] = a, ok
        a, ok = dihedrals_batch(C[:-1], N[1:], CA[1:], C[1:])  # phi
        angles[1:, 3], defined[1:, 3] = a, ok
        a, ok = dihedrals_batch(N[:-1], CA[:-1], C[:-1], N[1:])  # psi
        angles[:-1, 4], defined[:-1, 4] = a, ok
        a, ok = dihedrals_batch(CA[:-1], C[:-1], N[1:], CA[1:])  # omega
        angles[:-1, 5], defined[:-1, 5] = a, ok
    # terminal positions are expected to be undefined; only warn on interior degeneracy
    expected = np.ones((n, 6), dtype=bool)
    expected[0, [0, 3]] = False
    expected[-1, [2, 4, 5]] = False
    if np.any(expected & ~defined):
        log.warning("degenerate backbone angle(s) replaced by 0")
    out[:, 0::2] = np.where(defined, np.sin(angles), 0.0)
    out[:, 1::2] = np.where(defined, np.cos(angles), 0.0)
    return out


def build_node_features(c: Complex, cfg: GraphConfig | None = None) -> np.ndarray:
    """108-d raw features per residue in node order (heavy, light, antigen)."""
    cfg = cfg or GraphConfig()
    atoms = _stack_atoms(c)
    n = len(atoms)
    residues = (*c.heavy, *c.light, *c.antigen)
    feats = np.zeros((n, NODE_FEAT_DIM))
    for i, r in enumerate(residues):
        if r.aa != UNKNOWN:
            feats[i, r.aa] = 1.0
    bonds = np.stack(
        [
            np.linalg.norm(atoms[:, 0] - atoms[:, 1], axis=1),
            np.linalg.norm(atoms[:, 1] - atoms[:, 2], axis=1),
            np.linalg.norm(atoms[:, 2] - atoms[:, 3], axis=1),
        ],
        axis=1,
    )
    feats[:, NODE_BLOCKS["bond_rbf"]] = rbf_expand(bonds, cfg.bond_rbf).reshape(n, -1)
    rot, valid = backbone_frames_batch(atoms[:, 0], atoms[:, 1], atoms[:, 2])
    if not np.all(valid):
        log.warning("%d residue(s) with degenerate N-CA-C frame; identity used", int((~valid).sum()))
    feats[:, NODE_BLOCKS["frame"]] = rot.reshape(n, 9)
    for seg, idx in enumerate(_chain_slices(c)):
        if len(idx) == 0:
            continue
        feats[idx, NODE_BLOCKS["angles"]] = _chain_angle_block(atoms[idx])
        feats[idx, NODE_BLOCKS["position"]] = sinusoidal_position(np.arange(len(idx)))
        feats[idx, NODE_BLOCKS["segment"].start + seg] = 1.0
    return feats


def residue_edge_features(
    atoms: np.ndarray, pairs: np.ndarray, etype: EdgeType, cfg: GraphConfig | None = None
) -> np.ndarray:
    """Vectorised 151-d features for residue pairs ``(i, j)`` over a stacked atom array."""
    cfg = cfg or GraphConfig()
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    E = len(pairs)
    out = np.zeros((E, EDGE_FEAT_DIM))
    out[:, int(etype)] = 1.0
    if E == 0:
        return out
    ai, aj = atoms[pairs[:, 0]], atoms[pairs[:, 1]]
    Ri, vi = backbone_frames_batch(ai[:, 0], ai[:, 1], ai[:, 2])
    Rj, vj = backbone_frames_batch(aj[:, 0], aj[:, 1], aj[:, 2])
    if not (np.all(vi) and np.all(vj)):
        log.warning("degenerate frame on %d edge(s); identity orientation used", int((~(vi & vj)).sum()))
    delta = aj[:, 1] - ai[:, 1]
    out[:, EDGE_BLOCKS["rel_pos"]] = np.einsum("eab,eb->ea", Ri, delta)
    d16 = np.linalg.norm(ai[:, :, None, :] - aj[:, None, :, :], axis=-1).reshape(E, 16)
    out[:, EDGE_BLOCKS["atom_rbf"]] = rbf_expand(d16, cfg.edge_rbf).reshape(E, -1)
    rel = Ri @ np.swapaxes(Rj, 1, 2)
    out[:, EDGE_BLOCKS["quaternion"]] = rotation_to_quaternion(rel)
    norm = np.linalg.norm(delta, axis=1, keepdims=True)
    unit = np.divide(delta, norm, out=np.zeros_like(delta), where=norm > 0)
    out[:, 145:148] = np.einsum("eab,eb->ea", Ri, unit)
    out[:, 148:151] = np.einsum("eab,eb->ea", Rj, unit)
    return out


def build_edge_features(i: int, j: int, t: EdgeType, c: Complex, cfg: GraphConfig | None = None) -> np.ndarray:
    """Features of one residue edge; ``i``/``j`` index residues in node order."""
    if t not in RESIDUE_EDGE_TYPES:
        raise ValueError(f"{t.name} edges carry learnable features, not geometric ones")
    return residue_edge_features(_stack_atoms(c), np.array([[i, j]]), t, cfg)[0]


def _knn(dist: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` nearest entries per row (see :func:`neighbour_order`)."""
    k = min(k, dist.shape[1])
    return neighbour_order(dist)[:, :k]


def _both_ways(pairs: np.ndarray) -> np.ndarray:
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    return np.concatenate([pairs, pairs[:, ::-1]], axis=0)


def build_graph(c: Complex, cfg: GraphConfig | None = None) -> HeteroGraph:
    cfg = cfg or GraphConfig()
    if c.cdr_len == 0:
        raise GraphConstructionError("CDR span is empty")
    if not c.antigen:
        raise GraphConstructionError("antigen is empty")
    if not c.epitope:
        raise GraphConstructionError("epitope is empty; virtual-node wiring is undefined")

    atoms = _stack_atoms(c)
    ca = atoms[:, 1]
    n_res = len(atoms)
    chains = _chain_slices(c)
    antibody = np.concatenate([chains[0], chains[1]])
    antigen = chains[2]
    empty = np.zeros((0, 2), dtype=int)
    edges: dict[EdgeType, list[np.ndarray]] = {t: [] for t in EdgeType}

    for idx in chains:
        n = len(idx)
        if n < 2:
            continue
        d = pairwise_distances(ca[idx], ca[idx])
        a, b = np.nonzero((d < cfg.radial_cutoff) & ~np.eye(n, dtype=bool))
        edges[EdgeType.INTRA_RADIAL].append(np.stack([idx[a], idx[b]], axis=1))
        seq = [(p, p + o) for o in (1, 2) for p in range(n - o)]
        seq = np.array(seq, dtype=int).reshape(-1, 2)
        edges[EdgeType.INTRA_SEQ].append(_both_ways(idx[seq]))
        d_self = d + np.diag(np.full(n, np.inf))
        nbrs = _knn(d_self, min(cfg.knn_k, n - 1))
        recv = np.repeat(np.arange(n), nbrs.shape[1])
        edges[EdgeType.INTRA_KNN].append(np.stack([idx[recv], idx[nbrs.ravel()]], axis=1))

    if len(antibody):
        d = pairwise_distances(ca[antibody], ca[antigen])
        a, b = np.nonzero(d < cfg.inter_radial_cutoff)
        edges[EdgeType.INTER_RADIAL].append(_both_ways(np.stack([antibody[a], antigen[b]], axis=1)))
        nb = _knn(d, cfg.inter_knn_k)
        recv = np.repeat(np.arange(len(antibody)), nb.shape[1])
        edges[EdgeType.INTER_KNN].append(np.stack([antibody[recv], antigen[nb.ravel()]], axis=1))
        nb = _knn(d.T, cfg.inter_knn_k)
        recv = np.repeat(np.arange(len(antigen)), nb.shape[1])
        edges[EdgeType.INTER_KNN].append(np.stack([antigen[recv], antibody[nb.ravel()]], axis=1))

    tok = n_res + np.arange(3)
    for t, token, idx in zip((EdgeType.GLOB_HC, EdgeType.GLOB_LC, EdgeType.GLOB_AG), tok, chains):
        if len(idx):
            edges[t].append(_both_ways(np.stack([np.full(len(idx), token), idx], axis=1)))

    nh = len(c.heavy)
    cdr = np.arange(c.cdr_span[0], c.cdr_span[1])
    epi = nh + len(c.light) + np.asarray(c.epitope, dtype=int)
    vn = n_res + 3 + np.arange(cfg.n_virtual)
    for t, targets in ((EdgeType.VN_EPITOPE, epi), (EdgeType.VN_CDR, cdr)):
        pairs = np.stack(np.meshgrid(vn, targets, indexing="ij"), axis=-1).reshape(-1, 2)
        edges[t].append(_both_ways(pairs))

    edge_arrays = {t: (np.concatenate(v, axis=0).astype(int) if v else empty.copy()) for t, v in edges.items()}
    edge_feats = {t: residue_edge_features(atoms, edge_arrays[t], t, cfg) for t in RESIDUE_EDGE_TYPES}

    n_nodes = n_res + 3 + cfg.n_virtual
    coords = np.zeros((n_nodes, 4, 3))
    coords[:n_res] = atoms
    everything = ca.mean(axis=0)
    for k, idx in enumerate(chains):
        coords[n_res + k] = ca[idx].mean(axis=0) if len(idx) else everything
    coords[vn] = ca[np.concatenate([epi, cdr])].mean(axis=0)

    kinds = np.concatenate(
        [
            np.full(len(c.heavy), NodeKind.HC),
            np.full(len(c.light), NodeKind.LC),
            np.full(len(c.antigen), NodeKind.AG),
            [NodeKind.GLOBAL_BOH, NodeKind.GLOBAL_BOL, NodeKind.GLOBAL_BOA],
            np.full(cfg.n_virtual, NodeKind.VIRTUAL),
        ]
    ).astype(int)
    refs = np.concatenate([np.arange(len(idx)) for idx in chains] + [np.arange(3), np.arange(cfg.n_virtual)])
    prev = np.full(n_res, -1)
    for idx in chains:
        prev[idx[1:]] = idx[:-1]

    return HeteroGraph(
        kinds=kinds,
        refs=refs.astype(int),
        coords=coords,
        edges=edge_arrays,
        edge_feats=edge_feats,
        node_feats=build_node_features(c, cfg),
        prev_residue=prev,
        cdr_positions=cdr,
        antigen_positions=antigen,
        epitope_positions=epi,
        n_residues=n_res,
    )


def dump_graph(g: HeteroGraph, path) -> None:
    """Write a debugging dump as ``.npz``.

    Keys: ``kinds``, ``refs``, ``coords``, ``node_feats``, ``prev_residue``,
    ``cdr_positions``, ``antigen_positions``, ``epitope_positions``, and per
    edge type ``edges_<NAME>`` plus ``edge_feats_<NAME>`` for residue types.
    The layout is for inspection only and may change.
    """
    arrays = {
        "kinds": g.kinds,
        "refs": g.refs,
        "coords": g.coords,
        "node_feats": g.node_feats,
        "prev_residue": g.prev_residue,
        "cdr_positions": g.cdr_positions,
        "antigen_positions": g.antigen_positions,
        "epitope_positions": g.epitope_positions,
    }
    for t, e in g.edges.items():
        arrays[f"edges_{t.name}"] = e
    for t, f in g.edge_feats.items():
        arrays[f"edge_feats_{t.name}"] = f
    np.savez(path, **arrays)

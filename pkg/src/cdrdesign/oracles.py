"""Brute-force reference implementations used by the self-checks and tests.

Each function restates a definition with plain loops and no shared helpers
from the optimised code paths, so agreement is meaningful.
"""

from __future__ import annotations

import math

import numpy as np

from .graph import EdgeType, GraphConfig
from .structure import Complex


def _dist(a, b) -> float:
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def contact_labels(c: Complex, d_c: float = 8.0) -> list[int]:
    out = []
    for r in c.cdr_residues:
        out.append(int(any(_dist(r.atoms[1], g.atoms[1]) < d_c for g in c.antigen)))
    return out


def knn(points_from, points_to, k: int, exclude_self: bool = False) -> list[list[int]]:
    """For each source point, the ``k`` nearest targets ordered by (distance in whole µÅ, index)."""
    out = []
    for i, p in enumerate(points_from):
        cand = [(round(_dist(p, q) * 1e6), j) for j, q in enumerate(points_to) if not (exclude_self and i == j)]
        cand.sort()
        out.append([j for _, j in cand[:k]])
    return out


def edge_sets(c: Complex, cfg: GraphConfig | None = None) -> dict[EdgeType, list[tuple[int, int]]]:
    """(receiver, sender) lists per edge type, from the definitions."""
    cfg = cfg or GraphConfig()
    chains = [list(c.heavy), list(c.light), list(c.antigen)]
    offsets = [0, len(c.heavy), len(c.heavy) + len(c.light)]
    n_res = sum(len(ch) for ch in chains)
    ca = [r.atoms[1] for ch in chains for r in ch]
    members = [[offsets[k] + i for i in range(len(chains[k]))] for k in range(3)]
    E: dict[EdgeType, list[tuple[int, int]]] = {t: [] for t in EdgeType}

    for idx in members:
        for i in idx:
            for j in idx:
                if i != j and _dist(ca[i], ca[j]) < cfg.radial_cutoff:
                    E[EdgeType.INTRA_RADIAL].append((i, j))
                if abs(i - j) in (1, 2):
                    E[EdgeType.INTRA_SEQ].append((i, j))
        pts = [ca[i] for i in idx]
        for a, nb in enumerate(knn(pts, pts, min(cfg.knn_k, len(idx) - 1), exclude_self=True)):
            for b in nb:
                E[EdgeType.INTRA_KNN].append((idx[a], idx[b]))

    ab = members[0] + members[1]
    ag = members[2]
    for i in ab:
        for j in ag:
            if _dist(ca[i], ca[j]) < cfg.inter_radial_cutoff:
                E[EdgeType.INTER_RADIAL].append((i, j))
                E[EdgeType.INTER_RADIAL].append((j, i))
    if ab:
        for a, nb in enumerate(knn([ca[i] for i in ab], [ca[j] for j in ag], cfg.inter_knn_k)):
            E[EdgeType.INTER_KNN].extend((ab[a], ag[b]) for b in nb)
        for a, nb in enumerate(knn([ca[j] for j in ag], [ca[i] for i in ab], cfg.inter_knn_k)):
            E[EdgeType.INTER_KNN].extend((ag[a], ab[b]) for b in nb)

    for k, t in enumerate((EdgeType.GLOB_HC, EdgeType.GLOB_LC, EdgeType.GLOB_AG)):
        token = n_res + k
        for i in members[k]:
            E[t].append((token, i))
            E[t].append((i, token))

    virtual = [n_res + 3 + v for v in range(cfg.n_virtual)]
    epitope = [offsets[2] + e for e in c.epitope]
    cdr = list(range(*c.cdr_span))
    for t, targets in ((EdgeType.VN_EPITOPE, epitope), (EdgeType.VN_CDR, cdr)):
        for v in virtual:
            for r in targets:
                E[t].append((v, r))
                E[t].append((r, v))
    return E


def _horn_rmsd(P, Q) -> float:
    """Minimum RMSD over proper rigid motions via the quaternion eigenproblem."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    P = P - P.mean(axis=0)
    Q = Q - Q.mean(axis=0)
    S = P.T @ Q
    (xx, xy, xz), (yx, yy, yz), (zx, zy, zz) = S
    N = np.array(
        [
            [xx + yy + zz, yz - zy, zx - xz, xy - yx],
            [yz - zy, xx - yy - zz, xy + yx, zx + xz],
            [zx - xz, xy + yx, -xx + yy - zz, yz + zy],
            [xy - yx, zx + xz, yz + zy, -xx - yy + zz],
        ]
    )
    lam = np.linalg.eigvalsh(N)[-1]
    msd = (np.sum(P * P) + np.sum(Q * Q) - 2.0 * lam) / len(P)
    return math.sqrt(max(msd, 0.0))


def interface(pred: Complex, ref: Complex, d_c: float = 8.0) -> dict:
    """fnat, iRMSD and epitope F1 by enumeration (``nan`` without native contacts)."""

    def pairs(c):
        out = set()
        for i, r in enumerate(c.cdr_residues):
            for j, g in enumerate(c.antigen):
                if _dist(r.atoms[1], g.atoms[1]) < d_c:
                    out.add((i, j))
        return out

    native, predicted = pairs(ref), pairs(pred)
    if not native:
        return {"fnat": math.nan, "irmsd": math.nan, "epitope_f1": math.nan}
    fnat = sum(1 for p in predicted if p in native) / len(native)
    cdr_set = sorted({i for i, _ in native})
    ag_set = sorted({j for _, j in native})
    P = [pred.cdr_residues[i].atoms[1] for i in cdr_set] + [pred.antigen[j].atoms[1] for j in ag_set]
    Q = [ref.cdr_residues[i].atoms[1] for i in cdr_set] + [ref.antigen[j].atoms[1] for j in ag_set]
    irmsd = _horn_rmsd(P, Q)
    true_epi = {j for _, j in native}
    pred_epi = {j for _, j in predicted}
    tp = len(true_epi & pred_epi)
    if tp == 0:
        f1 = 0.0
    else:
        prec, rec = tp / len(pred_epi), tp / len(true_epi)
        f1 = 2 * prec * rec / (prec + rec)
    return {"fnat": fnat, "irmsd": irmsd, "epitope_f1": f1}

"""Sequence, structure and interface evaluation metrics.

Undefined values (for instance CAAR on a CDR without contacts) are ``nan``
and are left out of aggregates; CSV output writes them as ``NA``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax
from scipy.stats import rankdata

from .errors import InvalidInputError, ShapeError
from .geometry import pairwise_distances, superpose_rmsd
from .structure import AMINO_ACIDS, CONTACT_CUTOFF, Complex, aa_to_index, compute_contact_labels

METRIC_COLUMNS = ("aar", "caar", "ppl", "rmsd", "fnat", "irmsd", "dockq", "epitope_f1")
CSV_COLUMNS = ("id", *METRIC_COLUMNS)
MISSING = "NA"

DOCKQ_IRMSD_SCALE = 1.5
DOCKQ_LRMSD_SCALE = 8.5


def _seq(x) -> np.ndarray:
    if isinstance(x, str):
        return np.array([aa_to_index(ch) for ch in x], dtype=int)
    return np.asarray(x, dtype=int)


def aar(pred_seq, true_seq) -> float:
    """Fraction of positions where the designed residue equals the native one."""
    p, t = _seq(pred_seq), _seq(true_seq)
    if p.shape != t.shape:
        raise ShapeError(f"aar: lengths {len(p)} and {len(t)} differ")
    if len(t) == 0:
        return math.nan
    return float(np.mean(p == t))


def caar(pred_seq, true_seq, contact_labels) -> float:
    """AAR restricted to native contact positions; ``nan`` when there are none."""
    p, t = _seq(pred_seq), _seq(true_seq)
    c = np.asarray(contact_labels).astype(bool)
    if not (p.shape == t.shape == c.shape):
        raise ShapeError("caar: sequence and label lengths differ")
    if not c.any():
        return math.nan
    return float(np.mean(p[c] == t[c]))


def perplexity(logits, true_seq) -> float:
    """``exp`` of the mean negative log-likelihood of the native residues (unknown residues skipped)."""
    logits = np.asarray(logits, dtype=float)
    t = _seq(true_seq)
    if logits.shape != (len(t), 20):
        raise ShapeError(f"perplexity: logits shape {logits.shape} for {len(t)} positions")
    if not np.isfinite(logits).all():
        raise InvalidInputError("perplexity: non-finite logits")
    known = t >= 0
    if not known.any():
        return math.nan
    lp = log_softmax(logits[known], axis=1)
    return float(np.exp(-np.mean(lp[np.arange(known.sum()), t[known]])))


def cdr_rmsd(pred: Complex, ref: Complex, superpose: bool = False) -> float:
    """Cα RMSD over the CDR span, in the shared frame unless ``superpose``."""
    if pred.cdr_len != ref.cdr_len:
        raise ShapeError("cdr_rmsd: CDR lengths differ")
    return superpose_rmsd(pred.cdr_ca(), ref.cdr_ca(), superpose=superpose)


def contact_pairs(c: Complex, d_c: float = CONTACT_CUTOFF) -> set[tuple[int, int]]:
    """(CDR position, antigen index) pairs with Cα distance below ``d_c``."""
    d = pairwise_distances(c.cdr_ca(), c.antigen_ca())
    return {(int(i), int(j)) for i, j in np.argwhere(d < d_c)}


def f1_score(pred: set, true: set) -> float:
    """F1 of two sets; ``nan`` when ``true`` is empty, 0 when nothing is predicted."""
    if not true:
        return math.nan
    tp = len(pred & true)
    if tp == 0:
        return 0.0
    precision = tp / len(pred)
    recall = tp / len(true)
    return 2 * precision * recall / (precision + recall)


def dockq(fnat: float, irmsd: float, lrmsd: float) -> float:
    return (
        fnat + 1.0 / (1.0 + (irmsd / DOCKQ_IRMSD_SCALE) ** 2) + 1.0 / (1.0 + (lrmsd / DOCKQ_LRMSD_SCALE) ** 2)
    ) / 3.0


@dataclass(frozen=True)
class InterfaceMetrics:
    fnat: float
    irmsd: float
    dockq: float
    epitope_f1: float


def _check_same_shape(pred: Complex, ref: Complex) -> None:
    if (
        pred.cdr_span != ref.cdr_span
        or len(pred.heavy) != len(ref.heavy)
        or len(pred.light) != len(ref.light)
        or len(pred.antigen) != len(ref.antigen)
    ):
        raise ShapeError(f"{pred.id} vs {ref.id}: chain lengths or CDR span differ")


def interface_metrics(pred: Complex, ref: Complex, d_c: float = CONTACT_CUTOFF) -> InterfaceMetrics:
    """fnat, interface RMSD, DockQ and epitope F1 of ``pred`` against the native ``ref``.

    The interface is every CDR or antigen residue in at least one native
    contact; its RMSD is taken after optimal superposition. DockQ uses the
    in-frame CDR Cα RMSD as the ligand term. All four are ``nan`` when the
    native complex has no contacts.
    """
    _check_same_shape(pred, ref)
    native = contact_pairs(ref, d_c)
    if not native:
        nan = math.nan
        return InterfaceMetrics(nan, nan, nan, nan)
    predicted = contact_pairs(pred, d_c)
    fnat = len(predicted & native) / len(native)
    cdr_idx = sorted({i for i, _ in native})
    ag_idx = sorted({j for _, j in native})
    P = np.concatenate([pred.cdr_ca()[cdr_idx], pred.antigen_ca()[ag_idx]])
    Q = np.concatenate([ref.cdr_ca()[cdr_idx], ref.antigen_ca()[ag_idx]])
    irmsd = superpose_rmsd(P, Q, superpose=True)
    lrmsd = cdr_rmsd(pred, ref)
    ep = f1_score({j for _, j in predicted}, {j for _, j in native})
    return InterfaceMetrics(fnat, irmsd, dockq(fnat, irmsd, lrmsd), ep)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Predictions and reports
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    """Designed CDR for one complex; ``logits`` and ``contact_probs`` may be absent."""

    id: str
    sequence: str
    cdr_ca: np.ndarray
    contact_probs: np.ndarray | None = None
    logits: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "sequence": self.sequence, "cdr_ca": np.asarray(self.cdr_ca).tolist()}
        if self.contact_probs is not None:
            d["contact_probs"] = np.asarray(self.contact_probs).tolist()
        if self.logits is not None:
            d["logits"] = np.asarray(self.logits).tolist()
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> Prediction:
        try:
            cp = obj.get("contact_probs")
            lg = obj.get("logits")
            return cls(
                id=str(obj["id"]),
                sequence=str(obj["sequence"]),
                cdr_ca=np.asarray(obj["cdr_ca"], dtype=float).reshape(-1, 3),
                contact_probs=None if cp is None else np.asarray(cp, dtype=float),
                logits=None if lg is None else np.asarray(lg, dtype=float),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed prediction record: {exc}") from None

    @classmethod
    def from_complex(cls, c: Complex) -> Prediction:
        """Treat a complex's own CDR as the design (no logits)."""
        seq = "".join(AMINO_ACIDS[i] if i >= 0 else "X" for i in c.cdr_sequence())
        return cls(c.id, seq, c.cdr_ca())


def read_predictions(path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{n}: {exc}") from None
            out.append(Prediction.from_dict(obj))
    return out


def write_predictions(path, preds: Sequence[Prediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_dict()) + "\n")


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def values(self, metric: str) -> np.ndarray:
        v = np.array([r[metric] for r in self.rows], dtype=float)
        return v[~np.isnan(v)]

    def mean(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.mean()) if len(v) else math.nan

    def std(self, metric: str) -> float:
        """Population standard deviation over the defined values."""
        v = self.values(metric)
        return float(v.std()) if len(v) else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)

        def fmt(x):
            return MISSING if isinstance(x, float) and math.isnan(x) else repr(float(x))

        for r in self.rows:
            w.writerow([r["id"], *(fmt(r[m]) for m in METRIC_COLUMNS)])
        w.writerow(["mean", *(fmt(self.mean(m)) for m in METRIC_COLUMNS)])
        w.writerow(["std", *(fmt(self.std(m)) for m in METRIC_COLUMNS)])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'metric':<11}{'mean':>10}{'std':>10}{'n':>5}"
        lines = [head, "-" * len(head)]
        for m in METRIC_COLUMNS:
            lines.append(f"{m:<11}{self.mean(m):>10.4f}{self.std(m):>10.4f}{len(self.values(m)):>5d}")
        return "\n".join(lines)


def evaluate_one(pred: Prediction, ref: Complex, superpose: bool = False, d_c: float = CONTACT_CUTOFF) -> dict:
    seq = _seq(pred.sequence)
    if len(seq) != ref.cdr_len or len(pred.cdr_ca) != ref.cdr_len:
        raise ShapeError(f"{ref.id}: prediction covers {len(seq)} positions, CDR has {ref.cdr_len}")
    designed = ref.with_cdr(sequence=seq, ca=pred.cdr_ca)
    true = ref.cdr_sequence()
    im = interface_metrics(designed, ref, d_c)
    return {
        "id": ref.id,
        "aar": aar(seq, true),
        "caar": caar(seq, true, compute_contact_labels(ref, d_c)),
        "ppl": math.nan if pred.logits is None else perplexity(pred.logits, true),
        "rmsd": cdr_rmsd(designed, ref, superpose),
        "fnat": im.fnat,
        "irmsd": im.irmsd,
        "dockq": im.dockq,
        "epitope_f1": im.epitope_f1,
    }


def evaluate_dataset(preds: Sequence[Prediction], refs: Sequence[Complex], superpose: bool = False) -> EvalReport:
    """Per-complex metrics, matched by id, in reference order."""
    by_id = {p.id: p for p in preds}
    ref_ids = [r.id for r in refs]
    missing = sorted(set(ref_ids) - set(by_id))
    extra = sorted(set(by_id) - set(ref_ids))
    if missing or extra or len(by_id) != len(preds) or len(set(ref_ids)) != len(ref_ids):
        dup = len(by_id) != len(preds) or len(set(ref_ids)) != len(ref_ids)
        raise InvalidInputError(
            f"prediction/reference ids do not match: missing={missing} unexpected={extra}"
            + (" (duplicate ids)" if dup else "")
        )
    return EvalReport([evaluate_one(by_id[r.id], r, superpose) for r in refs])

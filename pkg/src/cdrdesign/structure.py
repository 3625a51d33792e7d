"""Antibody-antigen complex model, file formats, contact labels and CDR masking.

Amino acids are stored as 0-based indices into :data:`AMINO_ACIDS`;
``UNKNOWN`` (-1) marks masked or unrecognised residues and encodes as an
all-zero one-hot downstream.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySetError, ParseError
from .geometry import pairwise_distances

log = logging.getLogger(__name__)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
UNKNOWN = -1
AA_INDEX = {a: i for i, a in enumerate(AMINO_ACIDS)}

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F", "GLY": "G",
    "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L", "MET": "M", "ASN": "N",
    "PRO": "P", "GLN": "Q", "ARG": "R", "SER": "S", "THR": "T", "VAL": "V",
    "TRP": "W", "TYR": "Y",
}
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items()}
BACKBONE_ATOMS = ("N", "CA", "C", "O")
CONTACT_CUTOFF = 8.0


def aa_to_index(code: str) -> int:
    if code == "X":
        return UNKNOWN
    try:
        return AA_INDEX[code]
    except KeyError:
        raise ParseError(f"unknown residue code {code!r}", field="aa") from None


def index_to_aa(idx: int) -> str:
    return "X" if idx == UNKNOWN else AMINO_ACIDS[idx]


@dataclass(frozen=True)
class Residue:
    """One residue: amino-acid index and backbone atoms ``[N, CA, C, O]`` (4x3, Å)."""

    aa: int
    atoms: np.ndarray
    chain_index: int = 0

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float).reshape(4, 3)
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        if not (self.aa == UNKNOWN or 0 <= self.aa < 20):
            raise ParseError(f"amino index {self.aa} out of range", field="aa")
        if not np.all(np.isfinite(atoms)):
            raise ParseError("non-finite backbone coordinate", field="atoms")

    @property
    def ca(self) -> np.ndarray:
        return self.atoms[1]

    def __eq__(self, other):
        if not isinstance(other, Residue):
            return NotImplemented
        return (
            self.aa == other.aa
            and self.chain_index == other.chain_index
            and np.array_equal(self.atoms, other.atoms)
        )

    __hash__ = None


@dataclass(frozen=True)
class Complex:
    """Heavy/light/antigen chains with a CDR span (on the heavy chain) and an epitope."""

    id: str
    heavy: tuple[Residue, ...]
    light: tuple[Residue, ...]
    antigen: tuple[Residue, ...]
    cdr_span: tuple[int, int]
    epitope: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "heavy", tuple(self.heavy))
        object.__setattr__(self, "light", tuple(self.light))
        object.__setattr__(self, "antigen", tuple(self.antigen))
        object.__setattr__(self, "epitope", tuple(sorted(set(int(e) for e in self.epitope))))
        start, end = (int(v) for v in self.cdr_span)
        object.__setattr__(self, "cdr_span", (start, end))
        if not (0 <= start < end <= len(self.heavy)):
            raise ParseError(
                f"span [{start}, {end}) outside heavy chain of length {len(self.heavy)}",
                field="cdr_span",
            )
        for e in self.epitope:
            if not 0 <= e < len(self.antigen):
                raise ParseError(f"epitope index {e} outside antigen", field="epitope")

    @property
    def cdr_len(self) -> int:
        return self.cdr_span[1] - self.cdr_span[0]

    @property
    def cdr_residues(self) -> tuple[Residue, ...]:
        return self.heavy[self.cdr_span[0] : self.cdr_span[1]]

    def cdr_sequence(self) -> np.ndarray:
        return np.array([r.aa for r in self.cdr_residues], dtype=int)

    def cdr_ca(self) -> np.ndarray:
        return np.array([r.ca for r in self.cdr_residues]).reshape(-1, 3)

    def antigen_ca(self) -> np.ndarray:
        return np.array([r.ca for r in self.antigen]).reshape(-1, 3)

    def transformed(self, R: np.ndarray, t: np.ndarray) -> Complex:
        """Copy with every atom mapped to ``R @ x + t``."""
        R = np.asarray(R, dtype=float)
        t = np.asarray(t, dtype=float)

        def move(chain):
            return tuple(replace(r, atoms=r.atoms @ R.T + t) for r in chain)

        return replace(self, heavy=move(self.heavy), light=move(self.light), antigen=move(self.antigen))

    def with_cdr(self, sequence: Sequence[int] | None = None, ca: np.ndarray | None = None) -> Complex:
        """Copy with CDR amino types and/or Cα positions replaced.

        Other backbone atoms move rigidly with their Cα.
        """
        start, end = self.cdr_span
        heavy = list(self.heavy)
        for k in range(end - start):
            r = heavy[start + k]
            aa = r.aa if sequence is None else int(sequence[k])
            atoms = r.atoms if ca is None else r.atoms + (np.asarray(ca[k], dtype=float) - r.ca)
            heavy[start + k] = Residue(aa, atoms, r.chain_index)
        return replace(self, heavy=tuple(heavy))


# ---------------------------------------------------------------------------
# Canonical JSON format
# ---------------------------------------------------------------------------


def _check_bond_lengths(res: Residue, where: str) -> None:
    n, ca, c, _ = res.atoms
    for name, d in (("N-CA", np.linalg.norm(n - ca)), ("CA-C", np.linalg.norm(ca - c))):
        if not 0.5 < d < 3.0:
            log.warning("%s: %s distance %.3f Å outside (0.5, 3.0)", where, name, d)


def _parse_residue(obj, where: str, index: int) -> Residue:
    if not isinstance(obj, dict):
        raise ParseError("residue must be an object", field=where)
    aa = obj.get("aa")
    if not isinstance(aa, str) or len(aa) != 1:
        raise ParseError("missing or malformed amino-acid code", field=f"{where}.aa")
    try:
        aa_idx = aa_to_index(aa)
    except ParseError:
        raise ParseError(f"unknown residue code {aa!r}", field=f"{where}.aa") from None
    atoms = []
    for name in BACKBONE_ATOMS:
        v = obj.get(name)
        if (
            not isinstance(v, (list, tuple))
            or len(v) != 3
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
        ):
            raise ParseError("expected [x, y, z]", field=f"{where}.{name}")
        if not all(math.isfinite(x) for x in v):
            raise ParseError("non-finite coordinate", field=f"{where}.{name}")
        atoms.append([float(x) for x in v])
    res = Residue(aa_idx, np.array(atoms), index)
    _check_bond_lengths(res, where)
    return res


def complex_from_dict(obj, derive_epitope: bool = False, d_c: float = CONTACT_CUTOFF) -> Complex:
    if not isinstance(obj, dict):
        raise ParseError("document must be a JSON object")
    cid = obj.get("id")
    if not isinstance(cid, str):
        raise ParseError("missing or non-string id", field="id")
    chains = {}
    for key in ("heavy", "light", "antigen"):
        v = obj.get(key)
        if not isinstance(v, list):
            raise ParseError("expected a list of residues", field=key)
        chains[key] = [_parse_residue(r, f"{key}[{i}]", i) for i, r in enumerate(v)]
    if not chains["heavy"]:
        raise ParseError("heavy chain is empty", field="heavy")
    span = obj.get("cdr_span")
    if (
        not isinstance(span, list)
        or len(span) != 2
        or not all(isinstance(x, int) and not isinstance(x, bool) for x in span)
    ):
        raise ParseError("expected [start, end_exclusive]", field="cdr_span")
    epitope = obj.get("epitope")
    if epitope is None and derive_epitope:
        epitope = []
    if not isinstance(epitope, list) or not all(
        isinstance(x, int) and not isinstance(x, bool) for x in epitope
    ):
        raise ParseError("expected a list of antigen indices", field="epitope")
    c = Complex(cid, chains["heavy"], chains["light"], chains["antigen"], tuple(span), tuple(epitope))
    if derive_epitope and not c.epitope:
        c = replace(c, epitope=tuple(sorted(contacted_antigen(c, d_c))))
    return c


def parse_complex_json(document: bytes | str, derive_epitope: bool = False) -> Complex:
    """Parse one canonical JSON complex.

    With ``derive_epitope`` a missing or empty epitope is filled with the
    antigen residues within 8 Å of any CDR Cα of the given structure.
    """
    try:
        obj = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    return complex_from_dict(obj, derive_epitope=derive_epitope)


def _residue_dict(r: Residue) -> dict:
    out = {"aa": index_to_aa(r.aa)}
    for name, xyz in zip(BACKBONE_ATOMS, r.atoms):
        out[name] = [float(x) for x in xyz]
    return out


def complex_to_dict(c: Complex) -> dict:
    return {
        "id": c.id,
        "heavy": [_residue_dict(r) for r in c.heavy],
        "light": [_residue_dict(r) for r in c.light],
        "antigen": [_residue_dict(r) for r in c.antigen],
        "cdr_span": list(c.cdr_span),
        "epitope": list(c.epitope),
    }


def serialize_complex_json(c: Complex) -> str:
    return json.dumps(complex_to_dict(c), separators=(",", ":"))


def read_dataset(path) -> list[Complex]:
    """Read a newline-delimited file of canonical complexes."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_complex_json(line))
            except ParseError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
    return out


def write_dataset(path, complexes: Iterable[Complex]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in complexes:
            fh.write(serialize_complex_json(c) + "\n")


# ---------------------------------------------------------------------------
# PDB subset
# ---------------------------------------------------------------------------


def _read_chain_atoms(lines: list[str], chain_id: str) -> list[Residue]:
    residues: dict[int, dict] = {}
    for line in lines:
        if not line.startswith("ATOM  "):
            continue
        if len(line) < 54 or line[21] != chain_id:
            continue
        name = line[12:16].strip()
        if name not in BACKBONE_ATOMS:
            continue
        try:
            seq = int(line[22:26])
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except ValueError:
            raise ParseError(f"malformed ATOM record: {line.rstrip()!r}") from None
        entry = residues.setdefault(seq, {"resname": line[17:20].strip(), "atoms": {}})
        entry["atoms"].setdefault(name, xyz)
    out = []
    for seq in sorted(residues):
        entry = residues[seq]
        missing = [a for a in BACKBONE_ATOMS if a not in entry["atoms"]]
        if missing:
            log.warning("chain %s residue %d lacks %s; dropped", chain_id, seq, ",".join(missing))
            continue
        one = THREE_TO_ONE.get(entry["resname"])
        aa = UNKNOWN if one is None else AA_INDEX[one]
        atoms = np.array([entry["atoms"][a] for a in BACKBONE_ATOMS])
        out.append(Residue(aa, atoms, len(out)))
    return out


def parse_pdb_subset(
    text: bytes | str,
    heavy_id: str,
    light_id: str | None,
    antigen_ids: Sequence[str],
    cdr_span: tuple[int, int],
    epitope: Sequence[int],
    id: str = "pdb",
) -> Complex:
    """Build a complex from PDB ATOM records of the named chains.

    Only N/CA/C/O are read; HETATM, altloc and occupancy are ignored.
    ``cdr_span`` and ``epitope`` index the residues that survive parsing.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    lines = text.splitlines()
    present = {line[21] for line in lines if line.startswith("ATOM  ") and len(line) > 21}

    def chain(cid: str) -> list[Residue]:
        if cid not in present:
            raise ParseError(f"chain {cid!r} not present", field="chain")
        res = _read_chain_atoms(lines, cid)
        if not res:
            raise ParseError(f"chain {cid!r} has no usable residues", field="chain")
        return res

    heavy = chain(heavy_id)
    light = chain(light_id) if light_id else []
    antigen: list[Residue] = []
    for cid in antigen_ids:
        antigen.extend(chain(cid))
    antigen = [replace(r, chain_index=i) for i, r in enumerate(antigen)]
    return Complex(id, heavy, light, antigen, tuple(cdr_span), tuple(epitope))


def serialize_pdb(c: Complex, heavy_id: str = "H", light_id: str = "L", antigen_id: str = "A") -> str:
    lines = []
    serial = 1
    for cid, chain in ((heavy_id, c.heavy), (light_id, c.light), (antigen_id, c.antigen)):
        for resseq, r in enumerate(chain, 1):
            resname = ONE_TO_THREE.get(index_to_aa(r.aa), "UNK")
            for name, (x, y, z) in zip(BACKBONE_ATOMS, r.atoms):
                element = name[0]
                lines.append(
                    f"ATOM  {serial:5d} {name:<4s} {resname:3s} {cid}{resseq:4d}    "
                    f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {element:>2s}"
                )
                serial += 1
        if chain:
            lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Contacts and masking
# ---------------------------------------------------------------------------


def compute_contact_labels(c: Complex, d_c: float = CONTACT_CUTOFF) -> np.ndarray:
    """1 for each CDR residue whose Cα is strictly closer than ``d_c`` to some antigen Cα."""
    if not c.antigen:
        raise EmptySetError("contact labels need a non-empty antigen")
    d = pairwise_distances(c.cdr_ca(), c.antigen_ca())
    return (d.min(axis=1) < d_c).astype(np.int64)


def contacted_antigen(c: Complex, d_c: float = CONTACT_CUTOFF) -> set[int]:
    """Antigen residues within ``d_c`` of any CDR Cα."""
    if not c.antigen:
        raise EmptySetError("contacted_antigen needs a non-empty antigen")
    d = pairwise_distances(c.cdr_ca(), c.antigen_ca())
    return set(np.nonzero((d < d_c).any(axis=0))[0].tolist())


def mask_cdr_sequence(c: Complex) -> Complex:
    """Copy with every CDR residue set to ``UNKNOWN``; coordinates untouched."""
    return c.with_cdr(sequence=[UNKNOWN] * c.cdr_len)


def interpolate_cdr_coordinates(c: Complex, spacing: float = 3.8) -> Complex:
    """Place CDR Cα atoms on the line between the flanking framework anchors.

    With both anchors present the CDR is spread evenly between them; with a
    single anchor the loop extends from it at ``spacing`` Å towards the
    epitope (or antigen) centroid. Other backbone atoms ride rigidly along.
    """
    start, end = c.cdr_span
    L = c.cdr_len
    left = c.heavy[start - 1].ca if start > 0 else None
    right = c.heavy[end].ca if end < len(c.heavy) else None
    target_pool = [c.antigen[e].ca for e in c.epitope] or [r.ca for r in c.antigen]
    target = np.mean(target_pool, axis=0) if target_pool else np.zeros(3)
    if left is not None and right is not None:
        fr = np.arange(1, L + 1) / (L + 1)
        ca = left + fr[:, None] * (right - left)
    else:
        anchor = left if left is not None else right
        if anchor is None:
            anchor = np.mean([r.ca for r in c.heavy], axis=0)
        direction = target - anchor
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
        steps = np.arange(1, L + 1) if left is not None else np.arange(L, 0, -1)
        ca = anchor + spacing * steps[:, None] * direction
    return c.with_cdr(ca=ca)

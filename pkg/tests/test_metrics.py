import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cdrdesign.errors import InvalidInputError, ShapeError
from cdrdesign.geometry import random_rotation
from cdrdesign.metrics import (
    CSV_COLUMNS,
    Prediction,
    aar,
    auroc,
    caar,
    cdr_rmsd,
    dockq,
    evaluate_dataset,
    f1_score,
    interface_metrics,
    perplexity,
    read_predictions,
    write_predictions,
)
from cdrdesign.synthetic import SynthParams, generate_synthetic_complex


def _synth(seed, cdr_len=8, antigen_len=20):
    return generate_synthetic_complex(seed, SynthParams(cdr_len=cdr_len, antigen_len=antigen_len))[0]


# sequence metrics


def test_aar_and_caar(rng):
    assert aar("ACDE", "ACDE") == 1.0
    assert caar("ACDE", "ACDE", [1, 0, 1, 0]) == 1.0
    assert math.isnan(caar("ACDE", "ACDE", [0, 0, 0, 0]))
    p, t, c = rng.integers(0, 20, 30), rng.integers(0, 20, 30), rng.integers(0, 2, 30)
    assert aar(p, t) == sum(a == b for a, b in zip(p, t)) / 30
    hits = [a == b for a, b, k in zip(p, t, c) if k]
    assert caar(p, t, c) == pytest.approx(sum(hits) / len(hits))
    with pytest.raises(ShapeError):
        aar("AC", "ACD")


def test_perplexity(rng):
    assert perplexity(np.zeros((5, 20)), "ACDEF") == pytest.approx(20.0, rel=1e-14)
    confident = np.full((3, 20), -30.0)
    confident[np.arange(3), [0, 1, 2]] = 30.0
    assert perplexity(confident, "ACD") == pytest.approx(1.0, abs=1e-12)
    logits, y = rng.normal(size=(6, 20)) * 2, rng.integers(0, 20, 6)
    nll = [math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(logits, y)]
    assert perplexity(logits, y) == pytest.approx(math.exp(np.mean(nll)), rel=1e-12)
    with pytest.raises(InvalidInputError):
        perplexity(np.full((1, 20), np.inf), "A")


# structural metrics


def test_cdr_rmsd(synth):
    c, _ = synth
    assert cdr_rmsd(c, c) == 0.0
    shifted = c.with_cdr(ca=c.cdr_ca() + [1.0, 0, 0])
    assert cdr_rmsd(shifted, c) == pytest.approx(1.0, abs=1e-12)
    assert cdr_rmsd(shifted, c, superpose=True) < 1e-9


def test_interface_identity_and_far(synth):
    c, _ = synth
    im = interface_metrics(c, c)
    assert (im.fnat, im.irmsd, im.dockq, im.epitope_f1) == (1.0, pytest.approx(0, abs=1e-9), pytest.approx(1.0), 1.0)
    far = c.with_cdr(ca=c.cdr_ca() + [100.0, 0, 0])
    im = interface_metrics(far, c)
    assert im.fnat == 0.0 and im.epitope_f1 == 0.0
    assert 0 <= im.dockq < 1


def test_f1_and_dockq_edges():
    assert math.isnan(f1_score({1}, set()))
    assert f1_score(set(), {1, 2}) == 0.0
    assert f1_score({1, 2}, {2, 3}) == pytest.approx(0.5)
    assert dockq(1.0, 0.0, 0.0) == 1.0
    assert 0 <= dockq(0.0, 50.0, 50.0) < 0.1


def _oracle_interface(pred, ref):
    pc, pa, rc, ra = pred.cdr_ca(), pred.antigen_ca(), ref.cdr_ca(), ref.antigen_ca()
    nat = {(i, j) for i in range(len(rc)) for j in range(len(ra)) if math.dist(rc[i], ra[j]) < 8.0}
    prd = {(i, j) for i in range(len(pc)) for j in range(len(pa)) if math.dist(pc[i], pa[j]) < 8.0}
    fnat = len(nat & prd) / len(nat)
    ci, aj = sorted({i for i, _ in nat}), sorted({j for _, j in nat})
    P = np.concatenate([pc[ci], pa[aj]])
    Q = np.concatenate([rc[ci], ra[aj]])
    P0, Q0 = P - P.mean(0), Q - Q.mean(0)
    rot, _ = Rotation.align_vectors(Q0, P0)
    irmsd = math.sqrt(np.mean(np.sum((rot.apply(P0) - Q0) ** 2, axis=1)))
    lrmsd = math.sqrt(np.mean(np.sum((pc - rc) ** 2, axis=1)))
    dq = (fnat + 1 / (1 + (irmsd / 1.5) ** 2) + 1 / (1 + (lrmsd / 8.5) ** 2)) / 3
    ep_p, ep_n = {j for _, j in prd}, {j for _, j in nat}
    tp = len(ep_p & ep_n)
    f1 = 0.0 if tp == 0 else 2 * tp / (len(ep_p) + len(ep_n))
    return fnat, irmsd, dq, f1


def test_interface_matches_brute_force(rng):
    for seed in range(6):
        ref = _synth(seed, cdr_len=int(rng.integers(5, 16)), antigen_len=int(rng.integers(10, 41)))
        pred = ref.with_cdr(ca=ref.cdr_ca() + rng.normal(size=(ref.cdr_len, 3)) * 2.0)
        im = interface_metrics(pred, ref)
        np.testing.assert_allclose([im.fnat, im.irmsd, im.dockq, im.epitope_f1], _oracle_interface(pred, ref), atol=1e-6)


def test_interface_rigid_invariance(rng):
    ref = _synth(3)
    pred = ref.with_cdr(ca=ref.cdr_ca() + rng.normal(size=(ref.cdr_len, 3)))
    R, t = random_rotation(rng), rng.uniform(-40, 40, 3)
    a = interface_metrics(pred, ref)
    b = interface_metrics(pred.transformed(R, t), ref.transformed(R, t))
    assert a.fnat == b.fnat and a.epitope_f1 == b.epitope_f1
    assert b.dockq == pytest.approx(a.dockq, abs=1e-9)


def test_auroc():
    assert auroc([0.1, 0.9, 0.4, 0.8], [0, 1, 0, 1]) == 1.0
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    assert math.isnan(auroc([0.1, 0.2], [1, 1]))


# datasets and reports


def _pred_of(c, seq=None, shift=0.0):
    p = Prediction.from_complex(c)
    if seq is not None:
        p.sequence = seq
    p.cdr_ca = p.cdr_ca + shift
    return p


def test_evaluate_single_and_two_rows():
    a, b = _synth(1), _synth(2)
    rep = evaluate_dataset([_pred_of(a)], [a])
    assert rep.mean("aar") == 1.0 and rep.std("aar") == 0.0
    wrong = "".join("A" if ch != "A" else "C" for ch in Prediction.from_complex(b).sequence)
    rep = evaluate_dataset([_pred_of(a), _pred_of(b, wrong)], [a, b])
    assert rep.mean("aar") == 0.5 and rep.std("aar") == 0.5
    assert math.isnan(rep.mean("ppl"))


def test_evaluate_permutation_invariant(rng):
    refs = [_synth(s) for s in range(4)]
    preds = [_pred_of(c, shift=rng.normal(size=3)) for c in refs]
    r1 = evaluate_dataset(preds, refs)
    order = rng.permutation(4)
    r2 = evaluate_dataset([preds[k] for k in order], [refs[k] for k in order])
    for m in ("aar", "rmsd", "fnat", "irmsd", "dockq", "epitope_f1"):
        assert r2.mean(m) == pytest.approx(r1.mean(m), rel=1e-12)
        assert r2.std(m) == pytest.approx(r1.std(m), rel=1e-9, abs=1e-15)


def test_evaluate_id_mismatch():
    a, b = _synth(1), _synth(2)
    with pytest.raises(InvalidInputError, match="synth-2"):
        evaluate_dataset([_pred_of(a)], [a, b])


def test_csv_header_and_missing():
    a = _synth(1)
    text = evaluate_dataset([_pred_of(a)], [a]).to_csv().splitlines()
    assert text[0] == "id,aar,caar,ppl,rmsd,fnat,irmsd,dockq,epitope_f1"
    assert tuple(text[0].split(",")) == CSV_COLUMNS
    assert text[1].split(",")[3] == "NA"
    assert [r.split(",")[0] for r in text[1:]] == [a.id, "mean", "std"]


def test_prediction_round_trip(tmp_path, rng):
    p = Prediction("x", "ACD", rng.normal(size=(3, 3)), rng.uniform(size=3), rng.normal(size=(3, 20)))
    write_predictions(tmp_path / "p.jsonl", [p, Prediction("y", "A", np.zeros((1, 3)))])
    back = read_predictions(tmp_path / "p.jsonl")
    np.testing.assert_array_equal(back[0].logits, p.logits)
    assert back[1].logits is None and back[1].sequence == "A"
    (tmp_path / "bad.jsonl").write_text('{"id": "z"}\n')
    with pytest.raises(InvalidInputError):
        read_predictions(tmp_path / "bad.jsonl")

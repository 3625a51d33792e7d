import math

import numpy as np
import pytest
import torch

from cdrdesign import heads
from cdrdesign.engine import Mlp, MlpSpec, finite_difference_check
from cdrdesign.errors import EmptySetError, ShapeError
from cdrdesign.geometry import RbfSpec, random_rotation
from cdrdesign.model import build_model, decode, decode_string, prepare_example

from conftest import line_complex, small_model_config

f64 = torch.float64
RBF = RbfSpec.uniform(0.0, 20.0, 17)


def _t(rng, *shape, scale=1.0):
    return torch.tensor(rng.normal(size=shape) * scale)


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# distance bias


def test_distance_bias_values():
    assert heads.distance_bias(0.0, 4.0) == 1.0
    assert heads.distance_bias(8.0, 4.0) == pytest.approx(math.exp(-2), rel=1e-14)
    assert heads.distance_bias(12.0, 4.0) == pytest.approx(math.exp(-4.5), rel=1e-14)
    t = heads.distance_bias(torch.tensor([0.0, 8.0], dtype=f64), 4.0)
    np.testing.assert_allclose(t.numpy(), [1.0, math.exp(-2)], rtol=1e-14)


# cross attention


def test_attention_rows_sum_to_one(rng):
    L, M, D = 5, 9, 8
    o, w = heads.cross_attention(_t(rng, L, D), _t(rng, M, D), _t(rng, L, 3, scale=5), _t(rng, M, 3, scale=5), _t(rng, D, D), _t(rng, D, D), _t(rng, D, D), 2, 4.0)
    assert w.shape == (2, L, M) and o.shape == (L, 2 * D)
    assert torch.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-12)


def test_attention_matches_loop_oracle(rng):
    L, M, D, H = 3, 4, 6, 2
    h_c, h_a = rng.normal(size=(L, D)), rng.normal(size=(M, D))
    x_c, x_a = rng.normal(size=(L, 3)) * 4, rng.normal(size=(M, 3)) * 4
    Wq, Wk, Wv = (rng.normal(size=(D, D)) for _ in range(3))
    o, _ = heads.cross_attention(*(torch.tensor(a) for a in (h_c, h_a, x_c, x_a, Wq, Wk, Wv)), H, 4.0)
    hd = D // H
    for i in range(L):
        np.testing.assert_allclose(o[i, :D].numpy(), h_c[i], rtol=0)
        for h in range(H):
            sl = slice(h * hd, (h + 1) * hd)
            q = (Wq @ h_c[i])[sl]
            s = [q @ (Wk @ h_a[j])[sl] / math.sqrt(hd) + math.exp(-np.sum((x_c[i] - x_a[j]) ** 2) / 32) for j in range(M)]
            a = np.exp(s - np.max(s))
            a /= a.sum()
            ref = sum(a[j] * (Wv @ h_a[j])[sl] for j in range(M))
            np.testing.assert_allclose(o[i, D + h * hd : D + (h + 1) * hd].numpy(), ref, atol=1e-12)


def test_attention_identical_values_without_bias(rng):
    L, M, D = 4, 6, 8
    h_ag = _t(rng, 1, D).expand(M, D)
    far = torch.full((M, 3), 1e3, dtype=f64)  # bias underflows to zero
    o, _ = heads.cross_attention(_t(rng, L, D), h_ag, _t(rng, L, 3), far, _t(rng, D, D), _t(rng, D, D), Wv := _t(rng, D, D), 2, 4.0)
    shared = (h_ag[0] @ Wv.T).numpy()
    np.testing.assert_allclose(o[:, D:].numpy(), np.broadcast_to(shared, (L, D)), atol=1e-12)


def test_attention_concentrates_on_near_residue(rng):
    L, M, D = 2, 5, 4
    x_c = torch.zeros(L, 3, dtype=f64)
    x_a = torch.tensor([[0.0, 0, 0]] + [[100.0, 0, 0]] * (M - 1), dtype=f64)
    zero = torch.zeros(D, D, dtype=f64)
    _, w = heads.cross_attention(_t(rng, L, D), _t(rng, M, D), x_c, x_a, zero, zero, _t(rng, D, D), 2, 4.0)
    # bias-only scores: softmax of (1, 0, 0, 0, 0)
    np.testing.assert_allclose(w[:, :, 0].numpy(), math.e / (math.e + M - 1), rtol=1e-12)
    assert torch.all(w[:, :, 0:1] > w[:, :, 1:])


def test_attention_empty_antigen(rng):
    with pytest.raises(EmptySetError):
        heads.cross_attention(_t(rng, 2, 4), torch.zeros(0, 4, dtype=f64), _t(rng, 2, 3), torch.zeros(0, 3, dtype=f64), *(_t(rng, 4, 4) for _ in range(3)), 2, 4.0)


# fingerprint and sequence head


def test_fingerprint_shape_zero_and_gradient(rng):
    torch.manual_seed(0)
    mlp = Mlp(MlpSpec((12, 10, 32)))
    o = _t(rng, 7, 12)
    assert mlp(o).shape == (7, 32)
    res = finite_difference_check(lambda: mlp(o).pow(2).sum(), dict(mlp.named_parameters()), n_samples=16)
    assert res.max_rel_error < 1e-6
    _zero(mlp)
    assert torch.all(mlp(o) == 0)


def test_sequence_head_uniform_at_zero(rng):
    torch.manual_seed(0)
    mlp = Mlp(MlpSpec((12, 10, 20)))
    z = _t(rng, 6, 12)
    res = finite_difference_check(lambda: torch.log_softmax(mlp(z), -1)[:, 3].sum(), dict(mlp.named_parameters()), n_samples=16)
    assert res.max_rel_error < 1e-6
    _zero(mlp)
    np.testing.assert_allclose(torch.softmax(mlp(z), -1).detach().numpy(), 1 / 20, rtol=1e-14)


# environment descriptor


def test_descriptor_all_alanine():
    c = line_complex([[0, 0, 0]], [[4.0 * k, 5, 0] for k in range(10)], antigen_aa=0)
    d = heads.environment_descriptor(c, 0, 8, RBF)
    np.testing.assert_array_equal(d[:20], np.eye(20)[0])
    assert d.shape == (20 + 17,)


def test_descriptor_matches_sort_oracle(synth, rng):
    c, _ = synth
    ag = c.antigen_ca()
    for pos in range(c.cdr_len):
        d = np.linalg.norm(ag - c.cdr_ca()[pos], axis=1)
        nearest = sorted(range(len(d)), key=lambda j: (d[j], j))[:8]
        hist = np.bincount([c.antigen[j].aa for j in nearest], minlength=20) / 8
        mu = np.asarray(RBF.centers)
        prof = np.mean([np.exp(-((d[j] - mu) ** 2) / (2 * RBF.width**2)) for j in nearest], axis=0)
        np.testing.assert_allclose(heads.environment_descriptor(c, pos, 8, RBF), np.concatenate([hist, prof]), atol=1e-12)


def test_descriptor_rigid_invariant_and_small_antigen(synth, rng):
    c, _ = synth
    moved = c.transformed(random_rotation(rng), rng.uniform(-50, 50, 3))
    np.testing.assert_allclose(heads.environment_descriptor(moved, 2, 8, RBF), heads.environment_descriptor(c, 2, 8, RBF), atol=1e-9)
    small = line_complex([[0, 0, 0]], [[5, 0, 0], [9, 0, 0]], antigen_aa=0)
    np.testing.assert_allclose(heads.environment_descriptor(small, 0, 8, RBF)[:20].sum(), 1.0)


# contact context


def test_context_k1_and_zero_embeddings(rng):
    L, M, D = 3, 5, 4
    h_ag, dist = _t(rng, M, D), torch.tensor(rng.uniform(1, 15, (L, M)))
    W, b = _t(rng, D, 17), _t(rng, D)
    knn = heads.knn_indices(dist, 1)
    a = heads.contact_context_aggregate(h_ag, dist, knn, W, b, RBF)
    for i in range(L):
        j = int(dist[i].argmin())
        ref = (heads.rbf_torch(dist[i, j], RBF) @ W.T + b) * h_ag[j]
        np.testing.assert_allclose(a[i].numpy(), ref.numpy(), rtol=1e-13)
    zero = heads.contact_context_aggregate(torch.zeros(M, D, dtype=f64), dist, heads.knn_indices(dist, 3), W, b, RBF)
    assert torch.all(zero == 0)


def test_context_matches_loop_oracle(rng):
    L, M, D, K = 4, 12, 5, 8
    h_ag, dist = rng.normal(size=(M, D)), rng.uniform(0, 20, (L, M))
    W, b = rng.normal(size=(D, 17)), rng.normal(size=D)
    a = heads.contact_context_aggregate(torch.tensor(h_ag), torch.tensor(dist), heads.knn_indices(torch.tensor(dist), K), torch.tensor(W), torch.tensor(b), RBF)
    mu = np.asarray(RBF.centers)
    for i in range(L):
        ref = np.zeros(D)
        for j in np.argsort(dist[i], kind="stable")[:K]:
            ref += (W @ np.exp(-((dist[i, j] - mu) ** 2) / (2 * RBF.width**2)) + b) * h_ag[j] / K
        np.testing.assert_allclose(a[i].numpy(), ref, atol=1e-10)


# contact prediction


def _contact_inputs(rng, L=4, D=6, F=5):
    return _t(rng, L, D), _t(rng, L, D), torch.tensor(rng.uniform(2, 12, L)), _t(rng, L, F)


def test_contacts_half_at_zero(rng):
    h, a, d, f = _contact_inputs(rng)
    mlp = Mlp(MlpSpec((6 + 6 + 17 + 5, 8, 8, 1)))
    _zero(mlp)
    c, _ = heads.predict_contacts(h, a, d, f, mlp, RBF)
    assert torch.all(c == 0.5)


def test_contacts_in_open_interval_and_grad_reaches_inputs(rng):
    torch.manual_seed(0)
    h, a, d, f = (t.requires_grad_() for t in _contact_inputs(rng))
    mlp = Mlp(MlpSpec((6 + 6 + 17 + 5, 8, 8, 1)))
    c, logit = heads.predict_contacts(h, a, d, f, mlp, RBF)
    assert torch.all((c > 0) & (c < 1))
    np.testing.assert_allclose(c.detach().numpy(), torch.sigmoid(logit).detach().numpy())
    c.sum().backward()
    for t in (h, a, d, f):
        assert t.grad.abs().sum() > 0


def test_contacts_misaligned(rng):
    h, a, d, f = _contact_inputs(rng)
    with pytest.raises(ShapeError):
        heads.predict_contacts(h, a[:3], d, f, Mlp(MlpSpec((34, 1))), RBF)


# injection


def _inject_setup(rng, L=4, M=7, D=6, A=8):
    torch.manual_seed(0)
    h, h_ag, o = _t(rng, L, D), _t(rng, M, D), _t(rng, L, A)
    knn = heads.knn_indices(torch.tensor(rng.uniform(1, 20, (L, M))), 3)
    return h, h_ag, knn, o, _t(rng, D + 1), torch.tensor(0.3, dtype=f64), Mlp(MlpSpec((D, 5, D)))


def test_zero_contact_is_hard_off(rng):
    h, h_ag, knn, o, gw, gb, mlp = _inject_setup(rng)
    c = torch.tensor([0.0, 0.7, 0.0, 1.0], dtype=f64)
    z, enriched, _ = heads.inject_complementarity(h, h_ag, knn, c, o, gw, gb, mlp)
    off = c == 0
    assert torch.equal(enriched[off], h[off])
    assert torch.all(z[off, h.shape[1]:] == 0)
    assert not torch.equal(enriched[~off], h[~off])


def test_closed_gate_blocks_injection(rng):
    h, h_ag, knn, o, _, _, mlp = _inject_setup(rng)
    c = torch.full((4,), 0.9, dtype=f64)
    _, enriched, gate = heads.inject_complementarity(h, h_ag, knn, c, o, torch.zeros(7, dtype=f64), torch.tensor(-50.0, dtype=f64), mlp)
    assert (enriched - h).abs().max() < 1e-6


def test_injection_scales_with_contact(rng):
    h, h_ag, knn, o, gw, gb, mlp = _inject_setup(rng)
    c = torch.tensor([0.8, 0.5, 0.9, 0.6], dtype=f64)
    _, e1, g1 = heads.inject_complementarity(h, h_ag, knn, c, o, gw, gb, mlp)
    for s in (0.25, 0.5, 0.9):
        _, e2, g2 = heads.inject_complementarity(h, h_ag, knn, s * c, o, gw, gb, mlp)
        ratio = (s * g2 / g1)[:, None]
        np.testing.assert_allclose((e2 - h).detach().numpy(), (ratio * (e1 - h)).detach().numpy(), atol=1e-13)


# full model


@pytest.fixture(scope="module")
def small(synth):
    cfg = small_model_config()
    return build_model(cfg, seed=3), prepare_example(synth[0], cfg)


def test_model_eval_deterministic(small):
    model, ex = small
    with torch.no_grad():
        a, b = model(ex), model(ex)
    assert torch.equal(a.logits, b.logits) and torch.equal(a.contact_probs, b.contact_probs)
    L = ex.native.cdr_len
    assert a.logits.shape == (L, 20) and a.fingerprints.shape == (L, 32)
    assert torch.all((a.contact_probs > 0) & (a.contact_probs < 1))
    np.testing.assert_allclose(a.attn_weights.sum(-1).numpy(), 1.0, atol=1e-12)


def test_model_rigid_motion(synth, rng):
    cfg = small_model_config()
    c, _ = synth
    R, t = random_rotation(rng), rng.uniform(-50, 50, 3)
    model = build_model(cfg, seed=3, dtype=torch.float32)
    with torch.no_grad():
        a = model(prepare_example(c, cfg))
        b = model(prepare_example(c.transformed(R, t), cfg))
    assert (a.logits - b.logits).abs().max() < 1e-4
    assert (a.contact_probs - b.contact_probs).abs().max() < 1e-4
    np.testing.assert_allclose(b.cdr_ca.numpy(), a.cdr_ca.numpy() @ R.T + t, atol=1e-3)


def test_contact_override_hard_off(small):
    model, ex = small
    L = ex.native.cdr_len
    with torch.no_grad():
        out = model(ex, contact_override=torch.zeros(L))
    assert torch.equal(out.enriched, out.h_cdr)


def test_decode_breaks_ties_low(small):
    model, ex = small
    with torch.no_grad():
        out = model(ex)
    out.logits = torch.zeros_like(out.logits)
    out.logits[0, 5] = out.logits[0, 9] = 1.0
    assert decode(out)[:2] == [5, 0]
    assert decode_string(out)[:2] == "GA"

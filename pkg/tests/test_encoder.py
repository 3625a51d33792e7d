import dataclasses

import numpy as np
import pytest
import torch

from cdrdesign.config import EncoderConfig
from cdrdesign.encoder import (
    Encoder,
    edge_frames,
    egnn_coord_update,
    egnn_message,
    egnn_node_update,
    graph_tensors,
    outer_product_features,
)
from cdrdesign.engine import Mlp, MlpSpec, finite_difference_check
from cdrdesign.errors import NonFiniteError, ShapeError
from cdrdesign.geometry import random_rotation
from cdrdesign.graph import NODE_BLOCKS, EdgeType, build_graph
from cdrdesign.structure import mask_cdr_sequence

f64 = torch.float64
SMALL = EncoderConfig(hidden_dim=32, message_dim=24, n_layers=2, geom_hidden=16, chem_hidden=8, fuse_hidden=16, coord_hidden=8)


def _encoder(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    return Encoder(cfg).to(f64)


@pytest.fixture(scope="module")
def gt(synth):
    return graph_tensors(build_graph(mask_cdr_sequence(synth[0])))


def _zero_last(mlp):
    with torch.no_grad():
        mlp.weights[-1].zero_()
        mlp.biases[-1].zero_()


# encode_features


def test_epitope_embedding_is_additive(gt):
    enc = _encoder()
    flagged = enc.encode_features(gt)
    plain = enc.encode_features(dataclasses.replace(gt, epitope_mask=torch.zeros_like(gt.epitope_mask)))
    diff = (flagged - plain)[: gt.n_residues]
    mask = gt.epitope_mask
    assert torch.equal(diff[~mask], torch.zeros_like(diff[~mask]))
    np.testing.assert_allclose(diff[mask].detach().numpy(), np.broadcast_to(enc.e_epi.detach().numpy(), (int(mask.sum()), 32)), atol=1e-15)


def test_zero_parameters_give_zero_embeddings(gt):
    enc = _encoder()
    with torch.no_grad():
        for m in (enc.mlp_geom, enc.mlp_chem, enc.mlp_fuse):
            for p in m.parameters():
                p.zero_()
    h = enc.encode_features(gt)[: gt.n_residues].detach()
    mask = gt.epitope_mask
    assert torch.all(h[~mask] == 0)
    assert torch.all(h[mask] == enc.e_epi.detach())


def test_encode_features_layout_error(gt):
    with pytest.raises(ShapeError):
        _encoder().encode_features(dataclasses.replace(gt, node_feats=gt.node_feats[:, :100]))


def test_encode_features_gradient_both_paths(gt):
    enc = _encoder()
    params = {f"geom.{k}": v for k, v in enc.mlp_geom.named_parameters()}
    params.update({f"chem.{k}": v for k, v in enc.mlp_chem.named_parameters()})
    # the loss sums many squares, so tiny coordinates sit under the difference rounding floor
    res = finite_difference_check(lambda: enc.encode_features(gt).pow(2).sum(), params, n_samples=32, seed=1, min_abs_grad=1e-3)
    assert res.max_rel_error < 1e-6


# messages


def test_outer_product_zero_and_oracle(rng):
    assert torch.all(outer_product_features(torch.zeros(4, 3, dtype=f64)) == 0)
    dx = rng.normal(size=(20, 3))
    out = outer_product_features(torch.tensor(dx), scale=2.0).numpy()
    for k in range(20):
        ref = [dx[k, a] * dx[k, b] / 4.0 for a in range(3) for b in range(3)]
        np.testing.assert_allclose(out[k], ref, rtol=1e-14)


def test_outer_product_in_local_frame(rng):
    dx = rng.normal(size=(5, 3))
    F = np.stack([random_rotation(rng) for _ in range(5)])
    out = outer_product_features(torch.tensor(dx), frames=torch.tensor(F)).numpy()
    for k in range(5):
        g = F[k] @ dx[k]
        np.testing.assert_allclose(out[k], np.outer(g, g).ravel(), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("proper", [True, False])
def test_message_invariant_under_orthogonal_maps(rng, proper):
    torch.manual_seed(0)
    mlp = Mlp(MlpSpec((2 * 6 + 9 + 5, 7)))
    E = 12
    h_i, h_j, e = (torch.tensor(rng.normal(size=(E, w))) for w in (6, 6, 5))
    x_i, x_j = torch.tensor(rng.normal(size=(E, 3)) * 5), torch.tensor(rng.normal(size=(E, 3)) * 5)
    F = torch.tensor(np.stack([random_rotation(rng) for _ in range(E)]))
    Q = random_rotation(rng) @ (np.eye(3) if proper else np.diag([1.0, 1.0, -1.0]))
    Q, t = torch.tensor(Q), torch.tensor(rng.normal(size=3) * 20)
    args = (h_i, h_j, x_i, x_j, e, F)
    moved = (h_i, h_j, x_i @ Q.T + t, x_j @ Q.T + t, e, F @ Q.T)  # frames are axis vectors and move too
    for dtype, tol in ((f64, 1e-10), (torch.float32, 1e-6)):
        m = mlp.to(dtype)
        a, b = ([v.to(dtype) for v in vs] for vs in (args, moved))
        m0 = egnn_message(m, *a[:5], scale=10.0, frames=a[5])
        m1 = egnn_message(m, *b[:5], scale=10.0, frames=b[5])
        np.testing.assert_allclose(m1.detach().numpy(), m0.detach().numpy(), atol=tol)


def test_edge_frames(gt):
    F = edge_frames(gt.node_feats, gt.recv, gt.send)
    axes = gt.node_feats[:, NODE_BLOCKS["frame"]].reshape(-1, 3, 3)
    owner = torch.where(gt.recv < gt.n_residues, gt.recv, gt.send)
    assert torch.equal(F, axes[owner])
    with pytest.raises(ShapeError):
        n = gt.n_residues
        edge_frames(gt.node_feats, torch.tensor([n]), torch.tensor([n + 1]))


# node and coordinate updates


def test_isolated_node_keeps_state(rng):
    torch.manual_seed(0)
    mlp = Mlp(MlpSpec((8, 6, 4)))
    _zero_last(mlp)
    h = torch.tensor(rng.normal(size=(3, 4)))
    out = egnn_node_update(mlp, torch.tensor(rng.normal(size=(10, 4, 5))), h, torch.zeros(3, 10, 5, dtype=f64))
    assert torch.equal(out, h)


def test_node_update_matches_loop_oracle(rng):
    torch.manual_seed(2)
    N, T, D, Dm, E = 6, 10, 4, 5, 25
    mlp = Mlp(MlpSpec((2 * D, 7, D)))
    W = rng.normal(size=(T, D, Dm))
    h, m = rng.normal(size=(N, D)), rng.normal(size=(E, Dm))
    recv, etype = rng.integers(0, N, E), rng.integers(0, T, E)
    sums = np.zeros((N, T, Dm))
    for k in range(E):
        sums[recv[k], etype[k]] += m[k]
    proj = np.zeros((N, D))
    for i in range(N):
        for t in range(T):
            proj[i] += W[t] @ sums[i, t]
    with torch.no_grad():
        ref = h + mlp(torch.tensor(np.concatenate([h, proj], axis=1))).numpy()
    from cdrdesign.engine import scatter_add

    ts = scatter_add(torch.tensor(m), torch.tensor(recv * T + etype), N * T).reshape(N, T, Dm)
    np.testing.assert_allclose(ts.numpy(), sums, atol=1e-13)
    out = egnn_node_update(mlp, torch.tensor(W), torch.tensor(h), ts).detach().numpy()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_coord_update_zero_weights_and_single_neighbour():
    x = torch.tensor([[1.0, 2.0, 3.0], [4.0, 0.0, -1.0]], dtype=f64)
    recv, send = torch.tensor([0]), torch.tensor([1])
    dx = x[recv] - x[send]
    movable = torch.tensor([True, True])
    same = egnn_coord_update(x, dx, torch.zeros(1, dtype=f64), recv, torch.ones(1, dtype=f64), movable)
    assert torch.equal(same, x)
    out = egnn_coord_update(x, dx, torch.ones(1, dtype=f64), recv, torch.ones(1, dtype=f64), movable)
    assert torch.equal(out[0], x[0] + (x[0] - x[1]))
    frozen = egnn_coord_update(x, dx, torch.ones(1, dtype=f64), recv, torch.ones(1, dtype=f64), ~movable)
    assert torch.equal(frozen, x)


def test_coord_update_averages_within_type():
    x = torch.tensor([[0.0, 0, 0], [2.0, 0, 0], [0, 4.0, 0]], dtype=f64)
    recv, send = torch.tensor([0, 0]), torch.tensor([1, 2])
    out = egnn_coord_update(x, x[recv] - x[send], torch.ones(2, dtype=f64), recv, torch.full((2,), 0.5, dtype=f64), torch.ones(3, dtype=torch.bool))
    np.testing.assert_allclose(out[0].numpy(), [-1.0, -2.0, 0.0])


# full encoder


def test_zero_layers_is_lift(gt):
    enc = _encoder(dataclasses.replace(SMALL, n_layers=0))
    h, coords = enc(gt)
    h0 = enc.encode_features(gt)
    assert torch.equal(h, h0 @ enc.lift_w.T + enc.lift_b)
    assert torch.equal(coords, gt.coords)


def test_output_shape(gt):
    h, coords = Encoder(dataclasses.replace(SMALL, hidden_dim=256, message_dim=32, n_layers=1)).to(f64)(gt)
    assert h.shape == (gt.n_nodes, 256)
    assert coords.shape == (gt.n_nodes, 4, 3)


def test_zero_updates_give_identity(gt):
    enc = _encoder()
    for l in range(SMALL.n_layers):
        _zero_last(enc.node_mlps[l])
        for m in enc.coord_mlps[l].values():
            _zero_last(m)
    h, coords = enc(gt)
    assert torch.equal(h, enc.encode_features(gt) @ enc.lift_w.T + enc.lift_b)
    assert torch.equal(coords, gt.coords)


def test_only_cdr_and_virtual_coordinates_move(gt):
    with torch.no_grad():
        _, coords = _encoder()(gt)
    moved = (coords - gt.coords).abs().amax(dim=(1, 2)) > 0
    assert torch.equal(moved & ~gt.movable, torch.zeros_like(moved))
    assert moved[gt.movable].any()
    shift = coords - gt.coords
    # every backbone atom rides with its Calpha
    np.testing.assert_allclose(shift.numpy(), np.broadcast_to(shift[:, 1:2].numpy(), shift.shape), atol=1e-12)


def test_rigid_motion(synth, rng):
    c, _ = synth
    enc = _encoder()
    R, t = random_rotation(rng), rng.uniform(-50, 50, 3)
    with torch.no_grad():
        h0, x0 = enc(graph_tensors(build_graph(c)))
        h1, x1 = enc(graph_tensors(build_graph(c.transformed(R, t))))
    np.testing.assert_allclose(h1.numpy(), h0.numpy(), atol=1e-9)
    np.testing.assert_allclose(x1.numpy(), x0.numpy() @ R.T + t, atol=1e-9)


def test_non_finite_names_layer(gt):
    enc = _encoder()
    with torch.no_grad():
        enc.msg_mlps[1]["intra_seq"].biases[0].fill_(float("inf"))
    with pytest.raises(NonFiniteError, match="layer 1"):
        enc(gt)


def test_epitope_reaches_cdr_in_two_layers(synth):
    g = build_graph(synth[0])
    # drop the direct antibody-antigen edges so virtual nodes are the only bridge
    edges, feats = dict(g.edges), dict(g.edge_feats)
    for t in (EdgeType.INTER_RADIAL, EdgeType.INTER_KNN):
        edges[t] = np.zeros((0, 2), dtype=edges[t].dtype)
        feats[t] = np.zeros((0, feats[t].shape[1]))
    g = dataclasses.replace(g, edges=edges, edge_feats=feats)
    epi_off = g.node_feats.copy()
    epi_off[g.epitope_positions] = 0
    g_off = dataclasses.replace(g, node_feats=epi_off)
    cdr = torch.as_tensor(g.cdr_positions)
    for layers, changes in ((1, False), (2, True)):
        enc = _encoder(dataclasses.replace(SMALL, n_layers=layers))
        with torch.no_grad():
            a = enc(graph_tensors(g))[0][cdr]
            b = enc(graph_tensors(g_off))[0][cdr]
        assert bool((a != b).any()) is changes, layers

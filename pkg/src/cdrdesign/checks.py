"""Named self-checks: analytic values, oracles, equivariance, gradients and the training regimen.

``run_checks("fast")`` finishes in well under a minute; ``"full"`` runs the
complete equivariance and 64-bit finite-difference suites.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch

from . import heads, oracles
from .config import LossWeights, ModelConfig, RunConfig, TrainConfig
from .engine import clip_global_norm, finite_difference_check, global_norm
from .geometry import random_rotation
from .graph import EdgeType, build_graph
from .losses import TERMS, batch_losses, focal_contact_loss, pair_loss, total_loss, weighted_ce
from .metrics import interface_metrics
from .model import build_model, prepare_example
from .structure import compute_contact_labels
from .synthetic import SynthParams, generate_synthetic_complex
from .training import EarlyStopping

LEVELS = ("fast", "full")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


class CheckFailure(AssertionError):
    pass


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise CheckFailure(msg)


# ---------------------------------------------------------------------------
# Individual suites. Each returns a short detail string or raises CheckFailure.
# ---------------------------------------------------------------------------


def check_distance_bias(level: str = "fast") -> str:
    sigma = 4.0
    at_2sigma = heads.distance_bias(2 * sigma, sigma)
    _expect(abs(at_2sigma - math.exp(-2.0)) < 1e-15, f"bias at 2 sigma = {at_2sigma!r}, expected e^-2")
    _expect(heads.distance_bias(0.0, sigma) == 1.0, "bias at d = 0 must be 1")
    d = torch.linspace(0.0, 30.0, 61, dtype=torch.float64)
    b = heads.distance_bias(d, sigma)
    _expect(bool((b[1:] < b[:-1]).all()), "bias must strictly decrease with distance")
    # With zero query/key weights the attention is driven by the bias alone.
    rng = np.random.default_rng(0)
    x_cdr = torch.as_tensor(rng.normal(size=(3, 3)) * 5)
    x_ag = torch.as_tensor(rng.normal(size=(7, 3)) * 5)
    h = torch.ones(3, 4, dtype=torch.float64)
    h_ag = torch.ones(7, 4, dtype=torch.float64)
    zero = torch.zeros(4, 4, dtype=torch.float64)
    eye = torch.eye(4, dtype=torch.float64)
    _, w = heads.cross_attention(h, h_ag, x_cdr, x_ag, zero, zero, eye, 2, sigma)
    dd = np.linalg.norm(x_cdr.numpy()[:, None] - x_ag.numpy()[None], axis=-1)
    s = np.exp(-(dd**2) / (2 * sigma**2))
    ref = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    err = float(np.abs(w[0].numpy() - ref).max())
    _expect(err < 1e-12, f"attention weights deviate from the Gaussian-prior softmax by {err:.2e}")
    return "e^-2 at 2 sigma; attention prior matches"


def check_analytic(level: str = "fast") -> str:
    L = 7
    uniform = torch.zeros(L, 20, dtype=torch.float64)
    y = np.arange(L) % 20
    ce = float(weighted_ce(uniform, y, torch.zeros(L, dtype=torch.float64), 4.47))
    _expect(abs(ce - math.log(20)) < 1e-6, f"uniform CE {ce} != ln 20")

    rng = np.random.default_rng(1)
    p = torch.as_tensor(rng.uniform(0.01, 0.99, 50))
    lab = rng.integers(0, 2, 50)
    focal = float(focal_contact_loss(p, lab, gamma=0.0))
    bce = -np.mean([math.log(pi) if li else math.log(1 - pi) for pi, li in zip(p.tolist(), lab)])
    _expect(abs(focal - bce) < 1e-12, f"focal(gamma=0) {focal} != BCE {bce}")

    one = torch.ones(1, dtype=torch.float64)
    logits = torch.as_tensor(rng.normal(size=(1, 20)))
    w = float(weighted_ce(logits, [3], one, 4.47)) / float(weighted_ce(logits, [3], 0 * one, 4.47))
    _expect(abs(w - 5.47) < 1e-12, f"weight at c=1 is {w}, expected 5.47")

    for B in (1, 2, 5):
        pooled = torch.as_tensor(np.tile(rng.normal(size=16), (B, 1)))
        v = float(pair_loss(pooled, pooled.clone(), 0.1))
        _expect(abs(v - math.log(B)) < 1e-12, f"pair loss with {B} identical embeddings = {v}")

    c, _ = generate_synthetic_complex(3)
    im = interface_metrics(c, c)
    _expect(im.dockq == 1.0 and im.fnat == 1.0 and im.irmsd < 1e-12, f"DockQ on identical complexes: {im}")

    unit = {k: torch.tensor(1.0, dtype=torch.float64) for k in TERMS}
    tot = float(total_loss(unit, LossWeights()).total)
    _expect(abs(tot - 3.917) < 1e-12, f"unit-term total {tot} != 3.917")
    return "ln 20, focal=BCE, w=5.47, pair=ln B, DockQ=1, total=3.917"


def _random_params(rng, max_cdr=15, max_ag=40) -> SynthParams:
    return SynthParams(
        cdr_len=int(rng.integers(5, max_cdr + 1)),
        antigen_len=int(rng.integers(10, max_ag + 1)),
        planted_contact_fraction=float(rng.uniform(0.2, 0.6)),
    )


def _perturb(c, rng, scale: float):
    """Copy of ``c`` with CDR Cα jittered (a stand-in prediction)."""
    return c.with_cdr(ca=c.cdr_ca() + rng.normal(scale=scale, size=(c.cdr_len, 3)))


def check_oracles(level: str = "fast") -> str:
    n = 50 if level == "full" else 5
    rng = np.random.default_rng(123)
    for k in range(n):
        c, _ = generate_synthetic_complex(10_000 + k, _random_params(rng))
        _expect(
            compute_contact_labels(c).tolist() == oracles.contact_labels(c), f"contact labels differ on {c.id}"
        )
        g = build_graph(c)
        ref = oracles.edge_sets(c)
        for t in EdgeType:
            got = sorted(map(tuple, g.edges[t].tolist()))
            _expect(got == sorted(ref[t]), f"{t.name} edges differ on {c.id}")
        d = heads.distances(torch.as_tensor(c.cdr_ca()), torch.as_tensor(c.antigen_ca()))
        got = heads.knn_indices(d, 8).tolist()
        _expect(got == oracles.knn(c.cdr_ca(), c.antigen_ca(), 8), f"decoder KNN differs on {c.id}")
        pred = _perturb(c, rng, float(rng.uniform(0.5, 4.0)))
        im = interface_metrics(pred, c)
        o = oracles.interface(pred, c)
        _expect(im.fnat == o["fnat"], f"fnat differs on {c.id}")
        _expect(im.epitope_f1 == o["epitope_f1"], f"epitope F1 differs on {c.id}")
        _expect(abs(im.irmsd - o["irmsd"]) < 1e-8, f"iRMSD differs on {c.id}: {im.irmsd} vs {o['irmsd']}")
    return f"{n} instances: contacts, edges, KNN, interface"


def check_gating(level: str = "fast") -> str:
    cfg = ModelConfig()
    model = build_model(cfg, seed=5)
    # Non-trivial gate parameters so the hard-off cannot come from a zero gate.
    with torch.no_grad():
        model.gate_w.normal_()
        model.gate_b.fill_(2.0)
    c, _ = generate_synthetic_complex(11)
    ex = prepare_example(c, cfg)
    L = c.cdr_len
    off = torch.zeros(L, dtype=torch.float64)
    with torch.no_grad():
        out = model(ex, contact_override=off)
    D = out.h_cdr.shape[1]
    _expect(torch.equal(out.enriched, out.h_cdr), "enriched != h with c = 0")
    _expect(bool((out.z[:, D:] == 0).all()), "attention block of z not zero with c = 0")
    mask = torch.zeros(L, dtype=torch.float64)
    mask[::2] = 0.9
    with torch.no_grad():
        out = model(ex, contact_override=mask)
    offi = mask == 0
    _expect(torch.equal(out.enriched[offi], out.h_cdr[offi]), "per-position hard-off failed")
    _expect(bool((out.enriched[~offi] != out.h_cdr[~offi]).any()), "injection inactive for c > 0")
    return "c = 0 leaves h untouched and zeroes the attention block"


def equivariance_deviation(
    n_complexes: int, n_motions: int, dtype=torch.float64, seed: int = 0, params: SynthParams | None = None
) -> dict[str, float]:
    """Largest deviation per output group over random proper rigid motions of every complex.

    The 7 loss terms are computed over the whole set as one batch, so the
    contrastive terms see real negatives.
    """
    cfg = RunConfig()
    model = build_model(cfg.model, 0.0, seed, dtype)
    rng = np.random.default_rng(seed)
    natives = [generate_synthetic_complex(20_000 + k, params)[0] for k in range(n_complexes)]

    def run(cs):
        exs = [prepare_example(c, cfg.model) for c in cs]
        with torch.no_grad():
            outs = [model(e) for e in exs]
            losses = batch_losses(model, exs, outs, cfg.loss).as_floats()
        return outs, losses

    base_outs, base_losses = run(natives)
    worst = {"logits": 0.0, "contact_probs": 0.0, "fingerprints": 0.0, "losses": 0.0, "cdr_coords": 0.0}
    for _ in range(n_motions):
        R = random_rotation(rng)
        t = rng.uniform(-50.0, 50.0, size=3)
        outs, losses = run([c.transformed(R, t) for c in natives])
        for o, b in zip(outs, base_outs):
            for key in ("logits", "contact_probs", "fingerprints"):
                worst[key] = max(worst[key], float((getattr(o, key) - getattr(b, key)).abs().max()))
            expected = b.cdr_ca.double().numpy() @ R.T + t
            worst["cdr_coords"] = max(worst["cdr_coords"], float(np.abs(o.cdr_ca.double().numpy() - expected).max()))
        worst["losses"] = max(worst["losses"], max(abs(losses[k] - base_losses[k]) for k in TERMS))
    return worst


def check_equivariance(level: str = "fast") -> str:
    n_c, n_m = (10, 100) if level == "full" else (2, 3)
    dev = equivariance_deviation(n_c, n_m)
    bad = {k: v for k, v in dev.items() if not v < 1e-8}
    _expect(not bad, f"64-bit deviations above 1e-8: {bad}")
    return f"{n_c} complexes x {n_m} motions, max dev {max(dev.values()):.1e}"


def gradient_check(n_samples: int = 256, small: bool = False, seed: int = 0):
    """Finite differences of the full objective on two L = 6, M = 12 complexes.

    Coordinate-MLP outputs use standard initialisation here so that every
    parameter group has derivatives resolvable by a central difference at
    eps = 1e-5; the contact weight is left attached so its path is checked.
    """
    base = RunConfig().model
    enc = replace(base.encoder, coord_init_scale=1.0)
    att = base.attention
    if small:
        enc = replace(enc, hidden_dim=16, message_dim=16, n_layers=2, coord_hidden=8)
        att = replace(att, heads=2, head_dim=8)
    mc = replace(base, encoder=enc, attention=att)
    lw = replace(LossWeights(), detach_contact_weight=False)
    params = SynthParams(cdr_len=6, antigen_len=12)
    exs = [prepare_example(generate_synthetic_complex(seed + k, params)[0], mc) for k in range(2)]
    model = build_model(mc, 0.0, seed, torch.float64)

    def loss_fn():
        return batch_losses(model, exs, [model(e) for e in exs], lw).total

    return finite_difference_check(
        loss_fn, dict(model.named_parameters()), eps=1e-5, n_samples=n_samples, seed=seed, min_abs_grad=1e-5
    )


def check_gradients(level: str = "fast") -> str:
    res = gradient_check(256, small=False) if level == "full" else gradient_check(64, small=True)
    _expect(res.max_rel_error < 1e-4, f"max relative error {res.max_rel_error:.2e} at {res.worst}")
    return f"{res.n_checked} coordinates over {len(res.per_param)} tensors, max rel err {res.max_rel_error:.1e}"


def check_regimen(level: str = "fast") -> str:
    tc = TrainConfig()
    lr = 6.31e-4
    for k in range(301):
        _expect(abs(tc.lr_at(k) - lr) < 1e-12, f"lr at epoch {k}: {tc.lr_at(k)} vs {lr}")
        lr *= 0.944
    rng = np.random.default_rng(0)
    for scale in (1e-3, 0.1, 0.3, 1.0, 10.0, 1e3):
        grads = [torch.as_tensor(rng.normal(size=s) * scale) for s in ((4, 3), (7,), (2, 2, 2))]
        pre = float(np.sqrt(sum(float((g**2).sum()) for g in grads)))
        clipped, reported = clip_global_norm(grads, 0.5)
        _expect(abs(reported - pre) < 1e-9 * max(1.0, pre), "pre-clip norm misreported")
        _expect(abs(global_norm(clipped) - min(pre, 0.5)) < 1e-9, f"post-clip norm wrong at scale {scale}")
    for patience in (1, 3, 10):
        vals = [5.0, 4.0, 3.0] + [3.0 + 0.1 * i for i in range(1, 30)]
        es = EarlyStopping(patience)
        stop_at = next(e for e, v in enumerate(vals) if es.step(v))
        _expect(stop_at == 2 + patience, f"patience {patience}: stopped at epoch {stop_at}, expected {2 + patience}")
    return "lr schedule, clipping, early stopping"


CHECKS: dict[str, Callable[[str], str]] = {
    "distance_bias": check_distance_bias,
    "analytic": check_analytic,
    "oracles": check_oracles,
    "gating": check_gating,
    "regimen": check_regimen,
    "equivariance": check_equivariance,
    "gradients": check_gradients,
}


def run_checks(level: str = "fast", names=None) -> list[CheckResult]:
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            detail = fn(level)
            ok = True
        except CheckFailure as exc:
            detail, ok = str(exc), False
        except Exception as exc:  # a crash is a failure of that check, not of the runner
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results


# ---------------------------------------------------------------------------
# Fault injection (test hook)
# ---------------------------------------------------------------------------


def _flipped_distance_bias(d, sigma: float):
    if isinstance(d, torch.Tensor):
        return torch.exp(d**2 / (2.0 * sigma**2))
    return float(np.exp(float(d) ** 2 / (2.0 * sigma**2)))


FAULTS = {"distance_bias_sign": (heads, "distance_bias", _flipped_distance_bias)}


@contextlib.contextmanager
def injected_fault(name: str | None):
    """Temporarily replace a kernel with a deliberately broken version."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise KeyError(f"unknown fault {name!r}; known: {sorted(FAULTS)}")
    module, attr, broken = FAULTS[name]
    original = getattr(module, attr)
    setattr(module, attr, broken)
    try:
        yield
    finally:
        setattr(module, attr, original)

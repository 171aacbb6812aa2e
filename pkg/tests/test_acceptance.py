"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the summary."""

import itertools
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from invsteer.evaluation import (
    MagnitudeReport,
    Method,
    dim_ablation,
    evaluate_method,
    feature_clamp,
    intervention_magnitude,
    layer_sweep,
    linear_at_loss_sites,
    run_linear_fmap_ablation,
)
from invsteer.featmap import IResNetFeatureMap, LinearFeatureMap, lipschitz_estimate
from invsteer.intervene import InterventionSpec, basis_intervene, interchange, linear_intervene, nonlinear_intervene
from invsteer.sites import auc
from invsteer.subject import Site, forward_with_hooks
from invsteer.train import TrainConfig, grad_check, train_fmap


def record(n, title, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def site_states(subject, X, layer=2):
    site = subject.resolve(Site(layer, -3))
    _, states = forward_with_hooks(subject, X, record=[site])
    return states[site]


def end_to_end(subject, dataset):
    """Criteria 8 to 10 from scratch; returns every emitted number."""
    out = {}
    start = time.perf_counter()
    fmap, loss_sites, report = train_fmap(subject, dataset, TrainConfig())
    rates = run_linear_fmap_ablation(subject, dataset, TrainConfig())
    out["linear"], out["nonlinear"] = rates["linear"], rates["nonlinear"]
    out["lals"] = linear_at_loss_sites(subject, loss_sites, dataset.X_neg_test)
    out["seconds_8"] = time.perf_counter() - start
    clamp = evaluate_method(subject, feature_clamp(fmap, subject.resolve(Site(2, -3)), report.mu_bar_plus),
                            dataset.X_neg_test)
    dim = evaluate_method(subject, dim_ablation(subject, dataset), dataset.X_neg_test)
    out["clamp_rate"] = clamp["rate"]
    out["clamp_sites"] = clamp["sites_per_example"]
    out["clamp_l2"], out["dim_l2"] = clamp["mean_l2"], dim["mean_l2"]
    start = time.perf_counter()
    out["sweep"] = layer_sweep(subject, dataset, TrainConfig()).rows
    out["seconds_10"] = time.perf_counter() - start
    return out


@pytest.fixture(scope="module")
def e2e(subject, dataset):
    return end_to_end(subject, dataset)


def test_criterion_01_invertibility(subject, dataset, trained):
    rng = np.random.default_rng(2024)
    real = [site_states(subject, X) for X in (dataset.X_neg, dataset.X_pos, dataset.X_neg_test, dataset.X_pos_test)]
    states = np.vstack(real + [rng.normal(size=(1000 - sum(map(len, real)), 16))])
    assert len(states) == 1000
    worst, seconds = 0.0, 0.0
    for fmap in (IResNetFeatureMap(max_iter=30, tol=1e-5, random_state=0).initialize(16), trained[0]):
        t = time.perf_counter()
        back = fmap.inverse_transform(fmap.transform(states))
        seconds = max(seconds, time.perf_counter() - t)
        rel = np.linalg.norm(back - states, axis=1) / np.maximum(np.linalg.norm(states, axis=1), 1.0)
        worst = max(worst, rel.max())
    record(1, "round trip", worst <= 1e-4 and seconds < 10, f"max rel err {worst:.2e}, {seconds:.2f}s")


def test_criterion_02_lipschitz(trained):
    fresh = IResNetFeatureMap(random_state=0).initialize(16)
    values = [lipschitz_estimate(b, 10_000, seed=i) for i, b in enumerate(fresh.blocks_ + trained[0].blocks_)]
    record(2, "branch Lipschitz <= 0.6 before/after training", max(values) <= 0.6,
           "estimates " + ", ".join(f"{v:.3f}" for v in values))


def test_criterion_03_linear_reduction():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 17))
        q, r = np.linalg.qr(rng.normal(size=(d, d)))
        W = q * np.sign(np.diag(r))
        k = int(rng.integers(1, d + 1))
        coords = tuple(int(c) for c in rng.choice(d, k, replace=False))
        spec = InterventionSpec(coords, tuple(rng.normal(0, 3, k)))
        h = rng.normal(size=d)
        fmap = LinearFeatureMap(matrix=W).initialize(d)
        a = linear_intervene(h, W[list(coords)], spec.alphas)
        b = basis_intervene(h, fmap, spec)
        c = nonlinear_intervene(h, fmap, spec)
        worst = max(worst, np.abs(a - b).max(), np.abs(b - c).max())
    record(3, "linear, basis and non-linear forms agree", worst <= 1e-10, f"max diff {worst:.2e}")


def test_criterion_04_interchange(subject, dataset, trained):
    hm, hp = site_states(subject, dataset.X_neg_test), site_states(subject, dataset.X_pos_test)
    rng = np.random.default_rng(4)
    hm, hp = np.vstack([hm, rng.normal(size=(100, 16))]), np.vstack([hp, rng.normal(size=(100, 16))])
    targeted = untargeted = same = 0.0
    for fmap in (IResNetFeatureMap(random_state=4).initialize(16), trained[0]):
        zr, zm, zp = fmap.transform(interchange(hm, hp, fmap, (0,))), fmap.transform(hm), fmap.transform(hp)
        targeted = max(targeted, np.abs(zr[:, 0] - zp[:, 0]).max())
        untargeted = max(untargeted, np.abs(zr[:, 1:] - zm[:, 1:]).max())
        same = max(same, np.abs(interchange(hm, hm, fmap, (0,)) - hm).max())
    ok = max(targeted, untargeted, same) <= 1e-4
    record(4, "interchange contract", ok,
           f"targeted {targeted:.1e}, untargeted {untargeted:.1e}, self {same:.1e}")


def test_criterion_05_gradients(subject, dataset, trained):
    fmap, loss_sites, _ = trained
    t = time.perf_counter()
    err = grad_check(subject, dataset, TrainConfig(), n_probes=50, fmap=fmap, loss_sites=loss_sites)
    seconds = time.perf_counter() - t
    record(5, "gradient check, 50 probes", err <= 1e-3 and seconds < 120, f"max rel err {err:.2e}, {seconds:.1f}s")


def test_criterion_06_auc_oracle():
    rng = np.random.default_rng(6)
    mismatches = 0
    for trial in range(100):
        n_p, n_m = (int(x) for x in rng.integers(1, 1001, 2))
        if trial % 2:
            sp, sm = rng.integers(0, 20, n_p).astype(float), rng.integers(0, 20, n_m).astype(float)
        else:
            sp, sm = rng.normal(0.3, 1, n_p), rng.normal(0, 1, n_m)
        diff = sp[:, None] - sm[None, :]
        oracle = (np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)) / (n_p * n_m)
        mismatches += auc(sp, sm) != oracle
    record(6, "AUC equals pairwise oracle", mismatches == 0, f"{mismatches} mismatches in 100 sets")


def test_criterion_07_magnitude(subject, dataset):
    pyth = [((0, 0), (3, 4), 5), ((1, 1), (6, 13), 13), ((2, -1), (10, 14), 17)]
    ok = MagnitudeReport.from_states([[((0, 0), (3, 4))]]).mean_l2 == 5.0
    for k in range(4):
        for combo in itertools.combinations(pyth, k):
            rep = MagnitudeReport.from_states([[(a, b) for a, b, _ in combo]])
            ok &= rep.sites_per_example[0] == k and rep.l2_per_example[0] == sum(n for *_, n in combo)
    X = dataset.X_neg_test
    sites = [Site(1, 0), Site(1, 4), Site(1, 7)]
    _, clean = forward_with_hooks(subject, X, record=sites)
    for k in range(4):
        for chosen in itertools.combinations(sites, k):
            rep = intervention_magnitude(subject, Method("neg", [(s, lambda h: -h) for s in chosen]), X)
            hand = sum((torch.linalg.vector_norm(-2 * torch.as_tensor(clean[s]), dim=-1).numpy() for s in chosen),
                       np.zeros(len(X)))
            ok &= bool(np.all(rep.sites_per_example == k)) and np.array_equal(rep.l2_per_example, hand)
    record(7, "magnitude formula exact", bool(ok), "single (0,0)->(3,4) edit and all runs with <= 3 edits")


def test_criterion_08_end_to_end(e2e):
    ok = (e2e["nonlinear"] >= 0.80 and e2e["linear"] <= 0.50 and e2e["nonlinear"] - e2e["linear"] >= 0.30
          and e2e["lals"] < e2e["nonlinear"] and e2e["seconds_8"] < 15 * 60)
    record(8, "non-linear clamp vs linear baselines", ok,
           f"non-linear {e2e['nonlinear']:.2f}, linear map {e2e['linear']:.2f}, "
           f"linear at loss sites {e2e['lals']:.2f}, {e2e['seconds_8']:.0f}s")


def test_criterion_09_magnitudes(e2e):
    one_site = all(n == 1 for n in e2e["clamp_sites"])
    ok = one_site and 10 * e2e["clamp_l2"] <= e2e["dim_l2"] and e2e["clamp_rate"] == e2e["nonlinear"]
    record(9, "clamp edits one site, >= 10x smaller than DIM ablation", ok,
           f"clamp L2 {e2e['clamp_l2']:.2f} at 1 site, DIM-ablation L2 {e2e['dim_l2']:.2f}")


def test_criterion_10_layer_sweep(subject, e2e):
    rows = e2e["sweep"]
    planted = subject.planted_layer
    best = max(rows, key=lambda r: (r["rate"], -r["layer"]))["layer"]
    late = [r["rate"] for r in rows if r["layer"] >= planted + 2]
    ok = len(rows) == 6 and best in (planted, planted + 1) and all(r < 0.2 for r in late) and e2e["seconds_10"] < 5400
    record(10, "layer sweep peaks at planted layer", ok,
           "rates " + ", ".join(f"L{r['layer']}={r['rate']:.2f}" for r in rows) + f", {e2e['seconds_10']:.0f}s")


def test_criterion_11_determinism(subject, dataset, e2e):
    again = end_to_end(subject, dataset)
    keys = [k for k in e2e if not k.startswith("seconds")]
    differing = [k for k in keys if repr(e2e[k]) != repr(again[k])]
    record(11, "bitwise rerun of criteria 8-10", not differing,
           "all numbers identical" if not differing else f"differs: {', '.join(differing)}")

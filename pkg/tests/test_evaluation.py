import itertools

import numpy as np
import pytest
import torch

from invsteer.evaluation import (
    MagnitudeReport,
    Method,
    SweepResult,
    compliance_rate,
    dim_ablation,
    dim_actadd,
    evaluate_method,
    intervention_magnitude,
    layer_sweep,
    linear_at_loss_sites,
    loss_site_shift,
    no_intervention,
    radius_oracle,
)
from invsteer.exceptions import InvalidArgumentError
from invsteer.sites import LossSiteSet
from invsteer.subject import Site, forward_with_hooks
from invsteer.train import TrainConfig, compute_loss_sites

PYTHAGOREAN = [((0, 0), (3, 4), 5), ((1, 1), (6, 13), 13), ((2, -1), (10, 14), 17), ((7, 7), (7, 7), 0)]


def negate(h):
    return -h


# ---- compliance ----------------------------------------------------------------


def test_no_intervention_rate_zero(subject, dataset):
    assert compliance_rate(subject, no_intervention(), dataset.X_neg_test) == 0.0


def test_oracle_rate_one(subject, dataset):
    assert compliance_rate(subject, radius_oracle(subject), dataset.X_neg_test) == 1.0


def test_empty_test_set(subject):
    with pytest.raises(InvalidArgumentError):
        compliance_rate(subject, no_intervention(), np.zeros((0, subject.seq_len, subject.d)))


def test_duplicate_edit_sites_rejected(subject, dataset):
    method = Method("dup", [(Site(1, -1), negate), (Site(1, 7), negate)])
    with pytest.raises(InvalidArgumentError):
        compliance_rate(subject, method, dataset.X_neg_test)


# ---- magnitude -------------------------------------------------------------------


def test_single_345_edit():
    report = MagnitudeReport.from_states([[((0.0, 0.0), (3.0, 4.0))]])
    assert report.sites_per_example.tolist() == [1]
    assert report.mean_l2 == 5.0


def test_up_to_three_integer_edits_exhaustive():
    for k in range(4):
        for combo in itertools.combinations_with_replacement(PYTHAGOREAN, k):
            report = MagnitudeReport.from_states([[(a, b) for a, b, _ in combo]])
            assert report.sites_per_example[0] == k
            assert report.l2_per_example[0] == sum(n for _, _, n in combo)


def test_subject_magnitude_matches_hand_sum(subject, dataset):
    X = dataset.X_neg_test
    layer_sites = [Site(1, 0), Site(1, 3), Site(1, 7)]
    _, clean = forward_with_hooks(subject, X, record=layer_sites)
    for k in range(4):
        for sites in itertools.combinations(layer_sites, k):
            report = intervention_magnitude(subject, Method("neg", [(s, negate) for s in sites]), X)
            # edits share a layer, so each sees its unedited state and moves it by -2h exactly
            hand = np.zeros(len(X))
            for s in sites:
                hand += torch.linalg.vector_norm(-2 * torch.as_tensor(clean[s]), dim=-1).numpy()
            assert np.all(report.sites_per_example == k)
            np.testing.assert_array_equal(report.l2_per_example, hand)


def test_noop_counts_declared_sites(subject, dataset):
    sites = [Site(0, 0), Site(4, 2), Site(5, -1)]
    report = intervention_magnitude(subject, no_intervention(sites), dataset.X_neg_test)
    assert report.mean_sites == 3 and report.mean_l2 == 0.0


def test_no_method_has_zero_magnitude(subject, dataset):
    report = intervention_magnitude(subject, no_intervention(), dataset.X_neg_test)
    assert report.mean_sites == 0 and report.mean_l2 == 0.0


# ---- baselines ----------------------------------------------------------------------


def test_dim_ablation_edits_every_site(subject, dataset):
    out = evaluate_method(subject, dim_ablation(subject, dataset), dataset.X_neg_test)
    assert out["mean_sites"] == subject.n_layers * subject.seq_len
    assert out["mean_l2"] > 0


def test_dim_actadd_edits_one_layer(subject, dataset):
    method = dim_actadd(subject, dataset)
    assert len({s.layer for s in method.sites}) == 1
    assert len(method.sites) == subject.seq_len


def test_loss_site_shift_empty_is_noop(subject, dataset):
    assert linear_at_loss_sites(subject, LossSiteSet((), 0.9), dataset.X_neg_test) == 0.0


def test_loss_site_shift_hits_target(subject, dataset):
    loss_sites, _ = compute_loss_sites(subject, dataset, Site(2, -3), 0.9)
    first = loss_sites.entries[0]
    _, states = forward_with_hooks(subject, dataset.X_neg_test, loss_site_shift(loss_sites).edits, [first.site])
    np.testing.assert_allclose(states[first.site] @ first.direction, first.mu_plus, atol=1e-10)


# ---- sweep ---------------------------------------------------------------------------


def test_sweep_records_failures_and_continues(subject, dataset):
    result = layer_sweep(subject, dataset, TrainConfig(position=-1, steps=5, width=16), layers=[5, 2])
    assert result.layers == [5, 2]
    assert result.rows[0]["error"] and result.rows[0]["rate"] == 0.0
    assert result.rows[1]["error"] is None
    csv_text = result.to_csv()
    assert csv_text.splitlines()[0] == "layer,rate,magnitude,error"
    assert len(csv_text.splitlines()) == 3


def test_sweep_needs_two_layers(subject, dataset):
    with pytest.raises(InvalidArgumentError):
        layer_sweep(subject, dataset, TrainConfig(steps=1), layers=[2])


def test_best_layer_prefers_earliest_tie():
    result = SweepResult([{"layer": l, "rate": r, "magnitude": 0.0, "error": None}
                          for l, r in ((0, 0.1), (1, 0.9), (2, 0.9))])
    assert result.best_layer == 1

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invsteer.exceptions import DegenerateDirectionError, InvalidArgumentError
from invsteer.featmap import IResNetFeatureMap, LinearFeatureMap, ResidualBlock
from invsteer.intervene import (
    DiffInMeans,
    InterventionSpec,
    SteeringDirection,
    ablate,
    actadd,
    basis_intervene,
    clamp_to_mean,
    dim_direction,
    interchange,
    linear_intervene,
    nonlinear_intervene,
)

finite = st.floats(-10, 10, allow_nan=False)


def identity_map(d):
    blocks = [ResidualBlock(np.zeros((4, d)), np.zeros(4), np.zeros((d, 4)), np.zeros(d))]
    return IResNetFeatureMap.from_blocks(blocks)


def orthogonal(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def linear_map(W):
    return LinearFeatureMap(matrix=W).initialize(W.shape[0])


# ---- linear and basis form ----------------------------------------------------


def test_linear_single_direction():
    np.testing.assert_array_equal(linear_intervene([1.0, 0.0], [[0.0, 1.0]], [2.0]), [1.0, 2.0])


def test_linear_two_directions():
    out = linear_intervene([1.0, 1.0, 0.0], [[1, 0, 0], [0, 1, 0]], [-1.0, 3.0])
    np.testing.assert_array_equal(out, [0.0, 4.0, 0.0])


@given(arrays(np.float64, 4, elements=finite))
def test_linear_zero_alpha_is_identity(h):
    np.testing.assert_array_equal(linear_intervene(h, np.eye(4)[:2], [0.0, 0.0]), h)


def test_linear_rejects_non_orthonormal():
    with pytest.raises(InvalidArgumentError):
        linear_intervene([0.0, 0.0], [[1.0, 0.0], [1.0, 1.0]], [1.0, 1.0])


def test_basis_identity_map():
    out = basis_intervene([5.0, 5.0], linear_map(np.eye(2)), InterventionSpec((0,), (1.0,)))
    np.testing.assert_array_equal(out, [6.0, 5.0])


def test_basis_rotation_matches_direction_form():
    W = np.array([[0.0, -1.0], [1.0, 0.0]])
    out = basis_intervene([1.0, 0.0], linear_map(W), InterventionSpec((0,), (1.0,)))
    np.testing.assert_allclose(out, np.array([1.0, 0.0]) + W.T[:, 0], atol=1e-15)


def test_basis_zero_alpha():
    W = orthogonal(3, np.random.default_rng(0))
    h = np.array([0.3, -2.0, 1.0])
    np.testing.assert_allclose(basis_intervene(h, linear_map(W), InterventionSpec((1,), (0.0,))), h, atol=1e-14)


def test_basis_rejects_clamp_and_nonlinear_maps():
    with pytest.raises(InvalidArgumentError):
        basis_intervene([1.0, 0.0], linear_map(np.eye(2)), InterventionSpec((0,), (1.0,), "clamp"))
    with pytest.raises(InvalidArgumentError):
        basis_intervene([1.0, 0.0], identity_map(2), InterventionSpec((0,), (1.0,)))


def test_three_forms_agree():
    rng = np.random.default_rng(10)
    for _ in range(100):
        d = int(rng.integers(2, 9))
        W = orthogonal(d, rng)
        k = int(rng.integers(1, d + 1))
        coords = tuple(int(c) for c in rng.choice(d, k, replace=False))
        spec = InterventionSpec(coords, tuple(rng.normal(size=k)))
        h = rng.normal(size=d)
        fmap = linear_map(W)
        a = linear_intervene(h, W[list(coords)], spec.alphas)
        b = basis_intervene(h, fmap, spec)
        c = nonlinear_intervene(h, fmap, spec)
        assert np.max(np.abs(a - b)) <= 1e-10 and np.max(np.abs(b - c)) <= 1e-10


# ---- spec validation ----------------------------------------------------------


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        InterventionSpec((0, 0), (1.0, 2.0))
    with pytest.raises(InvalidArgumentError):
        InterventionSpec((0, 1), (1.0,))
    with pytest.raises(InvalidArgumentError):
        InterventionSpec((0,), (1.0,), "clip")
    with pytest.raises(InvalidArgumentError):
        nonlinear_intervene([0.0, 0.0], identity_map(2), InterventionSpec((2,), (1.0,)))


# ---- non-linear form ------------------------------------------------------------


def test_nonlinear_identity_map_add():
    out = nonlinear_intervene([1.0, 2.0], identity_map(2), InterventionSpec((1,), (5.0,)))
    np.testing.assert_allclose(out, [1.0, 7.0], atol=1e-15)


def test_nonlinear_zero_alpha_round_trip():
    fmap = IResNetFeatureMap(random_state=3).initialize(6)
    h = np.random.default_rng(3).normal(size=(20, 6))
    out = nonlinear_intervene(h, fmap, InterventionSpec((0, 2), (0.0, 0.0)))
    assert np.max(np.linalg.norm(out - h, axis=1) / np.maximum(np.linalg.norm(h, axis=1), 1)) <= 1e-4


def test_clamp_mode_sets_coordinate():
    fmap = IResNetFeatureMap(random_state=1).initialize(4)
    h = np.random.default_rng(1).normal(size=(10, 4))
    out = nonlinear_intervene(h, fmap, InterventionSpec((3,), (0.7,), "clamp"))
    np.testing.assert_allclose(fmap.transform(out)[:, 3], 0.7, atol=1e-4)


# ---- interchange -------------------------------------------------------------------


def test_interchange_self_is_identity():
    fmap = IResNetFeatureMap(random_state=4).initialize(8)
    h = np.random.default_rng(4).normal(size=(30, 8))
    np.testing.assert_allclose(interchange(h, h, fmap), h, atol=1e-4)


def test_interchange_identity_map():
    np.testing.assert_allclose(interchange([0.0, 0.0], [3.0, 4.0], identity_map(2), (0,)), [3.0, 0.0], atol=1e-15)


def test_interchange_transfers_only_targeted():
    fmap = IResNetFeatureMap(random_state=4).initialize(8)
    rng = np.random.default_rng(4)
    hm, hp = rng.normal(size=(100, 8)), rng.normal(size=(100, 8))
    zr, zm, zp = fmap.transform(interchange(hm, hp, fmap, (0,))), fmap.transform(hm), fmap.transform(hp)
    np.testing.assert_allclose(zr[:, 0], zp[:, 0], atol=1e-4)
    np.testing.assert_allclose(zr[:, 1:], zm[:, 1:], atol=1e-4)


def test_interchange_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        interchange(np.zeros((2, 3)), np.zeros((3, 3)), identity_map(3))


# ---- clamp -------------------------------------------------------------------------


def test_clamp_identity_map():
    np.testing.assert_allclose(clamp_to_mean([0.2, 7.0], identity_map(2), 0, 1.0), [1.0, 7.0], atol=1e-15)


def test_clamp_at_target_is_noop():
    fmap = IResNetFeatureMap(random_state=6).initialize(5)
    h = np.random.default_rng(6).normal(size=5)
    mu = fmap.transform(h)[2]
    np.testing.assert_allclose(clamp_to_mean(h, fmap, 2, mu), h, atol=1e-4)


def test_clamp_hits_target_and_is_idempotent():
    fmap = IResNetFeatureMap(random_state=7).initialize(6)
    h = np.random.default_rng(7).normal(size=(100, 6))
    once = clamp_to_mean(h, fmap, 0, 1.3)
    np.testing.assert_allclose(fmap.transform(once)[:, 0], 1.3, atol=1e-4)
    np.testing.assert_allclose(clamp_to_mean(once, fmap, 0, 1.3), once, atol=1e-4)


def test_clamp_rejects_non_finite_target():
    with pytest.raises(InvalidArgumentError):
        clamp_to_mean([0.0, 0.0], identity_map(2), 0, float("inf"))


# ---- difference in means ------------------------------------------------------------


def test_dim_direction_points_to_refusal():
    v = dim_direction(np.zeros((3, 2)), np.tile([1.0, 0.0], (3, 1)))
    np.testing.assert_allclose(v.v, [1.0, 0.0])


def test_dim_identical_sets_degenerate():
    X = np.random.default_rng(0).normal(size=(5, 3))
    with pytest.raises(DegenerateDirectionError):
        dim_direction(X, X)


def test_dim_gaussian_clusters_angle():
    rng = np.random.default_rng(5)
    c = np.array([2.0, 1.0]) / np.sqrt(5)
    minus = rng.normal(size=(1000, 2)) + c
    plus = rng.normal(size=(1000, 2)) - c
    v = dim_direction(plus, minus).v
    assert np.degrees(np.arccos(np.clip(v @ c, -1, 1))) <= 5.0


def test_dim_default_alpha_closes_gap():
    rng = np.random.default_rng(2)
    plus, minus = rng.normal(size=(50, 4)), rng.normal(size=(50, 4)) + 3
    direction = dim_direction(plus, minus, "actadd")
    moved = direction.apply(minus)
    np.testing.assert_allclose(moved.mean(0) @ direction.v, plus.mean(0) @ direction.v, atol=1e-10)


def test_ablate_examples():
    np.testing.assert_array_equal(ablate([1.0, 1.0], [1.0, 0.0]), [0.0, 1.0])
    np.testing.assert_array_equal(ablate([0.0, 2.0], [1.0, 0.0]), [0.0, 2.0])


def test_ablate_properties():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        h = rng.normal(size=5)
        v = rng.normal(size=5)
        v /= np.linalg.norm(v)
        out = ablate(h, v)
        assert abs(out @ v) <= 1e-10
        assert np.linalg.norm(out) <= np.linalg.norm(h) + 1e-12
        np.testing.assert_allclose(ablate(out, v), out, atol=1e-10)


def test_actadd_examples():
    np.testing.assert_array_equal(actadd([0.0, 0.0], [0.0, 1.0], 3.0), [0.0, 3.0])
    np.testing.assert_array_equal(actadd([4.0, -1.0], [0.0, 1.0], 0.0), [4.0, -1.0])


@settings(max_examples=200)
@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=st.floats(-1, 1)), finite)
def test_actadd_moves_by_alpha(h, v, alpha):
    if np.linalg.norm(v) < 1e-3:
        return
    v = v / np.linalg.norm(v)
    assert np.linalg.norm(actadd(h, v, alpha) - h) == pytest.approx(abs(alpha), abs=1e-9)


def test_non_unit_direction_rejected():
    with pytest.raises(InvalidArgumentError):
        ablate([1.0, 0.0], [2.0, 0.0])
    with pytest.raises(InvalidArgumentError):
        SteeringDirection(np.array([1.0, 1.0]))


def test_steering_direction_round_trip(tmp_path):
    d = SteeringDirection(np.array([0.6, 0.8]), "actadd", -1.5, "layer")
    d.save(tmp_path / "v.json")
    back = SteeringDirection.load(tmp_path / "v.json")
    np.testing.assert_array_equal(back.v, d.v)
    assert (back.scheme, back.alpha, back.scope) == ("actadd", -1.5, "layer")


def test_diff_in_means_transformer():
    rng = np.random.default_rng(3)
    X = np.vstack([rng.normal(size=(40, 3)), rng.normal(size=(40, 3)) + [4, 0, 0]])
    y = np.array([1] * 40 + [0] * 40)
    est = DiffInMeans().fit(X, y)
    v = est.direction_.v
    assert v[0] > 0.9
    assert np.max(np.abs(est.transform(X) @ v)) <= 1e-10

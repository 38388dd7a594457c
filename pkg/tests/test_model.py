import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from volcon import model as M
from volcon import tensor_engine as te
from volcon.checks import brute_force_nt_xent, smooth_loss_case, tiny_config
from volcon.errors import ContractError
from volcon.tensor_engine import Tensor

# -log(e^2 / (e^2 + 2)) for aligned pairs with orthogonal cross pairs at tau = 0.5
ALIGNED_ORTHOGONAL_LOSS = 0.23954476622188453


def unit_rows(rng, b, p):
    z = rng.normal(size=(b, p))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_all_equal_embeddings_give_ln3():
    z = np.tile(unit_rows(np.random.default_rng(0), 1, 5), (2, 1))
    assert abs(M.nt_xent(Tensor(z), Tensor(z), 0.5).item() - math.log(3)) <= 1e-12


def test_aligned_orthogonal_closed_form():
    z = np.eye(2, 4)
    loss = M.nt_xent(Tensor(z), Tensor(z), 0.5).item()
    assert abs(loss - ALIGNED_ORTHOGONAL_LOSS) <= 1e-12
    assert abs(loss - math.log1p(2 * math.exp(-2))) <= 1e-12


@given(st.integers(2, 8), st.integers(4, 32), st.floats(0.1, 1.0), st.integers(0, 2**32 - 1))
def test_nt_xent_matches_brute_force(b, p, tau, seed):
    rng = np.random.default_rng(seed)
    z1, z2 = unit_rows(rng, b, p), unit_rows(rng, b, p)
    assert abs(M.nt_xent(Tensor(z1), Tensor(z2), tau).item() - brute_force_nt_xent(z1, z2, tau)) <= 1e-10


def test_nt_xent_contracts():
    z = np.eye(1, 3)
    with pytest.raises(ContractError, match="at least 2"):
        M.nt_xent(Tensor(z), Tensor(z), 0.5)
    with pytest.raises(ContractError):
        M.nt_xent(Tensor(np.eye(2, 3)), Tensor(np.eye(3, 3)), 0.5)


def test_deepset_identity_examples():
    bundle = M.init_bundle(M.ModelConfig(variant="ds", feature_dim=2), 0)
    np.testing.assert_array_equal(M.deepset_aggregate(bundle, np.array([[1.0, 2.0], [3.0, 4.0]])).data, [4.0, 6.0])
    v = np.array([[0.5, -1.5]])
    np.testing.assert_array_equal(M.deepset_aggregate(bundle, v).data, v[0])


@pytest.mark.parametrize("head", ["identity", "mlp"])
def test_set_permutation_invariance(head, rng):
    cfg = tiny_config("ds", head)
    bundle = M.init_bundle(cfg, 1)
    for k in range(1, 5):
        feats = rng.normal(size=(k, cfg.feature_dim))
        x1, x2 = rng.uniform(size=(2, 3, k, 16, 16, 1))
        ref_h = M.deepset_aggregate(bundle, feats).data
        ref = M.forward_loss_ds(bundle, x1, x2).item()
        for perm in map(list, itertools.permutations(range(k))):
            np.testing.assert_allclose(M.deepset_aggregate(bundle, feats[perm]).data, ref_h, rtol=0, atol=1e-9)
            assert abs(M.forward_loss_ds(bundle, x1[:, perm], x2[:, perm]).item() - ref) <= 1e-9


def test_k1_identity_set_loss_equals_baseline(rng):
    base = M.init_bundle(tiny_config("baseline"), 4)
    deep = M.init_bundle(tiny_config("ds", "identity"), 4)
    assert base.params.equal(deep.params)
    x1, x2 = rng.uniform(size=(2, 4, 16, 16, 1))
    a = M.forward_loss_baseline(base, x1, x2).item()
    b = M.forward_loss_ds(deep, x1[:, None], x2[:, None]).item()
    assert abs(a - b) <= 1e-12


def test_ps_loss_is_baseline_graph(rng):
    bundle = M.init_bundle(tiny_config("ps"), 2)
    x1, x2 = rng.uniform(size=(2, 4, 16, 16, 1))
    assert M.forward_loss_ps(bundle, x1, x2).item() == M.forward_loss_baseline(bundle, x1, x2).item()
    assert M.forward_loss_ps(bundle, x1, x2).item() != M.forward_loss_ps(bundle, x1, x1).item()


def test_identical_pairs_identical_batch_gives_ln3(rng):
    bundle = M.init_bundle(tiny_config(), 0)
    x = np.repeat(rng.uniform(size=(1, 16, 16, 1)), 2, axis=0)
    assert abs(M.forward_loss_baseline(bundle, x, x).item() - math.log(3)) <= 1e-12


def test_loss_positive_and_finite(rng):
    bundle = M.init_bundle(tiny_config(), 0)
    x1, x2 = rng.uniform(size=(2, 4, 16, 16, 1))
    loss = M.forward_loss_baseline(bundle, x1, x2).item()
    assert math.isfinite(loss) and loss > 0


def test_encoder_determinism_and_zero_image():
    bundle = M.init_bundle(tiny_config(), 3)
    zero = np.zeros((16, 16, 1))
    a, b = M.encode(bundle, zero), M.encode(bundle, zero)
    assert np.array_equal(a, b) and np.all(np.isfinite(a))
    # zero biases at init: a zero image maps to the zero feature vector
    np.testing.assert_array_equal(a, bundle.params["enc.fc.b"].data)
    img = np.random.default_rng(0).uniform(size=(2, 16, 16, 1))
    img[1] = img[0]
    h = M.encode_batch(bundle, img).data
    assert np.array_equal(h[0], h[1])
    assert M.encode(bundle, img[0]).shape == (bundle.config.feature_dim,)


def test_encoder_sum_gradient_check():
    bundle = M.init_bundle(tiny_config(), 5)
    for attempt in range(50):
        x = np.random.default_rng(attempt).uniform(size=(2, 16, 16, 1))
        fn = lambda p: te.sum_all(M.encode_batch(M.ModelBundle(bundle.config, p), x))
        if te.kink_margin(fn, bundle.params) > 1e-5:
            break
    assert te.finite_diff_check(fn, bundle.params, 1e-6) <= 1e-5


@pytest.mark.parametrize("variant,head", [("baseline", "identity"), ("ps", "identity"), ("ds", "identity"),
                                          ("ds", "mlp")])
def test_loss_gradients(variant, head):
    bundle, fn = smooth_loss_case(variant, head)
    assert te.finite_diff_check(fn, bundle.params, 1e-6) <= 1e-5


def test_bundle_save_load(tmp_path):
    cfg = tiny_config("ds", "mlp")
    bundle = M.init_bundle(cfg, 9)
    bundle.save(tmp_path / "c.volp")
    assert M.ModelBundle.load(tmp_path / "c.volp", cfg).params.equal(bundle.params)
    with pytest.raises(ContractError, match="does not match"):
        M.ModelBundle.load(tmp_path / "c.volp", tiny_config("ds", "identity"))


def test_image_shape_validated():
    with pytest.raises(ContractError, match="expected images"):
        M.encode_batch(M.init_bundle(tiny_config(), 0), np.zeros((1, 8, 8, 1)))

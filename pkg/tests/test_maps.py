import numpy as np
import pytest

from diflab import diffable as df
from diflab.diffable import ParameterStore
from diflab.maps import (AffineCouplingMap, ChainMap, DiagonalAffineMap, alternating_mask,
                         apply_forward, apply_inverse, log_abs_det_jacobian)


def affine(loc, scale, name="a"):
    m = DiagonalAffineMap(name, len(loc))
    s = ParameterStore()
    m.register(s, None, loc=np.asarray(loc, float), log_scale=np.log(scale))
    return m, s


def random_coupling(dim=2, parity=0, seed=0, name="c", store=None):
    rng = np.random.default_rng(seed)
    m = AffineCouplingMap(name, alternating_mask(dim, parity))
    s = ParameterStore() if store is None else store
    m.register(s, rng)
    # move away from the identity so tests are not trivial
    for sl in s.registry:
        if sl.name.startswith(name + "."):
            s.set(sl.name, rng.normal(scale=0.5, size=sl.shape))
    return m, s


def test_affine_center_maps_to_origin():
    m, s = affine([1.0, -1.0], [2.0, 0.5])
    np.testing.assert_array_equal(apply_forward(m, s, [1.0, -1.0]), [0.0, 0.0])
    np.testing.assert_array_equal(apply_inverse(m, s, [0.0, 0.0]), [1.0, -1.0])


def test_affine_logdet():
    m, s = affine([1.0, -1.0], [2.0, 0.5])
    assert log_abs_det_jacobian(m, s, [3.0, 4.0]) == pytest.approx(0.0, abs=1e-15)
    m, s = affine([0.0], [3.0])
    assert log_abs_det_jacobian(m, s, [0.3]) == pytest.approx(-np.log(3.0))


def test_identity_affine():
    m, s = affine([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(apply_forward(m, s, x), x)
    assert log_abs_det_jacobian(m, s, x[0]) == 0.0


def test_affine_roundtrip_large_inputs():
    rng = np.random.default_rng(1)
    m, s = affine(rng.normal(size=4), np.exp(rng.normal(size=4)))
    x = rng.uniform(-1e3, 1e3, size=(200, 4))
    assert np.max(np.abs(apply_inverse(m, s, apply_forward(m, s, x)) - x)) <= 1e-10


def test_coupling_roundtrip():
    m, s = random_coupling(3, 1)
    x = np.random.default_rng(2).uniform(-10, 10, size=(500, 3))
    assert np.max(np.abs(apply_inverse(m, s, apply_forward(m, s, x)) - x)) <= 1e-9


def test_zero_coupling_is_identity():
    m = AffineCouplingMap("c", alternating_mask(2, 0))
    s = ParameterStore()
    m.register(s, np.random.default_rng(0))
    z = np.random.default_rng(3).normal(size=(5, 2))
    np.testing.assert_array_equal(apply_inverse(m, s, z), z)
    assert np.all(log_abs_det_jacobian(m, s, z) == 0.0)


def numeric_logdet(m, s, x, h=1e-6):
    d = len(x)
    J = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (apply_forward(m, s, x + e) - apply_forward(m, s, x - e)) / (2 * h)
    return np.linalg.slogdet(J)[1]


def test_coupling_logdet_matches_numeric_jacobian():
    m, s = random_coupling(2, 0, seed=4)
    for x in np.random.default_rng(5).normal(size=(5, 2)):
        assert log_abs_det_jacobian(m, s, x) == pytest.approx(numeric_logdet(m, s, x), abs=1e-6)


def test_coupling_masked_coordinates_pass_through():
    m, s = random_coupling(4, 0, seed=6)
    x = np.random.default_rng(7).normal(size=(20, 4))
    z = apply_forward(m, s, x)
    np.testing.assert_array_equal(z[:, m.mask == 1], x[:, m.mask == 1])


def test_coupling_needs_two_dims():
    with pytest.raises(ValueError):
        AffineCouplingMap("c", [1.0])


def test_chain_inverse_and_logdet():
    s = ParameterStore()
    a = DiagonalAffineMap("a", 2)
    a.register(s, None, loc=np.array([0.5, -1.0]), log_scale=np.array([0.3, -0.2]))
    b, _ = random_coupling(2, 1, seed=8, name="b", store=s)
    chain = ChainMap([a, b])
    x = np.random.default_rng(9).normal(size=(30, 2))
    z = apply_forward(chain, s, x)
    np.testing.assert_allclose(z, apply_forward(b, s, apply_forward(a, s, x)), rtol=0, atol=0)
    np.testing.assert_allclose(apply_inverse(chain, s, z), apply_inverse(a, s, apply_inverse(b, s, z)), atol=0)
    expect = log_abs_det_jacobian(a, s, x) + log_abs_det_jacobian(b, s, apply_forward(a, s, x))
    np.testing.assert_allclose(log_abs_det_jacobian(chain, s, x), expect, rtol=0, atol=1e-15)


def test_forward_inverse_logdets_cancel():
    m, s = random_coupling(2, 1, seed=10)
    x = np.random.default_rng(11).normal(size=(40, 2))
    with df.no_grad():
        z, ld_f = m.forward(s.constants(), df.Tensor(x))
        _, ld_i = m.inverse(s.constants(), z)
    np.testing.assert_allclose(ld_f.data, -ld_i.data, atol=1e-12)


def test_chain_dimension_mismatch():
    with pytest.raises(ValueError):
        ChainMap([DiagonalAffineMap("a", 2), DiagonalAffineMap("b", 3)])


def test_non_finite_input_rejected():
    m, s = affine([0.0], [1.0])
    with pytest.raises(ValueError):
        apply_forward(m, s, [np.nan])

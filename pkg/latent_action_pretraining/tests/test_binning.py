import numpy as np
import pytest

from latent_action_pretraining.binning import BinSpec, decode_action, encode_action, fit_bins
from latent_action_pretraining.exceptions import ContractViolation


@pytest.mark.parametrize('bins', [4, 32])
def test_bins_have_equal_counts(bins):
    actions = np.random.default_rng(bins).uniform(-0.08, 0.08, size=(1000, 2))

    spec = fit_bins(actions, bins)
    encoded = encode_action(actions, spec)

    for dimension in range(2):
        counts = np.bincount(encoded[:, dimension], minlength=bins)
        assert counts.max() - counts.min() <= 1


def test_boundary_value_goes_to_upper_bin():
    spec = fit_bins(np.arange(8, dtype=float)[:, None], 4)

    assert spec.boundaries == [[1.5, 3.5, 5.5]]
    assert encode_action(np.array([[1.5], [1.4], [-10.0], [10.0]]), spec).ravel().tolist() == [1, 0, 0, 3]


def test_decode_returns_bin_medians():
    spec = fit_bins(np.arange(8, dtype=float)[:, None], 4)

    assert decode_action(np.array([[0], [3]]), spec).ravel().tolist() == [0.5, 6.5]
    assert spec.width(0, 1) == pytest.approx(2.0)
    with pytest.raises(ContractViolation):
        decode_action(np.array([[4]]), spec)


def test_decoded_action_stays_in_its_bin():
    actions = np.random.default_rng(0).uniform(-0.08, 0.08, size=(500, 2))
    spec = fit_bins(actions, 8)

    encoded = encode_action(actions, spec)

    assert np.array_equal(encode_action(decode_action(encoded, spec), spec), encoded)


def test_tied_values_keep_boundaries_increasing():
    spec = fit_bins(np.array([0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0])[:, None], 4)

    assert spec.boundaries == [[0.5, 1.5, 2.5]]


@pytest.mark.parametrize('actions, bins', [
    (np.zeros((100, 2)), 4),
    (np.ones((3, 2)), 4),
    (np.random.default_rng(0).normal(size=(100, 2)), 1),
])
def test_fit_bins_errors(actions, bins):
    with pytest.raises(ContractViolation):
        fit_bins(actions, bins)


def test_bin_spec_validation():
    with pytest.raises(ValueError):
        BinSpec(bins=3, boundaries=[[0.5, 0.2]], centers=[[0.0, 0.3, 0.6]], low=[0.0], high=[1.0])
    with pytest.raises(ValueError):
        BinSpec(bins=3, boundaries=[[0.5]], centers=[[0.0, 0.3, 0.6]], low=[0.0], high=[1.0])

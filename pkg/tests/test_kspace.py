import numpy as np
import pytest

from fedrecon import kspace
from fedrecon.autodiff import Tensor
from fedrecon.kspace import ComplexImage, MaskSpec, acquire, apply_mask, fft2, ifft2, make_mask


def test_delta_image_has_flat_spectrum():
    img = np.zeros((8, 8))
    img[0, 0] = 1.0
    k = fft2(ComplexImage.from_real(img))
    np.testing.assert_allclose(k.re, 1.0 / 8.0, atol=1e-12)
    np.testing.assert_allclose(k.im, 0.0, atol=1e-12)


def test_constant_image_is_dc_only():
    k = fft2(ComplexImage.from_real(np.full((8, 8), 0.7)))
    assert abs(k.re[0, 0] - 0.7 * 8.0) < 1e-12
    rest = k.to_complex().copy()
    rest[0, 0] = 0.0
    assert np.abs(rest).max() < 1e-12


def test_round_trip_is_identity():
    rng = np.random.default_rng(3)
    img = rng.normal(size=(32, 32))
    back = ifft2(fft2(ComplexImage.from_real(img)))
    assert np.abs(back.re - img).max() < 1e-10
    assert np.abs(back.im).max() < 1e-10


def test_parseval_energy_preserved():
    rng = np.random.default_rng(4)
    img = ComplexImage(rng.normal(size=(16, 16)), rng.normal(size=(16, 16)))
    e0 = img.energy()
    e1 = fft2(img).energy()
    assert abs(e0 - e1) / e0 < 1e-10


@pytest.mark.parametrize("shape", [(12, 16), (16, 12), (1, 16), (16, 1)])
def test_fft_rejects_non_power_of_two(shape):
    with pytest.raises(ValueError):
        fft2(ComplexImage.from_real(np.zeros(shape)))


def test_complex_image_rejects_mismatched_planes():
    with pytest.raises(ValueError):
        ComplexImage(np.zeros((4, 4)), np.zeros((4, 5)))


# -- masks ---------------------------------------------------------------------


def test_mask_counts_for_width32_af4():
    m = make_mask(32, 4.0, 0.08, np.random.default_rng(0))
    assert len(m.kept_columns) == 8
    assert m.n_center == 3
    # lowest-frequency columns for width 32 are 0, then the +/-1 pair
    assert {0, 1, 31}.issubset(m.kept_columns)


def test_mask_af1_keeps_everything():
    m = make_mask(32, 1.0, 0.08, np.random.default_rng(0))
    assert m.kept_columns == tuple(range(32))


def test_mask_deterministic_given_seed():
    a = make_mask(64, 4.0, 0.08, np.random.default_rng(123))
    b = make_mask(64, 4.0, 0.08, np.random.default_rng(123))
    assert a.kept_columns == b.kept_columns


def test_mask_cardinality_ratio_bound():
    for af in (2.0, 3.0, 4.0, 8.0):
        for w in (32, 64, 128):
            m = make_mask(w, af, 0.04, np.random.default_rng(1))
            ratio = len(m.kept_columns) / w
            assert 1.0 / af - 1.0 / w <= ratio <= 1.0 / af + 1.0 / w


def test_mask_precondition_center_exceeds_budget():
    with pytest.raises(ValueError):
        make_mask(32, 16.0, 0.25, np.random.default_rng(0))  # 2 kept < 8 center


def test_maskspec_validates_cardinality_and_center():
    with pytest.raises(ValueError):
        MaskSpec(32, 4.0, 0.08, tuple(range(7)))  # wrong count
    with pytest.raises(ValueError):
        MaskSpec(32, 4.0, 0.08, (2, 3, 4, 5, 6, 7, 8, 9))  # center missing


def test_lowest_frequency_order_prefix():
    order = kspace.lowest_frequency_order(32)
    assert order[:5].tolist() == [0, 1, 31, 2, 30]


# -- acquisition ---------------------------------------------------------------


def _full_mask(width):
    return make_mask(width, 1.0, 0.08, np.random.default_rng(0))


def test_full_mask_zero_noise_reproduces_reference():
    rng = np.random.default_rng(5)
    ref = rng.uniform(0.0, 1.0, (32, 32))
    out = acquire(Tensor(ref), _full_mask(32))
    assert np.abs(out.data - ref).max() < 1e-10


def test_zero_reference_gives_zero_output():
    m = make_mask(32, 4.0, 0.08, np.random.default_rng(6))
    out = acquire(np.zeros((32, 32)), m)
    np.testing.assert_array_equal(out.data, 0.0)


def test_undersampling_loses_information():
    rng = np.random.default_rng(7)
    ref = rng.uniform(0.0, 1.0, (32, 32))
    full = acquire(ref, _full_mask(32))
    under = acquire(ref, make_mask(32, 4.0, 0.08, rng))
    mse_full = float(np.mean((full.data - ref) ** 2))
    mse_under = float(np.mean((under.data - ref) ** 2))
    assert mse_under > mse_full
    assert mse_under > 1e-6  # strictly worse, finite error


def test_masking_is_a_projection_in_kspace():
    rng = np.random.default_rng(8)
    m = make_mask(32, 4.0, 0.08, rng)
    k = fft2(ComplexImage.from_real(rng.normal(size=(32, 32))))
    once = apply_mask(k, m)
    twice = apply_mask(once, m)
    assert np.abs(twice.re - once.re).max() < 1e-10
    assert np.abs(twice.im - once.im).max() < 1e-10


def test_reacquire_with_symmetric_mask_is_stable():
    # A frequency-symmetric kept set preserves realness, so zero-filling
    # is idempotent in image space too; random masks break the symmetry
    # and only the k-space projection property holds.
    w = 32
    kept = tuple(sorted({0, 1, 2, 3, w - 1, w - 2, w - 3, 16}))
    m = MaskSpec(w, 4.0, 0.08, kept)
    ref = np.random.default_rng(9).uniform(0.0, 1.0, (w, w))
    once = acquire(ref, m)
    again = acquire(once, m)
    assert np.abs(again.data - once.data).max() < 1e-10


def test_acquire_noise_changes_output_deterministically():
    ref = np.random.default_rng(10).uniform(0.0, 1.0, (32, 32))
    m = _full_mask(32)
    a = acquire(ref, m, noise_sigma=0.05, rng=np.random.default_rng(11))
    b = acquire(ref, m, noise_sigma=0.05, rng=np.random.default_rng(11))
    clean = acquire(ref, m)
    assert np.array_equal(a.data, b.data)
    assert np.abs(a.data - clean.data).max() > 1e-4


def test_acquire_shape_and_rng_validation():
    m = _full_mask(32)
    with pytest.raises(ValueError):
        acquire(np.zeros((32, 16)), m)
    with pytest.raises(ValueError):
        acquire(np.zeros((32, 32)), m, noise_sigma=0.1, rng=None)


def test_ksample_shape_invariant():
    m = _full_mask(32)
    with pytest.raises(ValueError):
        kspace.KSpaceSample(Tensor(np.zeros((16, 32))), Tensor(np.zeros((32, 32))), m, "A")

import numpy as np
import pytest

from himat.errors import OddDimensions, UnknownBasis
from himat.tensor import Tensor, finite_difference_check
from himat.wavelet import (
    SubbandWeights,
    dwt2,
    dwt_loss,
    idwt2,
    iswt2,
    load_basis,
    swt2,
    swt_loss,
)

BASES = ("haar", "sym4", "sym19")


@pytest.mark.parametrize("name", BASES)
def test_basis_invariants(name):
    b = load_basis(name)
    lo, hi = b.dec_lo, b.dec_hi
    assert abs(lo.sum() - np.sqrt(2)) < 1e-10
    assert abs(hi.sum()) < 1e-10
    assert abs((lo**2).sum() - 1.0) < 1e-10
    k = np.arange(lo.size)
    assert np.allclose(hi, (-1.0) ** k * lo[::-1], atol=1e-15)
    # even-lag orthonormality
    for s in range(1, lo.size // 2):
        assert abs(np.dot(lo[: lo.size - 2 * s], lo[2 * s :])) < 1e-10


def test_basis_tap_counts():
    assert load_basis("haar").dec_lo.size == 2
    assert load_basis("sym4").dec_lo.size == 8
    assert load_basis("sym19").dec_lo.size == 38


def test_haar_taps_defining_values():
    b = load_basis("haar")
    r = 1 / np.sqrt(2)
    assert np.allclose(b.dec_lo, [r, r], atol=1e-15)
    assert np.allclose(np.abs(b.dec_hi), [r, r], atol=1e-15)
    assert abs(b.dec_hi.sum()) < 1e-15


def test_sym4_matches_published_coefficients():
    want = [
        -0.07576571478927333,
        -0.02963552764599851,
        0.49761866763201545,
        0.8037387518059161,
        0.29785779560527736,
        -0.09921954357684722,
        -0.012603967262037833,
        0.0322231006040427,
    ]
    assert np.allclose(load_basis("sym4").dec_lo, want, atol=1e-10)


def test_unknown_basis():
    with pytest.raises(UnknownBasis):
        load_basis("daub99")


def test_dwt_constant_image():
    c = 0.7
    sb = dwt2(Tensor(np.full((8, 8), c)), load_basis("haar"))
    assert np.allclose(sb.ll[0].data, 2 * c, atol=1e-12)
    for band in (sb.lh[0], sb.hl[0], sb.hh[0]):
        assert np.abs(band.data).max() < 1e-12


def test_dwt_subband_shapes():
    sb = dwt2(Tensor(np.zeros((32, 32))), load_basis("sym19"))
    for band in (sb.ll[0], sb.lh[0], sb.hl[0], sb.hh[0]):
        assert band.shape == (16, 16)


def test_dwt_odd_dims_rejected():
    with pytest.raises(OddDimensions):
        dwt2(Tensor(np.zeros((7, 8))), load_basis("haar"))


@pytest.mark.parametrize("name", BASES)
def test_dwt_perfect_reconstruction(name):
    b = load_basis(name)
    x = np.random.default_rng(1).standard_normal((64, 64))
    assert np.abs(idwt2(dwt2(Tensor(x), b), b).data - x).max() < 1e-8


def test_dwt_multilevel_reconstruction():
    b = load_basis("sym4")
    x = np.random.default_rng(2).standard_normal((32, 32))
    sb = dwt2(Tensor(x), b, levels=3)
    assert sb.ll[-1].shape == (4, 4)
    assert np.abs(idwt2(sb, b).data - x).max() < 1e-8


def test_swt_constant_image():
    sb = swt2(Tensor(np.full((8, 8), 0.3)), load_basis("haar"))
    assert np.allclose(sb.ll[0].data, 0.6, atol=1e-12)
    assert np.abs(sb.hh[0].data).max() < 1e-12


def test_swt_keeps_resolution():
    sb = swt2(Tensor(np.zeros((16, 16))), load_basis("sym19"), levels=2)
    for ell in (1, 2):
        for band in sb.level(ell):
            assert band.shape == (16, 16)


def test_swt_shift_equivariance_exact():
    b = load_basis("sym19")
    x = np.random.default_rng(3).standard_normal((32, 32))
    sb = swt2(Tensor(x), b, levels=2)
    sb_shift = swt2(Tensor(np.roll(x, (5, 11), (0, 1))), b, levels=2)
    for ell in (1, 2):
        for band, band_s in zip(sb.level(ell), sb_shift.level(ell)):
            assert np.array_equal(np.roll(band.data, (5, 11), (0, 1)), band_s.data)


def test_dwt_is_not_shift_equivariant():
    b = load_basis("haar")
    x = np.random.default_rng(4).standard_normal((16, 16))
    a = dwt2(Tensor(x), b).hh[0].data
    c = dwt2(Tensor(np.roll(x, 1, axis=1)), b).hh[0].data
    assert np.abs(a - c).max() > 1e-3  # odd shifts change decimated content


@pytest.mark.parametrize("name", BASES)
@pytest.mark.parametrize("levels", [1, 2])
def test_swt_perfect_reconstruction(name, levels):
    b = load_basis(name)
    x = np.random.default_rng(5).standard_normal((64, 64))
    assert np.abs(iswt2(swt2(Tensor(x), b, levels=levels), b).data - x).max() < 1e-8


def test_energy_conservation_one_level():
    b = load_basis("sym19")
    x = np.random.default_rng(6).standard_normal((32, 32))
    sb = dwt2(Tensor(x), b)
    energy = sum(float((band.data**2).sum()) for band in sb.level(1))
    assert abs(energy - (x**2).sum()) < 1e-8


def test_transforms_ride_over_leading_axes():
    b = load_basis("haar")
    x = np.random.default_rng(7).standard_normal((2, 3, 8, 8, 4))
    sb = dwt2(Tensor(x), b, axes=(-3, -2))
    assert sb.ll[0].shape == (2, 3, 4, 4, 4)
    assert np.abs(idwt2(sb, b, axes=(-3, -2)).data - x).max() < 1e-10


# -- losses -------------------------------------------------------------------

def test_dwt_loss_zero_cases():
    b = load_basis("haar")
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3))
    y = np.random.default_rng(1).standard_normal((2, 8, 8, 3))
    assert dwt_loss(Tensor(x), Tensor(x), 1.0, b).item() == 0.0
    assert dwt_loss(Tensor(x), Tensor(y), 0.0, b).item() == 0.0


def test_dwt_loss_matches_per_subband_loop():
    b = load_basis("haar")
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 8, 3))
    y = rng.standard_normal((2, 8, 8, 3))
    got = dwt_loss(Tensor(x), Tensor(y), 1.0, b).item()
    want = 0.0
    sx, sy = dwt2(Tensor(x), b, axes=(-3, -2)), dwt2(Tensor(y), b, axes=(-3, -2))
    for bandx, bandy in zip(sx.level(1), sy.level(1)):
        want += float(((bandx.data - bandy.data) ** 2).sum())
    assert abs(got - want) < 1e-10 * max(1, want)


def test_dwt_loss_plancherel_equals_scaled_mse():
    # weight 1, one orthonormal level: the loss is the plain sum of
    # squared differences, i.e. elementwise MSE times the element count
    b = load_basis("sym4")
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 16, 16, 2))
    y = rng.standard_normal((3, 16, 16, 2))
    got = dwt_loss(Tensor(x), Tensor(y), 1.0, b).item()
    mse = float(((x - y) ** 2).mean())
    want = mse * x.size
    assert abs(got - want) / want < 1e-10


def test_swt_loss_default_weights_readback():
    w = SubbandWeights()
    assert w.as_tuple() == (0.5, 2.0, 2.0, 2.5)


def test_swt_loss_constant_difference_closed_form():
    c, h, wdt, ch = 0.37, 8, 8, 2
    pred = Tensor(np.full((1, h, wdt, ch), c))
    target = Tensor(np.zeros((1, h, wdt, ch)))
    got = swt_loss(pred, target, basis=load_basis("haar")).item()
    want = 0.5 * (2 * c) ** 2 * h * wdt * 1 * ch
    assert abs(got - want) / want < 1e-12


def test_swt_loss_matches_brute_force():
    b = load_basis("sym4")
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 8, 8, 2))
    y = rng.standard_normal((2, 8, 8, 2))
    w = SubbandWeights(0.3, 1.5, 2.5, 4.0)
    got = swt_loss(Tensor(x), Tensor(y), w, b).item()
    sx, sy = swt2(Tensor(x), b, axes=(-3, -2)), swt2(Tensor(y), b, axes=(-3, -2))
    want = 0.0
    for lam, bx, by in zip(w.as_tuple(), sx.level(1), sy.level(1)):
        want += lam * float(((bx.data - by.data) ** 2).sum())
    assert abs(got - want) / want < 1e-10


def test_loss_batch_mean_convention():
    b = load_basis("haar")
    rng = np.random.default_rng(5)
    x1 = rng.standard_normal((1, 4, 4, 2))
    y1 = rng.standard_normal((1, 4, 4, 2))
    single = swt_loss(Tensor(x1), Tensor(y1), basis=b).item()
    batched = swt_loss(
        Tensor(np.concatenate([x1[None], x1[None]])), Tensor(np.concatenate([y1[None], y1[None]])), basis=b
    ).item()
    assert abs(batched - single) < 1e-10  # mean over two identical items


@pytest.mark.parametrize("seed", range(5))
def test_swt_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    basis = load_basis("sym19" if seed == 4 else "haar")
    shape = (1, 8, 8, 2) if seed == 4 else (2, 8, 8, 3)
    target = Tensor(rng.standard_normal(shape))
    rep = finite_difference_check(
        lambda p: swt_loss(p, target, basis=basis), Tensor(rng.standard_normal(shape))
    )
    assert rep.passed and rep.max_rel_err < 1e-4, rep


def test_dwt_loss_gradient():
    rng = np.random.default_rng(9)
    b = load_basis("sym4")
    target = Tensor(rng.standard_normal((2, 8, 8, 2)))
    rep = finite_difference_check(
        lambda p: dwt_loss(p, target, 0.7, b), Tensor(rng.standard_normal((2, 8, 8, 2)))
    )
    assert rep.passed, rep

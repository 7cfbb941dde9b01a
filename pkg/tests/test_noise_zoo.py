import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import stats

from nrgan.datasets import synthetic_toy
from nrgan.error_handler import PreconditionError, ValidationError
from nrgan.filters import depthwise_filter, gaussian_kernel2d
from nrgan.noise_zoo import (
    ImageBatch,
    NoiseFamily,
    NoiseSpec,
    NoiseVariant,
    ValueRange,
    ambient_forward,
    brown_filter,
    make_local_mask,
    sample_noise,
    to_normalized,
)


def _const(value, n=1, h=8, w=8, c=3, dtype=torch.float64):
    return ImageBatch(torch.full((n, h, w, c), float(value), dtype=dtype))


def _rng(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def test_gaussian_noise_has_the_expected_std():
    x = _const(0.0, n=10_000, h=10, w=10, c=1)
    n, y = sample_noise(NoiseSpec(NoiseVariant.A, sigma=25.0), x, _rng())
    expected = 2 * 25 / 255
    assert abs(float(n.data.std()) - expected) < 0.01 * expected
    assert torch.equal(y.data, x.data + n.data)


def test_poisson_moments_match_the_exact_sampler():
    # x01 = 0.5 everywhere
    x = _const(0.0, n=10_000, h=10, w=10, c=1)
    _, y = sample_noise(NoiseSpec(NoiseVariant.M, sigma=0.0, lam=30.0), x, _rng(1))
    y01 = ((y.data + 1.0) * 0.5).flatten()
    n = y01.numel()
    mean = float(y01.mean())
    var = float(y01.var())
    se_mean = math.sqrt(var / n)
    m4 = float(((y01 - mean) ** 4).mean())
    se_var = math.sqrt((m4 - var**2) / n)
    assert abs(mean - 0.5) < 3 * se_mean
    assert abs(var - 0.5 / 30) < 3 * se_var


def test_ambient_poisson_uses_the_gaussian_approximation():
    # x01 = 0.25
    x = _const(-0.5, n=10_000, h=10, w=10, c=1)
    y = ambient_forward(NoiseSpec(NoiseVariant.M, sigma=0.0, lam=30.0), x, _rng(2))
    y01 = ((y.data + 1.0) * 0.5).flatten()
    var = float(y01.var())
    expected = 0.25 / 30
    se_var = math.sqrt(2.0 / y01.numel()) * expected
    assert abs(var - expected) < 3 * se_var


def test_same_seed_gives_identical_noise():
    x = _const(0.1, n=4)
    spec = NoiseSpec.preset("L")
    a = sample_noise(spec, x, _rng(7))
    b = sample_noise(spec, x, _rng(7))
    assert torch.equal(a[0].data, b[0].data)
    assert torch.equal(a[1].data, b[1].data)


def test_noise_requires_symmetric_unit_images():
    x = _const(0.0).to_range(ValueRange.HALF_UNIT)
    with pytest.raises(PreconditionError):
        sample_noise(NoiseSpec.preset("A"), x, _rng())


def test_zero_sigma_adds_nothing():
    x = _const(0.3)
    n, y = sample_noise(NoiseSpec(NoiseVariant.A, sigma=0.0), x, _rng())
    assert torch.count_nonzero(n.data) == 0
    assert torch.equal(y.data, x.data)


def test_noisy_images_are_not_clipped():
    x = _const(1.0, n=2)
    _, y = sample_noise(NoiseSpec(NoiseVariant.A, sigma=50.0), x, _rng())
    assert float(y.data.max()) > 1.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"variant": "B", "sigma_lo": 30.0, "sigma_hi": 5.0},
        {"variant": "A", "sigma": -1.0},
        {"variant": "G", "kernel": 4},
        {"variant": "C", "patch_h": 0, "patch_w": 4},
        {"variant": "M", "sigma": 0.0, "lam": 0.0},
        {"variant": "F", "mixture": ((0.5, NoiseSpec(NoiseVariant.A)),)},
    ],
)
def test_invalid_specs_are_rejected(kwargs):
    with pytest.raises(ValidationError):
        NoiseSpec(**kwargs)


@pytest.mark.parametrize("variant", list(NoiseVariant))
def test_every_preset_samples(variant):
    spec = NoiseSpec.preset(variant)
    x = _const(0.2, n=3, h=32, w=32, dtype=torch.float32)
    n, y = sample_noise(spec, x, _rng())
    assert n.shape == x.shape
    assert torch.isfinite(y.data).all()


def test_families():
    assert NoiseSpec.preset("A").family is NoiseFamily.SIGNAL_INDEPENDENT
    assert NoiseSpec.preset("J").family is NoiseFamily.MULTIPLICATIVE
    assert NoiseSpec.preset("O").is_poisson_family
    assert not NoiseSpec.preset("F").is_poisson_family


def test_local_mask_has_one_patch():
    mask = make_local_mask(8, 8, 3, 5, _rng())
    assert int(mask.sum()) == 15
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    assert len(rows) == 3 and len(cols) == 5


def test_local_mask_larger_than_image_is_rejected():
    with pytest.raises(ValidationError):
        make_local_mask(8, 8, 9, 2, _rng())


def test_local_noise_stays_inside_the_patch():
    spec = NoiseSpec(NoiseVariant.C, sigma=25.0, patch_h=4, patch_w=4)
    n, _ = sample_noise(spec, _const(0.0, n=5), _rng())
    per_image = torch.count_nonzero(n.data.reshape(5, -1), dim=1)
    assert per_image.tolist() == [16 * 3] * 5


def test_variable_sigma_is_drawn_per_image():
    spec = NoiseSpec(NoiseVariant.B, sigma_lo=5.0, sigma_hi=50.0)
    n, _ = sample_noise(spec, _const(0.0, n=20, h=64, w=64, c=1), _rng(3))
    stds = n.data.reshape(20, -1).std(dim=1)
    assert float(stds.min()) > 0.9 * to_normalized(5.0)
    assert float(stds.max()) < 1.1 * to_normalized(50.0)
    assert float(stds.max() - stds.min()) > to_normalized(5.0)


def test_multiplicative_noise_vanishes_on_black():
    n, _ = sample_noise(NoiseSpec.preset("I"), _const(-1.0, n=2), _rng())
    assert torch.count_nonzero(n.data) == 0


def test_brown_filter_keeps_std_and_constants():
    white = ImageBatch(torch.randn(4, 16, 16, 3, generator=_rng(), dtype=torch.float64))
    brown = brown_filter(white, kernel=5)
    in_std = white.data.reshape(4, -1).std(dim=1)
    out_std = brown.data.reshape(4, -1).std(dim=1)
    assert torch.allclose(in_std, out_std, rtol=1e-9)

    flat = _const(0.25, n=2)
    assert torch.allclose(brown_filter(flat, kernel=5).data, flat.data)


def test_ambient_forward_is_differentiable():
    x = torch.zeros(2, 8, 8, 3, dtype=torch.float64, requires_grad=True)
    y = ambient_forward(NoiseSpec.preset("A"), ImageBatch(x), _rng())
    y.data.sum().backward()
    assert torch.equal(x.grad, torch.ones_like(x))


def test_ambient_poisson_passes_gradcheck():
    spec = NoiseSpec(NoiseVariant.M, sigma=0.0, lam=30.0)
    x = (torch.rand(1, 4, 4, 1, generator=_rng(), dtype=torch.float64) * 1.6 - 0.8).requires_grad_()

    def fn(t):
        return ambient_forward(spec, ImageBatch(t), _rng(5)).data

    assert torch.autograd.gradcheck(fn, (x,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_flat_form_restores_mixtures():
    spec = NoiseSpec.preset("F")
    flat = spec.to_flat()
    assert flat["mixture.2.weight"] == 0.7
    assert NoiseSpec.from_flat(flat) == spec


def test_unknown_flat_key_is_rejected():
    with pytest.raises(ValidationError):
        NoiseSpec.from_flat({"variant": "A", "sigmaa": 3})


# ---------------------------------------------------------------------- #
# moment suite: per-image statistics, so standard errors run over i.i.d. images
# ---------------------------------------------------------------------- #
_X01 = 0.6
_SIDE = 32
_IMAGES = 1000  # 1000 * 32 * 32 > 1e6 pixels


def _range_sq(lo, hi):
    # E[sigma_norm^2] for sigma ~ U[lo, hi] on the pixel scale
    return (2.0 / 255.0) ** 2 * (hi**3 - lo**3) / (3.0 * (hi - lo))


def _filtered_sum_second_moment(sigma, kernel, side=_SIDE):
    """Exact E[n^2] of ``a + filter(a)`` for white ``a``, borders included."""
    basis = torch.eye(side * side, dtype=torch.float64).reshape(side * side, side, side, 1)
    response = depthwise_filter(basis, gaussian_kernel2d(kernel)).reshape(side * side, side * side)
    per_pixel = 1.0 + 2.0 * torch.diagonal(response) + (response**2).sum(dim=0)
    return to_normalized(sigma) ** 2 * float(per_pixel.mean())


def _moment_case(variant):
    s = to_normalized
    poisson = 4.0 * _X01 / 30.0
    spec = NoiseSpec.preset(variant)
    expected = {
        "A": s(25.0) ** 2,
        "B": _range_sq(5.0, 50.0),
        "C": s(25.0) ** 2 * 16 * 16 / _SIDE**2,
        # independent patch sides uniform on 8..24, E[p_h * p_w] = 16 * 16
        "D": s(25.0) ** 2 * 16 * 16 / _SIDE**2,
        "E": s(50.0) ** 2 / 3.0,
        "F": 0.1 * s(50.0) ** 2 / 3.0 + 0.2 * s(25.0) ** 2 + 0.7 * s(15.0) ** 2,
        "G": s(25.0) ** 2,
        "H": None,
        "I": s(25.0) ** 2 * _X01**2,
        "J": _range_sq(5.0, 50.0) * _X01**2,
        "K": s(5.0) ** 2 + s(25.0) ** 2 * _X01**2,
        "L": s(25.0) ** 2 * (1.0 + _X01**2),
        "M": poisson,
        "N": 4.0 * _X01 * math.log(50.0 / 10.0) / 40.0,
        "O": s(5.0) ** 2 + poisson,
        "P": s(25.0) ** 2 + poisson,
    }[variant]
    if variant == "H":
        # the renormalized sum has no closed form; the plain filtered sum does
        spec = replace(spec, brown_renormalize=False)
        expected = _filtered_sum_second_moment(25.0, spec.kernel)
    return spec, expected


@pytest.mark.parametrize("variant", [v.value for v in NoiseVariant])
def test_noise_moments_match_the_closed_forms(variant):
    spec, expected = _moment_case(variant)
    x = _const(2 * _X01 - 1.0, n=_IMAGES, h=_SIDE, w=_SIDE, c=1)
    n, y = sample_noise(spec, x, _rng(ord(variant)))
    assert torch.equal(y.data, x.data + n.data)

    flat = n.data.reshape(_IMAGES, -1)
    means = flat.mean(dim=1)
    second = (flat**2).mean(dim=1)
    se_mean = float(means.std()) / math.sqrt(_IMAGES)
    se_second = float(second.std()) / math.sqrt(_IMAGES)
    assert abs(float(means.mean())) < 4 * se_mean
    assert abs(float(second.mean()) - expected) < 4 * se_second


def _pair_statistics(variant, images=2000):
    x = synthetic_toy(images, _SIDE, 1, _rng(1))
    x_other = synthetic_toy(images, _SIDE, 1, _rng(2))
    n, _ = sample_noise(NoiseSpec.preset(variant), x, _rng(3))
    flat_n = n.data.reshape(images, -1).double()
    flat_x = x.data.reshape(images, -1).double()
    flat_other = x_other.data.reshape(images, -1).double()
    first = (flat_n * flat_x).mean(dim=1)
    # n independent of x: pairing n with its own image or a fresh one looks the same
    square = (flat_n**2 * (flat_x - flat_other)).mean(dim=1)
    return first, square


def _within(stat, k=4.0):
    return abs(float(stat.mean())) < k * float(stat.std()) / math.sqrt(len(stat))


@pytest.mark.parametrize("variant", [v.value for v in NoiseVariant])
def test_noise_is_zero_mean_given_the_image(variant):
    first, _ = _pair_statistics(variant)
    assert _within(first)


@pytest.mark.parametrize("variant", list("ABCDEFGH"))
def test_signal_independent_noise_ignores_the_image(variant):
    _, square = _pair_statistics(variant)
    assert _within(square)


def test_multiplicative_noise_grows_with_the_image():
    _, square = _pair_statistics("I")
    assert float(square.mean()) > 4 * float(square.std()) / math.sqrt(len(square))


def test_mixture_components_follow_the_weights():
    images = 10_000
    n, _ = sample_noise(NoiseSpec.preset("F"), _const(0.0, n=images, h=16, w=16, c=1), _rng(4))
    flat = n.data.reshape(images, -1)
    bound = to_normalized(50.0)
    stds = flat.std(dim=1)
    quiet = stds < 0.5 * (to_normalized(15.0) + to_normalized(25.0))
    uniform = ~quiet & (flat.abs().amax(dim=1) <= bound + 1e-12)
    loud = ~quiet & ~uniform
    for members, weight in ((uniform, 0.1), (loud, 0.2), (quiet, 0.7)):
        frequency = float(members.double().mean())
        se = math.sqrt(weight * (1 - weight) / images)
        assert abs(frequency - weight) < 3 * se


def test_local_mask_placement_is_uniform():
    draws = 10_000
    rng = _rng(5)
    corners = np.zeros((17, 17))
    inclusion = torch.zeros(32, 32, dtype=torch.float64)
    for _ in range(draws):
        mask = make_local_mask(32, 32, 16, 16, rng) > 0
        top = int(torch.nonzero(mask.any(dim=1))[0])
        left = int(torch.nonzero(mask.any(dim=0))[0])
        corners[top, left] += 1
        inclusion += mask.double()
    assert corners.sum() == draws
    assert stats.chisquare(corners.ravel()).pvalue > 1e-3

    # a pixel at row r is covered by the tops in [r - 15, r], clipped to 0..16
    cover = torch.tensor(
        [min(r, 16) - max(r - 15, 0) + 1 for r in range(32)], dtype=torch.float64
    ) / 17.0
    analytic = cover[:, None] * cover[None, :]
    frequency = inclusion / draws
    se = torch.sqrt(analytic * (1 - analytic) / draws)
    assert float(((frequency - analytic).abs() / se).max()) < 5.0
    assert torch.equal(make_local_mask(32, 32, 32, 32, rng), torch.ones(32, 32))


def test_brown_noise_is_spatially_correlated():
    white = ImageBatch(torch.randn(64, 32, 32, 1, generator=_rng(6), dtype=torch.float64))
    brown = brown_filter(white, kernel=5).data
    left, right = brown[:, :, :-1].flatten(), brown[:, :, 1:].flatten()
    assert float(torch.corrcoef(torch.stack([left, right]))[0, 1]) > 0.2
    assert torch.equal(brown_filter(white, kernel=1).data, white.data)
    with pytest.raises(ValidationError):
        brown_filter(white, kernel=4)


def _uniformity(values, lo, hi):
    return stats.kstest(np.asarray(values), "uniform", args=(lo, hi - lo)).pvalue


def test_variable_sigma_is_uniform_over_its_range():
    images = 400
    x = _const(0.0, n=images, h=128, w=128, c=1, dtype=torch.float32)
    n, _ = sample_noise(NoiseSpec.preset("B"), x, _rng(7))
    sigma_px = n.data.reshape(images, -1).double().std(dim=1) * 255.0 / 2.0
    assert _uniformity(sigma_px, 5.0, 50.0) > 0.01


def test_variable_multiplicative_sigma_is_uniform_over_its_range():
    images = 400
    x = _const(2 * _X01 - 1.0, n=images, h=128, w=128, c=1, dtype=torch.float32)
    n, _ = sample_noise(NoiseSpec.preset("J"), x, _rng(8))
    sigma_px = n.data.reshape(images, -1).double().std(dim=1) / _X01 * 255.0 / 2.0
    assert _uniformity(sigma_px, 5.0, 50.0) > 0.01


def test_variable_lambda_is_uniform_over_its_range():
    images = 400
    x = _const(2 * _X01 - 1.0, n=images, h=128, w=128, c=1, dtype=torch.float32)
    n, _ = sample_noise(NoiseSpec.preset("N"), x, _rng(9))
    lam = 4.0 * _X01 / n.data.reshape(images, -1).double().var(dim=1)
    assert _uniformity(lam, 10.0, 50.0) > 0.01


def test_variable_patch_sides_are_uniform():
    images = 1700
    n, _ = sample_noise(NoiseSpec.preset("D"), _const(0.0, n=images, h=32, w=32, c=1), _rng(10))
    covered = n.data[..., 0] != 0
    heights = covered.any(dim=2).sum(dim=1)
    widths = covered.any(dim=1).sum(dim=1)
    for sides in (heights, widths):
        counts = torch.bincount(sides, minlength=25)[8:25].numpy()
        assert counts.sum() == images
        assert stats.chisquare(counts).pvalue > 1e-3

import pytest
import torch
from scipy import stats
from torch import nn

from nrgan.error_handler import PreconditionError, ValidationError
from nrgan.networks import ResNetGenerator
from nrgan.noise_zoo import ImageBatch, NoiseSpec
from nrgan.nr_generators import (
    GeneratorBundle,
    LatentRole,
    Relation,
    ScalarSigma,
    Transform,
    Variant,
    apply_transform,
    build_bundle,
    compose_observation,
    generate_clean,
    noise_from_variant,
    relational_sigma,
    reparameterize_gaussian,
    rotate90,
    sample_latent,
    sample_observation,
)


class ConstantSigma(nn.Module):
    """Noise generator stand-in that emits a constant sigma map."""

    def __init__(self, value, shape=(8, 8, 3)):
        super().__init__()
        self.value = value
        self.shape = shape
        self.dummy = nn.Parameter(torch.zeros(()))

    def forward(self, z):
        return torch.full((z.shape[0], *self.shape), self.value) + 0.0 * self.dummy


def _rng(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


@pytest.mark.parametrize("variant", list(Variant))
def test_every_variant_composes_observations(variant):
    spec = NoiseSpec.preset("A") if variant is Variant.AMBIENT else None
    bundle = build_bundle(variant, "tiny", channels=3, z_dim=16, noise_spec=spec)
    x, n, y = sample_observation(bundle, 4, _rng())
    assert x.shape == n.shape == y.shape == (4, 8, 8, 3)
    assert torch.equal(y.data, x.data + n.data)


def test_standard_gan_adds_no_noise():
    bundle = build_bundle("GAN", "tiny", z_dim=16)
    _, n, _ = sample_observation(bundle, 2, _rng())
    assert torch.count_nonzero(n.data) == 0


def test_si1_noise_is_gaussian_given_the_sigma_map():
    c = 0.3
    g_x = ResNetGenerator("tiny", 3, 16)
    bundle = GeneratorBundle(Variant.SI1, g_x, ConstantSigma(c), z_dim=16)
    n_img = 1200  # ~2.3e5 pixels
    rng = _rng(11)
    x = ImageBatch(torch.zeros(n_img, 8, 8, 3))
    z_n = sample_latent(n_img, 16, LatentRole.NOISE, rng)
    eps = torch.randn(x.shape, generator=rng)
    n = noise_from_variant(bundle, z_n, None, x, eps, rng)
    sample = n.data.flatten()[:100_000].double().numpy()
    assert stats.kstest(sample, "norm", args=(0.0, c)).pvalue > 0.01


def test_reparameterization_gradcheck():
    sigma = (torch.rand(2, 3, 3, 1, generator=_rng(), dtype=torch.float64) + 0.1).requires_grad_()
    eps = torch.randn(2, 3, 3, 1, generator=_rng(1), dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda s: reparameterize_gaussian(s, eps), (sigma,))


def test_negative_sigma_map_is_rejected():
    with pytest.raises(PreconditionError):
        reparameterize_gaussian(-torch.ones(1, 2, 2, 1), torch.ones(1, 2, 2, 1))


@pytest.mark.parametrize("relation", [Relation.MULT, Relation.SQRT])
def test_relational_sigma_gradcheck(relation):
    sigma = (torch.rand(1, 3, 3, 2, generator=_rng(), dtype=torch.float64) + 0.1).requires_grad_()
    x01 = (torch.rand(1, 3, 3, 2, generator=_rng(1), dtype=torch.float64) * 0.8 + 0.1).requires_grad_()
    assert torch.autograd.gradcheck(lambda s, x: relational_sigma(s, x, relation), (sigma, x01))


def test_relational_sigma_values():
    sigma = torch.full((1, 1, 1, 1), 0.2)
    x01 = torch.tensor([0.25]).reshape(1, 1, 1, 1)
    assert torch.allclose(relational_sigma(sigma, x01, "mult"), torch.tensor(0.05))
    assert torch.allclose(relational_sigma(sigma, x01, "sqrt"), torch.tensor(0.1))


def test_transforms_keep_values():
    n_hat = torch.randn(6, 8, 8, 3, generator=_rng())
    rotated = apply_transform(n_hat, [Transform.ROTATION], _rng(1))
    assert torch.equal(rotated.reshape(6, -1).sort(dim=1).values, n_hat.reshape(6, -1).sort(dim=1).values)
    shuffled = apply_transform(n_hat, [Transform.CHANNEL_SHUFFLE], _rng(2))
    assert torch.equal(shuffled.sort(dim=-1).values, n_hat.sort(dim=-1).values)
    inverted = apply_transform(n_hat, [Transform.COLOR_INVERSION], _rng(3))
    assert torch.equal(inverted.abs(), n_hat.abs())


def test_rotation_needs_square_images():
    with pytest.raises(ValidationError):
        apply_transform(torch.zeros(1, 4, 6, 1), ["rotation"], _rng())


def test_transform_rules():
    assert build_bundle("SI2", "tiny", z_dim=16).transforms == frozenset(Transform)
    assert build_bundle("SD3", "tiny", z_dim=16).transforms == {Transform.COLOR_INVERSION}
    with pytest.raises(ValidationError):
        build_bundle("SD3", "tiny", z_dim=16, transforms=["rotation"])
    with pytest.raises(ValidationError):
        build_bundle("SI0", "tiny", z_dim=16, transforms=["rotation"])


def test_signal_dependent_relations_are_fixed():
    assert build_bundle("SD1_mult", "tiny", z_dim=16).relation is Relation.MULT
    assert build_bundle("SD1_poisson", "tiny", z_dim=16).relation is Relation.SQRT
    with pytest.raises(ValidationError):
        build_bundle("SD1_mult", "tiny", z_dim=16, relation="sqrt")


def test_joint_latent_variants_take_both_latents():
    bundle = build_bundle("SD2", "tiny", z_dim=16)
    assert bundle.noise_latent_dim == 32
    x = ImageBatch(torch.zeros(2, 8, 8, 3))
    z_n = sample_latent(2, 16, LatentRole.NOISE, _rng())
    with pytest.raises(ValidationError):
        noise_from_variant(bundle, z_n, None, x, torch.randn(2, 8, 8, 3), _rng())


def test_p_ambient_scalar():
    bundle = build_bundle("P-AmbientGAN", "tiny", z_dim=16)
    assert isinstance(bundle.g_n, ScalarSigma)
    assert abs(float(bundle.p_sigma) - 0.1) < 1e-6


def test_ambient_needs_a_noise_spec():
    with pytest.raises(ValidationError):
        build_bundle("AmbientGAN", "tiny", z_dim=16)


def test_ema_shadows_are_frozen_copies():
    bundle = build_bundle("SI1", "tiny", z_dim=16)
    for shadow, live in ((bundle.ema_g_x, bundle.g_x), (bundle.ema_g_n, bundle.g_n)):
        assert all(not p.requires_grad for p in shadow.parameters())
        for a, b in zip(shadow.parameters(), live.parameters()):
            assert torch.equal(a, b)
    assert bundle.metadata()["block_style"] == "preact-nearest-avgpool"


def test_four_quarter_turns_are_the_identity():
    x = torch.randn(2, 6, 6, 3, generator=_rng())
    assert torch.equal(rotate90(rotate90(rotate90(rotate90(x, 1), 1), 1), 1), x)
    assert torch.equal(rotate90(x, 4), x)
    assert not torch.equal(rotate90(x, 1), x)


@pytest.mark.parametrize("transform", list(Transform))
def test_symmetric_noise_is_invariant_under_transforms(transform):
    n_hat = torch.randn(100_000, 2, 2, 3, generator=_rng(4), dtype=torch.float64)
    out = apply_transform(n_hat, [transform], _rng(5))
    # one fixed pixel/channel per draw keeps the samples independent
    sample = out[:, 0, 1, 2].numpy()
    assert stats.kstest(sample, "norm").pvalue > 1e-3
    assert abs(float(sample.mean())) < 4 / 100_000**0.5


def test_generate_clean_is_deterministic_and_bounded():
    bundle = build_bundle("SI1", "small", z_dim=128)
    z_x = sample_latent(4, 128, LatentRole.IMAGE, _rng())
    with torch.no_grad():
        a = generate_clean(bundle, z_x)
        b = generate_clean(bundle, z_x)
    assert a.shape == (4, 32, 32, 3)
    assert torch.equal(a.data, b.data)
    assert float(a.data.abs().max()) < 1.0
    with pytest.raises(ValidationError):
        generate_clean(bundle, sample_latent(4, 128, LatentRole.NOISE, _rng()))


def test_compose_observation_is_plain_addition():
    x = ImageBatch(torch.randn(2, 4, 4, 3, dtype=torch.float64, requires_grad=True))
    n = ImageBatch(torch.randn(2, 4, 4, 3, dtype=torch.float64, requires_grad=True))
    assert torch.equal(compose_observation(x, ImageBatch(torch.zeros_like(n.data))).data, x.data)
    y = compose_observation(x, n)
    y.data.sum().backward()
    assert torch.equal(x.data.grad, torch.ones_like(x.data))
    assert torch.equal(n.data.grad, torch.ones_like(n.data))
    with pytest.raises(ValidationError):
        compose_observation(x, ImageBatch(torch.zeros(2, 4, 4, 1)))

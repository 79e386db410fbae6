import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tryon.losses import (
    FEATURE_NAMES,
    FeatureStack,
    LossWeights,
    RandomFeatureExtractor,
    Vgg16FeatureExtractor,
    discriminator_loss,
    generator_gan_loss,
    gram,
    perceptual_loss,
    pgan_loss,
    reconstruction_loss,
    style_loss,
    total_paired_loss,
)

torch.set_num_threads(1)


class _ConstantLogitDisc(torch.nn.Module):
    def __init__(self, logit=0.0):
        super().__init__()
        self.logit = logit
        self.bias = torch.nn.Parameter(torch.zeros(1))

    def forward(self, image, pose):
        return torch.full((image.shape[0], 1, 4, 4), self.logit) + self.bias * 0


def _pair(seed=0, size=8):
    g = torch.Generator().manual_seed(seed)
    real = torch.rand((2, 3, size, size), generator=g) * 2 - 1
    fake = torch.rand((2, 3, size, size), generator=g) * 2 - 1
    pose = torch.rand((2, 3, size, size), generator=g) * 2 - 1
    return real, fake, pose


class TestGanLoss:
    def test_zero_logits_give_two_log_two(self):
        real, fake, pose = _pair()
        d_loss, g_loss = pgan_loss(_ConstantLogitDisc(0.0), (real, pose), (fake, pose))
        assert abs(float(d_loss.detach()) - 2.0 * math.log(2.0)) < 1e-6
        assert abs(float(g_loss.detach()) - math.log(2.0)) < 1e-6

    def test_perfect_discriminator_limit(self):
        real_logits = torch.full((2, 1, 4, 4), 30.0)
        fake_logits = torch.full((2, 1, 4, 4), -30.0)
        assert float(discriminator_loss(real_logits, fake_logits)) < 1e-6

    def test_generator_loss_monotone_in_logits(self):
        values = [float(generator_gan_loss(torch.full((1, 1, 2, 2), z)))
                  for z in (-2.0, 0.0, 2.0)]
        assert values[0] > values[1] > values[2]

    def test_non_finite_logits_rejected(self):
        bad = torch.full((1, 1, 2, 2), float("nan"))
        with pytest.raises(ValueError, match="non-finite"):
            generator_gan_loss(bad)


class TestReconstructionLoss:
    def test_identity_is_zero(self):
        x = torch.rand(1, 3, 4, 4)
        l1, l2 = reconstruction_loss(x, x)
        assert float(l1) == 0.0 and float(l2) == 0.0

    def test_constant_offset(self):
        x = torch.zeros(1, 3, 4, 4)
        l1, l2 = reconstruction_loss(x + 0.5, x)
        assert float(l1) == pytest.approx(0.5)
        assert float(l2) == pytest.approx(0.25)

    def test_single_element_sparsity(self):
        n = 16  # pixels
        x = torch.zeros(1, 3, 4, 4)
        y = x.clone()
        y[0, 0, 0, 0] = 1.0
        l1, l2 = reconstruction_loss(y, x)
        assert float(l1) == pytest.approx(1.0 / (3 * n))
        assert float(l2) == pytest.approx(1.0 / (3 * n))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            reconstruction_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5))


class TestGram:
    def test_hand_example(self):
        # 2 channels, each 1x2: c1=(1,2), c2=(3,4)
        feature = torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]])
        g = gram(feature)
        assert torch.equal(g, torch.tensor([[5.0, 11.0], [11.0, 25.0]]))

    def test_zero_features_zero_matrix(self):
        assert not gram(torch.zeros(4, 3, 3)).any()

    def test_single_channel_sum_of_squares(self):
        feature = torch.tensor([[[1.0, -2.0], [3.0, 0.5]]])
        g = gram(feature)
        assert g.shape == (1, 1)
        assert float(g) == pytest.approx(1 + 4 + 9 + 0.25)

    def test_rejects_fc_features(self):
        with pytest.raises(ValueError, match="spatial"):
            gram(torch.zeros(2, 8))

    def test_spatial_permutation_invariance(self, rng):
        feature = torch.from_numpy(rng.standard_normal((5, 4, 4)).astype(np.float32))
        flat = feature.reshape(5, -1)
        perm = torch.from_numpy(rng.permutation(16))
        permuted = flat[:, perm].reshape(5, 4, 4)
        assert torch.allclose(gram(feature), gram(permuted), atol=1e-5)

    @given(
        hnp.arrays(np.float32, (3, 4, 5),
                   elements=st.floats(-3, 3, width=32))
    )
    @settings(max_examples=40, deadline=None)
    def test_symmetric_and_psd(self, arr):
        g = gram(torch.from_numpy(arr)).numpy().astype(np.float64)
        assert np.allclose(g, g.T, atol=1e-4)
        eigvals = np.linalg.eigvalsh(g)
        assert eigvals.min() >= -1e-6 * max(1.0, abs(eigvals).max())


# --------------------------------------------------------------------------
# Independent two-loop references for the feature losses


def _reference_perceptual(a, b, extractor):
    fa = extractor.extract(a)
    fb = extractor.extract(b)
    total = 0.0
    for xa, xb in zip(fa.features, fb.features):
        xa, xb = xa.numpy(), xb.numpy()
        per_sample = []
        for i in range(xa.shape[0]):
            diff = (xa[i] - xb[i]).ravel()
            acc = 0.0
            for val in diff:
                acc += float(val) * float(val)
            per_sample.append(math.sqrt(acc / diff.size))
        total += sum(per_sample) / len(per_sample)
    return total


def _reference_gram_normalized(x):
    c, h, w = x.shape
    flat = x.reshape(c, -1)
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            g[i, j] = float(np.dot(flat[i], flat[j]))
    return g / (c * h * w)


def _reference_style(a, b, extractor):
    fa = extractor.extract(a)
    fb = extractor.extract(b)
    total = 0.0
    for xa, xb in zip(fa.spatial, fb.spatial):
        xa, xb = xa.numpy(), xb.numpy()
        per_sample = []
        for i in range(xa.shape[0]):
            diff = (
                _reference_gram_normalized(xa[i]) - _reference_gram_normalized(xb[i])
            ).ravel()
            per_sample.append(math.sqrt(float((diff * diff).mean())))
        total += sum(per_sample) / len(per_sample)
    return total


@pytest.fixture(scope="module")
def extractor():
    return RandomFeatureExtractor(seed=3, widths=(8, 12, 16, 16, 16), fc_dim=16)


class TestPerceptualLoss:
    def test_zero_on_identical(self, extractor):
        x = torch.rand(1, 3, 8, 8) * 2 - 1
        assert float(perceptual_loss(x, x, extractor)) <= 1e-6

    def test_symmetry(self, extractor):
        g = torch.Generator().manual_seed(9)
        a = torch.rand((1, 3, 8, 8), generator=g) * 2 - 1
        b = torch.rand((1, 3, 8, 8), generator=g) * 2 - 1
        assert float(perceptual_loss(a, b, extractor)) == pytest.approx(
            float(perceptual_loss(b, a, extractor))
        )

    def test_matches_two_loop_reference(self, extractor):
        g = torch.Generator().manual_seed(11)
        a = torch.rand((2, 3, 8, 8), generator=g) * 2 - 1
        b = torch.rand((2, 3, 8, 8), generator=g) * 2 - 1
        ours = float(perceptual_loss(a, b, extractor))
        ref = _reference_perceptual(a, b, extractor)
        assert abs(ours - ref) / abs(ref) < 1e-4

    def test_no_gradient_reaches_extractor(self, extractor):
        a = (torch.rand(1, 3, 8, 8) * 2 - 1).requires_grad_()
        b = torch.rand(1, 3, 8, 8) * 2 - 1
        perceptual_loss(a, b, extractor).backward()
        assert a.grad is not None
        assert all(p.grad is None for p in extractor.parameters())


class TestStyleLoss:
    def test_zero_on_identical(self, extractor):
        x = torch.rand(1, 3, 8, 8) * 2 - 1
        assert float(style_loss(x, x, extractor)) <= 1e-6

    def test_matches_two_loop_reference(self, extractor):
        g = torch.Generator().manual_seed(13)
        a = torch.rand((2, 3, 8, 8), generator=g) * 2 - 1
        b = torch.rand((2, 3, 8, 8), generator=g) * 2 - 1
        ours = float(style_loss(a, b, extractor))
        ref = _reference_style(a, b, extractor)
        assert abs(ours - ref) / abs(ref) < 1e-4

    def test_nonnegative(self, extractor):
        g = torch.Generator().manual_seed(15)
        a = torch.rand((1, 3, 8, 8), generator=g) * 2 - 1
        b = torch.rand((1, 3, 8, 8), generator=g) * 2 - 1
        assert float(style_loss(a, b, extractor)) >= 0.0


class TestGradients:
    """Analytic gradients vs central finite differences (double precision)."""

    @staticmethod
    def _central_diff(fn, x, eps=1e-3):
        grad = torch.zeros_like(x)
        flat, gflat = x.reshape(-1), grad.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            fp = float(fn(x))
            flat[i] = orig - eps
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        return grad

    @staticmethod
    def _check(fn, x):
        x = x.clone().requires_grad_()
        fn(x).backward()
        analytic = x.grad.detach().clone()
        numeric = TestGradients._central_diff(fn, x.detach().clone())
        mask = analytic.abs() > 1e-6
        assert mask.any()
        rel = (analytic[mask] - numeric[mask]).abs() / analytic[mask].abs()
        assert float(rel.max()) < 1e-3

    def test_reconstruction_l1_and_l2(self):
        g = torch.Generator().manual_seed(17)
        x = (torch.rand((1, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1)
        target = (torch.rand((1, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1)
        self._check(lambda z: reconstruction_loss(z, target)[0], x)
        self._check(lambda z: reconstruction_loss(z, target)[1], x)

    def test_perceptual(self):
        extractor = RandomFeatureExtractor(seed=5, widths=(6, 8, 8, 8, 8), fc_dim=8).double()
        g = torch.Generator().manual_seed(19)
        x = (torch.rand((1, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1)
        target = (torch.rand((1, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1)
        self._check(lambda z: perceptual_loss(z, target, extractor), x)

    def test_style(self):
        extractor = RandomFeatureExtractor(seed=5, widths=(6, 8, 8, 8, 8), fc_dim=8).double()
        g = torch.Generator().manual_seed(23)
        x = (torch.rand((1, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1)
        target = (torch.rand((1, 3, 4, 4), generator=g, dtype=torch.float64) * 2 - 1)
        self._check(lambda z: style_loss(z, target, extractor), x)


class TestTotalPairedLoss:
    def test_projection_on_l1(self):
        weights = LossWeights(w_gan=0, w_l1=1, w_l2=0, w_perc=0, w_style=0)
        terms = {"g_gan": 3.0, "l1": 0.7, "l2": 4.0, "perc": 5.0, "style": 6.0}
        assert float(total_paired_loss(terms, weights)) == pytest.approx(0.7)

    def test_homogeneity(self):
        w1 = LossWeights(w_gan=1, w_l1=2, w_l2=3, w_perc=4, w_style=5)
        w2 = LossWeights(w_gan=2, w_l1=4, w_l2=6, w_perc=8, w_style=10)
        terms = {"g_gan": 0.3, "l1": 0.5, "l2": 0.2, "perc": 1.1, "style": 0.9}
        assert float(total_paired_loss(terms, w2)) == pytest.approx(
            2 * float(total_paired_loss(terms, w1))
        )

    def test_default_weights_hand_sum(self):
        terms = {"g_gan": 0.25, "l1": 0.125, "l2": 0.5, "perc": 0.75, "style": 0.0625}
        expected = 1 * 0.25 + 10 * 0.125 + 0 * 0.5 + 1 * 0.75 + 50 * 0.0625
        assert float(total_paired_loss(terms, LossWeights())) == pytest.approx(expected)

    def test_non_finite_term_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            total_paired_loss({"l1": float("nan")}, LossWeights())

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(w_gan=-1)
        with pytest.raises(ValueError):
            LossWeights(w_gan=0, w_l1=0, w_l2=0, w_perc=0, w_style=0)


class TestFeatureStack:
    def test_requires_seven_entries(self):
        with pytest.raises(ValueError, match="7"):
            FeatureStack((torch.zeros(1, 2, 3, 3),) * 3)

    def test_extractor_produces_contract_shapes(self, extractor):
        stack = extractor.extract(torch.rand(2, 3, 16, 16) * 2 - 1)
        for name in FEATURE_NAMES[:5]:
            assert stack[name].ndim == 4
        for name in FEATURE_NAMES[5:]:
            assert stack[name].ndim == 2

    def test_extractor_is_frozen(self, extractor):
        assert all(not p.requires_grad for p in extractor.parameters())

    def test_vgg_layout_and_offline_weights(self, tmp_path):
        net = Vgg16FeatureExtractor()
        weights = tmp_path / "vgg.pt"
        torch.save(net.state_dict(), weights)
        again = Vgg16FeatureExtractor(weights_path=weights)
        x = torch.rand(1, 3, 32, 32) * 2 - 1
        a = net.extract(x)
        b = again.extract(x)
        for fa, fb in zip(a.features, b.features):
            assert torch.equal(fa, fb)
        assert a["fc6"].shape == (1, 4096)
        with pytest.raises(ValueError, match="32"):
            net.extract(torch.rand(1, 3, 16, 16))

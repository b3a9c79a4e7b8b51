import math

import pytest
import torch

from cagan.losses import (
    DiscriminatorLossParts,
    GeneratorLossParts,
    LossWeights,
    adv_loss_discriminator,
    adv_loss_generator,
    class_loss_discriminator,
    class_loss_generator,
    cr_loss,
    image_reconstruction_loss,
    info_loss,
    total_discriminator_objective,
    total_generator_objective,
)

from conftest import central_difference, relative_error

W = LossWeights()
EPS = 1e-7


def const(v, n=4):
    return torch.full((n,), v, dtype=torch.float64)


class TestAdversarial:
    def test_half_probabilities_value(self):
        # w_adv * [w_bg * 2ln2 + w_t * 2ln2] = 0.5 * 3ln2
        got = adv_loss_discriminator(const(0.5), const(0.5), const(0.5), const(0.5), W)
        assert abs(float(got) - 1.5 * math.log(2)) < 1e-9

    def test_perfect_discriminator_near_zero(self):
        got = adv_loss_discriminator(const(1 - EPS), const(EPS), const(1 - EPS), const(EPS), W)
        assert 0.0 <= float(got) < 1e-5

    def test_linear_in_w_adv(self):
        args = (const(0.3), const(0.6), const(0.4), const(0.7))
        base = adv_loss_discriminator(*args, W)
        doubled = adv_loss_discriminator(*args, LossWeights(w_adv=1.0))
        assert abs(float(doubled) - 2 * float(base)) < 1e-9

    def test_generator_half_value(self):
        got = adv_loss_generator(const(0.5), const(0.5), W)
        assert abs(float(got) - 0.75 * math.log(2)) < 1e-9

    def test_generator_fooling_near_zero(self):
        assert float(adv_loss_generator(const(1 - EPS), const(1 - EPS), W)) < 1e-5

    def test_generator_monotone_decreasing(self):
        lo = adv_loss_generator(const(0.3), const(0.3), W)
        hi = adv_loss_generator(const(0.31), const(0.3), W)
        assert float(hi) < float(lo)

    def test_empty_batch_rejected(self):
        empty = torch.zeros(0, dtype=torch.float64)
        with pytest.raises(ValueError):
            adv_loss_generator(empty, const(0.5), W)


class TestClassLoss:
    def test_perfect_classifier_near_zero(self):
        assert float(class_loss_discriminator(const(EPS), const(1 - EPS), W)) < 1e-5
        assert float(class_loss_generator(const(EPS), const(1 - EPS), W)) < 1e-5

    def test_half_value_is_ln2(self):
        got = class_loss_discriminator(const(0.5), const(0.5), W)
        assert abs(float(got) - math.log(2)) < 1e-9
        got = class_loss_generator(const(0.5), const(0.5), W)
        assert abs(float(got) - math.log(2)) < 1e-9

    def test_symmetry_at_equal_probability(self):
        p = const(0.37)
        assert float(class_loss_discriminator(p, p, W)) == pytest.approx(
            float(class_loss_discriminator(p, p, W))
        )
        swapped = class_loss_discriminator(p.clone(), p.clone(), W)
        assert abs(float(swapped) - float(class_loss_discriminator(p, p, W))) < 1e-12

    def test_zero_weight_annihilates(self):
        w0 = LossWeights(w_class=0.0)
        assert float(class_loss_generator(const(0.2), const(0.9), w0)) == 0.0


class TestInfoLoss:
    def make_exact(self, L=4, M=3, n=5):
        z_x = torch.randn(n, L, dtype=torch.float64)
        z_y = torch.randn(n, L, dtype=torch.float64)
        s_y = torch.randn(n, M, dtype=torch.float64)
        zeros = torch.zeros(n, M, dtype=torch.float64)
        return dict(
            qz_fake_x=z_x.clone(), z_x=z_x, qs_fake_x=zeros.clone(),
            qz_fake_y=z_y.clone(), z_y=z_y, qs_fake_y=s_y.clone(), s_y=s_y,
            qs_real_x=zeros.clone(),
        )

    def test_zero_at_perfect_recovery(self):
        assert float(info_loss(**self.make_exact(), w=W)) == 0.0

    def test_unit_shift_value(self):
        # +1 per coordinate on the background z head, L=4: w_bg * w_info_z * 4
        args = self.make_exact(L=4)
        args["qz_fake_x"] = args["z_x"] + 1.0
        assert abs(float(info_loss(**args, w=W)) - 2.0) < 1e-12

    def test_positive_homogeneity(self):
        args = self.make_exact()
        args["qz_fake_x"] = args["z_x"] + 0.3
        args["qs_fake_y"] = args["s_y"] - 0.7
        base = float(info_loss(**args, w=W))
        args["qz_fake_x"] = args["z_x"] + 3 * 0.3
        args["qs_fake_y"] = args["s_y"] - 3 * 0.7
        assert abs(float(info_loss(**args, w=W)) - 3 * base) < 1e-9

    def test_shape_mismatch(self):
        args = self.make_exact()
        args["qz_fake_x"] = args["qz_fake_x"][:, :2]
        with pytest.raises(ValueError):
            info_loss(**args, w=W)


class TestImageLoss:
    def test_zero_at_perfect_reconstruction(self):
        x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
        y = torch.rand(2, 1, 8, 8, dtype=torch.float64)
        assert float(image_reconstruction_loss(x, x.clone(), y, y.clone(), W)) == 0.0

    def test_constant_residual_value(self):
        x = torch.zeros(3, 1, 8, 8, dtype=torch.float64)
        y = torch.zeros(3, 1, 8, 8, dtype=torch.float64)
        got = image_reconstruction_loss(x, x + 0.1, y, y.clone(), W)
        assert abs(float(got) - 0.05) < 1e-12

    def test_sign_symmetric(self):
        x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        y = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        plus = image_reconstruction_loss(x, x + 0.2, y, y, W)
        minus = image_reconstruction_loss(x, x - 0.2, y, y, W)
        assert float(plus) == float(minus)


class TestCrLoss:
    def test_confident_correct_near_zero(self):
        logits = torch.full((4, 5), -1e6, dtype=torch.float64)
        k = torch.tensor([0, 1, 2, 3])
        logits[torch.arange(4), k] = 1e6
        assert float(cr_loss(logits, k)) < 1e-9

    def test_uniform_logits_value(self):
        logits = torch.zeros(7, 5, dtype=torch.float64)
        k = torch.tensor([0, 1, 2, 3, 4, 0, 1])
        assert abs(float(cr_loss(logits, k)) - math.log(5)) < 1e-9

    def test_shift_invariance(self):
        logits = torch.randn(6, 4, dtype=torch.float64)
        k = torch.tensor([0, 1, 2, 3, 0, 1])
        shifted = logits + torch.randn(6, 1, dtype=torch.float64)
        assert abs(float(cr_loss(logits, k)) - float(cr_loss(shifted, k))) < 1e-9

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            cr_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


class TestTotals:
    def test_zero_components(self):
        zero = torch.tensor(0.0)
        parts = GeneratorLossParts(adv=zero, classify=zero, info=zero, image=zero, cr=zero)
        assert float(total_generator_objective(parts, W)) == 0.0
        assert float(total_discriminator_objective(DiscriminatorLossParts(zero, zero))) == 0.0

    def test_additivity(self):
        vals = [torch.tensor(v, dtype=torch.float64) for v in (0.3, 0.5, 1.7, 0.9, 0.11)]
        parts = GeneratorLossParts(*vals)
        got = float(total_generator_objective(parts, W))
        want = 0.3 + 0.5 + 1.7 + 0.9 + W.w_cr * 0.11
        assert abs(got - want) < 1e-9

    def test_cr_weight_annihilation(self):
        vals = [torch.tensor(v, dtype=torch.float64) for v in (0.3, 0.5, 1.7, 0.9, 123.0)]
        parts = GeneratorLossParts(*vals)
        w0 = LossWeights(w_cr=0.0)
        assert float(total_generator_objective(parts, w0)) == pytest.approx(3.4)


def test_every_loss_nonnegative_and_finite_on_random_inputs():
    g = torch.Generator().manual_seed(0)
    for _ in range(25):
        p = lambda: torch.rand(6, generator=g, dtype=torch.float64)
        assert float(adv_loss_discriminator(p(), p(), p(), p(), W)) >= 0
        assert float(adv_loss_generator(p(), p(), W)) >= 0
        assert float(class_loss_discriminator(p(), p(), W)) >= 0
        q = torch.randn(6, 4, generator=g, dtype=torch.float64)
        t = torch.randn(6, 4, generator=g, dtype=torch.float64)
        li = info_loss(q, t, q, q, t, q, t, q, W)
        assert float(li) >= 0 and torch.isfinite(li)


def test_recovery_losses_zero_only_at_zero_residual():
    g = torch.Generator().manual_seed(8)
    z = torch.randn(3, 4, generator=g, dtype=torch.float64)
    zeros = torch.zeros(3, 4, dtype=torch.float64)
    for shift in (1e-9, 0.1, 5.0):
        got = info_loss(z + shift, z, zeros, z, z, zeros, zeros, zeros, W)
        assert float(got) > 0.0
    x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    assert float(image_reconstruction_loss(x, x + 1e-9, x, x, W)) > 0.0


def test_clamp_keeps_losses_finite_at_saturation():
    zero, one = const(0.0), const(1.0)
    for loss in (
        adv_loss_discriminator(one, zero, one, zero, W),
        adv_loss_discriminator(zero, one, zero, one, W),
        adv_loss_generator(zero, zero, W),
        class_loss_discriminator(one, zero, W),
    ):
        assert torch.isfinite(loss)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(w_adv=-0.1)


class TestGradients:
    """Autodiff vs central finite differences on the direct inputs."""

    def check(self, build_loss, x):
        x64 = x.double().clone().requires_grad_(True)
        loss = build_loss(x64)
        loss.backward()
        auto = x64.grad.clone()
        with torch.no_grad():
            ref = central_difference(lambda: build_loss(x64.detach()), x64.detach(), h=1e-6)
        assert relative_error(auto, ref) < 1e-4

    def test_adv_discriminator_grads(self):
        g = torch.Generator().manual_seed(1)
        others = [0.2 + 0.6 * torch.rand(5, generator=g, dtype=torch.float64) for _ in range(3)]
        x = 0.2 + 0.6 * torch.rand(5, generator=g)
        self.check(lambda v: adv_loss_discriminator(v, *others, W), x)

    def test_adv_generator_grads(self):
        g = torch.Generator().manual_seed(2)
        other = 0.2 + 0.6 * torch.rand(5, generator=g, dtype=torch.float64)
        x = 0.2 + 0.6 * torch.rand(5, generator=g)
        self.check(lambda v: adv_loss_generator(v, other, W), x)

    def test_class_grads(self):
        g = torch.Generator().manual_seed(3)
        other = 0.2 + 0.6 * torch.rand(5, generator=g, dtype=torch.float64)
        x = 0.2 + 0.6 * torch.rand(5, generator=g)
        self.check(lambda v: class_loss_discriminator(v, other, W), x)
        self.check(lambda v: class_loss_generator(v, other, W), x)

    def test_info_grads(self):
        g = torch.Generator().manual_seed(4)
        mats = [torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(7)]
        x = torch.randn(3, 4, generator=g)

        def build(v):
            return info_loss(v, mats[0], mats[1], mats[2], mats[3], mats[4], mats[5], mats[6], W)

        self.check(build, x)

    def test_image_grads(self):
        g = torch.Generator().manual_seed(5)
        x_real = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64)
        y_real = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64)
        y_rec = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64)
        x = torch.randn(2, 1, 4, 4, generator=g)
        self.check(lambda v: image_reconstruction_loss(x_real, v, y_real, y_rec, W), x)

    def test_cr_grads(self):
        g = torch.Generator().manual_seed(6)
        k = torch.tensor([0, 2, 4])
        x = torch.randn(3, 5, generator=g)
        self.check(lambda v: cr_loss(v, k), x)

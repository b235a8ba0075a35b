import math
from collections import Counter

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sat2street.losses import (LossWeights, build_exhaustive_triplets, cgan_loss_discriminator,
                               cgan_loss_generator, composite_loss, exhaustive_triplet_indices,
                               hard_negative_filter, hard_negative_rows, l1_loss, ranking_loss,
                               soft_margin_triplet, triplet_losses)

LOG2 = math.log(2.0)


def log_sigmoid_oracle(x):
    # math-level evaluation, one element at a time
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def central_difference_rel_error(fn, x, eps=1e-6):
    x = x.detach().clone().requires_grad_()
    (grad,) = torch.autograd.grad(fn(x), x)
    fd = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        plus = flat.clone()
        minus = flat.clone()
        plus[i] += eps
        minus[i] -= eps
        fd.view(-1)[i] = (fn(plus.view_as(x)) - fn(minus.view_as(x))) / (2 * eps)
    return ((grad - fd).norm() / fd.norm()).item()


class TestAdversarial:
    def test_zero_logits(self):
        z = torch.zeros(2, 1, 3, 4, dtype=torch.float64)
        assert cgan_loss_discriminator(z, z).item() == pytest.approx(2 * LOG2, abs=1e-12)
        assert cgan_loss_generator(z).item() == pytest.approx(LOG2, abs=1e-12)

    def test_perfect_discrimination(self):
        big = torch.full((1, 1, 2, 2), 1e4, dtype=torch.float64)
        assert cgan_loss_discriminator(big, -big).item() == pytest.approx(0.0, abs=1e-12)
        assert cgan_loss_generator(big).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        real = rng.normal(0, 3, size=(2, 1, 3, 5))
        fake = rng.normal(0, 3, size=(2, 1, 3, 5))
        expected = np.mean([-log_sigmoid_oracle(x) for x in real.ravel()]) + np.mean(
            [-math.log1p(-1 / (1 + math.exp(-x))) for x in fake.ravel()]
        )
        got = cgan_loss_discriminator(torch.tensor(real), torch.tensor(fake)).item()
        assert got == pytest.approx(expected, rel=1e-12)
        expected_g = np.mean([-log_sigmoid_oracle(x) for x in fake.ravel()])
        assert cgan_loss_generator(torch.tensor(fake)).item() == pytest.approx(expected_g, rel=1e-12)

    def test_literal_generator_term(self):
        fake = torch.tensor([0.3, -2.0], dtype=torch.float64)
        expected = np.mean([math.log(1 - 1 / (1 + math.exp(-x))) for x in (0.3, -2.0)])
        assert cgan_loss_generator(fake, non_saturating=False).item() == pytest.approx(expected)

    def test_extreme_logits_stay_finite(self):
        x = torch.tensor([-1e4, 1e4])
        assert torch.isfinite(cgan_loss_discriminator(x, x))
        assert torch.isfinite(cgan_loss_generator(-x))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            cgan_loss_discriminator(torch.tensor([float("nan")]), torch.tensor([0.0]))
        with pytest.raises(ValueError):
            cgan_loss_generator(torch.tensor([float("inf")]))


class TestReconstruction:
    def test_identical(self):
        x = torch.rand(2, 3, 4, 5)
        assert l1_loss(x, x).item() == 0.0

    def test_constant_offset(self):
        x = torch.rand(2, 3, 4, 5, dtype=torch.float64)
        assert l1_loss(x + 0.5, x).item() == pytest.approx(0.5, abs=1e-12)

    def test_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 4, 5))
        expected = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert l1_loss(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(torch.zeros(2, 3), torch.zeros(3, 2))


class TestSoftMargin:
    def test_zero_margin(self):
        assert soft_margin_triplet(0.7, 0.7, 10.0) == pytest.approx(LOG2, abs=1e-15)

    def test_confident_triplet(self):
        mpmath.mp.dps = 40
        expected = float(mpmath.log1p(mpmath.exp(-10)))
        assert soft_margin_triplet(0.0, 1.0, 10.0) == pytest.approx(expected, rel=1e-12)
        t = soft_margin_triplet(torch.tensor(0.0, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64))
        assert t.item() == pytest.approx(expected, rel=1e-12)

    def test_no_overflow(self):
        assert soft_margin_triplet(10.0, 0.0, 10.0) == pytest.approx(100.0, abs=1e-12)
        assert soft_margin_triplet(1e4, 0.0, 10.0) == pytest.approx(1e5)
        t = soft_margin_triplet(torch.tensor([1e4], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
        assert torch.isfinite(t).all()

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 4), st.floats(0, 4), st.floats(1e-3, 1.0))
    def test_monotone(self, dp, dn, step):
        assert soft_margin_triplet(dp + step, dn) > soft_margin_triplet(dp, dn)
        assert soft_margin_triplet(dp, dn + step) < soft_margin_triplet(dp, dn)
        assert soft_margin_triplet(dp, dn) >= 0


class TestGradients:
    @pytest.fixture
    def tensors(self):
        g = torch.Generator().manual_seed(7)
        return [torch.randn(4, 6, generator=g, dtype=torch.float64) for _ in range(3)]

    def test_discriminator_loss(self, tensors):
        real, fake, _ = tensors
        assert central_difference_rel_error(lambda r: cgan_loss_discriminator(r, fake), real) < 1e-4
        assert central_difference_rel_error(lambda f: cgan_loss_discriminator(real, f), fake) < 1e-4

    def test_generator_loss(self, tensors):
        assert central_difference_rel_error(cgan_loss_generator, tensors[0]) < 1e-4

    def test_l1(self, tensors):
        a, b, _ = tensors
        assert central_difference_rel_error(lambda x: l1_loss(x, b), a) < 1e-4

    def test_ranking(self, tensors):
        street, sat, _ = tensors
        assert central_difference_rel_error(lambda s: ranking_loss(street, s, 10.0)[0], sat) < 1e-4
        assert central_difference_rel_error(lambda s: ranking_loss(s, sat, 10.0)[0], street) < 1e-4


def nested_loop_triplets(b):
    out = []
    for i in range(b):
        for j in range(b):
            if i != j:
                out.append(("street", i, i, j))
                out.append(("satellite", i, i, j))
    return out


class TestTriplets:
    @pytest.mark.parametrize("b", range(2, 65))
    def test_count(self, b):
        assert len(exhaustive_triplet_indices(b)) == 2 * b * (b - 1)

    def test_paper_batch_size(self):
        assert len(exhaustive_triplet_indices(32)) == 1984

    def test_multiset_b4(self):
        assert Counter(exhaustive_triplet_indices(4)) == Counter(nested_loop_triplets(4))

    def test_rejects_single_pair(self):
        with pytest.raises(ValueError):
            exhaustive_triplet_indices(1)
        with pytest.raises(ValueError):
            ranking_loss(torch.zeros(1, 3), torch.zeros(1, 3))

    def test_batch_rows_match_indices(self):
        street = torch.randn(4, 5)
        sat = torch.randn(4, 5)
        batch = build_exhaustive_triplets(street, sat)
        for row, (view, a, p, n) in enumerate(batch.index):
            anchors, others = (street, sat) if view == "street" else (sat, street)
            assert torch.equal(batch.anchor[row], anchors[a])
            assert torch.equal(batch.positive[row], others[p])
            assert torch.equal(batch.negative[row], others[n])

    def test_vectorised_losses_match_batch(self):
        g = torch.Generator().manual_seed(3)
        street = torch.randn(5, 8, generator=g, dtype=torch.float64)
        sat = torch.randn(5, 8, generator=g, dtype=torch.float64)
        batch = build_exhaustive_triplets(street, sat).evaluate(10.0)
        torch.testing.assert_close(triplet_losses(street, sat, 10.0), batch.losses)
        loss, n = ranking_loss(street, sat, 10.0)
        assert n == 40
        assert loss.item() == pytest.approx(batch.losses.mean().item(), rel=1e-12)
        kept = hard_negative_filter(batch, 0.5)
        loss, n = ranking_loss(street, sat, 10.0, keep_fraction=0.5)
        assert n == len(kept) == 20
        assert loss.item() == pytest.approx(kept.losses.mean().item(), rel=1e-12)

    def test_two_pairs_give_four_triplets(self):
        _, n = ranking_loss(torch.randn(2, 3), torch.randn(2, 3))
        assert n == 4


def sort_and_truncate(losses, keep_fraction):
    n = math.ceil(keep_fraction * len(losses))
    ranked = sorted(range(len(losses)), key=lambda i: (-losses[i], i))
    return sorted(ranked[:n])


class TestHardNegatives:
    def test_example(self):
        assert hard_negative_rows(torch.tensor([0.1, 0.9, 0.5, 0.5]), 0.5).tolist() == [1, 2]

    def test_all_equal(self):
        assert hard_negative_rows(torch.ones(8), 0.25).tolist() == [0, 1]

    def test_keep_all_is_identity(self):
        batch = build_exhaustive_triplets(torch.randn(3, 4), torch.randn(3, 4)).evaluate()
        assert hard_negative_filter(batch, 1.0) is batch

    def test_requires_losses(self):
        batch = build_exhaustive_triplets(torch.randn(3, 4), torch.randn(3, 4))
        with pytest.raises(ValueError):
            hard_negative_filter(batch, 0.5)

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, bad):
        with pytest.raises(ValueError):
            hard_negative_rows(torch.ones(4), bad)

    def test_random_batches_match_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(1, 60))
            losses = np.round(rng.random(n), int(rng.integers(1, 3)))  # rounding forces ties
            frac = float(rng.uniform(0.01, 1.0))
            assert hard_negative_rows(torch.tensor(losses), frac).tolist() == sort_and_truncate(losses.tolist(), frac)


class TestComposite:
    def test_zero(self):
        total, _ = composite_loss(0.0, 0.0, 0.0, LossWeights())
        assert total == 0

    def test_canonical_weights(self):
        total, breakdown = composite_loss(1.0, 1.0, 1.0, LossWeights())
        assert total == 1101
        assert breakdown == {"cgan": 1.0, "l1": 1.0, "ret": 1.0}

    def test_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            c, l, r = rng.random(3)
            w = LossWeights(*rng.uniform(0, 10, size=4))
            total, _ = composite_loss(c, l, r, w)
            assert total == pytest.approx(w.lambda_cgan * c + w.lambda_l1 * l + w.lambda_ret * r)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_l1=-1)

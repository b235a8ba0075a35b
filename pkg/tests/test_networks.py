import itertools

import pytest
import torch

from sat2street.discriminator import PatchDiscriminator
from sat2street.generator import Generator
from sat2street.layers import NonLocalBlock, conv_weight, sn_conv

TABLE_5 = [
    ("input", (3, 112, 616)),
    ("stem", (32, 112, 616)),
    ("enc1", (64, 56, 308)),
    ("enc2", (128, 28, 154)),
    ("enc3", (256, 14, 77)),
] + [(f"res{i}", (256, 14, 77)) for i in range(1, 7)] + [
    ("up1", (128, 28, 154)),
    ("non_local", (256, 28, 154)),
    ("up2", (64, 56, 308)),
    ("up3", (64, 112, 616)),
    ("output", (3, 112, 616)),
]

TABLE_6 = [(6, 112, 616), (64, 56, 308), (128, 28, 154), (128, 28, 154),
           (256, 14, 77), (512, 14, 76), (1, 14, 75)]


@pytest.fixture(scope="module")
def canonical_generator():
    torch.manual_seed(0)
    return Generator().eval()


def small_generator(base=4, n_bottleneck=2, dtype=torch.float32):
    torch.manual_seed(0)
    return Generator(base, n_bottleneck).to(dtype)


class TestGenerator:
    def test_table_shapes(self, canonical_generator):
        rows = canonical_generator.trace_shapes(torch.zeros(1, 3, 112, 616))
        assert rows == TABLE_5

    def test_encode_decode_shapes(self, canonical_generator):
        x = torch.rand(1, 3, 112, 616) * 2 - 1
        with torch.no_grad():
            bottleneck, skips = canonical_generator.encode(x)
            out = canonical_generator.decode(bottleneck, skips)
        assert tuple(bottleneck.shape[1:]) == (256, 14, 77)
        assert [tuple(s.shape[1:]) for s in skips] == [(64, 56, 308), (128, 28, 154), (256, 14, 77)]
        assert tuple(out.shape[1:]) == (3, 112, 616)
        assert out.abs().max() <= 1

    def test_scaled_geometry(self):
        g = small_generator(base=32, n_bottleneck=1).eval()
        rows = dict(g.trace_shapes(torch.zeros(1, 3, 16, 88)))
        assert rows["enc3"] == (256, 2, 11)
        assert rows["non_local"] == (256, 4, 22)
        assert rows["output"] == (3, 16, 88)

    def test_forward_matches_encode(self):
        g = small_generator().eval()
        x = torch.rand(2, 3, 16, 88) * 2 - 1
        with torch.no_grad():
            out, bottleneck = g(x)
            alone, skips = g.encode(x)
            decoded = g.decode(alone, skips)
        assert torch.equal(bottleneck, alone)
        assert torch.equal(out, decoded)

    def test_output_bounded_for_large_inputs(self):
        g = small_generator().eval()
        with torch.no_grad():
            out, _ = g(torch.randn(2, 3, 16, 88) * 1e3)
        assert torch.isfinite(out).all() and out.abs().max() <= 1

    def test_zero_residual_branch_is_identity(self):
        g = small_generator().eval()
        last = g.bottleneck[-1]
        with torch.no_grad():
            conv_weight(last.conv2).zero_()
            last.conv2.bias.zero_()
        x = torch.rand(1, 3, 16, 88)
        captured = {}
        last.register_forward_pre_hook(lambda m, args: captured.setdefault("in", args[0].clone()))
        with torch.no_grad():
            bottleneck, _ = g.encode(x)
        assert torch.equal(bottleneck, captured["in"])

    @pytest.mark.parametrize("bad", [(1, 3, 15, 88), (1, 1, 16, 88), (3, 16, 88)])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(ValueError):
            small_generator().encode(torch.zeros(bad))

    def test_rejects_skip_mismatch(self):
        g = small_generator().eval()
        bottleneck, skips = g.encode(torch.zeros(1, 3, 16, 88))
        skips[1] = torch.zeros(1, 16, 3, 3)
        with pytest.raises(ValueError, match="enc2"):
            g.decode(bottleneck, skips)

    def test_spectral_norm_converges(self):
        g = small_generator(base=8).train()
        x = torch.rand(2, 3, 16, 88)
        with torch.no_grad():
            for _ in range(30):
                g(x)
        checked = 0
        for name, m in g.named_modules():
            if hasattr(m, "parametrizations") and conv_weight(m).abs().sum() > 0:
                sigma = torch.linalg.matrix_norm(m.weight.detach().flatten(1), 2)
                assert abs(sigma.item() - 1) < 0.05, name
                checked += 1
        assert checked > 10
        # the output convolution is left unnormalised
        assert not hasattr(g.to_rgb, "parametrizations")

    def test_gradient_matches_finite_differences(self):
        g = small_generator(base=2, n_bottleneck=1, dtype=torch.float64).eval()
        torch.manual_seed(1)
        x = (torch.rand(1, 3, 16, 88, dtype=torch.float64) * 2 - 1).requires_grad_()
        target = torch.rand(1, 3, 16, 88, dtype=torch.float64)

        def f(inp):
            out, bottleneck = g(inp)
            return ((out - target) ** 2).sum() + bottleneck.pow(2).mean()

        (grad,) = torch.autograd.grad(f(x), x)
        eps = 1e-6
        for _ in range(5):
            v = torch.randn_like(x)
            v /= v.norm()
            with torch.no_grad():
                fd = (f(x + eps * v) - f(x - eps * v)) / (2 * eps)
            analytic = (grad * v).sum()
            assert abs(analytic - fd) / abs(fd) < 1e-3


class TestDiscriminator:
    def test_table_shapes(self):
        torch.manual_seed(0)
        d = PatchDiscriminator().eval()
        x = torch.zeros(1, 3, 112, 616)
        with torch.no_grad():
            shapes = [tuple(t.shape[1:]) for t in d.trace(x, x)]
        assert shapes == TABLE_6

    def test_toy_geometry(self):
        d = PatchDiscriminator(8).eval()
        with torch.no_grad():
            out = d(torch.zeros(2, 3, 16, 88), torch.zeros(2, 3, 16, 88))
        assert out.shape == (2, 1, 2, 9)

    def test_zero_final_conv_gives_zero_logits(self):
        d = PatchDiscriminator(8)
        with torch.no_grad():
            d.conv5.weight.zero_()
            d.conv5.bias.zero_()
            out = d(torch.randn(2, 3, 16, 88), torch.randn(2, 3, 16, 88))
        assert torch.count_nonzero(out) == 0

    def test_rejects_mismatched_inputs(self):
        d = PatchDiscriminator(8)
        with pytest.raises(ValueError):
            d(torch.zeros(1, 3, 16, 88), torch.zeros(1, 3, 16, 80))

    def test_last_layer_not_normalised(self):
        d = PatchDiscriminator(8)
        assert not hasattr(d.conv5, "parametrizations")
        for conv in (d.conv1, d.conv2, d.conv3, d.conv4):
            assert hasattr(conv, "parametrizations")

    @staticmethod
    def receptive_rows(out_index, layers):
        """Input index interval feeding ``out_index`` through (kernel, stride, pad_before) layers."""
        lo = hi = out_index
        for k, s, p in reversed(layers):
            lo, hi = lo * s - p, hi * s - p + k - 1
        return lo, hi

    def test_patch_locality(self):
        torch.manual_seed(0)
        d = PatchDiscriminator(4).eval()  # fresh non-local block is the identity
        base = torch.zeros(1, 3, 32, 88)
        with torch.no_grad():
            ref = d(base, base)
        layers_h = [(4, 2, 1)] * 3 + [(4, 1, 1)] * 2
        layers_w = [(4, 2, 1)] * 3 + [(4, 1, 1)] * 2
        for y, x in [(0, 0), (13, 40), (31, 87), (20, 5)]:
            bumped = base.clone()
            bumped[0, 1, y, x] = 1.0
            with torch.no_grad():
                changed = (d(base, bumped) - ref).abs()[0, 0] > 0
            assert changed.any()
            for oy, ox in itertools.product(range(changed.shape[0]), range(changed.shape[1])):
                ylo, yhi = self.receptive_rows(oy, layers_h)
                xlo, xhi = self.receptive_rows(ox, layers_w)
                inside = ylo <= y <= yhi and xlo <= x <= xhi
                if changed[oy, ox]:
                    assert inside, (y, x, oy, ox)


class TestLayers:
    def test_non_local_starts_as_identity(self):
        block = NonLocalBlock(8)
        block.reset_output()
        x = torch.randn(2, 8, 3, 5)
        assert torch.equal(block(x), x)

    def test_spectral_norm_zero_kernel_stays_finite(self):
        conv = sn_conv(3, 4, 3, padding=1)
        with torch.no_grad():
            conv_weight(conv).zero_()
        out = conv(torch.randn(1, 3, 5, 5))
        assert torch.isfinite(out).all()
        with torch.no_grad():
            conv_weight(conv).normal_(0, 1e-4)
        for _ in range(20):
            conv(torch.randn(1, 3, 5, 5))
        sigma = torch.linalg.matrix_norm(conv.weight.detach().flatten(1), 2)
        assert sigma.item() == pytest.approx(1.0, rel=0.05)

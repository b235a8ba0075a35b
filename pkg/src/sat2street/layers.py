"""Building blocks shared by the generator, discriminator and retrieval nets."""
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize


class SpectralNorm(nn.Module):
    """Weight parametrization dividing a kernel by its top singular value.

    The singular vectors are estimated by power iteration (one step per
    forward pass in training mode) and persisted as buffers so checkpoints
    restore the estimate exactly.
    """

    def __init__(self, weight, n_power_iterations=1, eps=1e-12):
        super().__init__()
        mat = weight.detach().flatten(1)
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        u = F.normalize(mat.new_empty(mat.shape[0]).normal_(0, 1), dim=0, eps=eps)
        v = F.normalize(mat.new_empty(mat.shape[1]).normal_(0, 1), dim=0, eps=eps)
        self.register_buffer("_u", u)
        self.register_buffer("_v", v)

    @torch.no_grad()
    def _power_iteration(self, mat):
        for _ in range(self.n_power_iterations):
            v = mat.t() @ self._u
            u = mat @ v
            # a zero kernel annihilates the iterates; keep the old unit vectors
            if v.norm() <= self.eps or u.norm() <= self.eps:
                return
            self._v.copy_(F.normalize(v, dim=0, eps=self.eps))
            self._u.copy_(F.normalize(u, dim=0, eps=self.eps))

    def forward(self, weight):
        mat = weight.flatten(1)
        if self.training:
            self._power_iteration(mat.detach())
        u = self._u.clone(memory_format=torch.contiguous_format)
        v = self._v.clone(memory_format=torch.contiguous_format)
        sigma = torch.dot(u, mat @ v)
        # an all-zero kernel has sigma 0; leave it at zero instead of nan
        return weight / sigma.abs().clamp_min(self.eps)


def spectral_norm(module, name="weight"):
    parametrize.register_parametrization(module, name, SpectralNorm(getattr(module, name)))
    return module


def sn_conv(in_ch, out_ch, kernel_size, stride=1, padding=0, bias=True, use_sn=True):
    conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding, bias=bias)
    return spectral_norm(conv) if use_sn else conv


def conv_weight(module):
    """The raw (pre-normalization) weight tensor of a possibly parametrized conv."""
    if parametrize.is_parametrized(module, "weight"):
        return module.parametrizations.weight.original
    return module.weight


def init_weights(net, std=0.02):
    """GAN-convention init: N(0, std) conv/linear weights, unit norm scales, zero biases."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                conv_weight(m).normal_(0.0, std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def instance_norm(channels):
    return nn.InstanceNorm2d(channels, affine=True)


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian self-attention over all spatial positions.

    The output projection starts at zero, so a freshly built block is the
    identity map.
    """

    def __init__(self, channels, inter_channels=None, use_sn=True):
        super().__init__()
        inter = inter_channels or max(channels // 2, 1)
        self.inter_channels = inter
        self.theta = sn_conv(channels, inter, 1, bias=False, use_sn=use_sn)
        self.phi = sn_conv(channels, inter, 1, bias=False, use_sn=use_sn)
        self.g = sn_conv(channels, inter, 1, bias=False, use_sn=use_sn)
        self.out = sn_conv(inter, channels, 1, bias=False, use_sn=use_sn)

    def reset_output(self):
        with torch.no_grad():
            conv_weight(self.out).zero_()

    def forward(self, x):
        b, c, h, w = x.shape
        theta = self.theta(x).flatten(2).transpose(1, 2)  # b, hw, inter
        phi = self.phi(x).flatten(2)  # b, inter, hw
        g = self.g(x).flatten(2).transpose(1, 2)  # b, hw, inter
        attn = torch.softmax(theta @ phi, dim=-1)
        y = (attn @ g).transpose(1, 2).reshape(b, self.inter_channels, h, w)
        return x + self.out(y)

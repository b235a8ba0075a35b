"""PatchGAN discriminator scoring (polar satellite, street panorama) pairs."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import NonLocalBlock, init_weights, sn_conv


class PatchDiscriminator(nn.Module):
    """Five 4x4 convolutions with a non-local block after the second.

    For a 112x616 input the logit grid is 14x75. The last two convolutions
    run at stride 1 with 3 rows (1 top, 2 bottom) and 2 columns of padding,
    which keeps the height and trims one column each.
    """

    def __init__(self, base=64, slope=0.1, use_sn=True):
        super().__init__()
        b = base
        self.slope = slope
        self.conv1 = sn_conv(6, b, 4, stride=2, padding=1, use_sn=use_sn)
        self.conv2 = sn_conv(b, 2 * b, 4, stride=2, padding=1, use_sn=use_sn)
        self.attention = NonLocalBlock(2 * b, use_sn=use_sn)
        self.conv3 = sn_conv(2 * b, 4 * b, 4, stride=2, padding=1, use_sn=use_sn)
        self.conv4 = sn_conv(4 * b, 8 * b, 4, stride=1, padding=0, use_sn=use_sn)
        # no spectral norm on the output layer
        self.conv5 = nn.Conv2d(8 * b, 1, 4, stride=1, padding=0)
        init_weights(self)
        self.attention.reset_output()

    @staticmethod
    def _pad(x):
        return F.pad(x, (1, 1, 1, 2))

    def trace(self, condition, street):
        if condition.shape != street.shape or condition.dim() != 4 or condition.shape[1] != 3:
            raise ValueError(
                f"condition {tuple(condition.shape)} and street {tuple(street.shape)} "
                "must both be (B, 3, H, W)"
            )
        act = lambda t: F.leaky_relu(t, self.slope)
        x = torch.cat([condition, street], 1)
        out = [x]
        x = act(self.conv1(x))
        out.append(x)
        x = act(self.conv2(x))
        out.append(x)
        x = self.attention(x)
        out.append(x)
        x = act(self.conv3(x))
        out.append(x)
        x = act(self.conv4(self._pad(x)))
        out.append(x)
        out.append(self.conv5(self._pad(x)))
        return out

    def forward(self, condition, street):
        """Raw per-patch logits, shape (B, 1, H/8, W/8 - 2)."""
        return self.trace(condition, street)[-1]

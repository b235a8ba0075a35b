"""Residual U-Net that turns polar-warped satellite images into street panoramas."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import NonLocalBlock, init_weights, instance_norm, sn_conv


class ResBlock(nn.Module):
    """conv3x3 -> IN -> ReLU -> conv3x3 plus an identity (or projected) shortcut.

    ``resample`` is ``None``, ``"down"`` (stride-2 first conv, average-pooled
    shortcut) or ``"up"`` (nearest x2 before the first conv and on the
    shortcut).
    """

    def __init__(self, in_ch, out_ch, resample=None, use_sn=True):
        super().__init__()
        self.resample = resample
        stride = 2 if resample == "down" else 1
        self.conv1 = sn_conv(in_ch, out_ch, 3, stride=stride, padding=1, use_sn=use_sn)
        self.norm1 = instance_norm(out_ch)
        self.conv2 = sn_conv(out_ch, out_ch, 3, padding=1, use_sn=use_sn)
        if in_ch != out_ch or resample is not None:
            self.shortcut = sn_conv(in_ch, out_ch, 1, use_sn=use_sn)
        else:
            self.shortcut = None

    def forward(self, x):
        if self.resample == "up":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv2(F.relu(self.norm1(self.conv1(x))))
        skip = x
        if self.resample == "down":
            skip = F.avg_pool2d(skip, 2)
        if self.shortcut is not None:
            skip = self.shortcut(skip)
        return skip + h


class Generator(nn.Module):
    """U-Net generator; ``base`` is the stem width (32 in the full-size model).

    Spatial sizes halve three times in the encoder, so input height and
    width must be divisible by 8.
    """

    def __init__(self, base=32, n_bottleneck=6, use_sn=True):
        super().__init__()
        b = base
        self.base = base
        self.stem = sn_conv(3, b, 3, padding=1, use_sn=use_sn)
        self.stem_norm = instance_norm(b)
        self.enc1 = ResBlock(b, 2 * b, "down", use_sn)
        self.enc1_norm = instance_norm(2 * b)
        self.enc2 = ResBlock(2 * b, 4 * b, "down", use_sn)
        self.enc2_norm = instance_norm(4 * b)
        self.enc3 = ResBlock(4 * b, 8 * b, "down", use_sn)
        self.enc3_norm = instance_norm(8 * b)
        self.bottleneck = nn.Sequential(*[ResBlock(8 * b, 8 * b, None, use_sn) for _ in range(n_bottleneck)])

        self.up1 = ResBlock(16 * b, 4 * b, "up", use_sn)
        self.up1_norm = instance_norm(4 * b)
        self.attention = NonLocalBlock(8 * b, use_sn=use_sn)
        self.up2 = ResBlock(8 * b, 2 * b, "up", use_sn)
        self.up2_norm = instance_norm(2 * b)
        self.up3 = ResBlock(4 * b, 2 * b, "up", use_sn)
        self.up3_norm = instance_norm(2 * b)
        # no spectral norm on the output layer
        self.to_rgb = nn.Conv2d(2 * b, 3, 3, padding=1)

        init_weights(self)
        self.attention.reset_output()

    @property
    def encoder_modules(self):
        return [self.stem, self.stem_norm, self.enc1, self.enc1_norm, self.enc2,
                self.enc2_norm, self.enc3, self.enc3_norm, self.bottleneck]

    def encoder_parameters(self):
        for m in self.encoder_modules:
            yield from m.parameters()

    def decoder_parameters(self):
        enc = {id(p) for p in self.encoder_parameters()}
        return (p for p in self.parameters() if id(p) not in enc)

    def encode(self, polar):
        if polar.dim() != 4 or polar.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got {tuple(polar.shape)}")
        if polar.shape[2] % 8 or polar.shape[3] % 8:
            raise ValueError(f"height and width must be divisible by 8, got {tuple(polar.shape[2:])}")
        x = self.stem_norm(self.stem(polar))
        e1 = self.enc1_norm(self.enc1(x))
        e2 = self.enc2_norm(self.enc2(e1))
        e3 = self.enc3_norm(self.enc3(e2))
        return self.bottleneck(e3), [e1, e2, e3]

    def decode(self, bottleneck, skips):
        e1, e2, e3 = skips
        if e3.shape != bottleneck.shape:
            raise ValueError(f"skip enc3 {tuple(e3.shape)} does not match bottleneck {tuple(bottleneck.shape)}")
        x = self.up1_norm(self.up1(torch.cat([bottleneck, e3], 1)))
        if e2.shape != x.shape:
            raise ValueError(f"skip enc2 {tuple(e2.shape)} does not match decoder {tuple(x.shape)}")
        x = self.attention(torch.cat([x, e2], 1))
        x = self.up2_norm(self.up2(x))
        if e1.shape != x.shape:
            raise ValueError(f"skip enc1 {tuple(e1.shape)} does not match decoder {tuple(x.shape)}")
        x = self.up3_norm(self.up3(torch.cat([x, e1], 1)))
        return torch.tanh(self.to_rgb(x))

    @torch.no_grad()
    def trace_shapes(self, polar):
        """Per-stage output shapes (without batch dim), in architecture-table order."""
        rows = [("input", polar.shape[1:])]
        x = self.stem_norm(self.stem(polar))
        rows.append(("stem", x.shape[1:]))
        e1 = self.enc1_norm(self.enc1(x))
        e2 = self.enc2_norm(self.enc2(e1))
        e3 = self.enc3_norm(self.enc3(e2))
        rows += [("enc1", e1.shape[1:]), ("enc2", e2.shape[1:]), ("enc3", e3.shape[1:])]
        h = e3
        for i, block in enumerate(self.bottleneck):
            h = block(h)
            rows.append((f"res{i + 1}", h.shape[1:]))
        x = self.up1_norm(self.up1(torch.cat([h, e3], 1)))
        rows.append(("up1", x.shape[1:]))
        x = self.attention(torch.cat([x, e2], 1))
        rows.append(("non_local", x.shape[1:]))
        x = self.up2_norm(self.up2(x))
        rows.append(("up2", x.shape[1:]))
        x = self.up3_norm(self.up3(torch.cat([x, e1], 1)))
        rows.append(("up3", x.shape[1:]))
        rows.append(("output", self.to_rgb(x).shape[1:]))
        return [(name, tuple(shape)) for name, shape in rows]

    def forward(self, polar):
        bottleneck, skips = self.encode(polar)
        return self.decode(bottleneck, skips), bottleneck

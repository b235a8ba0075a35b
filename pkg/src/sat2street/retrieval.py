"""Street-view encoder, spatial-aware aggregation and descriptor distances."""
import csv
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import init_weights


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class StreetEncoder(nn.Module):
    """ResNet34 trunk cut after its third stage, with that stage kept at stride 1.

    Total stride is 8 and the output width is ``8 * base`` channels, which
    lines up with the generator bottleneck built with the same ``base``.
    """

    def __init__(self, base=32, blocks=(3, 4, 6)):
        super().__init__()
        widths = (2 * base, 4 * base, 8 * base)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        layers = []
        in_ch = widths[0]
        for width, n, stride in zip(widths, blocks, (1, 2, 1)):
            for i in range(n):
                layers.append(BasicBlock(in_ch, width, stride if i == 0 else 1))
                in_ch = width
        self.layers = nn.Sequential(*layers)
        self.out_channels = widths[-1]
        init_weights(self)

    def forward(self, street):
        if street.dim() != 4 or street.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) batch, got {tuple(street.shape)}")
        if street.shape[2] % 8 or street.shape[3] % 8:
            raise ValueError(f"height and width must be divisible by 8, got {tuple(street.shape[2:])}")
        return self.layers(self.stem(street))


class SpatialAware(nn.Module):
    """Predicts ``k`` attention masks from a feature map and pools it with them.

    Each head max-pools the features over channels, then refines the
    flattened map with two fully-connected layers (H*W -> hidden -> H*W).
    """

    def __init__(self, spatial_shape, k=8, hidden_ratio=0.5, normalize=True):
        super().__init__()
        h, w = spatial_shape
        self.spatial_shape = (h, w)
        self.k = k
        self.normalize = normalize
        n = h * w
        hidden = max(int(n * hidden_ratio), 1)
        self.w1 = nn.Parameter(torch.empty(k, n, hidden))
        self.b1 = nn.Parameter(torch.zeros(k, hidden))
        self.w2 = nn.Parameter(torch.empty(k, hidden, n))
        self.b2 = nn.Parameter(torch.zeros(k, n))
        nn.init.normal_(self.w1, 0.0, 0.02)
        nn.init.normal_(self.w2, 0.0, 0.02)

    def masks(self, features):
        if tuple(features.shape[2:]) != self.spatial_shape:
            raise ValueError(
                f"features have spatial shape {tuple(features.shape[2:])}, "
                f"expected {self.spatial_shape}"
            )
        pooled = features.amax(dim=1).flatten(1)  # b, hw
        hidden = torch.einsum("bn,knm->bkm", pooled, self.w1) + self.b1
        out = torch.einsum("bkm,kmn->bkn", hidden, self.w2) + self.b2
        return out.reshape(features.shape[0], self.k, *self.spatial_shape)

    def forward(self, features):
        return aggregate(features, self.masks(features), self.normalize)


def aggregate(features, masks, normalize=True):
    """Frobenius products of every mask with every channel, stacked mask-major.

    ``features`` is (B, C, H, W) and ``masks`` (B, k, H, W); the result is
    (B, k*C) with entry ``i*C + c`` equal to sum_hw features[c] * masks[i].
    """
    if features.shape[2:] != masks.shape[2:]:
        raise ValueError(
            f"mask shape {tuple(masks.shape[2:])} does not match features {tuple(features.shape[2:])}"
        )
    desc = torch.einsum("bchw,bkhw->bkc", features, masks).flatten(1)
    if normalize:
        desc = F.normalize(desc, dim=1)
    return desc


def distance(d1, d2):
    """Squared Euclidean distance along the last axis."""
    if d1.shape[-1] != d2.shape[-1]:
        raise ValueError(f"descriptor lengths differ: {d1.shape[-1]} vs {d2.shape[-1]}")
    return ((d1 - d2) ** 2).sum(-1)


def pairwise_distance(queries, gallery):
    """(Q, G) matrix of squared distances; computed by direct differences."""
    if isinstance(queries, torch.Tensor):
        return ((queries[:, None, :] - gallery[None, :, :]) ** 2).sum(-1)
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    out = np.empty((len(q), len(g)))
    for start in range(0, len(q), 64):
        out[start:start + 64] = ((q[start:start + 64, None, :] - g[None]) ** 2).sum(-1)
    return out


class RetrievalBranch(nn.Module):
    """Street encoder plus one aggregation module per view."""

    def __init__(self, feature_shape, base=32, blocks=(3, 4, 6), k=8, normalize=True):
        super().__init__()
        self.street_encoder = StreetEncoder(base, blocks)
        self.sat_sa = SpatialAware(feature_shape, k, normalize=normalize)
        self.street_sa = SpatialAware(feature_shape, k, normalize=normalize)

    def street_descriptor(self, street):
        return self.street_sa(self.street_encoder(street))

    def satellite_descriptor(self, bottleneck):
        return self.sat_sa(bottleneck)


def save_descriptors(path, ids, descriptors, coords=None):
    """Write ``path`` (flat little-endian float32) and ``path + '.csv'`` (id, offset, coords)."""
    descriptors = np.asarray(descriptors, dtype="<f4")
    if descriptors.ndim != 2 or len(descriptors) != len(ids):
        raise ValueError("descriptors must be an (N, D) array with one row per id")
    dim = descriptors.shape[1]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(descriptors.tobytes(order="C"))
    os.replace(tmp, path)
    with open(f"{path}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "offset", "dim", "easting", "northing"])
        for i, ident in enumerate(ids):
            e, n = ("", "") if coords is None else (repr(float(coords[i][0])), repr(float(coords[i][1])))
            writer.writerow([ident, i * dim * 4, dim, e, n])


def load_descriptors(path):
    """Inverse of :func:`save_descriptors`; returns (ids, (N, D) float32 array, coords or None)."""
    with open(f"{path}.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    raw = np.fromfile(path, dtype="<f4")
    if not rows:
        return [], raw.reshape(0, 0), None
    dim = int(rows[0]["dim"])
    data = np.empty((len(rows), dim), dtype=np.float32)
    for i, row in enumerate(rows):
        start = int(row["offset"]) // 4
        data[i] = raw[start:start + dim]
    coords = None
    if rows[0]["easting"] != "":
        coords = np.array([[float(r["easting"]), float(r["northing"])] for r in rows])
    return [r["id"] for r in rows], data, coords

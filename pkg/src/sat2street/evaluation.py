"""Retrieval recall and image-quality metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.ndimage import correlate1d

from .retrieval import pairwise_distance

DEFAULT_KS = (1, 5, 10)


@dataclass
class RecallReport:
    r_at: Dict[int, float]
    r_at_1percent: float
    query_count: int
    gallery_count: int
    matching_rule: str
    one_percent_k: int = 1
    per_query_rank: List[int] = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d["r_at"] = {str(k): v for k, v in self.r_at.items()}
        return d


def one_percent_k(gallery_count):
    return max(1, math.ceil(gallery_count / 100))


def rank_gallery(query_descs, gallery_descs):
    """Gallery indices per query, nearest first; equal distances keep gallery order."""
    d = pairwise_distance(query_descs, gallery_descs)
    if hasattr(d, "numpy"):
        d = d.detach().numpy()
    return np.argsort(d, axis=1, kind="stable")


def _report(correct_sorted, ks, gallery_count, rule):
    """``correct_sorted[q, r]`` tells whether the r-th ranked item is correct for query q."""
    n_q = correct_sorted.shape[0]
    first = np.where(correct_sorted.any(1), correct_sorted.argmax(1), gallery_count)
    k1 = one_percent_k(gallery_count)
    r_at = {int(k): float(np.mean(first < k)) for k in ks}
    return RecallReport(r_at, float(np.mean(first < k1)), n_q, gallery_count, rule, k1,
                        [int(f) for f in first])


def recall_at_k(query_descs, gallery_descs, matches=None, ks=DEFAULT_KS):
    """Exact-id recall.

    ``matches`` lists, for each query, the gallery indices that count as
    correct (an int or an iterable). By default query ``i`` matches gallery
    item ``i``.
    """
    n_q, n_g = len(query_descs), len(gallery_descs)
    if n_g == 0:
        raise ValueError("gallery is empty")
    if matches is None:
        if n_q != n_g:
            raise ValueError("default matching needs as many queries as gallery items")
        matches = range(n_q)
    order = rank_gallery(query_descs, gallery_descs)
    correct = np.zeros((n_q, n_g), dtype=bool)
    for q, m in enumerate(matches):
        idx = [m] if isinstance(m, (int, np.integer)) else list(m)
        if not idx:
            raise ValueError(f"query {q} has no correct gallery item")
        correct[q, idx] = True
    correct_sorted = np.take_along_axis(correct, order, axis=1)
    return _report(correct_sorted, ks, n_g, "exact-id")


def recall_within_radius(query_descs, gallery_descs, query_coords, gallery_coords,
                         radius_m=5.0, ks=DEFAULT_KS):
    """Recall where any gallery item within ``radius_m`` (inclusive) of the query's location is correct."""
    n_g = len(gallery_descs)
    if n_g == 0:
        raise ValueError("gallery is empty")
    qc = np.asarray(query_coords, dtype=np.float64)
    gc = np.asarray(gallery_coords, dtype=np.float64)
    geo = np.sqrt(((qc[:, None, :] - gc[None, :, :]) ** 2).sum(-1))
    correct = geo <= radius_m
    order = rank_gallery(query_descs, gallery_descs)
    correct_sorted = np.take_along_axis(correct, order, axis=1)
    return _report(correct_sorted, ks, n_g, f"within-radius({radius_m:g}m)")


# --- image quality ---------------------------------------------------------

def _as_float(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return a, b


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    """Separable correlation keeping only positions where the window fits."""
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    half = len(win) // 2
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, data_range=2.0, win_size=11, sigma=1.5):
    """Mean structural similarity over (C, H, W) images, averaged over channels.

    Statistics use an ``win_size`` Gaussian window (population moments) and
    only window positions fully inside the image.
    """
    a, b = _as_float(a, b)
    if min(a.shape[-2:]) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window(win_size, sigma)
    scores = []
    for x, y in zip(a, b):
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mu_x ** 2
        syy = _filter_valid(y * y, win) - mu_y ** 2
        sxy = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def psnr(a, b, data_range=2.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _as_float(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(data_range ** 2 / mse))


def gradient_magnitude(img):
    """|d/dx| + |d/dy| with forward differences; the last column/row sees a zero neighbour."""
    padded_x = np.concatenate([img, np.zeros_like(img[..., :1])], axis=-1)
    padded_y = np.concatenate([img, np.zeros_like(img[..., :1, :])], axis=-2)
    gx = np.diff(padded_x, axis=-1)
    gy = np.diff(padded_y, axis=-2)
    return np.abs(gx) + np.abs(gy)


def sharpness_difference(a, b, data_range=2.0):
    """10 log10(L^2 / mean |grad(a) - grad(b)|) in dB; ``inf`` when the gradient maps agree."""
    a, b = _as_float(a, b)
    diff = np.mean(np.abs(gradient_magnitude(a) - gradient_magnitude(b)))
    if diff == 0:
        return math.inf
    return float(10 * np.log10(data_range ** 2 / diff))


@dataclass
class SynthesisReport:
    ssim: float
    psnr: float
    sharpness_difference: float
    count: int
    psnr_excluded: int
    sd_excluded: int
    records: List[dict] = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        for rec in d["records"]:
            for key in ("psnr", "sharpness_difference"):
                if math.isinf(rec[key]):
                    rec[key] = "inf"
        return d


def _finite_mean(values):
    finite = [v for v in values if math.isfinite(v)]
    return (float(np.mean(finite)) if finite else math.inf), len(values) - len(finite)


def evaluate_synthesis(generated, targets, ids=None, data_range=2.0):
    """Per-image SSIM/PSNR/SD and their means; infinite scores are left out of the means."""
    if len(generated) == 0:
        raise ValueError("nothing to evaluate")
    if len(generated) != len(targets):
        raise ValueError(f"{len(generated)} generated images but {len(targets)} targets")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(generated))]
    records = []
    for ident, g, t in zip(ids, generated, targets):
        records.append({
            "id": ident,
            "ssim": ssim(g, t, data_range),
            "psnr": psnr(g, t, data_range),
            "sharpness_difference": sharpness_difference(g, t, data_range),
        })
    records.sort(key=lambda r: r["id"])
    mean_psnr, psnr_excl = _finite_mean([r["psnr"] for r in records])
    mean_sd, sd_excl = _finite_mean([r["sharpness_difference"] for r in records])
    return SynthesisReport(float(np.mean([r["ssim"] for r in records])), mean_psnr, mean_sd,
                           len(records), psnr_excl, sd_excl, records)


def evaluate_retrieval(trainer, split, radius_m=None, ks=DEFAULT_KS):
    """Street queries against the satellite gallery of one prepared split."""
    if len(split) == 0:
        raise ValueError("split is empty")
    sat, street = trainer.descriptors(split.polar, split.street)
    if radius_m is not None:
        if split.coords is None:
            raise ValueError("radius matching needs coordinates in the manifest")
        return recall_within_radius(street, sat, split.coords, split.coords, radius_m, ks)
    return recall_at_k(street, sat, None, ks)

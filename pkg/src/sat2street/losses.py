"""Adversarial, reconstruction and ranking objectives."""
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .retrieval import distance


@dataclass
class LossWeights:
    lambda_cgan: float = 1.0
    lambda_l1: float = 100.0
    lambda_ret: float = 1000.0
    alpha: float = 10.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be nonnegative, got {value!r}")


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("logits contain non-finite values")


def cgan_loss_discriminator(real_logits, fake_logits):
    """Mean over patches of -log sigmoid(real) - log(1 - sigmoid(fake))."""
    _check_finite(real_logits, fake_logits)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def cgan_loss_generator(fake_logits, non_saturating=True):
    """Generator adversarial term.

    The default is the non-saturating ``-log sigmoid(fake)``; with
    ``non_saturating=False`` it returns the literal minimax term
    ``log(1 - sigmoid(fake))``, which is nonpositive.
    """
    _check_finite(fake_logits)
    if non_saturating:
        return F.softplus(-fake_logits).mean()
    return -F.softplus(fake_logits).mean()


def l1_loss(generated, target):
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


def soft_margin_triplet(d_pos, d_neg, alpha=10.0):
    """log(1 + exp(alpha * (d_pos - d_neg))), evaluated without overflow."""
    if isinstance(d_pos, torch.Tensor) or isinstance(d_neg, torch.Tensor):
        z = alpha * (torch.as_tensor(d_pos) - torch.as_tensor(d_neg))
        return torch.logaddexp(torch.zeros_like(z), z)
    z = alpha * (d_pos - d_neg)
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


@dataclass
class TripletBatch:
    """Parallel anchor/positive/negative descriptor rows.

    ``index`` holds one ``(anchor_view, anchor, positive, negative)`` tuple per
    row, where ``anchor_view`` is ``"street"`` or ``"satellite"`` and the
    integers index the input lists.
    """

    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    index: list = field(default_factory=list)
    losses: torch.Tensor = None

    def __len__(self):
        return len(self.index)

    def evaluate(self, alpha=10.0):
        self.losses = soft_margin_triplet(
            distance(self.anchor, self.positive), distance(self.anchor, self.negative), alpha
        )
        return self

    def select(self, rows):
        rows = list(rows)
        idx = torch.as_tensor(rows, dtype=torch.long)
        return TripletBatch(
            self.anchor[idx], self.positive[idx], self.negative[idx],
            [self.index[r] for r in rows],
            None if self.losses is None else self.losses[idx],
        )


def exhaustive_triplet_indices(batch_size):
    """The 2B(B-1) index tuples, street-anchored first, each block row-major."""
    if batch_size < 2:
        raise ValueError(f"need at least 2 pairs to form negatives, got {batch_size}")
    pairs = [(i, j) for i in range(batch_size) for j in range(batch_size) if i != j]
    return [("street", i, i, j) for i, j in pairs] + [("satellite", i, i, j) for i, j in pairs]


def build_exhaustive_triplets(street_descs, sat_descs):
    street = torch.as_tensor(street_descs) if not isinstance(street_descs, torch.Tensor) else street_descs
    sat = torch.as_tensor(sat_descs) if not isinstance(sat_descs, torch.Tensor) else sat_descs
    if len(street) != len(sat):
        raise ValueError(f"{len(street)} street descriptors but {len(sat)} satellite descriptors")
    index = exhaustive_triplet_indices(len(street))
    half = len(index) // 2
    a = torch.as_tensor([t[1] for t in index])
    n = torch.as_tensor([t[3] for t in index])
    anchor = torch.cat([street[a[:half]], sat[a[half:]]])
    positive = torch.cat([sat[a[:half]], street[a[half:]]])
    negative = torch.cat([sat[n[:half]], street[n[half:]]])
    return TripletBatch(anchor, positive, negative, index)


def hard_negative_rows(losses, keep_fraction):
    """Row indices of the ceil(keep_fraction * N) largest losses, in original order.

    Ties are resolved in favour of the lower index.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    losses = torch.as_tensor(losses).detach()
    n_keep = math.ceil(keep_fraction * len(losses))
    order = torch.sort(-losses, stable=True).indices[:n_keep]
    return torch.sort(order).values


def hard_negative_filter(batch: TripletBatch, keep_fraction):
    if batch.losses is None:
        raise ValueError("evaluate the triplet losses before filtering")
    if keep_fraction == 1:
        return batch
    return batch.select(hard_negative_rows(batch.losses, keep_fraction).tolist())


def triplet_losses(street_desc, sat_desc, alpha=10.0):
    """Per-triplet losses in :func:`exhaustive_triplet_indices` order, from one distance matrix."""
    b = len(street_desc)
    if b < 2:
        raise ValueError(f"need at least 2 pairs to form negatives, got {b}")
    d = ((street_desc[:, None, :] - sat_desc[None, :, :]) ** 2).sum(-1)  # street i vs sat j
    pos = torch.diagonal(d)
    off = ~torch.eye(b, dtype=torch.bool, device=d.device)
    street_anchor = soft_margin_triplet(pos[:, None].expand(b, b)[off], d[off], alpha)
    # satellite i anchored: negatives are street j, i.e. d[j, i]
    sat_anchor = soft_margin_triplet(pos[:, None].expand(b, b)[off], d.t()[off], alpha)
    return torch.cat([street_anchor, sat_anchor])


def ranking_loss(street_desc, sat_desc, alpha=10.0, keep_fraction=1.0):
    """Mean soft-margin loss over the exhaustive in-batch triplets.

    Returns ``(loss, n_triplets_used)``; with ``keep_fraction < 1`` only the
    hardest triplets enter the mean.
    """
    losses = triplet_losses(street_desc, sat_desc, alpha)
    if keep_fraction < 1:
        losses = losses[hard_negative_rows(losses, keep_fraction)]
    return losses.mean(), len(losses)


def composite_loss(cgan, l1, ret, weights: LossWeights):
    """Weighted sum of the three objectives plus the unweighted breakdown."""
    total = weights.lambda_cgan * cgan + weights.lambda_l1 * l1 + weights.lambda_ret * ret
    breakdown = {"cgan": float(cgan.detach() if isinstance(cgan, torch.Tensor) else cgan),
                 "l1": float(l1.detach() if isinstance(l1, torch.Tensor) else l1),
                 "ret": float(ret.detach() if isinstance(ret, torch.Tensor) else ret)}
    return total, breakdown

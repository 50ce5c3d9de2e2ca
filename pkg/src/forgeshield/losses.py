"""Loss functions and feature-distribution divergences.

All functions accept torch tensors and return scalar tensors so they can sit
on the autograd path; tests compare their float values against brute-force
oracles.
"""

from __future__ import annotations

import torch
from torch import Tensor

KL_STABILIZER = 1e-8
BCE_EPS = 1e-7
DICE_SMOOTH = 1e-6


def channel_softmax(features: Tensor) -> Tensor:
    """Normalize a (c, h, w) feature layer into per-channel spatial distributions.

    Each channel is exponentiated and divided by its spatial sum, so every
    channel sums to 1 over its h*w positions. Accepts a leading batch
    dimension as well: (..., c, h, w).
    """
    if features.dim() < 3:
        raise ValueError(f"expected (c, h, w) features, got {tuple(features.shape)}")
    flat = features.flatten(start_dim=-2)
    # subtract the per-channel max for numerical stability
    flat = flat - flat.max(dim=-1, keepdim=True).values
    out = torch.softmax(flat, dim=-1)
    return out.reshape(features.shape)


def kl(m: Tensor, q: Tensor, alpha: float = KL_STABILIZER) -> Tensor:
    """Stabilized Kullback-Leibler divergence between distribution tensors.

    Returns mean(m * log((m + alpha) / (q + alpha))) over all N elements;
    the small alpha keeps the ratio finite when either side has zeros.
    """
    if m.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(m.shape)} vs {tuple(q.shape)}")
    return (m * torch.log((m + alpha) / (q + alpha))).mean()


def channel_kl(d_opt: Tensor, d_ref: Tensor, alpha: float = KL_STABILIZER) -> Tensor:
    """Mean per-channel KL between two channel-normalized (c, h, w) tensors.

    ``d_opt`` is the distribution being optimized (first KL argument) and
    ``d_ref`` the target. Equals the average over channels of
    ``kl(d_opt[j], d_ref[j])``.
    """
    if d_opt.shape != d_ref.shape:
        raise ValueError(f"shape mismatch: {tuple(d_opt.shape)} vs {tuple(d_ref.shape)}")
    ratio = torch.log((d_opt + alpha) / (d_ref + alpha))
    per_channel = (d_opt * ratio).flatten(start_dim=-2).mean(dim=-1)
    # averages over channels, and over the batch dimension when present
    return per_channel.mean()


def feature_alignment_loss(
    layers_opt: list[Tensor], layers_ref: list[Tensor], alpha: float = KL_STABILIZER
) -> Tensor:
    """Average channel-wise KL across layer pairs, after channel softmax.

    ``layers_opt`` are features of the defended image (optimized side) and
    ``layers_ref`` features of the reference image, in matching tap order.
    """
    if len(layers_opt) != len(layers_ref):
        raise ValueError(
            f"layer count mismatch: {len(layers_opt)} vs {len(layers_ref)}"
        )
    if not layers_opt:
        raise ValueError("need at least one feature layer")
    total = None
    for f_opt, f_ref in zip(layers_opt, layers_ref):
        term = channel_kl(channel_softmax(f_opt), channel_softmax(f_ref), alpha)
        total = term if total is None else total + term
    return total / len(layers_opt)


def bce_loss(p: Tensor, m: Tensor) -> Tensor:
    """Binary cross-entropy between a probability map and a target mask."""
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(m.shape)}")
    pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    mf = m.to(pc.dtype)
    return -(mf * torch.log(pc) + (1.0 - mf) * torch.log(1.0 - pc)).mean()


def dice_loss(p: Tensor, m: Tensor) -> Tensor:
    """One minus the Dice coefficient, with a small smoothing term."""
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(m.shape)}")
    mf = m.to(p.dtype)
    inter = (p * mf).sum()
    denom = (p * p).sum() + (mf * mf).sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def mask_loss(p: Tensor, m: Tensor, lambda_bce: float = 0.3) -> Tensor:
    """Convex combination of BCE and Dice losses, weighted by lambda_bce."""
    if not 0.0 <= lambda_bce <= 1.0:
        raise ValueError(f"lambda_bce must be in [0, 1], got {lambda_bce}")
    return lambda_bce * bce_loss(p, m) + (1.0 - lambda_bce) * dice_loss(p, m)


def dual_mask_loss(
    p_def_orig: Tensor, p_def_adv: Tensor, m_ref: Tensor, lambda_bce: float = 0.3
) -> Tensor:
    """Mask loss summed over the defended-original and defended-adversarial
    probability maps, both supervised by the same reference mask."""
    return mask_loss(p_def_orig, m_ref, lambda_bce) + mask_loss(p_def_adv, m_ref, lambda_bce)

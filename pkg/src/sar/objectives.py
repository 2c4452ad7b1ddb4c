"""Restoration, scale, adversarial and dice losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

ALPHA = 1.0
BETA = 10.0
PROB_EPS = 1e-7
DICE_SMOOTH = 1e-5


@dataclass
class LossBundle:
    l_res: float
    l_scale: float
    l_adv_d: float
    l_adv_e: float
    combined: float
    alpha: float = ALPHA
    beta: float = BETA


def restoration_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample voxel-mean squared error, averaged over the batch."""
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: recon {tuple(recon.shape)} vs target {tuple(target.shape)}")
    sq = (recon - target) ** 2
    if sq.dim() <= 1:
        return sq.mean()
    return sq.flatten(1).mean(dim=1).mean()


def scale_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"scale labels must lie in [0, {logits.shape[-1] - 1}], got {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def adversarial_losses(d_ct: torch.Tensor, d_mri: torch.Tensor, eps: float = PROB_EPS):
    """Return ``(l_adv_d, l_adv_e)`` from discriminator outputs P(CT).

    With J = mean log d_ct + mean log(1 - d_mri), the discriminator
    minimizes ``l_adv_d = -J`` and the encoder minimizes ``l_adv_e = J``.
    """
    if d_ct.numel() == 0 or d_mri.numel() == 0:
        raise ValueError("adversarial loss needs at least one CT and one MRI sample")
    d_ct = d_ct.clamp(eps, 1 - eps)
    d_mri = d_mri.clamp(eps, 1 - eps)
    j = torch.log(d_ct).mean() + torch.log1p(-d_mri).mean()
    return -j, j


def combined_objective(l_res, l_scale, l_adv_e, alpha: float = ALPHA, beta: float = BETA):
    return l_adv_e + alpha * l_scale + beta * l_res


def dice_loss(scores: torch.Tensor, target: torch.Tensor, foreground_classes, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """One minus the mean soft dice over ``foreground_classes``.

    ``scores`` has the class axis first (``C x ...``) or second
    (``B x C x ...``) and ``target`` is the matching integer label map.
    """
    classes = sorted(set(int(c) for c in foreground_classes))
    if not classes:
        raise ValueError("foreground_classes must not be empty")
    target = torch.as_tensor(target)
    if scores.dim() == target.dim() + 1 and tuple(scores.shape[1:]) == tuple(target.shape):
        class_dim = 0
    elif scores.dim() == target.dim() + 1 and scores.shape[0] == target.shape[0] and scores.shape[2:] == target.shape[1:]:
        class_dim = 1
    else:
        raise ValueError(f"scores {tuple(scores.shape)} do not match labels {tuple(target.shape)}")
    dices = []
    for c in classes:
        p = scores.select(class_dim, c)
        g = (target == c).to(scores.dtype)
        inter = (p * g).sum()
        dices.append((2 * inter + smooth) / (p.sum() + g.sum() + smooth))
    return 1 - torch.stack(dices).mean()

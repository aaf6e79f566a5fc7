"""Training objectives for deblurring, reblurring and the meta stages.

``||.||`` is a mean absolute error and ``||.||^2`` a mean squared error.
Discriminator patch maps are averaged to one scalar per batch before the
LSGAN penalty, so for scalar scores the squared norm is a plain square.
Image batches are N x C x H x W tensors in the signed range.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .errors import InvalidInputError
from .imaging import LUMA_WEIGHTS
from .networks import discriminator_apply

Params = Mapping[str, torch.Tensor]


@dataclass
class AdvScores:
    real_score: torch.Tensor | float
    fake_score: torch.Tensor | float


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def luma(x: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of a signed-range RGB batch, returned in unit range (N x 1 x H x W)."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise InvalidInputError(f"luma needs an N x 3 x H x W batch, got {tuple(x.shape)}")
    u = (x + 1.0) / 2.0
    w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (u * w).sum(dim=1, keepdim=True)


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def luma_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (luma(a) - luma(b)).abs().mean()


# ---------------------------------------------------------------------------
# deblurring (initial stage)


def deblur_adv_scores(disc: Params, S: torch.Tensor, D: torch.Tensor) -> AdvScores:
    if S.shape[0] != D.shape[0]:
        raise InvalidInputError("real and fake batches differ in size")
    return AdvScores(discriminator_apply(disc, S).mean(), discriminator_apply(disc, D).mean())


def lsgan_disc_loss(scores: AdvScores):
    return 0.5 * ((scores.real_score - 1.0) ** 2 + scores.fake_score ** 2)


def lsgan_gen_loss(content, scores: AdvScores):
    return content + 0.5 * (scores.fake_score - 1.0) ** 2


deblur_disc_loss = lsgan_disc_loss
deblur_gen_loss = lsgan_gen_loss
reblur_disc_loss = lsgan_disc_loss
reblur_gen_loss = lsgan_gen_loss


# ---------------------------------------------------------------------------
# reblurring (pseudo-blur synthesizer)


def reblur_content_loss(B: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    return luma_l1(B, R)


def _mask_batch(mask, x: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(mask, dtype=x.dtype, device=x.device)
    if m.ndim == 2:
        m = m.view(1, 1, *m.shape)
    elif m.ndim == 3:
        m = m.unsqueeze(1)
    if m.shape[-2:] != x.shape[-2:] or m.shape[0] not in (1, x.shape[0]):
        raise InvalidInputError(f"mask {tuple(m.shape)} does not match batch {tuple(x.shape)}")
    return m


def reblur_adv_score(disc_glo: Params, disc_u: Params | None, disc_v: Params | None,
                     mask_u, x: torch.Tensor) -> torch.Tensor:
    """Three-way mean ``(1/3b) sum Pi_glo(x) + Pi_u(Mu*x) + Pi_v(Mv*x)``.

    With ``mask_u=None`` only the global discriminator is used (the
    scene-only training phases).
    """
    glo = discriminator_apply(disc_glo, x).mean(dim=(1, 2, 3))
    if mask_u is None:
        return glo.mean()
    mu = _mask_batch(mask_u, x)
    mv = 1.0 - mu
    body = discriminator_apply(disc_u, mu * x).mean(dim=(1, 2, 3))
    scene = discriminator_apply(disc_v, mv * x).mean(dim=(1, 2, 3))
    return (glo + body + scene).sum() / (3 * x.shape[0])


def reblur_adv_scores(disc_glo: Params, disc_u: Params | None, disc_v: Params | None,
                      mask_u, B: torch.Tensor, R: torch.Tensor) -> AdvScores:
    _same_shape(B, R)
    return AdvScores(reblur_adv_score(disc_glo, disc_u, disc_v, mask_u, B),
                     reblur_adv_score(disc_glo, disc_u, disc_v, mask_u, R))


# ---------------------------------------------------------------------------
# meta stages


def meta_task_loss(S_star: torch.Tensor, D_in: torch.Tensor, D_out: torch.Tensor) -> torch.Tensor:
    """RGB L1 on the first deblur plus luma L1 on the deblur of the reblur."""
    _same_shape(S_star, D_in)
    _same_shape(S_star, D_out)
    return l1_loss(S_star, D_in) + luma_l1(S_star, D_out)


def meta_test_loss(D_star: torch.Tensor, D_in: torch.Tensor, D_out: torch.Tensor) -> torch.Tensor:
    """Self-supervised form: the initial deblur ``D_star`` stands in for the sharp target."""
    return meta_task_loss(D_star, D_in, D_out)

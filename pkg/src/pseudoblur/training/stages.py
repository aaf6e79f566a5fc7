"""The progressive training stages and test-time self-adaptation.

Every stage draws its randomness for step ``k`` from ``(seed, stage, k)``
alone, so a run resumed from a checkpoint at step ``k`` replays the exact
trace of an uninterrupted run.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .. import losses as L
from ..errors import ConfigError, InvalidInputError, NumericError
from ..imaging import ImageTensor, psnr, ssim
from ..networks import (DiscriminatorSpec, GeneratorSpec, ParamSet, batch_to_image,
                        generator_apply, image_to_batch, init_params)
from ..priors import PriorConfig, human_prior
from ..seeding import derive_seed
from ..synthesis import PairDataset, downsample_batch, random_patch_batch, sample_task_batch
from . import optim
from .checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint
from .optim import OptimState, clip_by_global_norm
from .report import StageReport

log = logging.getLogger(__name__)

DEFAULT_CLIP = 10.0


def _leaf(ps: ParamSet, stage_tag: str | None = None) -> ParamSet:
    return ps.replace({k: v.detach().clone().requires_grad_(True) for k, v in ps.items()}, stage_tag)


def _frozen(ps: ParamSet) -> ParamSet:
    return ps.replace({k: v.detach() for k, v in ps.items()})


def _grads(loss: torch.Tensor, ps: ParamSet, create_graph: bool = False) -> dict[str, torch.Tensor]:
    gs = torch.autograd.grad(loss, ps.tensors(), allow_unused=True, create_graph=create_graph,
                             retain_graph=create_graph)
    return {k: (g if g is not None else torch.zeros_like(v)) for (k, v), g in zip(ps.items(), gs)}


def descend(ps: ParamSet, state: OptimState, grads: Mapping[str, torch.Tensor],
            clip: float | None) -> tuple[ParamSet, OptimState]:
    """Clipped optimizer update returning fresh leaf parameters."""
    grads = clip_by_global_norm({k: g.detach() for k, g in grads.items()}, clip)
    with torch.no_grad():
        new, state = optim.step({k: v.detach() for k, v in ps.items()}, grads, state)
    return _leaf(ps.replace(new)), state


def _finite(step: int, **values: torch.Tensor) -> dict[str, float]:
    out = {k: float(v.detach()) for k, v in values.items()}
    bad = [k for k, v in out.items() if not math.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite loss {bad} at step {step}: {out}")
    return out


class _Stage:
    """Shared step loop, seeding and checkpointing."""
    name = "stage"
    stage_tag = "theta_T"

    def __init__(self, seed: int, clip: float | None):
        self.seed = int(seed)
        self.clip = clip
        self.step = 0

    def step_rng(self) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, self.name, self.step))

    def train_step(self) -> dict[str, float]:
        raise NotImplementedError

    def run(self, steps: int, report: StageReport | None = None) -> StageReport:
        report = report or StageReport(self.name, self.seed)
        for _ in range(int(steps)):
            losses = self.train_step()
            report.log(self.step, **losses)
            self.step += 1
        return report

    # roles written to the checkpoint: role -> (ParamSet, OptimState | None)
    def _roles(self) -> dict:
        raise NotImplementedError

    def _restore(self, ckpt: Checkpoint) -> None:
        roles = self._roles()
        for role, (ps, opt) in roles.items():
            if role not in ckpt.nets:
                raise ConfigError(f"checkpoint lacks role {role!r}")
            check_compatible(ckpt.nets[role], ps)
        for role in roles:
            self._set_role(role, _leaf(ckpt.nets[role]), ckpt.optims.get(role))
        self.step = ckpt.step

    def _set_role(self, role: str, ps: ParamSet, opt: OptimState | None) -> None:
        raise NotImplementedError

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        roles = self._roles()
        main, main_opt = roles.pop("main")
        return save_checkpoint(path, _frozen(main), main_opt, self.stage_tag, self.seed,
                               step=self.step, aux={k: (_frozen(p), o) for k, (p, o) in roles.items()},
                               extra=extra)

    def resume(self, path: str | Path) -> "_Stage":
        ckpt = load_checkpoint(path)
        if ckpt.stage_tag != self.stage_tag:
            raise ConfigError(f"checkpoint stage {ckpt.stage_tag!r} does not match {self.stage_tag!r}")
        self._restore(ckpt)
        return self


def _sample_batch(ds: PairDataset, rng: np.random.Generator, batch_size: int, patch: int,
                  return_offsets: bool = False):
    idx = rng.choice(len(ds), size=batch_size, replace=len(ds) < batch_size)
    out = random_patch_batch(ds, idx, patch, rng, return_offsets=return_offsets)
    return (idx, *out)


# ---------------------------------------------------------------------------
# stage 1: initial deblurring with a global discriminator


class InitialDeblurTrainer(_Stage):
    name = "initial_deblur"
    stage_tag = "theta_T"

    def __init__(self, ds: PairDataset, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                 seed: int, batch_size: int = 4, patch: int | None = None, lr: float = 1e-4,
                 clip: float | None = DEFAULT_CLIP, theta: ParamSet | None = None):
        super().__init__(seed, clip)
        if len(ds) == 0:
            raise InvalidInputError("empty dataset")
        self.ds = ds
        self.batch_size = batch_size
        self.patch = patch or min(ds.image_size)
        self.theta = _leaf(theta if theta is not None else init_params(gen_spec, derive_seed(seed, "theta")))
        self.disc = _leaf(init_params(disc_spec, derive_seed(seed, "disc_deblur")))
        self.opt_g = OptimState.adam(lr, self.theta.as_dict())
        self.opt_d = OptimState.adam(lr, self.disc.as_dict())

    def train_step(self) -> dict[str, float]:
        rng = self.step_rng()
        _, B, S = _sample_batch(self.ds, rng, self.batch_size, self.patch)
        with torch.no_grad():
            D = generator_apply(self.theta, B)
        loss_d = L.deblur_disc_loss(L.deblur_adv_scores(self.disc, S, D))
        self.disc, self.opt_d = descend(self.disc, self.opt_d, _grads(loss_d, self.disc), self.clip)

        D = generator_apply(self.theta, B)
        l1 = L.l1_loss(S, D)
        fake = L.deblur_adv_scores(self.disc, S, D).fake_score
        loss_g = L.deblur_gen_loss(l1, L.AdvScores(0.0, fake))
        out = _finite(self.step, disc=loss_d, gen=loss_g, l1=l1)
        self.theta, self.opt_g = descend(self.theta, self.opt_g, _grads(loss_g, self.theta), self.clip)
        return out

    def _roles(self):
        return {"main": (self.theta, self.opt_g), "disc": (self.disc, self.opt_d)}

    def _set_role(self, role, ps, opt):
        if role == "main":
            self.theta, self.opt_g = ps, opt
        else:
            self.disc, self.opt_d = ps, opt

    def result(self) -> ParamSet:
        return self.theta.detached("theta_T")


def train_initial_deblur(ds: PairDataset, steps: int, seed: int, gen_spec: GeneratorSpec,
                         disc_spec: DiscriminatorSpec, **kw) -> tuple[ParamSet, StageReport]:
    trainer = InitialDeblurTrainer(ds, gen_spec, disc_spec, seed, **kw)
    report = trainer.run(steps).finish()
    return trainer.result(), report


# ---------------------------------------------------------------------------
# stage 2: pseudo-blur synthesizer


def phase_budget(total: int) -> tuple[int, int, int]:
    """Split a step budget 1:2:2 across the three reblurrer phases."""
    first = total // 5
    second = (total - first) // 2
    return first, second, total - first - second


class ReblurTrainer(_Stage):
    """Trains the reblurrer against a frozen deblurrer.

    Phase 1 feeds sharp images with the global discriminator only, phase 2
    feeds deblurred images, phase 3 feeds sharp images and adds the body and
    scene discriminators on prior-masked inputs.
    """
    name = "reblur"
    stage_tag = "omega_T"

    def __init__(self, ds: PairDataset, theta_T: ParamSet, gen_spec: GeneratorSpec,
                 disc_spec: DiscriminatorSpec, seed: int, phase_steps: tuple[int, int, int],
                 batch_size: int = 4, patch: int | None = None, lr: float = 1e-4,
                 clip: float | None = DEFAULT_CLIP, prior: PriorConfig = PriorConfig(),
                 phase3_ds: PairDataset | None = None):
        super().__init__(seed, clip)
        self.ds = ds
        self.ds3 = phase3_ds if phase3_ds is not None else ds
        self.phase_steps = tuple(int(s) for s in phase_steps)
        if self.phase_steps[2] > 0 and any(k is None for k in self.ds3.keypoints):
            raise ConfigError("phase 3 needs keypoints for every pair to build prior maps")
        self.theta = _frozen(theta_T)
        self.batch_size = batch_size
        self.patch = patch or min(ds.image_size)
        self.prior = prior
        self.omega = _leaf(init_params(gen_spec, derive_seed(seed, "omega"), "omega_0"), "omega_0")
        self.discs = {r: _leaf(init_params(disc_spec, derive_seed(seed, f"disc_{r}")))
                      for r in ("glo", "body", "scene")}
        self.opt_g = OptimState.adam(lr, self.omega.as_dict())
        self.opt_d = {r: OptimState.adam(lr, d.as_dict()) for r, d in self.discs.items()}

    def phase(self, step: int | None = None) -> int:
        step = self.step if step is None else step
        s1, s2, _ = self.phase_steps
        return 1 if step < s1 else 2 if step < s1 + s2 else 3

    def _masks(self, X, R, idx, offsets):
        masks = []
        for n, (i, (r, c)) in enumerate(zip(idx, offsets)):
            kps = self.ds3.keypoints[i].translate(-r, -c)
            mu, _ = human_prior(batch_to_image(X, n), batch_to_image(R, n), kps, self.prior)
            masks.append(mu.data)
        return torch.as_tensor(np.stack(masks), dtype=X.dtype)

    def train_step(self) -> dict[str, float]:
        rng = self.step_rng()
        phase = self.phase()
        ds = self.ds3 if phase == 3 else self.ds
        idx, B, S, offsets = _sample_batch(ds, rng, self.batch_size, self.patch, return_offsets=True)
        if phase == 2:
            with torch.no_grad():
                X = generator_apply(self.theta, B)
        else:
            X = S
        with torch.no_grad():
            R = generator_apply(self.omega, X)
        mask = self._masks(X, R, idx, offsets) if phase == 3 else None
        body = self.discs["body"] if phase == 3 else None
        scene = self.discs["scene"] if phase == 3 else None

        loss_d = L.reblur_disc_loss(L.reblur_adv_scores(self.discs["glo"], body, scene, mask, B, R))
        used = ["glo", "body", "scene"] if phase == 3 else ["glo"]
        flat = [t for r in used for t in self.discs[r].tensors()]
        gs = torch.autograd.grad(loss_d, flat)
        k = 0
        for r in used:
            d = self.discs[r]
            g = dict(zip(d.names(), gs[k:k + len(d)]))
            k += len(d)
            self.discs[r], self.opt_d[r] = descend(d, self.opt_d[r], g, self.clip)

        body = self.discs["body"] if phase == 3 else None
        scene = self.discs["scene"] if phase == 3 else None
        R = generator_apply(self.omega, X)
        content = L.reblur_content_loss(B, R)
        fake = L.reblur_adv_score(self.discs["glo"], body, scene, mask, R)
        loss_g = L.reblur_gen_loss(content, L.AdvScores(0.0, fake))
        out = _finite(self.step, disc=loss_d, gen=loss_g, content=content)
        out["phase"] = float(phase)
        self.omega, self.opt_g = descend(self.omega, self.opt_g, _grads(loss_g, self.omega), self.clip)
        return out

    def _roles(self):
        roles = {"main": (self.omega, self.opt_g), "theta": (self.theta, None)}
        roles.update({f"disc_{r}": (d, self.opt_d[r]) for r, d in self.discs.items()})
        return roles

    def _set_role(self, role, ps, opt):
        if role == "main":
            self.omega, self.opt_g = ps, opt
        elif role == "theta":
            self.theta = _frozen(ps)
        else:
            r = role[len("disc_"):]
            self.discs[r], self.opt_d[r] = ps, opt

    def result(self) -> ParamSet:
        return self.omega.detached("omega_T")


def train_reblurrer(ds: PairDataset, theta_T: ParamSet, phase_steps: tuple[int, int, int], seed: int,
                    gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, **kw) -> tuple[ParamSet, StageReport]:
    trainer = ReblurTrainer(ds, theta_T, gen_spec, disc_spec, seed, phase_steps, **kw)
    report = trainer.run(sum(phase_steps)).finish()
    return trainer.result(), report


# ---------------------------------------------------------------------------
# stage 3: meta-transfer training


def bdrd(theta, omega, B: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Deblur, reblur, deblur: returns (D_in, D_out)."""
    D_in = generator_apply(theta, B)
    R = generator_apply(omega, D_in)
    return D_in, generator_apply(theta, R)


@dataclass
class OuterGradient:
    grads: dict[str, torch.Tensor]
    train_losses: list[float] = field(default_factory=list)
    test_losses: list[float] = field(default_factory=list)
    skipped: int = 0


def meta_outer_gradient(theta: ParamSet, omega: ParamSet, tasks, alpha: float,
                        second_order: bool = False, clip: float | None = None) -> OuterGradient:
    """Gradient of ``sum_i L_te(theta_i)`` with ``theta_i = theta - alpha * grad L_tr(theta)``.

    ``tasks`` is a :class:`TaskBatch`. Both task images are 2x downsampled
    before the deblur-reblur-deblur sequence. First-order mode treats
    ``theta_i`` as a constant of ``theta`` (gradient evaluated at ``theta_i``).
    """
    omega = _frozen(omega)
    theta = _leaf(theta)
    total = {k: torch.zeros_like(v) for k, v in theta.items()}
    out = OuterGradient(total)
    for (B_tr, S_tr), (B_te, S_te) in zip(tasks.train, tasks.test):
        B_s, S_s = downsample_batch(B_tr), downsample_batch(S_tr)
        D_in, D_out = bdrd(theta, omega, B_s)
        loss_tr = L.meta_task_loss(S_s, D_in, D_out)
        if not torch.isfinite(loss_tr):
            log.warning("skipping task with non-finite inner loss %s", float(loss_tr))
            out.skipped += 1
            continue
        g = _grads(loss_tr, theta, create_graph=second_order)
        if clip is not None:
            g = clip_by_global_norm(g, clip)
        if second_order:
            theta_i = {k: v - alpha * g[k] for k, v in theta.items()}
        else:
            theta_i = {k: (v - alpha * g[k]).detach().requires_grad_(True) for k, v in theta.items()}

        B_s, S_s = downsample_batch(B_te), downsample_batch(S_te)
        D_in, D_out = bdrd(theta_i, omega, B_s)
        loss_te = L.meta_task_loss(S_s, D_in, D_out)
        if not torch.isfinite(loss_te):
            raise NumericError(f"non-finite task-test loss {float(loss_te)}")
        wrt = theta.tensors() if second_order else list(theta_i.values())
        gs = torch.autograd.grad(loss_te, wrt, allow_unused=True)
        for k, gk in zip(theta.names(), gs):
            if gk is not None:
                total[k] = total[k] + gk.detach()
        out.train_losses.append(float(loss_tr.detach()))
        out.test_losses.append(float(loss_te.detach()))
    return out


class MetaTransferTrainer(_Stage):
    name = "meta_transfer"
    stage_tag = "theta_M"

    def __init__(self, ds: PairDataset, theta_T: ParamSet, omega_T: ParamSet, seed: int,
                 n_tasks: int = 4, task_size: int = 1, patch: int | None = None,
                 alpha: float = 1e-2, beta: float = 1e-4, clip: float | None = DEFAULT_CLIP,
                 second_order: bool = False):
        super().__init__(seed, clip)
        self.ds = ds
        self.theta = _leaf(theta_T, "theta_M")
        self.omega = _frozen(omega_T)
        self.n_tasks, self.task_size = n_tasks, task_size
        self.patch = patch or min(ds.image_size)
        self.alpha = alpha
        self.second_order = second_order
        self.opt = OptimState.adam(beta, self.theta.as_dict())

    def sample_tasks(self):
        return sample_task_batch(self.ds, derive_seed(self.seed, self.name, self.step),
                                 self.n_tasks, self.task_size, self.patch, self.theta.tensors()[0].dtype)

    def train_step(self) -> dict[str, float]:
        og = meta_outer_gradient(self.theta, self.omega, self.sample_tasks(), self.alpha,
                                 self.second_order, self.clip)
        if not og.test_losses:
            raise NumericError(f"every task was skipped at outer step {self.step}")
        out = _finite(self.step, task_train=torch.tensor(np.mean(og.train_losses)),
                      task_test=torch.tensor(np.sum(og.test_losses)))
        self.theta, self.opt = descend(self.theta, self.opt, og.grads, self.clip)
        return out

    def _roles(self):
        return {"main": (self.theta, self.opt), "omega": (self.omega, None)}

    def _set_role(self, role, ps, opt):
        if role == "main":
            self.theta, self.opt = ps, opt
        else:
            self.omega = _frozen(ps)

    def result(self) -> ParamSet:
        return self.theta.detached("theta_M")


def meta_transfer_train(theta_T: ParamSet, omega_T: ParamSet, ds: PairDataset, outer_steps: int,
                        seed: int, **kw) -> tuple[ParamSet, StageReport]:
    trainer = MetaTransferTrainer(ds, theta_T, omega_T, seed, **kw)
    report = trainer.run(outer_steps).finish()
    return trainer.result(), report


# ---------------------------------------------------------------------------
# naive fine-tuning with the reblurrer in training only


class FinetuneTrainer(_Stage):
    """Fine-tunes the deblurrer on B and on reblurred R with a global discriminator.

    The generator loss adds the luma L1 between S and the deblur of the
    pseudo-blur ``R = omega(theta(B))`` to the initial-stage objective.
    """
    name = "finetune"
    stage_tag = "theta_F"

    def __init__(self, ds: PairDataset, theta_T: ParamSet, omega_T: ParamSet, seed: int,
                 disc: ParamSet | None = None, disc_spec: DiscriminatorSpec | None = None,
                 batch_size: int = 4, patch: int | None = None, lr: float = 1e-4,
                 clip: float | None = DEFAULT_CLIP):
        super().__init__(seed, clip)
        self.ds = ds
        self.batch_size = batch_size
        self.patch = patch or min(ds.image_size)
        self.theta = _leaf(theta_T, "theta_F")
        self.omega = _frozen(omega_T)
        if disc is None:
            if disc_spec is None:
                raise ConfigError("fine-tuning needs a discriminator or a discriminator spec")
            disc = init_params(disc_spec, derive_seed(seed, "disc_finetune"))
        self.disc = _leaf(disc)
        self.opt_g = OptimState.adam(lr, self.theta.as_dict())
        self.opt_d = OptimState.adam(lr, self.disc.as_dict())

    def train_step(self) -> dict[str, float]:
        rng = self.step_rng()
        _, B, S = _sample_batch(self.ds, rng, self.batch_size, self.patch)
        with torch.no_grad():
            D = generator_apply(self.theta, B)
        loss_d = L.deblur_disc_loss(L.deblur_adv_scores(self.disc, S, D))
        self.disc, self.opt_d = descend(self.disc, self.opt_d, _grads(loss_d, self.disc), self.clip)

        D_in, D_out = bdrd(self.theta, self.omega, B)
        content = L.meta_task_loss(S, D_in, D_out)
        fake = L.deblur_adv_scores(self.disc, S, D_in).fake_score
        loss_g = L.deblur_gen_loss(content, L.AdvScores(0.0, fake))
        out = _finite(self.step, disc=loss_d, gen=loss_g, content=content)
        self.theta, self.opt_g = descend(self.theta, self.opt_g, _grads(loss_g, self.theta), self.clip)
        return out

    def _roles(self):
        return {"main": (self.theta, self.opt_g), "omega": (self.omega, None), "disc": (self.disc, self.opt_d)}

    def _set_role(self, role, ps, opt):
        if role == "main":
            self.theta, self.opt_g = ps, opt
        elif role == "omega":
            self.omega = _frozen(ps)
        else:
            self.disc, self.opt_d = ps, opt

    def result(self) -> ParamSet:
        return self.theta.detached("theta_F")


# ---------------------------------------------------------------------------
# stage 4: meta-testing (test-time self-adaptation)


@dataclass
class AdaptTrace:
    """Self-supervised loss before each update and after the last one (``n + 1`` values)."""
    losses: list[float]
    padding: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.losses)

    def __getitem__(self, i):
        return self.losses[i]


def _pad_to(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (ph, pw)


def meta_test_adapt(theta_M: ParamSet, omega_T: ParamSet, B: ImageTensor | torch.Tensor, n: int,
                    alpha: float = 1e-2, clip: float | None = DEFAULT_CLIP
                    ) -> tuple[ImageTensor | torch.Tensor, ParamSet, AdaptTrace]:
    """Self-adapt the deblurrer to one blurry input with ``n`` gradient steps.

    The initial deblur ``D`` and the input are downsampled 2x; the loss ties
    the deblur of ``B*`` and the deblur of its reblur to ``D*``. Inputs whose
    sides are not multiples of 32 are padded (reflect) and cropped back.
    """
    if n < 0:
        raise InvalidInputError(f"number of adaptation steps must be >= 0, got {n}")
    as_image = isinstance(B, ImageTensor)
    dtype = theta_M.tensors()[0].dtype
    x = image_to_batch(B, dtype) if as_image else B.to(dtype)
    h, w = x.shape[-2:]
    x, pad = _pad_to(x, 32)
    omega = _frozen(omega_T)
    theta = _leaf(theta_M, "theta_k")
    with torch.no_grad():
        D_star = downsample_batch(generator_apply(theta, x))
    B_star = downsample_batch(x)
    sgd = OptimState.sgd(alpha)
    losses = []
    for k in range(n + 1):
        D_in, D_out = bdrd(theta, omega, B_star)
        loss = L.meta_test_loss(D_star, D_in, D_out)
        losses.append(_finite(k, loss=loss)["loss"])
        if k == n:
            break
        theta, sgd = descend(theta, sgd, _grads(loss, theta), clip)
    theta_k = theta.detached("theta_k")
    with torch.no_grad():
        out = generator_apply(theta_k, x)[..., :h, :w]
    trace = AdaptTrace(losses, pad)
    return (batch_to_image(out) if as_image else out), theta_k, trace


# ---------------------------------------------------------------------------
# evaluation


def evaluate(theta: ParamSet, ds: PairDataset, adapt: int = 0, omega: ParamSet | None = None,
             alpha: float = 1e-2, with_ssim: bool = True) -> dict[str, float]:
    """Mean PSNR/SSIM of deblurred held-out pairs, optionally after self-adaptation."""
    ps, ss, base = [], [], []
    for i in range(len(ds)):
        pair = ds.pair(i)
        if adapt > 0:
            if omega is None:
                raise ConfigError("adaptation needs a reblurrer")
            D, _, _ = meta_test_adapt(theta, omega, pair.B, adapt, alpha)
        else:
            with torch.no_grad():
                D = batch_to_image(generator_apply(theta, image_to_batch(pair.B)))
        ps.append(psnr(D, pair.S))
        base.append(psnr(pair.B, pair.S))
        if with_ssim and min(pair.S.shape[:2]) >= 11:
            ss.append(ssim(D, pair.S))
    out = {"psnr": float(np.mean(ps)), "psnr_blurry": float(np.mean(base))}
    if ss:
        out["ssim"] = float(np.mean(ss))
    return out

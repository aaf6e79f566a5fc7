"""Ours-0 / Ours-F / Ours-M(n) comparison on a synthetic dataset.

Ours-0 is the initially trained deblurrer, Ours-F fine-tunes it with the
reblurrer in the loss (no meta-learning, no test-time updates), and Ours-M(n)
is the meta-transfer trained deblurrer after ``n`` test-time updates per image.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from ..config import Config
from ..networks import DISCRIMINATOR_SPECS, GENERATOR_SPECS, ParamSet
from ..priors import PriorConfig
from ..seeding import derive_seed
from ..synthesis import PairDataset, generate_dataset
from .stages import (FinetuneTrainer, InitialDeblurTrainer, MetaTransferTrainer, ReblurTrainer, evaluate,
                     phase_budget)


@dataclass
class AblationResult:
    seed: int
    psnr_blurry: float
    ours_0: float
    ours_f: float
    ours_m: dict[int, float]
    seconds: dict[str, float] = field(default_factory=dict)
    models: dict[str, ParamSet] = field(default_factory=dict, repr=False)
    held_out: PairDataset | None = field(default=None, repr=False)

    def ordered(self, n: int = 1, margin: float = 0.05) -> bool:
        """``M(n) >= F + margin`` and ``F >= 0 + margin``."""
        return self.ours_m[n] - self.ours_f >= margin and self.ours_f - self.ours_0 >= margin

    def line(self) -> str:
        ms = " ".join(f"M({n})={v:.4f}" for n, v in sorted(self.ours_m.items()))
        return (f"seed={self.seed} blurry={self.psnr_blurry:.4f} 0={self.ours_0:.4f} "
                f"F={self.ours_f:.4f} {ms}")


def run_ablation(cfg: Config, seed: int, adapt: tuple[int, ...] = (1,)) -> AblationResult:
    """Train every stage from scratch for one seed and score the held-out split.

    The trained networks and the held-out pairs are kept on the result.
    """
    d, m, t, mt = cfg["data"], cfg["model"], cfg["train"], cfg["meta"]
    gs, dspec = GENERATOR_SPECS[m["spec"]], DISCRIMINATOR_SPECS[m["spec"]]
    clip = t["clip"] or None
    patch = min(t["patch"], d["size"])
    common = dict(batch_size=t["batch_size"], patch=patch, lr=t["lr"], clip=clip)
    prior = PriorConfig(m["edge_threshold"], m["pool_kernel"], m["line_thickness"])
    timings = {}

    t0 = time.perf_counter()
    ds = generate_dataset(d["n_pairs"], derive_seed(seed, "data"), d["size"], d["frames"],
                          d["max_shift"] or None)
    train, held = ds.split(d["holdout"])

    stage1 = InitialDeblurTrainer(train, gs, dspec, seed, **common)
    stage1.run(t["deblur_steps"])
    theta_T = stage1.result()
    timings["deblur"] = time.perf_counter() - t0

    stage2 = ReblurTrainer(train, theta_T, gs, dspec, seed, phase_budget(t["reblur_steps"]),
                           prior=prior, **common)
    stage2.run(t["reblur_steps"])
    omega_T = stage2.result()
    timings["reblur"] = time.perf_counter() - t0 - sum(timings.values())

    fine = FinetuneTrainer(train, theta_T, omega_T, seed, disc=stage1.disc.detached(), **common)
    fine.run(t["finetune_steps"])
    theta_F = fine.result()
    timings["finetune"] = time.perf_counter() - t0 - sum(timings.values())

    meta = MetaTransferTrainer(train, theta_T, omega_T, seed, n_tasks=mt["n_tasks"],
                               task_size=mt["task_size"], patch=patch, alpha=mt["alpha"],
                               beta=mt["beta"], clip=clip, second_order=mt["second_order"])
    meta.run(mt["outer_steps"])
    theta_M = meta.result()
    timings["meta"] = time.perf_counter() - t0 - sum(timings.values())

    base = evaluate(theta_T, held, with_ssim=False)
    ours_f = evaluate(theta_F, held, with_ssim=False)["psnr"]
    ours_m = {n: evaluate(theta_M, held, adapt=n, omega=omega_T, alpha=mt["alpha"], with_ssim=False)["psnr"]
              for n in adapt}
    timings["eval"] = time.perf_counter() - t0 - sum(timings.values())
    models = {"theta_T": theta_T, "omega_T": omega_T, "theta_F": theta_F, "theta_M": theta_M}
    return AblationResult(seed, base["psnr_blurry"], base["psnr"], ours_f, ours_m, timings, models, held)

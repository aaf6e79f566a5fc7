"""``pseudoblur`` command line: data synthesis, training stages, inference, metrics.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or checkpoint
error, 4 numeric failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, describe
from .errors import ConfigError, IncompatibleCheckpointError, InvalidInputError, NumericError
from .imaging import psnr, read_png, ssim, write_png
from .networks import DISCRIMINATOR_SPECS, GENERATOR_SPECS, deblur_forward, init_params, reblur_forward
from .priors import PriorConfig
from .synthesis import build_dataset, load_dataset
from .training import load_checkpoint
from .training import run_ablation
from .training.stages import (FinetuneTrainer, InitialDeblurTrainer, MetaTransferTrainer, ReblurTrainer,
                              meta_test_adapt, phase_budget)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("pseudoblur")


class UsageError(Exception):
    pass


def _specs(cfg: Config):
    name = cfg.get("model", "spec")
    if name not in GENERATOR_SPECS:
        raise ConfigError(f"unknown model spec {name!r}; choose from {sorted(GENERATOR_SPECS)}")
    return GENERATOR_SPECS[name], DISCRIMINATOR_SPECS[name]


def _common(cfg: Config, ds) -> dict:
    t = cfg["train"]
    return dict(batch_size=t["batch_size"], patch=min(t["patch"], *ds.image_size), lr=t["lr"],
                clip=t["clip"] or None)


def _load_params(path, role="main", expect=("generator",)):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if role not in ckpt.nets:
        raise IncompatibleCheckpointError(f"{path} has no {role!r} network")
    ps = ckpt.nets[role]
    if ps.arch.split("/")[0] not in expect:
        raise IncompatibleCheckpointError(f"{path} holds a {ps.arch} network, expected {'/'.join(expect)}")
    spec = GENERATOR_SPECS.get(ps.arch.split("/")[-1])
    if spec is not None:
        from .training.checkpoint import check_compatible
        check_compatible(ps, init_params(spec, 0))
    return ckpt, ps


def _run_stage(args, trainer, steps: int, cfg: Config) -> int:
    if args.resume:
        trainer.resume(args.resume)
        log.info("resumed %s at step %d", trainer.name, trainer.step)
    report = trainer.run(max(0, steps - trainer.step))
    report.config = cfg.flat()
    report.finish()
    out = Path(args.out)
    trainer.save(out, extra={"config": cfg.flat()})
    report.save(out.with_suffix(out.suffix + ".report"))
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args, cfg: Config) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    d = cfg["data"]
    manifest = build_dataset(args.n, args.seed, args.out, size=args.size or d["size"],
                             n_frames=d["frames"], max_shift=d["max_shift"] or None)
    print(manifest)
    return EXIT_OK


def cmd_train_deblur(args, cfg: Config) -> int:
    ds = load_dataset(args.data)
    gs, dspec = _specs(cfg)
    trainer = InitialDeblurTrainer(ds, gs, dspec, cfg.get("train", "seed"), **_common(cfg, ds))
    return _run_stage(args, trainer, cfg.get("train", "deblur_steps"), cfg)


def cmd_train_reblur(args, cfg: Config) -> int:
    ds = load_dataset(args.data)
    gs, dspec = _specs(cfg)
    _, theta = _load_params(args.deblur)
    m = cfg["model"]
    prior = PriorConfig(m["edge_threshold"], m["pool_kernel"], m["line_thickness"])
    steps = cfg.get("train", "reblur_steps")
    trainer = ReblurTrainer(ds, theta, gs, dspec, cfg.get("train", "seed"), phase_budget(steps),
                            prior=prior, **_common(cfg, ds))
    return _run_stage(args, trainer, steps, cfg)


def cmd_finetune(args, cfg: Config) -> int:
    ds = load_dataset(args.data)
    _, dspec = _specs(cfg)
    ckpt, theta = _load_params(args.deblur)
    _, omega = _load_params(args.reblur)
    disc = ckpt.nets.get("disc")
    trainer = FinetuneTrainer(ds, theta, omega, cfg.get("train", "seed"), disc=disc, disc_spec=dspec,
                              **_common(cfg, ds))
    return _run_stage(args, trainer, cfg.get("train", "finetune_steps"), cfg)


def cmd_meta_train(args, cfg: Config) -> int:
    ds = load_dataset(args.data)
    _, theta = _load_params(args.deblur)
    _, omega = _load_params(args.reblur)
    mt, t = cfg["meta"], cfg["train"]
    trainer = MetaTransferTrainer(ds, theta, omega, t["seed"], n_tasks=mt["n_tasks"],
                                  task_size=mt["task_size"], patch=min(t["patch"], *ds.image_size),
                                  alpha=mt["alpha"], beta=mt["beta"], clip=t["clip"] or None,
                                  second_order=mt["second_order"])
    return _run_stage(args, trainer, mt["outer_steps"], cfg)


def cmd_deblur(args, cfg: Config) -> int:
    ckpt, theta = _load_params(args.ckpt)
    img = read_png(args.input)
    if img.channels != 3:
        raise InvalidInputError(f"{args.input} is not an RGB image")
    if args.adapt > 0:
        if args.reblur:
            _, omega = _load_params(args.reblur)
        elif "omega" in ckpt.nets:
            omega = ckpt.nets["omega"]
        else:
            raise UsageError("--adapt needs a reblurrer: pass --reblur or a meta-train checkpoint")
        out, _, trace = meta_test_adapt(theta, omega, img.to_signed(), args.adapt,
                                        alpha=cfg.get("meta", "alpha"))
        trace_path = Path(args.out).with_suffix(".trace.txt")
        lines = [f"# padding={trace.padding[0]},{trace.padding[1]}\n"]
        lines += [f"{k}\t{v!r}\n" for k, v in enumerate(trace.losses)]
        trace_path.write_text("".join(lines))
    else:
        out = deblur_forward(theta, img.to_signed())
    write_png(out, args.out)
    print(args.out)
    return EXIT_OK


def cmd_reblur(args, cfg: Config) -> int:
    _, omega = _load_params(args.ckpt)
    img = read_png(args.input)
    if img.channels != 3:
        raise InvalidInputError(f"{args.input} is not an RGB image")
    write_png(reblur_forward(omega, img.to_signed()), args.out)
    print(args.out)
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for p in (pred_dir, gt_dir):
        if not p.is_dir():
            raise FileNotFoundError(f"not a directory: {p}")
    preds = sorted(pred_dir.glob("*.png"))
    gts = sorted(gt_dir.glob("*.png"))
    if len(preds) != len(gts) or not preds:
        raise UsageError(f"{len(preds)} predictions vs {len(gts)} ground-truth images")
    rows = []
    for p, g in zip(preds, gts):
        a, b = read_png(p), read_png(g)
        rows.append((p.name, float(psnr(a, b)), float(ssim(a, b)) if min(a.shape[:2]) >= 11 else float("nan")))
    width = max(len(r[0]) for r in rows + [("image", 0, 0)])
    print(f"{'image':<{width}}  {'psnr':>9}  {'ssim':>7}")
    for name, pv, sv in rows:
        print(f"{name:<{width}}  {pv:9.4f}  {sv:7.4f}")
    mp, ms = float(np.mean([r[1] for r in rows])), float(np.nanmean([r[2] for r in rows]))
    print(f"{'mean':<{width}}  {mp:9.4f}  {ms:7.4f}")
    out = Path(args.out) if args.out else pred_dir / "metrics.txt"
    lines = [f"{name}\tpsnr\t{pv!r}\n{name}\tssim\t{sv!r}\n" for name, pv, sv in rows]
    lines.append(f"mean\tpsnr\t{mp!r}\nmean\tssim\t{ms!r}\n")
    out.write_text("".join(lines))
    return EXIT_OK


def cmd_ablation(args, cfg: Config) -> int:
    adapt = tuple(int(v) for v in args.adapt.split(","))
    lines = []
    for seed in args.seeds:
        res = run_ablation(cfg, seed, adapt)
        print(res.line(), flush=True)
        lines.append(res.line() + "\n")
    if args.out:
        Path(args.out).write_text("".join(lines))
    return EXIT_OK


def cmd_show_config(args, cfg: Config) -> int:
    print(cfg.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pseudoblur",
        description="Human-aware deblurring with a pseudo-blur synthesizer and meta-transfer self-adaptation.",
        epilog="config keys (section.key = default [stage] meaning):\n" + describe()
        + "\n\nEnvironment variables PSEUDOBLUR_<SECTION>_<KEY> override any key.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True):
        sp = sub.add_parser(name, help=help_, description=help_)
        if config:
            sp.add_argument("--config", help="key=value config file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth-data", cmd_synth_data, "generate synthetic blurry/sharp pairs")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int, default=None, help="image side (default: data.size)")

    for name, fn, help_, needs in (
            ("train-deblur", cmd_train_deblur, "initial deblurring training", ()),
            ("train-reblur", cmd_train_reblur, "three-phase reblurrer training", ("deblur",)),
            ("finetune", cmd_finetune, "plain fine-tuning with the reblurrer (no meta-learning)",
             ("deblur", "reblur")),
            ("meta-train", cmd_meta_train, "meta-transfer training", ("deblur", "reblur"))):
        sp = add(name, fn, help_)
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--out", required=True, help="checkpoint to write")
        sp.add_argument("--resume", help="checkpoint of an interrupted run of this stage")
        for need in needs:
            sp.add_argument(f"--{need}", required=True, help=f"{need} checkpoint")

    sp = add("deblur", cmd_deblur, "deblur one image, optionally with test-time adaptation")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--adapt", type=int, default=0, help="test-time updates (0: plain forward)")
    sp.add_argument("--reblur", help="reblurrer checkpoint (default: the one stored with meta-train)")

    sp = add("reblur", cmd_reblur, "synthesize pseudo-blur for one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "PSNR/SSIM of predictions against ground truth", config=False)
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--gt-dir", required=True)
    sp.add_argument("--out", help="record file (default: <pred-dir>/metrics.txt)")

    sp = add("ablation", cmd_ablation, "Ours-0 / Ours-F / Ours-M(n) comparison on synthetic data")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.add_argument("--adapt", default="1", help="comma-separated test-time update counts")
    sp.add_argument("--out")

    add("show-config", cmd_show_config, "print the effective configuration")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(getattr(args, "config", None))
        return args.fn(args, cfg)
    except (UsageError, ConfigError, InvalidInputError) as exc:
        print(f"pseudoblur: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IncompatibleCheckpointError) as exc:
        print(f"pseudoblur: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"pseudoblur: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""``layerflow-kit`` command line: gen-data, train, sample, eval."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .backbone import Denoiser
from .config import RunConfig, load_config
from .diffusion import build_schedule
from .layerpack import SEGMENTS, LayerQuadruple, load_quadruple, save_quadruple
from .metrics import evaluate
from .pipeline import resolve_mask, sample_quadruple
from .synthdata import TIERS, build_tiers, caption_vocabulary

log = logging.getLogger("layerflow_kit")

VOCAB_FILE = "vocab.txt"
MANIFEST_FILE = "manifest.csv"
CKPT_FILE = "checkpoint.lfck"
LOG_FILE = "train_log.csv"


class CommandError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("LAYERFLOW_KIT_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise CommandError(f"cannot write to {out}: {e.strerror or e}") from None
    return out


# -- gen-data -----------------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir) -> list[dict]:
    out = _outdir(out_dir)
    d = cfg.data
    tiers = build_tiers(d.count, cfg.seed, d.frames, d.height, d.width)
    rows = []
    for tier in TIERS:
        (out / tier).mkdir(exist_ok=True)
        for q, rec in tiers[tier]:
            name = f"{tier}/{rec.index:04d}.lfq"
            save_quadruple(q, out / name)
            rows.append({"tier": tier, "index": rec.index, "file": name, "seed": rec.seed,
                         "sprite_cell": rec.sprite_cell, "background_cell": rec.background_cell,
                         "prompt_fg": q.prompts[0], "prompt_bg": q.prompts[1], "prompt_blended": q.prompts[2]})
    (out / VOCAB_FILE).write_text("".join(w + "\n" for w in caption_vocabulary()), encoding="utf-8")
    with open(out / MANIFEST_FILE, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    cfg.echo(out)
    return rows


def load_dataset(data_dir) -> tuple[dict[str, list[LayerQuadruple]], list[str]]:
    root = Path(data_dir)
    manifest = root / MANIFEST_FILE
    if not manifest.exists():
        raise CommandError(f"no dataset manifest at {manifest}; run gen-data first")
    data: dict[str, list[LayerQuadruple]] = {t: [] for t in TIERS}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            data[row["tier"]].append(load_quadruple(root / row["file"]))
    words = (root / VOCAB_FILE).read_text(encoding="utf-8").splitlines()
    return data, words


# -- train --------------------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, stage: int, out_dir, data_dir=None, in_ckpt=None) -> list[trainer.LogRow]:
    if stage not in (1, 2, 3):
        raise CommandError(f"stage must be 1, 2 or 3, got {stage}")
    if stage >= 2 and in_ckpt is None:
        raise CommandError(f"stage {stage} requires a stage-{stage - 1} checkpoint: pass --in-ckpt")
    out = _outdir(out_dir)
    data, words = load_dataset(data_dir or cfg.data.dir)
    if in_ckpt is not None:
        model, _ = trainer.load_checkpoint(in_ckpt)
    else:
        model = Denoiser(cfg.backbone, words, seed=cfg.seed)
    mc = model.config
    q0 = data["coarse"][0] if data["coarse"] else None
    if q0 is not None and (q0.frames, *q0.size) != (mc.frames, mc.height, mc.width):
        raise CommandError(f"dataset videos are {q0.frames}x{q0.size[0]}x{q0.size[1]} (FxHxW) "
                           f"but the model expects {mc.frames}x{mc.height}x{mc.width}")
    tiers = {"coarse": data["coarse"], "frozen": data["frozen"],
             "dynamic": trainer.dynamic_pairs(data["clean"])}
    st = cfg.stages[str(stage)]
    scfg = trainer.StageConfig(stage, lr=st.lr, steps=st.steps, batch_size=st.batch_size,
                               prompt_drop=st.prompt_drop, frozen_fraction=st.frozen_fraction)
    s = cfg.schedule
    rows, _ = trainer.run_stage(model, scfg, tiers, build_schedule(s.T, s.beta_start, s.beta_end),
                                seed=cfg.seed, threads=cfg.threads, checkpoint=out / CKPT_FILE)
    trainer.write_log(rows, out / LOG_FILE)
    cfg.echo(out)
    return rows


# -- sample -------------------------------------------------------------------------------------


def _write_pnm(path: Path, frame: np.ndarray) -> None:
    img = np.round(np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    path.write_bytes(header.encode("ascii") + img.tobytes())


def dump_frames(q: LayerQuadruple, out_dir: Path) -> None:
    for name in SEGMENTS:
        video = q.layer(name)
        for f in range(video.shape[0]):
            ext = "pgm" if name == "alpha" else "ppm"
            frame = video[f, ..., 0] if name == "alpha" else video[f]
            _write_pnm(out_dir / f"{name}_{f:02d}.{ext}", frame)


def cmd_sample(cfg: RunConfig, ckpt, variant: str, prompts, out_dir, cond_path=None, seed=None) -> LayerQuadruple:
    mask = resolve_mask(variant)
    cond = load_quadruple(cond_path) if cond_path is not None else None
    if any(mask.fixed) and cond is None:
        missing = [n for n, f in zip(SEGMENTS, mask.fixed) if f]
        raise CommandError(f"variant {mask.name} needs --cond with layers: {', '.join(missing)}")
    if prompts is None:
        if cond is None:
            raise CommandError("--prompts is required without --cond")
        prompts = cond.prompts
    if len(prompts) != 3:
        raise CommandError(f"expected 3 prompts (foreground, background, blended), got {len(prompts)}")
    out = _outdir(out_dir)
    model, _ = trainer.load_checkpoint(ckpt)
    s = cfg.schedule
    seed = cfg.seed if seed is None else seed
    q = sample_quadruple(model, tuple(prompts), mask, cond, build_schedule(s.T, s.beta_start, s.beta_end),
                         cfg.sample.steps, cfg.sample.scale, seed)
    save_quadruple(q, out / "sample.lfq")
    sidecar = {"variant": mask.name, "prompts": list(prompts), "seed": seed, "steps": cfg.sample.steps,
               "scale": cfg.sample.scale, "checkpoint": str(ckpt),
               "cond": None if cond_path is None else str(cond_path),
               "fixed_layers": [n for n, f in zip(SEGMENTS, mask.fixed) if f]}
    (out / "sample.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    if cfg.sample.dump_frames:
        dump_frames(q, out)
    cfg.echo(out)
    return q


# -- eval ---------------------------------------------------------------------------------------


def _read_dir(path) -> dict[str, LayerQuadruple]:
    root = Path(path)
    if not root.is_dir():
        raise CommandError(f"{root} is not a directory")
    files = sorted(root.rglob("*.lfq"))
    if not files:
        raise CommandError(f"no .lfq quadruples under {root}")
    return {str(f.relative_to(root)): load_quadruple(f) for f in files}


def cmd_eval(pred_dir, out_dir, truth_dir=None):
    preds = _read_dir(pred_dir)
    truth = _read_dir(truth_dir) if truth_dir is not None else None
    report = evaluate(preds, truth)
    report.write(_outdir(out_dir))
    return report


# -- entry point --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerflow-kit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--threads", type=int)

    g = sub.add_parser("gen-data", help="write the synthetic dataset tiers")
    common(g)

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    t.add_argument("--data", help="dataset directory (default: config data.dir)")
    t.add_argument("--in-ckpt", help="checkpoint from the previous stage")

    s = sub.add_parser("sample", help="sample one quadruple for a task variant")
    common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--variant", required=True, choices=("generate", "decompose", "fg_cond", "bg_cond"))
    s.add_argument("--prompts", nargs="+", help="foreground, background and blended prompts")
    s.add_argument("--cond", help="quadruple file supplying the conditioning layers")
    s.add_argument("--frames", action="store_true", help="also dump per-frame PGM/PPM images")

    e = sub.add_parser("eval", help="score a directory of quadruples")
    common(e, seed=False)
    e.add_argument("--pred", required=True)
    e.add_argument("--truth")
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            cmd_eval(args.pred, args.out, args.truth)
            return 0
        cfg = _resolve(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.stage, args.out, args.data, args.in_ckpt)
        elif args.command == "sample":
            if args.frames:
                cfg.sample.dump_frames = True
            cmd_sample(cfg, args.ckpt, args.variant, args.prompts, args.out, args.cond, args.seed)
    except (CommandError, trainer.PrerequisiteError, trainer.CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Three-stage optimisation: base blocks, then motion adapters, then content adapters."""

from __future__ import annotations

import csv
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion
from .backbone import BackboneConfig, Denoiser
from .diffusion import NoiseSchedule, TrainSample
from .layerpack import VARIANTS, LayerQuadruple
from .lora import select_trainable
from .pipeline import to_latents
from .synthdata import copy_paste
from .tensor import Tape, gradients, read_tensor, write_tensor
from .textcond import encode, null_context

log = logging.getLogger(__name__)

STAGE_LR = {1: 1e-4, 2: 1e-3, 3: 5e-3}
STAGE_STEPS = {1: 2000, 2: 500, 3: 1000}
STAGE_TIERS = {1: ("coarse",), 2: ("frozen",), 3: ("frozen", "dynamic")}
GATE_BY_TIER = {1: {"coarse": 0}, 2: {"frozen": 1}, 3: {"frozen": 1, "dynamic": 0}}
VARIANT_MIX = {"generate": 0.7, "fg_cond": 0.1, "bg_cond": 0.1, "decompose": 0.1}


class PrerequisiteError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class StageConfig:
    stage: int
    lr: float | None = None
    steps: int | None = None
    batch_size: int = 2
    prompt_drop: float = 0.1
    frozen_fraction: float = 0.8       # stage 3 share of frozen-tier batches
    variant_mix: dict = field(default_factory=lambda: dict(VARIANT_MIX))

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.lr is None:
            self.lr = STAGE_LR[self.stage]
        if self.steps is None:
            self.steps = STAGE_STEPS[self.stage]
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        unknown = set(self.variant_mix) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants in mix: {sorted(unknown)}")

    @property
    def tiers(self) -> tuple[str, ...]:
        return STAGE_TIERS[self.stage]

    def gate_for(self, tier: str) -> int:
        return GATE_BY_TIER[self.stage][tier]


# -- Adam ------------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam over ``params`` in their given order.

    A non-finite gradient aborts the whole step before anything is touched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k in params:
        g = grads.get(k)
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    c1 = np.float32(1.0 - state.beta1 ** state.step)
    c2 = np.float32(1.0 - state.beta2 ** state.step)
    lr32, eps32 = np.float32(lr), np.float32(state.eps)
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {k}")
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        p.data = (p.data - lr32 * (m / c1) / (np.sqrt(v / c2) + eps32)).astype(np.float32)


# -- data ------------------------------------------------------------------------------------


def dynamic_pairs(clean: list[LayerQuadruple]) -> list[LayerQuadruple]:
    """Copy-paste every clean foreground onto the next sample's background."""
    n = len(clean)
    if n < 2:
        return list(clean)
    return [copy_paste(clean[i], clean[(i + 1) % n]) for i in range(n)]


@dataclass
class StepPlan:
    tier: str
    gate: int
    variant: str
    indices: list[int]
    timesteps: list[int]
    drop: list[bool]
    noise: list[np.ndarray]


@dataclass
class LogRow:
    step: int
    stage: int
    loss: float
    gate: int
    mask: str
    lr: float
    tier: str


@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    step: int = 0


class StageRunner:
    """Steps one training stage; each step's randomness is drawn up front so
    per-sample gradients can be computed in any order and reduced in a fixed one."""

    def __init__(self, model: Denoiser, cfg: StageConfig, data: dict[str, list[LayerQuadruple]],
                 schedule: NoiseSchedule, seed: int = 0, state: TrainState | None = None,
                 threads: int = 1):
        for tier in cfg.tiers:
            if not data.get(tier):
                raise PrerequisiteError(f"stage {cfg.stage} needs a non-empty {tier!r} dataset")
        self.model, self.cfg, self.schedule = model, cfg, schedule
        self.threads = max(1, int(threads))
        self.data = {t: list(data[t]) for t in cfg.tiers}
        mc = model.config
        self.latents = {t: [to_latents(q, mc.patch) for q in qs] for t, qs in self.data.items()}
        self.state = state or TrainState(rng=np.random.default_rng(seed))
        self.params = select_trainable(model, cfg.stage)
        model.freeze_all_but(self.params.values())
        self.variants = list(cfg.variant_mix)
        w = np.array([cfg.variant_mix[k] for k in self.variants], dtype=np.float64)
        self.variant_p = w / w.sum()

    def plan(self) -> StepPlan:
        rng, cfg = self.state.rng, self.cfg
        if cfg.stage == 3:
            tier = "frozen" if rng.random() < cfg.frozen_fraction else "dynamic"
        else:
            tier = cfg.tiers[0]
        n = len(self.data[tier])
        idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size).tolist()
        variant = self.variants[int(rng.choice(len(self.variants), p=self.variant_p))]
        ts, drops, noise = [], [], []
        shape = self.latents[tier][0].shape
        for _ in idx:
            ts.append(int(rng.integers(self.schedule.T)))
            drops.append(bool(rng.random() < cfg.prompt_drop))
            noise.append(rng.standard_normal(shape).astype(np.float32))
        return StepPlan(tier, cfg.gate_for(tier), variant, idx, ts, drops, noise)

    def _sample_grads(self, plan: StepPlan, j: int):
        model, mc = self.model, self.model.config
        i = plan.indices[j]
        q = self.data[plan.tier][i]
        with Tape() as tape:
            if plan.drop[j]:
                ctx = null_context(model.vocab, model.layers, mc.text_len)
            else:
                ctx = encode(q.prompts, model.vocab, model.layers, mc.text_len)
            s = TrainSample(self.latents[plan.tier][i], ctx, VARIANTS[plan.variant], plan.timesteps[j], plan.noise[j])
            loss = diffusion.sample_loss(model, s, self.schedule, plan.gate)
        return loss.item(), gradients(loss, tape)

    def step(self) -> LogRow:
        plan = self.plan()
        n = len(plan.indices)
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(lambda j: self._sample_grads(plan, j), range(n)))
        else:
            results = [self._sample_grads(plan, j) for j in range(n)]
        by_id = {id(p): k for k, p in self.params.items()}
        grads: dict[str, np.ndarray] = {}
        for _, g in results:  # fixed sample order keeps the sum bit-stable
            for key, (leaf, gi) in g.items():
                name = by_id.get(key)
                if name is not None:
                    grads[name] = gi if name not in grads else grads[name] + gi
        grads = {k: (v / np.float32(n)).astype(np.float32) for k, v in grads.items()}
        adam_step(self.params, grads, self.state.adam, self.cfg.lr)
        self.state.step += 1
        loss = float(np.mean([r[0] for r in results]))
        return LogRow(self.state.step, self.cfg.stage, loss, plan.gate, plan.variant, self.cfg.lr, plan.tier)

    def run(self, steps: int | None = None, log_every: int = 100) -> list[LogRow]:
        steps = self.cfg.steps if steps is None else steps
        rows = []
        for _ in range(steps):
            row = self.step()
            rows.append(row)
            if log_every and row.step % log_every == 0:
                log.info("stage %d step %d loss %.4f", row.stage, row.step, row.loss)
        return rows


def prepare_stage(model: Denoiser, stage: int, seed: int = 0) -> None:
    """Check prerequisites and attach the adapters a stage introduces."""
    done = getattr(model, "trained_stage", 0)
    if stage >= 2 and done < stage - 1:
        raise PrerequisiteError(
            f"stage {stage} requires a stage-{stage - 1} checkpoint (pass --in-ckpt); model has completed stage {done}")
    if stage >= 2 and not model.has_adapters("motion"):
        model.attach_adapters("motion", seed)
    if stage == 3 and not model.has_adapters("content"):
        model.attach_adapters("content", seed)


def run_stage(model: Denoiser, cfg: StageConfig, data: dict[str, list[LayerQuadruple]],
              schedule: NoiseSchedule, seed: int = 0, threads: int = 1,
              checkpoint: str | Path | None = None) -> tuple[list[LogRow], TrainState]:
    prepare_stage(model, cfg.stage, seed)
    runner = StageRunner(model, cfg, data, schedule, seed, threads=threads)
    rows = runner.run()
    model.trained_stage = max(getattr(model, "trained_stage", 0), cfg.stage)
    model.gate = 0
    if checkpoint is not None:
        save_checkpoint(model, runner.state, checkpoint, stage=cfg.stage)
    return rows, runner.state


def write_log(rows: list[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "loss", "gate", "mask", "lr"])
        for r in rows:
            w.writerow([r.step, r.stage, repr(r.loss), r.gate, r.mask, repr(r.lr)])


# -- checkpoints --------------------------------------------------------------------------------

CKPT_MAGIC = b"LFCK"
CKPT_VERSION = 1


def _param_key(name: str) -> str:
    """Canonical checkpoint key; adapters become ``(block, projection, family).A``."""
    parts = name.split(".")
    if ".lora." in name:
        # blocks.{i}.attn.{proj}.lora.{family}.{A|B}
        return f"({parts[1]}, {parts[3]}, {parts[5]}).{parts[6]}"
    return name


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _pstr(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def save_checkpoint(model: Denoiser, state: TrainState | None, path, stage: int | None = None) -> None:
    params = {_param_key(k): v.data for k, v in model.named_parameters().items()}
    records = dict(params)
    meta = {
        "format_version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.words,
        "stage": int(stage if stage is not None else getattr(model, "trained_stage", 0)),
        "adapters": sorted({f for ad in model.adapters() for f in [ad.family]}),
        "step": 0,
        "rng_state": None,
        "optimizer": None,
    }
    if state is not None:
        meta["step"] = state.step
        meta["rng_state"] = state.rng.bit_generator.state
        a = state.adam
        meta["optimizer"] = {"step": a.step, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}
        for name, m in a.m.items():
            records[f"adam.m/{_param_key(name)}"] = m
            records[f"adam.v/{_param_key(name)}"] = a.v[name]
    meta["keys"] = list(records)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + _u32(CKPT_VERSION) + _pstr(json.dumps(meta, sort_keys=True)))
        for key, arr in records.items():
            fh.write(_pstr(key))
            write_tensor(fh, arr)


def _read(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[Denoiser, TrainState]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint of a supported format/version (bad magic)")
        (version,) = struct.unpack("<I", head[4:])
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read(fh, 4, "metadata length"))
        meta = json.loads(_read(fh, n, "metadata").decode("utf-8"))
        records = {}
        for expected in meta["keys"]:
            (kl,) = struct.unpack("<I", _read(fh, 4, f"key length of {expected}"))
            key = _read(fh, kl, "key").decode("utf-8")
            try:
                records[key] = read_tensor(fh)
            except EOFError as e:
                raise CheckpointError(f"truncated tensor record {key}") from e
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing data after last record")

    model = Denoiser(BackboneConfig(**meta["config"]), meta["vocab"])
    for fam in meta.get("adapters", []):
        model.attach_adapters(fam)
    model.trained_stage = int(meta["stage"])
    params = {_param_key(k): v for k, v in model.named_parameters().items()}
    for key, arr in records.items():
        if key.startswith(("adam.m/", "adam.v/")):
            continue
        if key not in params:
            raise CheckpointError(f"unknown checkpoint key {key}")
        if arr.shape != params[key].shape:
            raise CheckpointError(f"shape mismatch for {key}: {arr.shape} vs {params[key].shape}")
        params[key].data = arr
    missing = [k for k in params if k not in records]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]}")

    state = TrainState(step=int(meta.get("step", 0)))
    if meta.get("rng_state") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        state.rng = rng
    opt = meta.get("optimizer")
    if opt is not None:
        state.adam = AdamState(step=opt["step"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
        names = {_param_key(k): k for k in model.named_parameters()}
        for key, arr in records.items():
            for prefix, store in (("adam.m/", state.adam.m), ("adam.v/", state.adam.v)):
                if key.startswith(prefix):
                    pk = key[len(prefix):]
                    if pk not in names:
                        raise CheckpointError(f"unknown checkpoint key {key}")
                    store[names[pk]] = arr
    return model, state

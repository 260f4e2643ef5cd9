"""Pixel-level stand-ins for temporal consistency / motion scores, plus
per-layer reconstruction error against known ground truth."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layerpack import SEGMENTS, LayerQuadruple
from .tensor import ShapeError

REPORT_LAYERS = {"FG": "fg", "BG": "bg", "BL": "blended"}
RECON_LAYERS = {"FG": "fg", "ALPHA": "alpha", "BG": "bg", "BL": "blended"}
NOT_APPLICABLE = {("BG", "dynamic_degree")}


def _frames(video) -> np.ndarray:
    v = np.asarray(video, dtype=np.float64)
    if v.ndim < 2 or v.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    return v.reshape(v.shape[0], -1)


def frame_consistency(video) -> float:
    """Mean cosine similarity of adjacent mean-centred frames.

    Identical frames, or a pair involving a constant frame, count as exactly 1.
    """
    v = _frames(video)
    v = v - v.mean(axis=1, keepdims=True)
    sims = []
    for a, b in zip(v[:-1], v[1:]):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0 or np.array_equal(a, b):
            sims.append(1.0)
        else:
            sims.append(float(np.clip(a @ b / (na * nb), -1.0, 1.0)))
    return float(np.mean(sims))


def dynamic_degree(video) -> float:
    """Mean absolute inter-frame difference of [0, 1] pixels."""
    v = _frames(video)
    return float(np.abs(np.diff(v, axis=0)).mean())


def reconstruction_error(predicted: LayerQuadruple, truth: LayerQuadruple) -> dict[str, float]:
    out = {}
    for name in SEGMENTS:
        p, t = predicted.layer(name), truth.layer(name)
        if p.shape != t.shape:
            raise ShapeError(f"{name}: predicted {p.shape} vs truth {t.shape}")
        out[name] = float(np.mean((p.astype(np.float64) - t.astype(np.float64)) ** 2))
    return out


@dataclass
class MetricReport:
    frame_consistency: dict[str, float] = field(default_factory=dict)
    dynamic_degree: dict[str, float] = field(default_factory=dict)
    reconstruction: dict[str, float] = field(default_factory=dict)
    n: int = 0
    rows: list[tuple[str, str, str, float]] = field(default_factory=list)  # per sample

    def summary_rows(self) -> list[tuple[str, str, float, int]]:
        out = []
        for metric in ("frame_consistency", "dynamic_degree"):
            for layer in REPORT_LAYERS:
                out.append((layer, metric, getattr(self, metric)[layer], self.n))
        for layer in RECON_LAYERS:
            if layer in self.reconstruction:
                out.append((layer, "reconstruction_mse", self.reconstruction[layer], self.n))
        return out

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "metric", "value", "n"])
            for layer, metric, value, n in self.summary_rows():
                w.writerow([layer, metric, _fmt(value), n])
        with open(out_dir / "metrics_per_sample.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "layer", "metric", "value"])
            for row in self.rows:
                w.writerow([*row[:3], _fmt(row[3])])
        payload = {
            "n": self.n,
            "frame_consistency": self.frame_consistency,
            "dynamic_degree": {k: (None if math.isnan(v) else v) for k, v in self.dynamic_degree.items()},
            "reconstruction_mse": self.reconstruction,
            "not_applicable": [f"{layer}/{metric}" for layer, metric in sorted(NOT_APPLICABLE)],
        }
        (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return "n/a" if math.isnan(v) else repr(float(v))


def evaluate(samples: dict[str, LayerQuadruple], truth: dict[str, LayerQuadruple] | None = None) -> MetricReport:
    """Aggregate metrics over named samples; ``truth`` enables reconstruction error."""
    if not samples:
        raise ValueError("no samples to evaluate")
    rep = MetricReport(n=len(samples))
    acc: dict[tuple[str, str], list[float]] = {}
    for name in sorted(samples):
        q = samples[name]
        for layer, attr in REPORT_LAYERS.items():
            v = q.layer(attr)
            fc = frame_consistency(v)
            dd = math.nan if (layer, "dynamic_degree") in NOT_APPLICABLE else dynamic_degree(v)
            for metric, value in (("frame_consistency", fc), ("dynamic_degree", dd)):
                rep.rows.append((name, layer, metric, value))
                acc.setdefault((layer, metric), []).append(value)
        if truth is not None:
            if name not in truth:
                raise ValueError(f"no ground truth for sample {name!r}")
            err = reconstruction_error(q, truth[name])
            for layer, attr in RECON_LAYERS.items():
                rep.rows.append((name, layer, "reconstruction_mse", err[attr]))
                acc.setdefault((layer, "reconstruction_mse"), []).append(err[attr])
    for (layer, metric), vals in acc.items():
        mean = float(np.mean(vals))
        if metric == "reconstruction_mse":
            rep.reconstruction[layer] = mean
        else:
            getattr(rep, metric)[layer] = mean
    return rep

"""Desk-scale metrics: Fréchet distance, onset desync, masked accuracy, reports.

The embedding behind the Fréchet distance is deliberately tiny: a token
map becomes a (K+1)-vector of per-class column fractions plus the
background fraction.  Desync detects generated event onsets as the first
columns of maximal same-class column runs and greedily matches them to
the ground-truth onsets (quantized to the same column grid), scoring the
mean absolute offset in seconds with a half-clip penalty per unmatched
event on either side.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import sampler as sp
from .errors import ConfigError, NumericError, ShapeError
from .sampler import SamplerConfig
from .synthetic import DatasetConfig, SyntheticScene, event_columns, token_class
from .token_space import TokenMap, write_pgm

_PSD_TOL = -1e-10


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise ShapeError(
                f"mean {self.mean.shape} and covariance {self.cov.shape} disagree"
            )
        if np.abs(self.cov - self.cov.T).max() > 1e-12:
            raise NumericError("covariance is not symmetric within 1e-12")
        if self.count < 2:
            raise ConfigError(f"summary needs >= 2 samples, got {self.count}")


def summarize(samples: np.ndarray) -> GaussianSummary:
    """Mean and unbiased covariance of an (n, d) sample matrix."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ConfigError(f"need an (n >= 2, d) sample matrix, got {samples.shape}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (samples.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianSummary(mean=mean, cov=cov, count=samples.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping tiny negatives."""
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if vals.min() < _PSD_TOL * max(1.0, abs(vals.max())):
        raise NumericError(f"matrix is not PSD: min eigenvalue {vals.min()}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), always >= 0."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    a_half = _psd_sqrt(a.cov)
    cross = _psd_sqrt(a_half @ b.cov @ a_half)
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov)
               - 2.0 * np.trace(cross))
    if not math.isfinite(fd):
        raise NumericError(f"non-finite distance: {fd}")
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# Token-map metrics
# ---------------------------------------------------------------------------


def column_classes(token_map: TokenMap, config: DatasetConfig) -> np.ndarray:
    """Per-column label: majority class id, or -1 where background prevails.

    Ties between classes break toward the lower id; a class wins a tie
    against background.
    """
    f, t = token_map.shape
    labels = np.empty(t, dtype=np.int64)
    for col in range(t):
        counts = np.zeros(config.classes + 1, dtype=np.int64)  # last = background
        for token in token_map.grid[:, col]:
            cls = token_class(int(token), config)
            counts[cls if cls >= 0 else config.classes] += 1
        best = int(counts[:config.classes].argmax()) if config.classes else 0
        if counts[best] >= counts[config.classes] and counts[best] > 0:
            labels[col] = best
        else:
            labels[col] = -1
    return labels


def embed_map(token_map: TokenMap, config: DatasetConfig) -> np.ndarray:
    """(K+1,) embedding: per-class column fractions, background fraction last."""
    labels = column_classes(token_map, config)
    t = labels.shape[0]
    out = np.zeros(config.classes + 1)
    for k in range(config.classes):
        out[k] = np.count_nonzero(labels == k) / t
    out[config.classes] = np.count_nonzero(labels == -1) / t
    return out


def detect_onsets(token_map: TokenMap, config: DatasetConfig) -> list:
    """(column, class) pairs at the start of each maximal same-class run."""
    labels = column_classes(token_map, config)
    out = []
    prev = -1
    for col, lab in enumerate(labels):
        if lab >= 0 and lab != prev:
            out.append((col, int(lab)))
        prev = int(lab)
    return out


def scene_onset_columns(scene: SyntheticScene, time_tokens: int) -> list:
    """Ground-truth (column, class) onsets, quantized like the rendered target."""
    out = []
    for onset, dur, cls in scene.events:
        start, _ = event_columns(onset, dur, time_tokens, scene.clip_length)
        out.append((start, cls))
    return out


def toy_desync(generated: TokenMap, scene: SyntheticScene,
               config: DatasetConfig) -> float:
    """Mean onset offset in seconds; clip/2 penalty per unmatched event."""
    t = generated.shape[1]
    col_seconds = scene.clip_length / t
    gt = scene_onset_columns(scene, t)
    got = detect_onsets(generated, config)
    pairs = sorted(
        (abs(g_col - t_col), ti, gi)
        for ti, (t_col, t_cls) in enumerate(gt)
        for gi, (g_col, g_cls) in enumerate(got)
        if t_cls == g_cls
    )
    used_t, used_g = set(), set()
    total = 0.0
    matched = 0
    for dist, ti, gi in pairs:
        if ti in used_t or gi in used_g:
            continue
        used_t.add(ti)
        used_g.add(gi)
        total += dist * col_seconds
        matched += 1
    unmatched = (len(gt) - matched) + (len(got) - matched)
    total += unmatched * scene.clip_length / 2.0
    return total / (matched + unmatched)


def masked_accuracy(pred: TokenMap, target: TokenMap, mask: np.ndarray) -> float:
    """Fraction of masked positions the prediction got right."""
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != target.shape:
        raise ShapeError(
            f"shapes disagree: {pred.shape}, {target.shape}, {mask.shape}"
        )
    if not mask.any():
        raise ValueError("masked_accuracy needs at least one masked position")
    return float((pred.grid[mask] == target.grid[mask]).mean())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

SWEEP_STEPS = (1, 4, 6, 8, 12, 16)


def _target_summary(records, config: DatasetConfig) -> GaussianSummary:
    return summarize(np.stack([embed_map(r.tokens, config) for r in records]))


def _accuracy_for_mode(backbone, cnet, records, controls, mode: str,
                       config: SamplerConfig, seed: int) -> float:
    """Masked-prediction accuracy using the variant's guided logits."""
    cfg = backbone.config
    s = cfg.seq_len
    n = len(records)
    ids = np.empty((n, s), dtype=np.int64)
    masks = np.zeros((n, s), dtype=bool)
    for i, rec in enumerate(records):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7, i]))
        picks = rng.permutation(s)[:s // 2]
        grid = rec.tokens.grid.reshape(-1).copy()
        grid[picks] = cfg.vocab
        ids[i] = grid
        masks[i, picks] = True
    prompts = np.stack([rec.prompt for rec in records])
    l_u, l_c, l_f = sp._mode_logits(backbone, cnet, ids, prompts, controls, mode)
    hits = 0
    total = 0
    for i in range(n):
        li = sp._combine(l_u[i], None if l_c is None else l_c[i],
                         None if l_f is None else l_f[i], config.cfg_max, mode)
        pred = li.argmax(axis=-1)
        tgt = records[i].tokens.grid.reshape(-1)
        hits += int((pred[masks[i]] == tgt[masks[i]]).sum())
        total += int(masks[i].sum())
    return hits / total


def evaluate_variant(backbone, cnet, records, controls, ds_config: DatasetConfig,
                     mode: str, config: SamplerConfig, seed: int) -> dict:
    """Generate clips under one guidance variant and score them."""
    prompts = np.stack([rec.prompt for rec in records])
    ctrl = None if mode == "uncond" else controls
    start = time.perf_counter()
    maps = sp.generate_batch(backbone, cnet if mode != "uncond" else None,
                             prompts, ctrl, config, seed, mode=mode)
    wall = time.perf_counter() - start
    gen_summary = summarize(np.stack([embed_map(m, ds_config) for m in maps]))
    fd = frechet_distance(gen_summary, _target_summary(records, ds_config))
    desync = float(np.mean([
        toy_desync(m, rec.scene, ds_config) for m, rec in zip(maps, records)
    ]))
    acc = _accuracy_for_mode(backbone, cnet, records, controls, mode, config, seed)
    return {
        "variant": mode, "steps": config.steps, "fd": fd, "toy_desync": desync,
        "masked_accuracy": acc, "wall_time": wall, "maps": maps,
    }


def ablation_report(backbone, cnet, records, controls, ds_config: DatasetConfig,
                    config: SamplerConfig | None = None, seed: int = 0,
                    sweep: bool = True, sweep_records: int | None = None) -> dict:
    """Guidance-variant table plus the step sweep, as row dicts."""
    if config is None:
        config = SamplerConfig()
    rows = []
    for mode in sp.GUIDANCE_MODES:
        rows.append(evaluate_variant(backbone, cnet, records, controls, ds_config,
                                     mode, config, seed))
    sweep_rows = []
    if sweep:
        sub = records if sweep_records is None else records[:sweep_records]
        ctrl = controls if sweep_records is None else controls[:sweep_records]
        for steps in SWEEP_STEPS:
            scfg = SamplerConfig(steps=steps, cfg_max=config.cfg_max,
                                 gumbel_temp=config.gumbel_temp,
                                 greedy_final=config.greedy_final)
            sweep_rows.append(evaluate_variant(backbone, cnet, sub, ctrl,
                                               ds_config, "multi", scfg, seed))
    return {"ablation": rows, "sweep": sweep_rows}


_CSV_FIELDS = ["variant", "steps", "fd", "toy_desync", "masked_accuracy",
               "wall_time"]


def _csv_rows(rows) -> list:
    return [{k: row[k] for k in _CSV_FIELDS} for row in rows]


def write_report(out_dir, report: dict) -> None:
    """ablation.csv, sweep.csv, summary.json, and example PGM heatmaps."""
    os.makedirs(out_dir, exist_ok=True)
    for name in ("ablation", "sweep"):
        with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            w.writeheader()
            for row in _csv_rows(report[name]):
                w.writerow(row)
    summary = {name: _csv_rows(report[name]) for name in ("ablation", "sweep")}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in report["ablation"]:
        if row["maps"]:
            write_pgm(os.path.join(out_dir, f"map_{row['variant']}.pgm"),
                      row["maps"][0])

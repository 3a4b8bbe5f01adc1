"""Two-phase training: backbone mask-prediction, then the control branch.

Phase one trains every backbone parameter on masked token prediction.
Phase two freezes the backbone and trains only the control branch (copied
blocks, connectors, control input projector) on the controlled forward.

Both phases share the recipe: per example the mask fraction is the cosine
map of a uniform draw, and with probability ``condition_dropout`` the
prompt is replaced by the learned unconditional embedding.  The learning
rate warms up linearly to base_lr * batch / 256 and then follows a cosine
decay to zero.  All randomness is derived per step from the seed, so a
resumed run continues bit-for-bit like an uninterrupted one; checkpoints
only need parameters, optimizer moments, and the step counter.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import controlnet as cn
from .backbone import BackboneParams, ModelConfig, TrainBatch, init_backbone
from .checkpoint import CheckpointBundle, TrainSnapshot, load_checkpoint, save_checkpoint
from .controlnet import ControlNetParams, build_controlnet
from .errors import ConfigError, NumericError, StateError
from .features import make_projection_params, align_control
from .token_space import mask_fraction

PHASES = ("pretrain_backbone", "train_controlnet")

_TAG_INIT = 1
_TAG_EPOCH = 2
_TAG_STEP = 3

_BETA1, _BETA2 = 0.9, 0.95
_WEIGHT_DECAY = 0.01
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_fraction: float = 0.02
    condition_dropout: float = 0.9
    seed: int = 0
    phase: str = "pretrain_backbone"

    def __post_init__(self):
        if self.total_steps < 0 or self.batch_size < 1:
            raise ConfigError(
                f"bad step/batch counts: {self.total_steps}, {self.batch_size}"
            )
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(
                f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}"
            )
        if not 0 <= self.condition_dropout <= 1:
            raise ConfigError(
                f"condition_dropout must be in [0, 1], got {self.condition_dropout}"
            )
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr * batch / 256, then cosine decay to zero."""
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    peak = config.base_lr * config.batch_size / 256.0
    warmup = max(1, round(config.warmup_fraction * config.total_steps))
    if step < warmup:
        return peak * step / warmup
    span = config.total_steps - warmup
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


@dataclass
class TrainState:
    phase: str
    backbone: BackboneParams
    cnet: ControlNetParams | None
    step: int
    adam: dict                     # name -> (m, v)

    def trainables(self):
        if self.phase == "train_controlnet":
            if self.cnet is None:
                raise StateError("control phase without a control branch")
            return self.cnet.named_arrays()
        return self.backbone.named_arrays()


def init_train_state(phase: str, backbone: BackboneParams,
                     cnet: ControlNetParams | None = None) -> TrainState:
    state = TrainState(phase=phase, backbone=backbone, cnet=cnet, step=0, adam={})
    for name, arr in state.trainables():
        state.adam[name] = (np.zeros_like(arr), np.zeros_like(arr))
    return state


def _adam_update(state: TrainState, grads: dict, lr: float) -> None:
    t = state.step + 1
    bc1 = 1.0 - _BETA1 ** t
    bc2 = 1.0 - _BETA2 ** t
    for name, param in state.trainables():
        g = grads[name]
        m, v = state.adam[name]
        m *= _BETA1
        m += (1.0 - _BETA1) * g
        v *= _BETA2
        v += (1.0 - _BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + _ADAM_EPS)
        if param.ndim >= 2:            # decay matrices only, not gains/biases
            update = update + _WEIGHT_DECAY * param
        param -= lr * update


def train_step(state: TrainState, batch: TrainBatch, config: TrainConfig) -> float:
    """One optimizer update; raises (state unchanged) on a non-finite loss."""
    if state.phase == "train_controlnet":
        if batch.control is None:
            raise StateError("control phase needs control grids in the batch")
        loss, grads = cn.loss_and_grads_controlled(state.backbone, state.cnet, batch)
    else:
        loss, grads = bb.loss_and_grads(state.backbone, batch)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at step {state.step}")
    _adam_update(state, grads, lr_at(state.step, config))
    state.step += 1
    return loss


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_EPOCH, epoch]))
    return rng.permutation(n)


def record_indices_for_step(step: int, batch_size: int, n_records: int,
                            seed: int, perm_cache: dict) -> list:
    """Deterministic record picks: contiguous slices of per-epoch shuffles."""
    out = []
    base = step * batch_size
    for j in range(batch_size):
        epoch, within = divmod(base + j, n_records)
        if epoch not in perm_cache:
            perm_cache[epoch] = _epoch_perm(seed, epoch, n_records)
        out.append(int(perm_cache[epoch][within]))
    return out


def assemble_batch(records, indices, step: int, config: TrainConfig,
                   model_config: ModelConfig, controls: np.ndarray | None) -> TrainBatch:
    """Masked inputs, targets, prompts, and dropout flags for one step."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_STEP, step]))
    s = model_config.seq_len
    n = len(indices)
    ids = np.empty((n, s), dtype=np.int64)
    targets = np.empty((n, s), dtype=np.int64)
    mask = np.zeros((n, s), dtype=bool)
    cond = np.empty((n, model_config.condition_dim))
    flags = np.zeros(n, dtype=bool)
    for j, ri in enumerate(indices):
        rec = records[ri]
        grid = rec.tokens.grid.reshape(-1)
        frac = mask_fraction(float(rng.random()))
        flags[j] = bool(rng.random() < config.condition_dropout)
        n_mask = max(1, int(math.floor(frac * s + 0.5)))
        picks = rng.permutation(s)[:n_mask]
        targets[j] = grid
        ids[j] = grid
        ids[j, picks] = model_config.vocab       # mask sentinel
        mask[j, picks] = True
        cond[j] = rec.prompt
    control = None if controls is None else controls[indices]
    return TrainBatch(ids=ids, targets=targets, mask=mask, cond=cond,
                      uncond_flags=flags, control=control)


def control_grids(records, model_config: ModelConfig) -> np.ndarray:
    """Precomputed (N, S, D) aligned control grids; the aligner is a fixed map."""
    geo = model_config.geometry
    params = make_projection_params(
        records[0].sync.dim, model_config.dim, geo.time_tokens)
    out = np.empty((len(records), model_config.seq_len, model_config.dim))
    for i, rec in enumerate(records):
        grid = align_control(rec.sync, rec.semantic, params, geo.freq_tokens)
        out[i] = grid.reshape(model_config.seq_len, model_config.dim)
    return out


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


def _log_row(step: int, lr: float, loss: float, dropped: int) -> dict:
    return {"step": step, "lr": repr(lr), "loss": repr(loss),
            "cond_dropped": dropped}


def run_training(records, config: TrainConfig, model_config: ModelConfig,
                 out_checkpoint, out_log, n_copy: int | None = None,
                 base_checkpoint=None, resume: bool = False,
                 checkpoint_every: int = 0):
    """Train from records; emit a checkpoint and a per-step loss CSV.

    Phase pretrain starts from a seeded init (or resumes out_checkpoint).
    Phase controlnet requires ``base_checkpoint`` (path or loaded bundle)
    for the frozen backbone and builds/resumes the branch on top of it.
    Returns (TrainState, log rows).
    """
    if not records:
        raise ConfigError("cannot train on an empty dataset")
    if config.phase == "pretrain_backbone":
        if resume and os.path.exists(out_checkpoint):
            bundle = load_checkpoint(out_checkpoint)
            if bundle.train is None or bundle.train.phase != 0:
                raise StateError(f"{out_checkpoint} is not a resumable pretrain run")
            state = _state_from_bundle(bundle, "pretrain_backbone")
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, _TAG_INIT]))
            state = init_train_state(
                "pretrain_backbone", init_backbone(model_config, rng))
        controls = None
    else:
        if resume and os.path.exists(out_checkpoint):
            bundle = load_checkpoint(out_checkpoint)
            if bundle.train is None or bundle.train.phase != 1 or bundle.cnet is None:
                raise StateError(f"{out_checkpoint} is not a resumable control run")
            state = _state_from_bundle(bundle, "train_controlnet")
        else:
            if base_checkpoint is None:
                raise ConfigError("control phase needs a backbone checkpoint")
            if isinstance(base_checkpoint, CheckpointBundle):
                base = base_checkpoint
            else:
                base = load_checkpoint(base_checkpoint)
            if n_copy is None:
                n_copy = base.backbone.config.depth // 2
            state = init_train_state(
                "train_controlnet", base.backbone,
                build_controlnet(base.backbone, n_copy))
        controls = control_grids(records, state.backbone.config)

    perm_cache: dict = {}
    rows = []
    for step in range(state.step, config.total_steps):
        indices = record_indices_for_step(step, config.batch_size, len(records),
                                          config.seed, perm_cache)
        batch = assemble_batch(records, indices, step, config,
                               state.backbone.config, controls)
        loss = train_step(state, batch, config)
        rows.append(_log_row(step, lr_at(step, config), loss,
                             int(batch.uncond_flags.sum())))
        if checkpoint_every and (step + 1) % checkpoint_every == 0:
            _save_state(out_checkpoint, state)
    _save_state(out_checkpoint, state)
    _write_log(out_log, rows)
    return state, rows


def _state_from_bundle(bundle: CheckpointBundle, phase: str) -> TrainState:
    state = TrainState(phase=phase, backbone=bundle.backbone, cnet=bundle.cnet,
                       step=bundle.train.step, adam={})
    expected = dict(state.trainables())
    for name, (m, v) in bundle.train.adam.items():
        if name not in expected:
            raise StateError(f"checkpoint optimizer entry {name!r} is not trainable")
        state.adam[name] = (m.reshape(expected[name].shape),
                            v.reshape(expected[name].shape))
    for name in expected:
        if name not in state.adam:
            raise StateError(f"checkpoint is missing optimizer state for {name!r}")
    return state


def _save_state(path, state: TrainState) -> None:
    snap = TrainSnapshot(
        phase=PHASES.index(state.phase), step=state.step,
        adam={name: (m.reshape(-1), v.reshape(-1))
              for name, (m, v) in state.adam.items()},
    )
    save_checkpoint(path, state.backbone, cnet=state.cnet, train=snap)


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "cond_dropped"])
        w.writeheader()
        for row in rows:
            w.writerow(row)

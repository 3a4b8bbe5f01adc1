"""Iterative parallel decoding with multi-condition guidance.

Generation starts from a fully masked map and runs a fixed number of
steps.  Each step combines up to three forward passes into guided logits,

    l = l_uncond + t * ((l_full - l_uncond) + (l_ctrl - l_uncond)),

where l_uncond is the plain backbone with the prompt dropped, l_ctrl adds
the control branch but keeps the prompt dropped, and l_full uses both.
The guidance scale t rises linearly from 0 to cfg_max across steps.  Each
masked position then draws a candidate token from its softmax; candidates
are ranked by the drawn token's log-probability plus annealed Gumbel
noise, and the scheduled number of highest-confidence tokens is committed.
Committed tokens never change afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import controlnet as cn
from .backbone import BackboneParams, ConditionEmbedding
from .controlnet import ControlNetParams
from .errors import ConfigError, NumericError, ShapeError, StateError
from .token_space import MaskedTokenMap, TokenMap, fully_masked, unmask_plan

#: Guidance variants: full Eq.-style combination, each single-delta
#: ablation, and plain unconditional decoding.
GUIDANCE_MODES = ("multi", "full_only", "control_only", "uncond")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 12
    cfg_max: float = 3.0
    gumbel_temp: float = 9.0
    greedy_final: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_max < 0 or self.gumbel_temp < 0:
            raise ConfigError(
                f"cfg_max and gumbel_temp must be >= 0, got "
                f"{self.cfg_max}, {self.gumbel_temp}"
            )


@dataclass
class SamplerState:
    current: MaskedTokenMap
    step: int
    rng: np.random.Generator
    plan: list = field(default_factory=list)  # per-step reveal counts


def init_state(masked: MaskedTokenMap, config: SamplerConfig,
               rng: np.random.Generator) -> SamplerState:
    return SamplerState(current=masked, step=0, rng=rng,
                        plan=unmask_plan(masked.masked_count, config.steps))


def cfg_scale_at(k: int, config: SamplerConfig) -> float:
    """Guidance scale at step k: linear from 0 to cfg_max inclusive."""
    if not 0 <= k < config.steps:
        raise ValueError(f"step {k} outside [0, {config.steps})")
    if config.steps == 1:
        return 0.0
    return config.cfg_max * k / (config.steps - 1)


def gumbel_temp_at(k: int, config: SamplerConfig) -> float:
    """Confidence-noise temperature at step k: linear from gumbel_temp to 0."""
    if not 0 <= k < config.steps:
        raise ValueError(f"step {k} outside [0, {config.steps})")
    return config.gumbel_temp * (config.steps - 1 - k) / max(config.steps - 1, 1)


def cfg_combine(l_uncond: np.ndarray, l_ctrl: np.ndarray, l_full: np.ndarray,
                t: float) -> np.ndarray:
    """Sum both conditional deltas, scaled by t, on top of the unconditional logits."""
    if not (l_uncond.shape == l_ctrl.shape == l_full.shape):
        raise ShapeError(
            f"logit shapes disagree: {l_uncond.shape}, {l_ctrl.shape}, {l_full.shape}"
        )
    return l_uncond + t * ((l_full - l_uncond) + (l_ctrl - l_uncond))


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    mx = rows.max(axis=-1, keepdims=True)
    z = rows - mx
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_step(state: SamplerState, l_foley: np.ndarray,
                config: SamplerConfig) -> SamplerState:
    """Commit the scheduled number of highest-confidence drawn tokens."""
    cur = state.current
    f, t = cur.tokens.shape
    if l_foley.shape != (f, t, cur.tokens.vocab):
        raise ShapeError(
            f"logits shape {l_foley.shape} != ({f}, {t}, {cur.tokens.vocab})"
        )
    if not np.isfinite(l_foley).all():
        raise NumericError("non-finite logits entering the sampler")
    flat_mask = cur.mask.reshape(-1)
    pos = np.flatnonzero(flat_mask)
    if pos.size == 0:
        raise StateError("sample_step called with no masked positions")

    logp = _log_softmax(l_foley.reshape(-1, cur.tokens.vocab)[pos])
    final = state.step == config.steps - 1
    if final and config.greedy_final:
        cand = logp.argmax(axis=1)
    else:
        cand = (logp + state.rng.gumbel(size=logp.shape)).argmax(axis=1)
    conf = logp[np.arange(pos.size), cand]
    tau = gumbel_temp_at(state.step, config)
    if tau > 0.0:
        conf = conf + tau * state.rng.gumbel(size=pos.size)

    n_commit = state.plan[state.step]
    if n_commit > pos.size:
        raise StateError(
            f"plan wants {n_commit} reveals but only {pos.size} positions are masked"
        )
    grid = cur.tokens.grid.reshape(-1).copy()
    mask = flat_mask.copy()
    if n_commit > 0:
        # Highest confidence first; ties break by row-major position.
        order = np.lexsort((pos, -conf))[:n_commit]
        grid[pos[order]] = cand[order]
        mask[pos[order]] = False
    new_map = MaskedTokenMap(
        tokens=TokenMap(grid.reshape(f, t), cur.tokens.vocab), mask=mask.reshape(f, t)
    )
    return SamplerState(current=new_map, step=state.step + 1, rng=state.rng,
                        plan=state.plan)


def _mode_logits(backbone: BackboneParams, cnet: ControlNetParams | None,
                 ids: np.ndarray, prompts: np.ndarray, control: np.ndarray | None,
                 mode: str) -> tuple:
    """The per-mode batched passes: (l_uncond, l_ctrl, l_full), unused ones None."""
    n = ids.shape[0]
    all_uncond = np.ones(n, dtype=bool)
    no_flags = np.zeros(n, dtype=bool)
    uncond_rows = np.repeat(backbone.uncond_emb[None, :], n, axis=0)
    l_uncond, _ = bb.forward_batch(backbone, ids, uncond_rows, all_uncond)
    if mode == "uncond":
        return l_uncond, None, None
    if cnet is None or control is None:
        raise StateError(f"guidance mode {mode!r} needs a control branch and grid")
    l_ctrl = l_full = None
    if mode in ("multi", "control_only"):
        l_ctrl, _ = cn.forward_controlled_batch(backbone, cnet, ids, uncond_rows,
                                                all_uncond, control)
    if mode in ("multi", "full_only"):
        l_full, _ = cn.forward_controlled_batch(backbone, cnet, ids, prompts,
                                                no_flags, control)
    return l_uncond, l_ctrl, l_full


def _combine(l_uncond, l_ctrl, l_full, t: float, mode: str) -> np.ndarray:
    if mode == "uncond":
        return l_uncond
    if mode == "multi":
        return cfg_combine(l_uncond, l_ctrl, l_full, t)
    if mode == "full_only":
        return l_uncond + t * (l_full - l_uncond)
    if mode == "control_only":
        return l_uncond + t * (l_ctrl - l_uncond)
    raise ConfigError(f"unknown guidance mode {mode!r}; expected {GUIDANCE_MODES}")


def generate_batch(backbone: BackboneParams, cnet: ControlNetParams | None,
                   prompts: np.ndarray, controls: np.ndarray | None,
                   config: SamplerConfig, seed: int, mode: str = "multi",
                   traces: list | None = None) -> list:
    """Decode a batch of clips; clip b uses the rng stream (seed, b).

    prompts is (B, C); controls is (B, S, D) or None for unconditional
    decoding.  Batching groups the model passes across clips; noise draws
    stay per-clip, so results are reproducible for a fixed seed and batch.
    """
    if mode not in GUIDANCE_MODES:
        raise ConfigError(f"unknown guidance mode {mode!r}; expected {GUIDANCE_MODES}")
    cfg = backbone.config
    n = prompts.shape[0]
    states = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        states.append(init_state(fully_masked(cfg.geometry, cfg.vocab), config, rng))
    f, tdim = cfg.geometry.freq_tokens, cfg.geometry.time_tokens
    for k in range(config.steps):
        ids = np.stack([s.current.tokens.grid.reshape(-1) for s in states])
        l_u, l_c, l_f = _mode_logits(backbone, cnet, ids, prompts, controls, mode)
        t_k = cfg_scale_at(k, config)
        for i in range(n):
            li = _combine(
                l_u[i], None if l_c is None else l_c[i],
                None if l_f is None else l_f[i], t_k, mode,
            ).reshape(f, tdim, cfg.vocab)
            states[i] = sample_step(states[i], li, config)
            if traces is not None:
                traces[i].append(_trace_row(states[i], k, config))
    out = []
    for s in states:
        if s.current.masked_count:
            raise StateError("decoding ended with masked positions left")
        out.append(s.current.tokens)
    return out


def generate(backbone: BackboneParams, cnet: ControlNetParams | None,
             prompt: ConditionEmbedding, control: np.ndarray | None,
             config: SamplerConfig, rng: np.random.Generator, mode: str = "multi",
             trace: list | None = None) -> TokenMap:
    """Decode one clip from fully masked to fully revealed."""
    if mode not in GUIDANCE_MODES:
        raise ConfigError(f"unknown guidance mode {mode!r}; expected {GUIDANCE_MODES}")
    cfg = backbone.config
    cvec, _ = bb.condition_batch(backbone, prompt)
    ctrl = None
    if control is not None:
        ctrl = cn._check_control(backbone, control).reshape(1, cfg.seq_len, cfg.dim)
    state = init_state(fully_masked(cfg.geometry, cfg.vocab), config, rng)
    f, tdim = cfg.geometry.freq_tokens, cfg.geometry.time_tokens
    for k in range(config.steps):
        ids = state.current.tokens.grid.reshape(1, -1)
        l_u, l_c, l_f = _mode_logits(backbone, cnet, ids, cvec, ctrl, mode)
        li = _combine(
            l_u[0], None if l_c is None else l_c[0],
            None if l_f is None else l_f[0], cfg_scale_at(k, config), mode,
        ).reshape(f, tdim, cfg.vocab)
        state = sample_step(state, li, config)
        if trace is not None:
            trace.append(_trace_row(state, k, config))
    if state.current.masked_count:
        raise StateError("decoding ended with masked positions left")
    return state.current.tokens


def _trace_row(state_after: SamplerState, k: int, config: SamplerConfig) -> dict:
    return {
        "step": k,
        "masked_after": state_after.current.masked_count,
        "cfg_scale": cfg_scale_at(k, config),
        "gumbel_temp": gumbel_temp_at(k, config),
    }


def write_trace_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "masked_after", "cfg_scale",
                                           "gumbel_temp"])
        w.writeheader()
        for row in rows:
            w.writerow(row)

"""Control branch: a trainable copy of the backbone's first blocks.

The branch runs on the same embedded token stream as the backbone, with a
projected control grid added at its input.  Each branch block's output goes
through a zero-initialized linear connector and is added to the matching
backbone block's output, so a freshly built branch leaves the backbone's
function bit-for-bit unchanged.  During branch training the backbone is
fully frozen; only the copied blocks, the connectors, and the control input
projector receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .backbone import (
    BackboneParams,
    BlockParams,
    ConditionEmbedding,
    TrainBatch,
    condition_batch,
    masked_ce_and_grad,
    zero_grads,
)
from .errors import ConfigError, ShapeError
from .token_space import MaskedTokenMap

_BUILD_ENTROPY = 0x46474E43  # fixed stream for the projector init


@dataclass
class ControlNetParams:
    """Trainable control branch built from a specific backbone."""

    n_copy: int
    ctrl_w: np.ndarray            # (D, D) control input projector
    ctrl_b: np.ndarray            # (D,)
    blocks: list                  # n_copy copied BlockParams
    conn_w: list                  # n_copy (D, D) connectors, zero at build
    conn_b: list                  # n_copy (D,)

    def named_arrays(self):
        yield "ctrl_w", self.ctrl_w
        yield "ctrl_b", self.ctrl_b
        for i, blk in enumerate(self.blocks):
            yield from blk.named_arrays(f"blocks.{i}.")
        for i in range(self.n_copy):
            yield f"connectors.{i}.w", self.conn_w[i]
            yield f"connectors.{i}.b", self.conn_b[i]

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_arrays())


def build_controlnet(backbone: BackboneParams, n_copy: int,
                     rng: np.random.Generator | None = None) -> ControlNetParams:
    """Copy the first ``n_copy`` backbone blocks and attach zeroed connectors.

    The control input projector weight is randomly initialized (zero bias);
    with connectors at zero it cannot affect the output yet, but a zero
    projector would stall training, since control influence would then need
    two factors to move off zero together.  ``rng`` defaults to a fixed
    stream so repeated builds from the same backbone are identical.
    """
    depth = backbone.config.depth
    if not 1 <= n_copy <= depth:
        raise ConfigError(f"n_copy must be in [1, {depth}], got {n_copy}")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([_BUILD_ENTROPY, n_copy]))
    d = backbone.config.dim
    return ControlNetParams(
        n_copy=n_copy,
        ctrl_w=rng.normal(0.0, 0.02, (d, d)),
        ctrl_b=np.zeros(d),
        blocks=[backbone.blocks[i].copy() for i in range(n_copy)],
        conn_w=[np.zeros((d, d)) for _ in range(n_copy)],
        conn_b=[np.zeros(d) for _ in range(n_copy)],
    )


def _check_control(backbone: BackboneParams, control: np.ndarray) -> np.ndarray:
    cfg = backbone.config
    f, t, d = cfg.geometry.freq_tokens, cfg.geometry.time_tokens, cfg.dim
    control = np.asarray(control, dtype=np.float64)
    if control.shape != (f, t, d):
        raise ShapeError(f"control grid shape {control.shape} != ({f}, {t}, {d})")
    return control


def forward_controlled_batch(backbone: BackboneParams, cnet: ControlNetParams,
                             ids: np.ndarray, cond: np.ndarray,
                             uncond_flags: np.ndarray | None, control: np.ndarray,
                             want_cache: bool = False):
    """Controlled pass on (B, S) ids with a (B, S, D) control batch.

    Returns (logits (B, S, V), cache).  Backbone block j's output gains the
    connector-projected output of control block j for j < n_copy; later
    blocks run unmodified.
    """
    cfg = backbone.config
    if ids.ndim != 2 or ids.shape[1] != cfg.seq_len:
        raise ShapeError(f"ids must be (B, {cfg.seq_len}), got {ids.shape}")
    if control.shape != (ids.shape[0], cfg.seq_len, cfg.dim):
        raise ShapeError(
            f"control batch shape {control.shape} != "
            f"({ids.shape[0]}, {cfg.seq_len}, {cfg.dim})"
        )
    if uncond_flags is None:
        uncond_flags = np.zeros(ids.shape[0], dtype=bool)
    cond_r = bb.resolve_conditions(backbone, cond, uncond_flags)
    h0 = bb.embed_tokens_batch(backbone, ids, cond_r)
    n, s, d = h0.shape

    c = h0 + (control.reshape(n * s, d) @ cnet.ctrl_w + cnet.ctrl_b).reshape(n, s, d)
    h = h0
    bb_caches, cn_caches, c_outs = [], [], []
    for j in range(cfg.depth):
        h, bc = bb._block_fwd(h, backbone.blocks[j], cfg.heads, want_cache)
        bb_caches.append(bc)
        if j < cnet.n_copy:
            c, cc = bb._block_fwd(c, cnet.blocks[j], cfg.heads, want_cache)
            cn_caches.append(cc)
            if want_cache:
                c_outs.append(c)
            h = h + (c.reshape(n * s, d) @ cnet.conn_w[j] + cnet.conn_b[j]).reshape(n, s, d)
    hn, xhatf, rstdf = bb._ln_fwd(h, backbone.final_g, backbone.final_b)
    logits = (hn.reshape(n * s, d) @ backbone.head_w + backbone.head_b).reshape(
        n, s, cfg.vocab)
    cache = None
    if want_cache:
        cache = dict(ids=ids, cond=cond_r, uncond_flags=uncond_flags,
                     control=control, bb_blocks=bb_caches, cn_blocks=cn_caches,
                     c_outs=c_outs, hn=hn, xhatf=xhatf, rstdf=rstdf)
    return logits, cache


def backward_controlled(backbone: BackboneParams, cnet: ControlNetParams, cache,
                        dlogits: np.ndarray, grads) -> None:
    """Backward pass accumulating control-branch gradients only (backbone frozen)."""
    cfg = backbone.config
    heads = cfg.heads
    n, s, _ = dlogits.shape
    d = cfg.dim
    dh = bb.head_backward(backbone, cache, dlogits, None)
    for j in range(cfg.depth - 1, cnet.n_copy - 1, -1):
        dh = bb._block_bwd(dh, backbone.blocks[j], cache["bb_blocks"][j], heads,
                           None, "")
    dc_next = np.zeros_like(dh)  # grad at control block j's output from blocks above
    for j in range(cnet.n_copy - 1, -1, -1):
        dflat = dh.reshape(n * s, d)
        c_out = cache["c_outs"][j].reshape(n * s, d)
        grads[f"connectors.{j}.w"] += c_out.T @ dflat
        grads[f"connectors.{j}.b"] += dflat.sum(axis=0)
        dc = dc_next + (dflat @ cnet.conn_w[j].T).reshape(n, s, d)
        dc_next = bb._block_bwd(dc, cnet.blocks[j], cache["cn_blocks"][j], heads,
                                grads, f"blocks.{j}.")
        dh = bb._block_bwd(dh, backbone.blocks[j], cache["bb_blocks"][j], heads,
                           None, "")
    ctrl = cache["control"].reshape(n * s, d)
    grads["ctrl_w"] += ctrl.T @ dc_next.reshape(n * s, d)
    grads["ctrl_b"] += dc_next.sum(axis=(0, 1))


def forward_controlled(backbone: BackboneParams, cnet: ControlNetParams,
                       masked: MaskedTokenMap, cond: ConditionEmbedding,
                       control: np.ndarray) -> np.ndarray:
    """Logits grid (F, T, V) for one masked map with a (F, T, D) control grid."""
    bb._check_input(backbone, masked)
    control = _check_control(backbone, control)
    cfg = backbone.config
    cvec, flags = condition_batch(backbone, cond)
    ids = masked.tokens.grid.reshape(1, -1)
    ctrl = control.reshape(1, cfg.seq_len, cfg.dim)
    logits, _ = forward_controlled_batch(backbone, cnet, ids, cvec, flags, ctrl)
    f, t = cfg.geometry.freq_tokens, cfg.geometry.time_tokens
    return logits.reshape(f, t, cfg.vocab)


def loss_and_grads_controlled(backbone: BackboneParams, cnet: ControlNetParams,
                              batch: TrainBatch):
    """Masked loss and control-branch gradients; backbone stays untouched."""
    logits, cache = forward_controlled_batch(
        backbone, cnet, batch.ids, batch.cond, batch.uncond_flags, batch.control,
        want_cache=True)
    loss, dlogits = masked_ce_and_grad(logits, batch.targets, batch.mask)
    grads = zero_grads(cnet.named_arrays())
    backward_controlled(backbone, cnet, cache, dlogits, grads)
    return loss, grads


def batch_loss_controlled(backbone: BackboneParams, cnet: ControlNetParams,
                          batch: TrainBatch) -> float:
    logits, _ = forward_controlled_batch(
        backbone, cnet, batch.ids, batch.cond, batch.uncond_flags, batch.control)
    loss, _ = masked_ce_and_grad(logits, batch.targets, batch.mask, want_grad=False)
    return loss

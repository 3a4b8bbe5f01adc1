"""Bidirectional transformer over embedded grid tokens, with manual backprop.

The backbone embeds each token id (plus separable 2-D position embeddings
and a projected condition vector added to every position), runs pre-norm
attention/MLP blocks with full bidirectional attention over the F*T
positions, and emits per-position logits over the vocabulary through a
final layer norm and a linear head.

Everything is float64 numpy.  Forward passes can record a cache; the
matching backward pass produces gradients for every parameter, verified
against central finite differences.  Gradients live in flat dicts keyed by
dotted parameter names ("blocks.3.qkv_w"), the same names used by the
optimizer and the checkpoint format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError
from .token_space import MaskedTokenMap, PatchGeometry, TokenMap

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 2
    ff_dim: int = 128
    vocab: int = 64
    geometry: PatchGeometry = field(default_factory=PatchGeometry)
    condition_dim: int = 16

    def __post_init__(self):
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"depth must be even and >= 2, got {self.depth}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if min(self.dim, self.heads, self.ff_dim, self.vocab, self.condition_dim) < 1:
            raise ConfigError(f"all model dimensions must be positive: {self}")

    @property
    def seq_len(self) -> int:
        return self.geometry.num_tokens


@dataclass
class ConditionEmbedding:
    """A prompt vector, or the learned unconditional stand-in when flagged."""

    vector: np.ndarray
    is_unconditional: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ShapeError(f"condition vector must be 1-D, got {self.vector.shape}")


@dataclass
class BlockParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    qkv_w: np.ndarray
    qkv_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ff1_w: np.ndarray
    ff1_b: np.ndarray
    ff2_w: np.ndarray
    ff2_b: np.ndarray

    _FIELDS = (
        "ln1_g", "ln1_b", "qkv_w", "qkv_b", "out_w", "out_b",
        "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
    )

    def named_arrays(self, prefix: str = ""):
        for name in self._FIELDS:
            yield prefix + name, getattr(self, name)

    def copy(self) -> "BlockParams":
        return BlockParams(*(getattr(self, f).copy() for f in self._FIELDS))


@dataclass
class BackboneParams:
    config: ModelConfig
    tok_emb: np.ndarray      # (V+1, D), row V is the mask sentinel
    pos_f: np.ndarray        # (F, D)
    pos_t: np.ndarray        # (T, D)
    cond_w: np.ndarray       # (C, D)
    cond_b: np.ndarray       # (D,)
    uncond_emb: np.ndarray   # (C,), learned unconditional stand-in
    blocks: list
    final_g: np.ndarray
    final_b: np.ndarray
    head_w: np.ndarray       # (D, V)
    head_b: np.ndarray       # (V,)

    def named_arrays(self):
        yield "tok_emb", self.tok_emb
        yield "pos_f", self.pos_f
        yield "pos_t", self.pos_t
        yield "cond_w", self.cond_w
        yield "cond_b", self.cond_b
        yield "uncond_emb", self.uncond_emb
        for i, blk in enumerate(self.blocks):
            yield from blk.named_arrays(f"blocks.{i}.")
        yield "final_g", self.final_g
        yield "final_b", self.final_b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_arrays())

    def unconditional(self) -> ConditionEmbedding:
        return ConditionEmbedding(self.uncond_emb.copy(), is_unconditional=True)


def zero_grads(named) -> dict:
    """A fresh zero-filled gradient dict matching a named_arrays() iterator."""
    return {name: np.zeros_like(arr) for name, arr in named}


def init_backbone(config: ModelConfig, rng: np.random.Generator) -> BackboneParams:
    """Scaled-normal init; residual-output weights shrunk by 1/sqrt(2*depth), zero biases."""
    d, ff, v, c = config.dim, config.ff_dim, config.vocab, config.condition_dim
    f, t = config.geometry.freq_tokens, config.geometry.time_tokens
    std = 0.02
    res_std = std / math.sqrt(2.0 * config.depth)

    def blk() -> BlockParams:
        return BlockParams(
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            qkv_w=rng.normal(0.0, std, (d, 3 * d)), qkv_b=np.zeros(3 * d),
            out_w=rng.normal(0.0, res_std, (d, d)), out_b=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            ff1_w=rng.normal(0.0, std, (d, ff)), ff1_b=np.zeros(ff),
            ff2_w=rng.normal(0.0, res_std, (ff, d)), ff2_b=np.zeros(d),
        )

    return BackboneParams(
        config=config,
        tok_emb=rng.normal(0.0, std, (v + 1, d)),
        pos_f=rng.normal(0.0, std, (f, d)),
        pos_t=rng.normal(0.0, std, (t, d)),
        cond_w=rng.normal(0.0, std, (c, d)),
        cond_b=np.zeros(d),
        uncond_emb=rng.normal(0.0, std, c),
        blocks=[blk() for _ in range(config.depth)],
        final_g=np.ones(d),
        final_b=np.zeros(d),
        head_w=rng.normal(0.0, std, (d, v)),
        head_b=np.zeros(v),
    )


# ---------------------------------------------------------------------------
# Primitive forward/backward pieces
# ---------------------------------------------------------------------------


def _gelu(x):
    """Exact GELU; returns (value, gaussian cdf term) so backward reuses the erf."""
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * phi, phi


def _gelu_grad(x, phi):
    return phi + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd


def _ln_bwd(dy, xhat, rstd, g):
    """Returns (dx, dgamma, dbeta)."""
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _block_fwd(x, blk: BlockParams, heads: int, want_cache: bool):
    b, s, d = x.shape
    dh = d // heads
    alpha = 1.0 / math.sqrt(dh)

    a, xhat1, rstd1 = _ln_fwd(x, blk.ln1_g, blk.ln1_b)
    qkv = a.reshape(b * s, d) @ blk.qkv_w
    qkv += blk.qkv_b
    qkv = qkv.reshape(b, s, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, S, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * alpha
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    h2 = x + (ctx.reshape(b * s, d) @ blk.out_w + blk.out_b).reshape(b, s, d)

    m, xhat2, rstd2 = _ln_fwd(h2, blk.ln2_g, blk.ln2_b)
    u1 = (m.reshape(b * s, d) @ blk.ff1_w + blk.ff1_b).reshape(b, s, -1)
    gact, phi = _gelu(u1)
    y = h2 + (gact.reshape(b * s, -1) @ blk.ff2_w + blk.ff2_b).reshape(b, s, d)

    cache = None
    if want_cache:
        cache = dict(a=a, xhat1=xhat1, rstd1=rstd1, q=q, k=k, v=v, p=p, ctx=ctx,
                     m=m, xhat2=xhat2, rstd2=rstd2, u1=u1, phi=phi, gact=gact)
    return y, cache


def _block_bwd(dy, blk: BlockParams, cache, heads: int, grads, prefix: str):
    """Backward through one block; accumulates into ``grads`` when given (may be None)."""
    b, s, d = dy.shape
    dh = d // heads
    alpha = 1.0 / math.sqrt(dh)
    want = grads is not None

    # MLP half
    gact = cache["gact"]
    dg = dy.reshape(b * s, d) @ blk.ff2_w.T
    if want:
        grads[prefix + "ff2_w"] += gact.reshape(b * s, -1).T @ dy.reshape(b * s, d)
        grads[prefix + "ff2_b"] += dy.sum(axis=(0, 1))
    du1 = dg.reshape(b, s, -1) * _gelu_grad(cache["u1"], cache["phi"])
    if want:
        m = cache["m"]
        grads[prefix + "ff1_w"] += m.reshape(b * s, d).T @ du1.reshape(b * s, -1)
        grads[prefix + "ff1_b"] += du1.sum(axis=(0, 1))
    dm = (du1.reshape(b * s, -1) @ blk.ff1_w.T).reshape(b, s, d)
    dx_ln2, dg2, db2 = _ln_bwd(dm, cache["xhat2"], cache["rstd2"], blk.ln2_g)
    if want:
        grads[prefix + "ln2_g"] += dg2
        grads[prefix + "ln2_b"] += db2
    dh2 = dy + dx_ln2

    # Attention half
    dattn = dh2.reshape(b * s, d)
    dctx = (dattn @ blk.out_w.T).reshape(b, s, d)
    if want:
        grads[prefix + "out_w"] += cache["ctx"].reshape(b * s, d).T @ dattn
        grads[prefix + "out_b"] += dattn.sum(axis=0)
    dctx_h = dctx.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    p, q, k, v = cache["p"], cache["q"], cache["k"], cache["v"]
    dp = dctx_h @ v.swapaxes(-1, -2)
    dv = p.swapaxes(-1, -2) @ dctx_h
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    ds *= alpha
    dq = ds @ k
    dk = ds.swapaxes(-1, -2) @ q
    dqkv = np.stack([dq, dk, dv])                    # (3, B, H, S, dh)
    dqkv = dqkv.transpose(1, 3, 0, 2, 4).reshape(b * s, 3 * d)
    if want:
        grads[prefix + "qkv_w"] += cache["a"].reshape(b * s, d).T @ dqkv
        grads[prefix + "qkv_b"] += dqkv.sum(axis=0)
    da = (dqkv @ blk.qkv_w.T).reshape(b, s, d)
    dx_ln1, dg1, db1 = _ln_bwd(da, cache["xhat1"], cache["rstd1"], blk.ln1_g)
    if want:
        grads[prefix + "ln1_g"] += dg1
        grads[prefix + "ln1_b"] += db1
    return dh2 + dx_ln1


# ---------------------------------------------------------------------------
# Batched model forward/backward
# ---------------------------------------------------------------------------


def resolve_conditions(params: BackboneParams, cond: np.ndarray, uncond_flags: np.ndarray) -> np.ndarray:
    """Replace flagged rows of a (B, C) condition batch with the learned stand-in."""
    out = np.array(cond, dtype=np.float64, copy=True)
    out[uncond_flags] = params.uncond_emb
    return out


def embed_tokens_batch(params: BackboneParams, ids: np.ndarray, cond: np.ndarray) -> np.ndarray:
    """(B, S) ids + (B, C) resolved conditions -> (B, S, D) embeddings."""
    cfg = params.config
    s = cfg.seq_len
    pos = (params.pos_f[:, None, :] + params.pos_t[None, :, :]).reshape(s, cfg.dim)
    cp = cond @ params.cond_w + params.cond_b
    return params.tok_emb[ids] + pos[None, :, :] + cp[:, None, :]


def forward_batch(params: BackboneParams, ids: np.ndarray, cond: np.ndarray,
                  uncond_flags: np.ndarray | None = None, want_cache: bool = False):
    """Full backbone pass on a (B, S) id batch.  Returns (logits (B, S, V), cache)."""
    cfg = params.config
    if ids.ndim != 2 or ids.shape[1] != cfg.seq_len:
        raise ShapeError(f"ids must be (B, {cfg.seq_len}), got {ids.shape}")
    if uncond_flags is None:
        uncond_flags = np.zeros(ids.shape[0], dtype=bool)
    cond_r = resolve_conditions(params, cond, uncond_flags)
    h = embed_tokens_batch(params, ids, cond_r)
    caches = []
    for blk in params.blocks:
        h, c = _block_fwd(h, blk, cfg.heads, want_cache)
        caches.append(c)
    hn, xhatf, rstdf = _ln_fwd(h, params.final_g, params.final_b)
    b, s, d = hn.shape
    logits = (hn.reshape(b * s, d) @ params.head_w + params.head_b).reshape(b, s, cfg.vocab)
    cache = None
    if want_cache:
        cache = dict(ids=ids, cond=cond_r, uncond_flags=uncond_flags,
                     blocks=caches, hn=hn, xhatf=xhatf, rstdf=rstdf)
    return logits, cache


def head_backward(params: BackboneParams, cache, dlogits: np.ndarray, grads) -> np.ndarray:
    """Backward through head + final norm; returns grad w.r.t. the last block output."""
    b, s, v = dlogits.shape
    d = params.config.dim
    dl = dlogits.reshape(b * s, v)
    if grads is not None:
        grads["head_w"] += cache["hn"].reshape(b * s, d).T @ dl
        grads["head_b"] += dl.sum(axis=0)
    dhn = (dl @ params.head_w.T).reshape(b, s, d)
    dhf, dgf, dbf = _ln_bwd(dhn, cache["xhatf"], cache["rstdf"], params.final_g)
    if grads is not None:
        grads["final_g"] += dgf
        grads["final_b"] += dbf
    return dhf


def embed_backward(params: BackboneParams, cache, dh0: np.ndarray, grads) -> None:
    """Accumulate embedding-table, position, and condition-path gradients."""
    cfg = params.config
    f, t = cfg.geometry.freq_tokens, cfg.geometry.time_tokens
    b = dh0.shape[0]
    np.add.at(grads["tok_emb"], cache["ids"].reshape(-1), dh0.reshape(-1, cfg.dim))
    d4 = dh0.reshape(b, f, t, cfg.dim)
    grads["pos_f"] += d4.sum(axis=(0, 2))
    grads["pos_t"] += d4.sum(axis=(0, 1))
    dcp = dh0.sum(axis=1)                       # (B, D)
    grads["cond_w"] += cache["cond"].T @ dcp
    grads["cond_b"] += dcp.sum(axis=0)
    dcv = dcp @ params.cond_w.T                 # (B, C)
    flags = cache["uncond_flags"]
    if flags.any():
        grads["uncond_emb"] += dcv[flags].sum(axis=0)


def backward_batch(params: BackboneParams, cache, dlogits: np.ndarray,
                   grads, want_embed_grads: bool = True) -> np.ndarray:
    """Full backward pass; returns grad w.r.t. the embedding output h0."""
    dh = head_backward(params, cache, dlogits, grads)
    for idx in range(len(params.blocks) - 1, -1, -1):
        dh = _block_bwd(dh, params.blocks[idx], cache["blocks"][idx],
                        params.config.heads, grads, f"blocks.{idx}.")
    if grads is not None and want_embed_grads:
        embed_backward(params, cache, dh, grads)
    return dh


# ---------------------------------------------------------------------------
# Public single-grid surface
# ---------------------------------------------------------------------------


def _check_input(params: BackboneParams, masked: MaskedTokenMap) -> None:
    cfg = params.config
    f, t = cfg.geometry.freq_tokens, cfg.geometry.time_tokens
    if masked.tokens.shape != (f, t):
        raise ShapeError(f"grid shape {masked.tokens.shape} != model geometry ({f}, {t})")
    if masked.tokens.vocab != cfg.vocab:
        raise ShapeError(f"grid vocab {masked.tokens.vocab} != model vocab {cfg.vocab}")


def condition_batch(params: BackboneParams, cond: ConditionEmbedding) -> tuple[np.ndarray, np.ndarray]:
    """A (1, C) condition row + (1,) flag for the single-grid surface."""
    cfg = params.config
    if cond.is_unconditional:
        vec = params.uncond_emb
    else:
        vec = cond.vector
        if vec.shape != (cfg.condition_dim,):
            raise ShapeError(f"condition dim {vec.shape} != ({cfg.condition_dim},)")
    return vec[None, :], np.array([cond.is_unconditional])


def forward(params: BackboneParams, masked: MaskedTokenMap, cond: ConditionEmbedding) -> np.ndarray:
    """Logits grid (F, T, V) for one masked token map."""
    _check_input(params, masked)
    cfg = params.config
    cvec, flags = condition_batch(params, cond)
    ids = masked.tokens.grid.reshape(1, -1)
    logits, _ = forward_batch(params, ids, cvec, flags)
    f, t = cfg.geometry.freq_tokens, cfg.geometry.time_tokens
    return logits.reshape(f, t, cfg.vocab)


def mlm_loss(logits: np.ndarray, targets: TokenMap, mask: np.ndarray) -> float:
    """Mean cross-entropy over masked positions only."""
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:2] != targets.shape or mask.shape != targets.shape:
        raise ShapeError(
            f"logits {logits.shape}, targets {targets.shape}, mask {mask.shape} disagree"
        )
    if not mask.any():
        raise ValueError("mlm_loss needs at least one masked position")
    loss, _ = masked_ce_and_grad(
        logits.reshape(1, *logits.shape), targets.grid.reshape(1, -1),
        mask.reshape(1, -1), want_grad=False,
    )
    return loss


def masked_ce_and_grad(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                       want_grad: bool = True):
    """Batched masked cross-entropy.

    logits (B, S, V) or (B, F, T, V) flattened internally; targets/mask (B, S).
    Returns (scalar loss, dlogits or None); dlogits is zero off-mask.
    """
    b = logits.shape[0]
    v = logits.shape[-1]
    lf = logits.reshape(b, -1, v)
    s = lf.shape[1]
    sel = mask.reshape(-1)
    if not sel.any():
        raise ValueError("masked cross-entropy needs at least one masked position")
    rows = lf.reshape(b * s, v)[sel]
    tgt = targets.reshape(-1)[sel]
    mx = rows.max(axis=1, keepdims=True)
    z = np.exp(rows - mx)
    zsum = z.sum(axis=1)
    lse = mx[:, 0] + np.log(zsum)
    picked = rows[np.arange(rows.shape[0]), tgt]
    losses = lse - picked
    loss = float(losses.mean())
    if not math.isfinite(loss):
        raise NumericError(f"non-finite masked cross-entropy: {loss}")
    if not want_grad:
        return loss, None
    m = rows.shape[0]
    drows = z / zsum[:, None]
    drows[np.arange(m), tgt] -= 1.0
    drows /= m
    dlogits = np.zeros((b * s, v))
    dlogits[sel] = drows
    return loss, dlogits.reshape(logits.shape)


# ---------------------------------------------------------------------------
# Training-batch loss/grad and the finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    """One masked-training batch: inputs with sentinels, intact targets, masks, conditions."""

    ids: np.ndarray          # (B, S) with sentinel at masked positions
    targets: np.ndarray      # (B, S) intact token ids
    mask: np.ndarray         # (B, S) bool, True = position in the loss
    cond: np.ndarray         # (B, C) prompt vectors
    uncond_flags: np.ndarray  # (B,) bool, True = condition dropped
    control: np.ndarray | None = None  # (B, S, D) aligned control grid, control branch only


def loss_and_grads(params: BackboneParams, batch: TrainBatch):
    """Loss plus full gradient dict for a plain backbone batch."""
    logits, cache = forward_batch(params, batch.ids, batch.cond, batch.uncond_flags,
                                  want_cache=True)
    loss, dlogits = masked_ce_and_grad(logits, batch.targets, batch.mask)
    grads = zero_grads(params.named_arrays())
    backward_batch(params, cache, dlogits, grads)
    return loss, grads


def batch_loss(params: BackboneParams, batch: TrainBatch) -> float:
    logits, _ = forward_batch(params, batch.ids, batch.cond, batch.uncond_flags)
    loss, _ = masked_ce_and_grad(logits, batch.targets, batch.mask, want_grad=False)
    return loss


def finite_diff_named(loss_fn, named_arrays, analytic: dict, epsilon: float,
                      coords_per_group: int, rng: np.random.Generator,
                      scale_floor: float = 1e-5) -> float:
    """Max relative error between analytic grads and central differences.

    Samples up to ``coords_per_group`` coordinates per named array, perturbs
    each by +/- epsilon, and compares (f+ - f-) / (2 eps) against the
    analytic entry.  Relative error uses max(|a|, |fd|, scale_floor) as
    scale; the floor absorbs central-difference roundoff (about
    |loss| * 2^-52 / epsilon, around 1e-10 here) on coordinates whose true
    gradient is near zero, where no relative comparison is meaningful.
    """
    worst = 0.0
    for name, arr in named_arrays:
        n = arr.size
        flat = arr.reshape(-1)
        if n <= coords_per_group:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_group, replace=False)
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn()
            flat[i] = orig - epsilon
            fm = loss_fn()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * epsilon)
            err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), scale_floor)
            worst = max(worst, err)
    return worst


def finite_diff_check(params: BackboneParams, batch: TrainBatch, epsilon: float = 1e-5,
                      coords_per_group: int = 200,
                      rng: np.random.Generator | None = None) -> float:
    """Gradient check of the masked loss through the full backbone."""
    if rng is None:
        rng = np.random.default_rng(0)
    _, grads = loss_and_grads(params, batch)
    return finite_diff_named(lambda: batch_loss(params, batch), params.named_arrays(),
                             grads, epsilon, coords_per_group, rng)

"""Seeded synthetic clips: event scenes, control features, prompts, token targets.

A scene is a short list of non-overlapping timed events, each carrying a
class id.  From a scene we render

  * a sync feature track (default 240 frames per 10 s clip): the class
    embedding added on every frame an event overlaps, plus Gaussian noise,
  * a semantic track (default 80 frames): the class embedding of the
    active (else most recent) event per frame, noise-free,
  * a prompt vector: the mean of the event class embeddings,
  * a target token map: background everywhere, with each event's columns
    drawn from that class's reserved vocabulary block.

Class embeddings are orthonormal rows derived from a fixed stream keyed
only by (K, dim), so datasets generated with different seeds but the same
shape agree on what each class looks like.  Records are written to a
little-endian binary file that round-trips bit-exactly and keeps the
ground-truth scenes for evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .backbone import ConditionEmbedding
from .errors import ConfigError, FormatError, GenerationError, ShapeError
from .features import ControlFeatureSequence
from .token_space import PatchGeometry, TokenMap

_CLASS_ENTROPY = 0x46474453  # fixed stream for the class embedding table
_MAGIC = b"FGDS"
_VERSION = 1
_MAX_PLACE_TRIES = 200


@dataclass(frozen=True)
class SyntheticScene:
    """Events as (onset_seconds, duration_seconds, class_id), within one clip."""

    events: tuple
    clip_length: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(
            (float(o), float(d), int(k)) for o, d, k in self.events))
        if not self.events:
            raise ConfigError("a scene needs at least one event")
        for onset, dur, _ in self.events:
            if onset < 0 or dur <= 0 or onset + dur > self.clip_length:
                raise ConfigError(
                    f"event ({onset}, {dur}) outside [0, {self.clip_length}] clip"
                )


@dataclass(frozen=True)
class DatasetConfig:
    classes: int = 4
    sync_frames: int = 240
    semantic_frames: int = 80
    feature_dim: int = 16
    noise: float = 0.1
    background: int = 0
    class_block: int = 8          # vocabulary ids per class, blocks start at 1
    seed: int = 0
    vocab: int = 64
    max_events: int = 3
    min_duration: float = 0.5
    max_duration: float = 2.0
    min_gap: float = 0.4          # >= 2 * clip / T keeps a background column between events
    clip_length: float = 10.0

    def __post_init__(self):
        if min(self.classes, self.sync_frames, self.semantic_frames,
               self.feature_dim, self.class_block, self.max_events) < 1:
            raise ConfigError(f"all counts must be >= 1: {self}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not 0 < self.min_duration <= self.max_duration <= self.clip_length:
            raise ConfigError(
                f"need 0 < min_duration <= max_duration <= clip_length, got "
                f"{self.min_duration}, {self.max_duration}, {self.clip_length}"
            )
        if self.min_gap < 0:
            raise ConfigError(f"min_gap must be >= 0, got {self.min_gap}")
        if 1 + self.classes * self.class_block > self.vocab:
            raise ConfigError(
                f"class blocks [1, {1 + self.classes * self.class_block}) do not "
                f"fit in vocab {self.vocab}"
            )
        if not 0 <= self.background < self.vocab or 1 <= self.background < (
                1 + self.classes * self.class_block):
            raise ConfigError(
                f"background id {self.background} collides with class blocks"
            )
        if self.vocab > 0xFFFF:
            raise ConfigError(f"vocab {self.vocab} exceeds 16-bit storage")


@dataclass
class DatasetRecord:
    scene: SyntheticScene
    sync: ControlFeatureSequence
    semantic: ControlFeatureSequence
    prompt: np.ndarray            # (feature_dim,)
    tokens: TokenMap


def class_embeddings(classes: int, dim: int) -> np.ndarray:
    """Orthonormal (K, dim) table from a fixed stream keyed by shape only."""
    if dim < classes:
        raise ConfigError(
            f"orthonormal table needs dim >= classes, got {dim} < {classes}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([_CLASS_ENTROPY, classes, dim]))
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))    # fix the sign convention
    return q[:, :classes].T.copy()


def gen_scene(rng: np.random.Generator, config: DatasetConfig) -> SyntheticScene:
    """Sample a scene with non-overlapping, gap-separated events."""
    n = int(rng.integers(1, config.max_events + 1))
    placed = []
    for _ in range(n):
        ok = False
        for _ in range(_MAX_PLACE_TRIES):
            cls = int(rng.integers(config.classes))
            dur = float(rng.uniform(config.min_duration, config.max_duration))
            onset = float(rng.uniform(0.0, config.clip_length - dur))
            gap = config.min_gap
            if all(onset + dur + gap <= o or e + gap <= onset
                   for o, e, _ in placed):
                placed.append((onset, onset + dur, cls))
                ok = True
                break
        if not ok:
            raise GenerationError(
                f"could not place event {len(placed) + 1}/{n} after "
                f"{_MAX_PLACE_TRIES} tries"
            )
    placed.sort()
    return SyntheticScene(
        events=tuple((o, e - o, c) for o, e, c in placed),
        clip_length=config.clip_length,
    )


def render_features(scene: SyntheticScene, config: DatasetConfig,
                    rng: np.random.Generator):
    """(sync, semantic, prompt) tracks for one scene."""
    table = class_embeddings(config.classes, config.feature_dim)
    d = config.feature_dim

    # Sync track: frame f covers [f, f+1) in frame units; an event [o, e)
    # in seconds contributes on frames with f < e*rate and f + 1 > o*rate.
    ns = config.sync_frames
    rate_s = ns / scene.clip_length
    sync = np.zeros((ns, d))
    frames = np.arange(ns)
    for onset, dur, cls in scene.events:
        hit = (frames < (onset + dur) * rate_s) & (frames + 1 > onset * rate_s)
        sync[hit] += table[cls]
    if config.noise > 0:
        sync += config.noise * rng.normal(size=sync.shape)

    # Semantic track: the active event's class, else the most recent one.
    nm = config.semantic_frames
    rate_m = nm / scene.clip_length
    semantic = np.zeros((nm, d))
    for f in range(nm):
        current = None
        for onset, dur, cls in scene.events:   # events sorted by onset
            if onset * rate_m <= f:
                current = cls
            else:
                break
        if current is not None:
            semantic[f] = table[current]

    prompt = table[[cls for _, _, cls in scene.events]].mean(axis=0)
    return (
        ControlFeatureSequence(sync, frame_rate=rate_s),
        ControlFeatureSequence(semantic, frame_rate=rate_m),
        ConditionEmbedding(prompt),
    )


def event_columns(onset: float, duration: float, time_tokens: int,
                  clip_length: float) -> tuple[int, int]:
    """Half-open column range [start, stop) an event covers on the grid."""
    start = int(np.floor(onset * time_tokens / clip_length))
    stop = int(np.ceil((onset + duration) * time_tokens / clip_length))
    return start, min(stop, time_tokens)


def render_tokens(scene: SyntheticScene, geometry: PatchGeometry,
                  config: DatasetConfig) -> TokenMap:
    """Target map: background everywhere, class-block codes on event columns."""
    f, t = geometry.freq_tokens, geometry.time_tokens
    grid = np.full((f, t), config.background, dtype=np.int64)
    rows = np.arange(f)[:, None]
    for onset, dur, cls in scene.events:   # later events overwrite earlier ones
        start, stop = event_columns(onset, dur, t, scene.clip_length)
        cols = np.arange(start, stop)[None, :]
        grid[:, start:stop] = 1 + cls * config.class_block + (
            (rows + cols) % config.class_block)
    return TokenMap(grid, config.vocab)


def token_class(token_id: int, config: DatasetConfig) -> int:
    """Class id for a token, or -1 for background/out-of-block ids."""
    if 1 <= token_id < 1 + config.classes * config.class_block:
        return (token_id - 1) // config.class_block
    return -1


def make_record(index: int, config: DatasetConfig,
                geometry: PatchGeometry) -> DatasetRecord:
    """Record ``index`` of the dataset; derived stream (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    scene = gen_scene(rng, config)
    sync, semantic, prompt = render_features(scene, config, rng)
    tokens = render_tokens(scene, geometry, config)
    return DatasetRecord(scene, sync, semantic, prompt.vector, tokens)


def make_dataset(config: DatasetConfig, geometry: PatchGeometry,
                 count: int) -> list:
    return [make_record(i, config, geometry) for i in range(count)]


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def write_dataset(path, records, config: DatasetConfig) -> None:
    if not records:
        raise ConfigError("refusing to write an empty dataset")
    f, t = records[0].tokens.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(
            "<H8I3dQ2IQ",
            _VERSION, config.classes, config.sync_frames, config.semantic_frames,
            config.feature_dim, config.vocab, config.background,
            config.class_block, config.max_events,
            config.clip_length, config.noise, config.min_gap,
            config.seed, f, t, len(records),
        ))
        fh.write(struct.pack("<2d", config.min_duration, config.max_duration))
        for rec in records:
            if rec.tokens.shape != (f, t):
                raise ShapeError(f"record grid {rec.tokens.shape} != ({f}, {t})")
            fh.write(struct.pack("<H", len(rec.scene.events)))
            for onset, dur, cls in rec.scene.events:
                if not 0 <= cls < config.classes:
                    raise FormatError(f"event class {cls} outside K={config.classes}")
                fh.write(struct.pack("<ddI", onset, dur, cls))
            for arr, shape in (
                (rec.sync.data, (config.sync_frames, config.feature_dim)),
                (rec.semantic.data, (config.semantic_frames, config.feature_dim)),
                (rec.prompt, (config.feature_dim,)),
            ):
                if arr.shape != shape:
                    raise ShapeError(f"feature shape {arr.shape} != {shape}")
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(rec.tokens.grid, dtype="<u2").tobytes())


def read_dataset(path):
    """Returns (records, config).  Round-trips write_dataset bit-exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise FormatError(
                f"truncated dataset: wanted {n} bytes at offset {off}"
            )
        out = data[off:off + n]
        off += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if take(4) != _MAGIC:
        raise FormatError(f"not a dataset file: bad magic in {path}")
    (version, classes, sync_frames, semantic_frames, feature_dim, vocab,
     background, class_block, max_events, clip_length, noise, min_gap,
     seed, f, t, count) = unpack("<H8I3dQ2IQ")
    if version != _VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    min_duration, max_duration = unpack("<2d")
    config = DatasetConfig(
        classes=classes, sync_frames=sync_frames, semantic_frames=semantic_frames,
        feature_dim=feature_dim, noise=noise, background=background,
        class_block=class_block, seed=seed, vocab=vocab, max_events=max_events,
        min_duration=min_duration, max_duration=max_duration, min_gap=min_gap,
        clip_length=clip_length,
    )
    records = []
    for _ in range(count):
        (n_events,) = unpack("<H")
        events = []
        for _ in range(n_events):
            onset, dur, cls = unpack("<ddI")
            if cls >= classes:
                raise FormatError(f"event class {cls} >= header K {classes}")
            events.append((onset, dur, cls))
        scene = SyntheticScene(events=tuple(events), clip_length=clip_length)
        sync = np.frombuffer(take(8 * sync_frames * feature_dim), dtype="<f8")
        sync = sync.astype(np.float64).reshape(sync_frames, feature_dim)
        semantic = np.frombuffer(take(8 * semantic_frames * feature_dim),
                                 dtype="<f8")
        semantic = semantic.astype(np.float64).reshape(semantic_frames, feature_dim)
        prompt = np.frombuffer(take(8 * feature_dim), dtype="<f8").astype(np.float64)
        grid = np.frombuffer(take(2 * f * t), dtype="<u2").astype(np.int64)
        records.append(DatasetRecord(
            scene=scene,
            sync=ControlFeatureSequence(sync, frame_rate=sync_frames / clip_length),
            semantic=ControlFeatureSequence(
                semantic, frame_rate=semantic_frames / clip_length),
            prompt=prompt,
            tokens=TokenMap(grid.reshape(f, t), vocab),
        ))
    if off != len(data):
        raise FormatError(f"dataset has {len(data) - off} trailing bytes")
    return records, config

"""Binary checkpoint format for backbone, control branch, and optimizer state.

Layout (all little-endian):

    magic "FGCK" | u16 version | u16 section count
    per section: 4-byte tag | u64 payload length | payload

Sections:

    "BKBN"  model config (9 x u32) then every backbone array as raw f64 in
            fixed declaration order.
    "CNET"  u32 n_copy, the 32-byte SHA-256 of the BKBN payload the branch
            was trained against, then every branch array as raw f64.
    "TRNS"  u8 phase, u64 step, u32 entry count, then per entry:
            u16 name length, utf-8 name, u64 element count, f64 m, f64 v.

Loading verifies magic, version, section sizes, and that a CNET section's
recorded backbone digest matches the BKBN payload in the same file.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneParams, ModelConfig, init_backbone
from .controlnet import ControlNetParams, build_controlnet
from .errors import FormatError
from .token_space import PatchGeometry

_MAGIC = b"FGCK"
_VERSION = 1


@dataclass
class TrainSnapshot:
    """Optimizer-side training state carried inside a checkpoint."""

    phase: int                # 0 = backbone pretrain, 1 = control branch
    step: int
    adam: dict                # name -> (m, v) float64 arrays


@dataclass
class CheckpointBundle:
    backbone: BackboneParams
    cnet: ControlNetParams | None = None
    train: TrainSnapshot | None = None


def _f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _backbone_payload(params: BackboneParams) -> bytes:
    cfg = params.config
    g = cfg.geometry
    out = bytearray(struct.pack(
        "<9I", cfg.depth, cfg.dim, cfg.heads, cfg.ff_dim, cfg.vocab,
        g.mel_bins, g.frames, g.patch, cfg.condition_dim,
    ))
    for _, arr in params.named_arrays():
        out += _f64_bytes(arr)
    return bytes(out)


def backbone_digest(params: BackboneParams) -> str:
    """Hex SHA-256 of the serialized backbone, the identity a CNET section pins."""
    return hashlib.sha256(_backbone_payload(params)).hexdigest()


def _cnet_payload(cnet: ControlNetParams, backbone_payload: bytes) -> bytes:
    out = bytearray(struct.pack("<I", cnet.n_copy))
    out += hashlib.sha256(backbone_payload).digest()
    for _, arr in cnet.named_arrays():
        out += _f64_bytes(arr)
    return bytes(out)


def _train_payload(train: TrainSnapshot) -> bytes:
    out = bytearray(struct.pack("<BQI", train.phase, train.step, len(train.adam)))
    for name, (m, v) in train.adam.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<Q", m.size)
        out += _f64_bytes(m)
        out += _f64_bytes(v)
    return bytes(out)


def save_checkpoint(path, backbone: BackboneParams, cnet: ControlNetParams | None = None,
                    train: TrainSnapshot | None = None) -> None:
    bk = _backbone_payload(backbone)
    sections = [(b"BKBN", bk)]
    if cnet is not None:
        sections.append((b"CNET", _cnet_payload(cnet, bk)))
    if train is not None:
        sections.append((b"TRNS", _train_payload(train)))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HH", _VERSION, len(sections)))
        for tag, payload in sections:
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


class _Reader:
    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.off = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(
                f"truncated {self.label}: wanted {n} bytes at offset {self.off}, "
                f"have {len(self.buf) - self.off}"
            )
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def done(self) -> None:
        if self.off != len(self.buf):
            raise FormatError(
                f"{self.label} has {len(self.buf) - self.off} trailing bytes"
            )


def _load_backbone(payload: bytes) -> BackboneParams:
    r = _Reader(payload, "backbone section")
    depth, dim, heads, ff, vocab, mel, frames, patch, cdim = r.unpack("<9I")
    cfg = ModelConfig(depth=depth, dim=dim, heads=heads, ff_dim=ff, vocab=vocab,
                      geometry=PatchGeometry(mel_bins=mel, frames=frames, patch=patch),
                      condition_dim=cdim)
    params = init_backbone(cfg, np.random.default_rng(0))
    for _, arr in params.named_arrays():
        arr[...] = r.array(arr.shape)
    r.done()
    return params


def _load_cnet(payload: bytes, backbone: BackboneParams,
               backbone_payload: bytes) -> ControlNetParams:
    r = _Reader(payload, "control section")
    (n_copy,) = r.unpack("<I")
    recorded = r.take(32)
    actual = hashlib.sha256(backbone_payload).digest()
    if recorded != actual:
        raise FormatError(
            "control section was built against a different backbone "
            f"(digest {recorded.hex()[:16]}... != {actual.hex()[:16]}...)"
        )
    cnet = build_controlnet(backbone, n_copy)
    for _, arr in cnet.named_arrays():
        arr[...] = r.array(arr.shape)
    r.done()
    return cnet


def _load_train(payload: bytes) -> TrainSnapshot:
    r = _Reader(payload, "train-state section")
    phase, step, count = r.unpack("<BQI")
    adam = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (numel,) = r.unpack("<Q")
        m = r.array((numel,))
        v = r.array((numel,))
        adam[name] = (m, v)
    r.done()
    return TrainSnapshot(phase=phase, step=step, adam=adam)


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, "checkpoint")
    if r.take(4) != _MAGIC:
        raise FormatError(f"not a checkpoint file: bad magic in {path}")
    version, n_sections = r.unpack("<HH")
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(n_sections):
        tag = r.take(4)
        (plen,) = r.unpack("<Q")
        payload = r.take(plen)
        sections[tag] = payload
    r.done()
    if b"BKBN" not in sections:
        raise FormatError("checkpoint has no backbone section")
    backbone = _load_backbone(sections[b"BKBN"])
    cnet = None
    if b"CNET" in sections:
        cnet = _load_cnet(sections[b"CNET"], backbone, sections[b"BKBN"])
    train = None
    if b"TRNS" in sections:
        train = _load_train(sections[b"TRNS"])
    for tag in sections:
        if tag not in (b"BKBN", b"CNET", b"TRNS"):
            raise FormatError(f"unknown checkpoint section tag {tag!r}")
    return CheckpointBundle(backbone=backbone, cnet=cnet, train=train)

"""Checkpoint container: round trips, integrity checks, malformed files."""

import struct

import numpy as np
import pytest

from foleygrid.backbone import ModelConfig, init_backbone
from foleygrid.checkpoint import (
    CheckpointBundle,
    TrainSnapshot,
    backbone_digest,
    load_checkpoint,
    save_checkpoint,
)
from foleygrid.controlnet import build_controlnet
from foleygrid.errors import FormatError
from foleygrid.token_space import PatchGeometry

CFG = ModelConfig(depth=2, dim=8, heads=2, ff_dim=16, vocab=8,
                  geometry=PatchGeometry(mel_bins=4, frames=12, patch=2),
                  condition_dim=4)


@pytest.fixture
def backbone():
    return init_backbone(CFG, np.random.default_rng(9))


def test_backbone_round_trip(tmp_path, backbone):
    path = tmp_path / "bb.ckpt"
    save_checkpoint(path, backbone)
    got = load_checkpoint(path)
    assert got.cnet is None and got.train is None
    assert got.backbone.config == CFG
    for (name, arr), (_, back) in zip(backbone.named_arrays(),
                                      got.backbone.named_arrays()):
        assert np.array_equal(arr, back), name


def test_save_is_deterministic(tmp_path, backbone):
    cnet = build_controlnet(backbone, 1)
    save_checkpoint(tmp_path / "a.ckpt", backbone, cnet=cnet)
    save_checkpoint(tmp_path / "b.ckpt", backbone, cnet=cnet)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_control_branch_round_trip(tmp_path, backbone):
    cnet = build_controlnet(backbone, 2)
    for _, arr in cnet.named_arrays():
        arr += np.random.default_rng(1).normal(size=arr.shape)
    save_checkpoint(tmp_path / "c.ckpt", backbone, cnet=cnet)
    got = load_checkpoint(tmp_path / "c.ckpt")
    assert got.cnet.n_copy == 2
    for (name, arr), (_, back) in zip(cnet.named_arrays(),
                                      got.cnet.named_arrays()):
        assert np.array_equal(arr, back), name


def test_train_state_round_trip(tmp_path, backbone):
    rng = np.random.default_rng(4)
    adam = {name: (rng.normal(size=arr.shape), rng.normal(size=arr.shape) ** 2)
            for name, arr in backbone.named_arrays()}
    snap = TrainSnapshot(phase=1, step=42, adam=adam)
    save_checkpoint(tmp_path / "t.ckpt", backbone, train=snap)
    got = load_checkpoint(tmp_path / "t.ckpt").train
    assert got.phase == 1 and got.step == 42
    assert sorted(got.adam) == sorted(adam)
    for name, (m, v) in adam.items():
        gm, gv = got.adam[name]
        assert np.array_equal(gm, m.reshape(-1))
        assert np.array_equal(gv, v.reshape(-1))


def test_digest_tracks_weights(backbone):
    before = backbone_digest(backbone)
    assert before == backbone_digest(backbone)
    backbone.head_w[0, 0] += 1e-9
    assert backbone_digest(backbone) != before


def test_tampered_backbone_fails_the_branch_digest(tmp_path, backbone):
    path = tmp_path / "pair.ckpt"
    save_checkpoint(path, backbone, cnet=build_controlnet(backbone, 1))
    blob = bytearray(path.read_bytes())
    blob[20 + 36 + 3] ^= 0xFF            # a weight byte inside the first section
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="different backbone"):
        load_checkpoint(path)


def test_truncated_files_are_rejected(tmp_path, backbone):
    path = tmp_path / "full.ckpt"
    save_checkpoint(path, backbone, cnet=build_controlnet(backbone, 1),
                    train=TrainSnapshot(phase=0, step=1, adam={}))
    blob = path.read_bytes()
    for cut in (3, 9, 25, len(blob) - 2):
        clipped = tmp_path / f"cut{cut}.ckpt"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(clipped)


def test_trailing_bytes_are_rejected(tmp_path, backbone):
    path = tmp_path / "pad.ckpt"
    save_checkpoint(path, backbone)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path, backbone):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, backbone)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path, backbone):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, backbone)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<H", blob, 4, 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_file_without_backbone_section_rejected(tmp_path):
    path = tmp_path / "empty.ckpt"
    path.write_bytes(b"FGCK" + struct.pack("<HH", 1, 0))
    with pytest.raises(FormatError, match="no backbone"):
        load_checkpoint(path)


def test_unknown_section_tag_rejected(tmp_path, backbone):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, backbone)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<HH", blob, 4, 1, 2)   # claim a second section
    blob += b"XXXX" + struct.pack("<Q", 0)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="unknown"):
        load_checkpoint(path)


def test_bundle_defaults():
    bundle = CheckpointBundle(backbone=None)
    assert bundle.cnet is None and bundle.train is None

import struct

import numpy as np
import pytest

from foleygrid.errors import ConfigError, FormatError, GenerationError
from foleygrid.synthetic import (
    DatasetConfig,
    SyntheticScene,
    class_embeddings,
    event_columns,
    gen_scene,
    make_dataset,
    make_record,
    read_dataset,
    render_features,
    render_tokens,
    token_class,
    write_dataset,
)
from foleygrid.token_space import PatchGeometry

GEO = PatchGeometry()


def test_scene_validation():
    with pytest.raises(ConfigError):
        SyntheticScene(events=())
    with pytest.raises(ConfigError):
        SyntheticScene(events=((9.5, 1.0, 0),))       # runs past the clip end
    with pytest.raises(ConfigError):
        SyntheticScene(events=((-0.1, 1.0, 0),))
    s = SyntheticScene(events=((1, 2, 1),))
    assert s.events == ((1.0, 2.0, 1),)


def test_dataset_config_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(classes=8, class_block=8, vocab=64)   # blocks overflow vocab
    with pytest.raises(ConfigError):
        DatasetConfig(background=5)                         # inside a class block
    with pytest.raises(ConfigError):
        DatasetConfig(min_duration=3.0, max_duration=2.0)
    with pytest.raises(ConfigError):
        DatasetConfig(vocab=70000)
    DatasetConfig()


def test_class_embeddings_orthonormal_and_shape_keyed():
    table = class_embeddings(4, 16)
    assert table.shape == (4, 16)
    gram = table @ table.T
    assert np.max(np.abs(gram - np.eye(4))) < 1e-12
    again = class_embeddings(4, 16)
    assert np.array_equal(table, again)
    with pytest.raises(ConfigError):
        class_embeddings(8, 4)


def test_gen_scene_respects_structure():
    cfg = DatasetConfig(seed=0)
    for seed in range(30):
        rng = np.random.default_rng(seed)
        scene = gen_scene(rng, cfg)
        assert 1 <= len(scene.events) <= cfg.max_events
        onsets = [o for o, _, _ in scene.events]
        assert onsets == sorted(onsets)
        for (o1, d1, _), (o2, _, _) in zip(scene.events, scene.events[1:]):
            assert o2 >= o1 + d1 + cfg.min_gap - 1e-12
        for o, d, k in scene.events:
            assert 0 <= o and o + d <= cfg.clip_length
            assert cfg.min_duration <= d <= cfg.max_duration
            assert 0 <= k < cfg.classes


def test_gen_scene_deterministic_and_single_event():
    cfg = DatasetConfig(max_events=1)
    a = gen_scene(np.random.default_rng(5), cfg)
    b = gen_scene(np.random.default_rng(5), cfg)
    assert a == b
    assert len(a.events) == 1


def test_gen_scene_infeasible_packing_raises():
    cfg = DatasetConfig(max_events=3, min_duration=4.0, max_duration=5.0,
                        min_gap=2.0)
    with pytest.raises(GenerationError):
        for seed in range(50):
            gen_scene(np.random.default_rng(seed), cfg)


def test_sync_track_hits_expected_frames():
    # Event [2.0, 3.0) at 24 Hz covers frames 48..71 and nothing else.
    cfg = DatasetConfig(noise=0.0)
    scene = SyntheticScene(events=((2.0, 1.0, 1),))
    sync, _, _ = render_features(scene, cfg, np.random.default_rng(0))
    active = np.flatnonzero(np.abs(sync.data).sum(axis=1) > 0)
    assert active[0] == 48
    assert active[-1] == 71
    assert len(active) == 24
    table = class_embeddings(cfg.classes, cfg.feature_dim)
    assert np.allclose(sync.data[60], table[1], atol=0)


def test_full_clip_event_fills_every_sync_frame():
    cfg = DatasetConfig(noise=0.0)
    scene = SyntheticScene(events=((0.0, 10.0, 2),))
    sync, semantic, prompt = render_features(scene, cfg, np.random.default_rng(0))
    table = class_embeddings(cfg.classes, cfg.feature_dim)
    assert np.allclose(sync.data, table[2][None, :], atol=0)
    assert np.allclose(semantic.data, table[2][None, :], atol=0)
    assert np.allclose(prompt.vector, table[2], atol=0)


def test_prompt_is_mean_of_event_embeddings():
    cfg = DatasetConfig(noise=0.0)
    scene = SyntheticScene(events=((1.0, 1.0, 0), (5.0, 1.0, 3)))
    _, _, prompt = render_features(scene, cfg, np.random.default_rng(0))
    table = class_embeddings(cfg.classes, cfg.feature_dim)
    assert np.allclose(prompt.vector, 0.5 * (table[0] + table[3]), atol=1e-15)


def test_semantic_track_holds_most_recent_class():
    cfg = DatasetConfig(noise=0.0)
    scene = SyntheticScene(events=((1.0, 1.0, 0), (5.0, 1.0, 3)))
    _, semantic, _ = render_features(scene, cfg, np.random.default_rng(0))
    table = class_embeddings(cfg.classes, cfg.feature_dim)
    # 8 Hz: frames before onset*8=8 are silent, then class 0 holds until
    # frame 40 where class 3 takes over for the rest of the clip.
    assert np.all(semantic.data[:8] == 0.0)
    assert np.allclose(semantic.data[8:40], table[0][None, :], atol=0)
    assert np.allclose(semantic.data[40:], table[3][None, :], atol=0)


def test_event_columns_quantization():
    assert event_columns(5.0, 1.0, 53, 10.0) == (26, 32)
    assert event_columns(0.0, 0.5, 53, 10.0)[0] == 0
    start, stop = event_columns(9.5, 0.5, 53, 10.0)
    assert stop == 53


def test_render_tokens_covers_exact_columns():
    cfg = DatasetConfig()
    scene = SyntheticScene(events=((5.0, 1.0, 2),))
    tm = render_tokens(scene, GEO, cfg)
    start, stop = event_columns(5.0, 1.0, 53, 10.0)
    for t in range(53):
        col = tm.grid[:, t]
        if start <= t < stop:
            assert all(token_class(int(v), cfg) == 2 for v in col)
        else:
            assert np.all(col == cfg.background)


def test_render_tokens_later_event_wins_on_overlap():
    cfg = DatasetConfig()
    scene = SyntheticScene(events=((2.0, 2.0, 0), (3.0, 2.0, 1)))
    tm = render_tokens(scene, GEO, cfg)
    o_start, _ = event_columns(3.0, 2.0, 53, 10.0)
    assert all(token_class(int(v), cfg) == 1 for v in tm.grid[:, o_start])


def test_token_class_round_trip():
    cfg = DatasetConfig()
    assert token_class(cfg.background, cfg) == -1
    for cls in range(cfg.classes):
        for j in range(cfg.class_block):
            assert token_class(1 + cls * cfg.class_block + j, cfg) == cls
    assert token_class(1 + cfg.classes * cfg.class_block, cfg) == -1


def test_make_record_deterministic():
    cfg = DatasetConfig(seed=9)
    a = make_record(3, cfg, GEO)
    b = make_record(3, cfg, GEO)
    assert a.scene == b.scene
    assert np.array_equal(a.sync.data, b.sync.data)
    assert np.array_equal(a.prompt, b.prompt)
    assert np.array_equal(a.tokens.grid, b.tokens.grid)
    c = make_record(4, cfg, GEO)
    assert not np.array_equal(a.tokens.grid, c.tokens.grid) or a.scene != c.scene


def test_dataset_round_trip_bit_exact(tmp_path):
    cfg = DatasetConfig(seed=2)
    records = make_dataset(cfg, GEO, 100)
    path = tmp_path / "data.fgds"
    write_dataset(path, records, cfg)
    back, back_cfg = read_dataset(path)
    assert back_cfg == cfg
    assert len(back) == 100
    for a, b in zip(records, back):
        assert a.scene == b.scene
        assert np.array_equal(a.sync.data, b.sync.data)
        assert np.array_equal(a.semantic.data, b.semantic.data)
        assert np.array_equal(a.prompt, b.prompt)
        assert np.array_equal(a.tokens.grid, b.tokens.grid)


def test_dataset_write_read_write_is_byte_stable(tmp_path):
    cfg = DatasetConfig(seed=3)
    records = make_dataset(cfg, GEO, 10)
    p1 = tmp_path / "a.fgds"
    p2 = tmp_path / "b.fgds"
    write_dataset(p1, records, cfg)
    back, back_cfg = read_dataset(p1)
    write_dataset(p2, back, back_cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_dataset_raises(tmp_path):
    cfg = DatasetConfig(seed=4)
    records = make_dataset(cfg, GEO, 5)
    path = tmp_path / "data.fgds"
    write_dataset(path, records, cfg)
    blob = path.read_bytes()
    for cut in (2, len(blob) // 2, len(blob) - 3):
        clipped = tmp_path / "cut.fgds"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            read_dataset(clipped)
    bad_magic = tmp_path / "magic.fgds"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        read_dataset(bad_magic)


def test_header_class_count_mismatch_raises(tmp_path):
    cfg = DatasetConfig(seed=5)
    records = make_dataset(cfg, GEO, 20)
    path = tmp_path / "data.fgds"
    write_dataset(path, records, cfg)
    blob = bytearray(path.read_bytes())
    # The class count sits right after the magic and the u16 version.
    (classes,) = struct.unpack_from("<I", blob, 6)
    assert classes == cfg.classes
    struct.pack_into("<I", blob, 6, 1)
    patched = tmp_path / "patched.fgds"
    patched.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_dataset(patched)


def test_onset_spread_is_sane():
    cfg = DatasetConfig(seed=6)
    onsets = []
    for i in range(300):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        onsets.extend(o for o, _, _ in gen_scene(rng, cfg).events)
    onsets = np.array(onsets)
    assert onsets.min() >= 0.0
    assert onsets.max() <= cfg.clip_length - cfg.min_duration
    assert onsets.std() > 1.0     # spread over the clip, not clustered

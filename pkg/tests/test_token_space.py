import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foleygrid.errors import GeometryError, ShapeError
from foleygrid.token_space import (
    MaskedTokenMap,
    PatchGeometry,
    TokenMap,
    apply_random_mask,
    fully_masked,
    mask_fraction,
    patch_grid,
    read_csv,
    unmask_plan,
    write_csv,
    write_pgm,
)


def test_default_geometry_is_5_by_53():
    geo = PatchGeometry()
    assert patch_grid(geo) == (5, 53)
    assert geo.num_tokens == 265


def test_geometry_rejects_non_dividing_patch():
    with pytest.raises(GeometryError):
        PatchGeometry(mel_bins=80, frames=848, patch=15)
    with pytest.raises(GeometryError):
        PatchGeometry(mel_bins=0, frames=848, patch=16)


def test_token_map_validates_id_range():
    TokenMap(np.zeros((2, 3), dtype=np.int64), vocab=4)
    with pytest.raises(ShapeError):
        TokenMap(np.full((2, 3), 5), vocab=4)
    with pytest.raises(ShapeError):
        TokenMap(np.full((2, 3), -1), vocab=4)
    with pytest.raises(ShapeError):
        TokenMap(np.zeros(6, dtype=np.int64), vocab=4)


def test_masked_map_requires_sentinel_under_mask():
    grid = np.array([[0, 4], [1, 2]])
    mask = np.array([[False, True], [False, False]])
    m = MaskedTokenMap(TokenMap(grid, 4), mask)
    assert m.masked_count == 1
    bad = np.array([[0, 3], [1, 2]])
    with pytest.raises(ShapeError):
        MaskedTokenMap(TokenMap(bad, 4), mask)


def test_masked_map_rejects_sentinel_outside_mask():
    grid = np.array([[4, 4], [1, 2]])
    mask = np.array([[False, True], [False, False]])
    with pytest.raises(ShapeError):
        MaskedTokenMap(TokenMap(grid, 4), mask)


def test_mask_fraction_endpoints_and_monotonicity():
    assert mask_fraction(0.0) == 1.0
    assert mask_fraction(1.0) == pytest.approx(0.0, abs=1e-15)
    us = np.linspace(0, 1, 101)
    vals = [mask_fraction(u) for u in us]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        mask_fraction(1.5)


@given(
    total=st.integers(min_value=1, max_value=2000),
    steps=st.integers(min_value=1, max_value=64),
)
@settings(max_examples=200, deadline=None)
def test_unmask_plan_counts_are_nonnegative_and_sum(total, steps):
    plan = unmask_plan(total, steps)
    assert len(plan) == steps
    assert all(c >= 0 for c in plan)
    assert sum(plan) == total


def test_unmask_plan_matches_cosine_targets_265_12():
    # Remaining after step k must track floor(265 * cos((k+1)/12 * pi/2)),
    # with the last step clearing whatever is left.
    plan = unmask_plan(265, 12)
    remaining = 265
    for k, reveal in enumerate(plan):
        remaining -= reveal
        if k < 11:
            assert remaining == math.floor(265 * mask_fraction((k + 1) / 12))
    assert remaining == 0


def test_unmask_plan_single_step_reveals_all():
    assert unmask_plan(265, 1) == [265]
    assert unmask_plan(7, 3)[-1] >= 1


def test_apply_random_mask_count_uses_half_up_rounding():
    rng = np.random.default_rng(0)
    tm = TokenMap(np.zeros((5, 53), dtype=np.int64), vocab=8)
    # 265 * 0.5 = 132.5 -> 133 with half-up rounding
    m = apply_random_mask(tm, 0.5, rng)
    assert m.masked_count == 133
    assert apply_random_mask(tm, 0.0, rng).masked_count == 0
    assert apply_random_mask(tm, 1.0, rng).masked_count == 265


def test_fully_masked_is_all_sentinel():
    geo = PatchGeometry()
    m = fully_masked(geo, 16)
    assert m.masked_count == geo.num_tokens
    assert np.all(m.tokens.grid == 16)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tm = TokenMap(rng.integers(0, 9, size=(5, 53)), vocab=8)
    path = tmp_path / "grid.csv"
    write_csv(path, tm)
    back = read_csv(path, 8)
    assert np.array_equal(back.grid, tm.grid)


def test_pgm_header_and_size(tmp_path):
    tm = TokenMap(np.zeros((5, 53), dtype=np.int64), vocab=8)
    path = tmp_path / "grid.pgm"
    write_pgm(path, tm)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n53 5\n255\n")
    assert len(blob) == len(b"P5\n53 5\n255\n") + 265

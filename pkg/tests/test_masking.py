import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from perimae.masking import (
    MaskPlan,
    apply_mask,
    full_visible_plan,
    replicate_mask_rows,
    sample_random_mask,
    sample_uniform_frame_mask,
)
from perimae.tokenizer import TokenGrid


def test_random_mask_zero_ratio_all_visible():
    plan = sample_random_mask(4, 10, 0.0, np.random.default_rng(0))
    assert plan.n_masked == 0
    assert not plan.M.any()


def test_random_mask_exact_floor_count():
    plan = sample_random_mask(8, 196, 0.75, np.random.default_rng(1))
    assert plan.n_masked == math.floor(0.75 * 8 * 196) == 1176


def test_random_mask_seeds_differ_but_counts_match():
    a = sample_random_mask(8, 196, 0.75, np.random.default_rng(1))
    b = sample_random_mask(8, 196, 0.75, np.random.default_rng(2))
    assert a.n_masked == b.n_masked
    assert not np.array_equal(a.M, b.M)


def test_uniform_mask_row_counts_exact():
    plan = sample_uniform_frame_mask(8, 196, 0.75, np.random.default_rng(3))
    per_row = plan.masked_per_row()
    assert (per_row == 147).all()
    assert (plan.visible_per_row() == 49).all()
    zero = sample_uniform_frame_mask(8, 196, 0.0, np.random.default_rng(3))
    assert zero.n_masked == 0


@settings(max_examples=30, deadline=None)
@given(
    n_t=st.integers(2, 10),
    n_s=st.integers(2, 60),
    ratio=st.floats(0.0, 0.95),
    seed=st.integers(0, 10_000),
)
def test_uniform_mask_rows_always_equal(n_t, n_s, ratio, seed):
    plan = sample_uniform_frame_mask(n_t, n_s, ratio, np.random.default_rng(seed))
    per_row = plan.masked_per_row()
    assert (per_row == per_row[0]).all()
    assert per_row[0] == math.floor(ratio * n_s)


def test_mask_determinism():
    a = sample_uniform_frame_mask(6, 30, 0.5, np.random.default_rng(42))
    b = sample_uniform_frame_mask(6, 30, 0.5, np.random.default_rng(42))
    assert np.array_equal(a.M, b.M)


def test_ratio_one_rejected():
    with pytest.raises(ValueError):
        sample_uniform_frame_mask(4, 8, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_random_mask(4, 8, 1.0, np.random.default_rng(0))


def test_replicate_rows_makes_rows_identical():
    plan = sample_uniform_frame_mask(8, 20, 0.6, np.random.default_rng(5))
    out = replicate_mask_rows(plan, anchor=2, partners=[5, 7])
    assert out.mode == "consistent"
    assert np.array_equal(out.M[5], out.M[2])
    assert np.array_equal(out.M[7], out.M[2])
    untouched = [r for r in range(8) if r not in (5, 7)]
    for r in untouched:
        assert np.array_equal(out.M[r], plan.M[r])
    assert (out.masked_per_row() == math.floor(0.6 * 20)).all()


def test_replicate_rows_empty_partner_set_only_changes_mode():
    plan = sample_uniform_frame_mask(4, 12, 0.5, np.random.default_rng(6))
    out = replicate_mask_rows(plan, anchor=1, partners=[])
    assert out.mode == "consistent"
    assert np.array_equal(out.M, plan.M)


def test_replicate_rows_rejects_bad_rows():
    plan = sample_uniform_frame_mask(4, 12, 0.5, np.random.default_rng(7))
    with pytest.raises(ValueError):
        replicate_mask_rows(plan, anchor=1, partners=[1, 2])
    with pytest.raises(ValueError):
        replicate_mask_rows(plan, anchor=9, partners=[1])
    with pytest.raises(ValueError):
        replicate_mask_rows(plan, anchor=0, partners=[12])
    rnd = sample_random_mask(4, 12, 0.5, np.random.default_rng(8))
    with pytest.raises(ValueError):
        replicate_mask_rows(rnd, anchor=0, partners=[1])


def test_mask_plan_requires_visible_position_per_row():
    m = np.zeros((2, 3), dtype=bool)
    m[1] = True
    with pytest.raises(ValueError):
        MaskPlan(M=m, ratio=0.5, mode="random")


def _token_grid(n_t, n_s, d=5, seed=0):
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.rand((n_t, n_s, d), generator=gen)
    return TokenGrid(tokens=tokens, pos_embed=torch.zeros(n_t, n_s, d))


def test_apply_mask_all_visible_keeps_order():
    grid = _token_grid(3, 4)
    out = apply_mask(grid, full_visible_plan(3, 4))
    assert out.tokens.shape == (12, 5)
    assert torch.equal(out.tokens, grid.tokens.reshape(12, 5))
    expected_coords = [(t, i) for t in range(3) for i in range(4)]
    assert [tuple(c) for c in out.coords.tolist()] == expected_coords
    assert out.group_counts == (4, 4, 4)


def test_apply_mask_visible_counts_at_reference_ratio():
    grid = _token_grid(8, 196, seed=1)
    plan = sample_uniform_frame_mask(8, 196, 0.75, np.random.default_rng(9))
    out = apply_mask(grid, plan)
    assert out.group_counts == tuple([49] * 8)
    assert out.tokens.shape == (8 * 49, 5)


def test_apply_mask_scatter_round_trip():
    grid = _token_grid(4, 9, seed=2)
    plan = sample_uniform_frame_mask(4, 9, 0.6, np.random.default_rng(10))
    out = apply_mask(grid, plan)
    sentinel = torch.full((4, 9, 5), float("nan"))
    sentinel[out.coords[:, 0], out.coords[:, 1]] = out.tokens
    # visible slots match original values, masked slots stay sentinel
    vis = ~plan.M
    assert torch.equal(sentinel[vis], grid.tokens[vis])
    assert torch.isnan(sentinel[plan.M]).all()
    # token values were not altered
    for idx in range(out.tokens.shape[0]):
        t, i = out.coords[idx].tolist()
        assert torch.equal(out.tokens[idx], grid.tokens[t, i])


def test_apply_mask_shape_mismatch_rejected():
    grid = _token_grid(3, 4)
    plan = sample_uniform_frame_mask(3, 5, 0.2, np.random.default_rng(11))
    with pytest.raises(ValueError):
        apply_mask(grid, plan)

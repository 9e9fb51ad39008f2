import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadsim.core import Chunk, ClusterConfig, ConfigError, DomainError, Item, Layout, ModelConfig, Segment
from cadsim.cost import (
    CostCoefficients,
    ExtrapolationError,
    ProfilerGrid,
    activation_memory,
    balance_conditions,
    ca_flops,
    ca_time,
    causal_pair_work,
    ci_time,
    linear_flops_per_token,
    padded_pair_work,
    profile_lookup,
    synth_grid,
)

M34 = ModelConfig.from_dict({"preset": "llama-34b"})
CLUSTER = ClusterConfig(num_gpus=1)


def test_linear_flops_per_token_34b():
    # 2 * 8192 * (2*8192 + 2048 + 3*22016), worked by hand
    assert linear_flops_per_token(M34) == 1320 * 2**20


def test_coefficients_scale_with_layers():
    one = CostCoefficients.from_model(M34)
    four = CostCoefficients.from_model(M34, layers=4)
    assert four.alpha_ca == 4 * one.alpha_ca
    assert four.beta_linear == 4 * one.beta_linear
    assert one.alpha_ca == 2 * 8192


def test_negative_coefficients_rejected():
    with pytest.raises(ConfigError):
        CostCoefficients(-1.0, 0.0, 0.0)


def test_whole_document_costs_alpha_l_squared():
    coeff = CostCoefficients(3.0, 0.0, 1.0)
    assert ca_flops(Item(0, 0, 1000, 0), coeff) == 3.0 * 1000**2


@given(st.integers(1, 4096), st.integers(0, 4096))
def test_shards_sum_to_whole_document(length, cut):
    cut = min(cut, length - 1)
    whole = Item(0, 0, length, 0).pair_work()
    if cut == 0:
        assert whole == length * length
        return
    parts = Item(0, 0, cut, 0).pair_work() + Item(0, cut, length, 0).pair_work()
    assert parts == whole


@given(st.integers(1, 2048), st.integers(1, 2048))
def test_head_tail_split_conserves_work(half_len, k):
    L = 2 * half_len
    k = min(k, half_len)
    a = Item(0, 0, k, 0, Layout.HEAD_TAIL, L).pair_work()
    total = a + (Item(0, k, half_len, 0, Layout.HEAD_TAIL, L).pair_work() if k < half_len else 0)
    assert total == L * L


def test_causal_pair_work_domain():
    assert causal_pair_work(2, 5) == 16
    with pytest.raises(DomainError):
        causal_pair_work(6, 5)


def test_padding_charges_one_tile_minimum():
    it = Item(0, 1000, 1010, 0)
    assert padded_pair_work(it, 128) == 128 * (2 * 1010 - 128)
    assert padded_pair_work(Item(0, 0, 256, 0), 128) == 256 * 256


def test_balance_conditions_intro_example():
    tokens_equal, squares_equal = balance_conditions([4096], [1024] * 4)
    assert tokens_equal and not squares_equal
    assert balance_conditions(Chunk(0, (Segment(0, 0, 3),)), [3]) == (True, True)


def test_activation_memory_linear_in_tokens():
    coeff = CostCoefficients(1.0, 1.0, 5.0)
    assert activation_memory([4096], coeff) == activation_memory([1024] * 4, coeff) == 5.0 * 4096


def test_times_use_mfu_and_peak():
    coeff = CostCoefficients(2.0, 3.0, 0.0)
    cl = ClusterConfig(num_gpus=1, peak_flops=1e3, mfu_linear=0.5, mfu_attention=0.25, tile_size=1)
    assert ci_time(10, coeff, cl) == pytest.approx(3.0 * 10 / 500)
    assert ca_time(Item(0, 0, 10, 0), coeff, cl) == pytest.approx(2.0 * 100 / 250)


def _small_grid():
    q = (128, 256)
    kv = (128, 256, 512)
    lat = np.array([[1.0, 2.0, 4.0], [1.5, 3.0, 6.0]])
    return ProfilerGrid(q, kv, lat, alpha=1.0, tile_size=128, saturation_fraction=1.01)


def test_lookup_hits_grid_points_exactly():
    g = _small_grid()
    assert profile_lookup(g, 128, 128) == 1.0
    assert profile_lookup(g, 256, 512) == 6.0


def test_lookup_bilinear_midpoint():
    g = _small_grid()
    assert profile_lookup(g, 192, 384) == pytest.approx((2.0 + 4.0 + 3.0 + 6.0) / 4)


def test_lookup_pads_short_queries():
    g = _small_grid()
    assert profile_lookup(g, 5, 128) == profile_lookup(g, 128, 128)


def test_lookup_outside_unsaturated_grid_raises():
    with pytest.raises(ExtrapolationError):
        profile_lookup(_small_grid(), 128, 4096)
    with pytest.raises(DomainError):
        profile_lookup(_small_grid(), 0, 4)


def test_grid_validation():
    with pytest.raises(ConfigError):
        ProfilerGrid((1, 2), (1, 2), np.array([[1.0, 0.5], [2.0, 3.0]]), alpha=1.0)
    with pytest.raises(ConfigError):
        ProfilerGrid((2, 1), (1, 2), np.ones((2, 2)), alpha=1.0)
    with pytest.raises(ConfigError):
        ProfilerGrid((1,), (1, 2), np.ones((2, 2)), alpha=1.0)


def test_grid_csv_roundtrip(tmp_path):
    g = _small_grid()
    path = tmp_path / "grid.csv"
    g.to_csv(path)
    back = ProfilerGrid.from_csv(path, alpha=1.0)
    assert np.array_equal(back.latency, g.latency)
    assert back.q_points == g.q_points


def test_synth_grid_matches_analytic_when_saturated():
    g = synth_grid(M34, CLUSTER)
    coeff = CostCoefficients.from_model(M34)
    it = Item(0, 0, 65536, 0)
    assert ca_time(it, coeff, CLUSTER, g) == pytest.approx(ca_time(it, coeff, CLUSTER), rel=1e-9)
    # beyond the last grid point the saturated edge extrapolates
    big = Item(0, 0, 2**20, 0)
    assert ca_time(big, coeff, CLUSTER, g) == pytest.approx(ca_time(big, coeff, CLUSTER), rel=1e-9)


def test_synth_grid_short_queries_run_below_peak():
    g = synth_grid(M34, CLUSTER)
    coeff = CostCoefficients.from_model(M34)
    it = Item(0, 0, 128, 0)
    assert ca_time(it, coeff, CLUSTER, g) > ca_time(it, coeff, CLUSTER)


@settings(max_examples=60)
@given(st.integers(1, 4000), st.integers(1, 4000), st.integers(1, 4000))
def test_synth_lookup_monotone_in_kv(n_q, kv_a, kv_b):
    g = synth_grid(M34, CLUSTER, max_tokens=8192)
    lo, hi = sorted((kv_a, kv_b))
    assert profile_lookup(g, n_q, lo) <= profile_lookup(g, n_q, hi) + 1e-15


@given(st.integers(1, 8), st.integers(1, 200))
def test_head_tail_ranks_get_equal_work(c, unit):
    L = 2 * c * unit
    per_rank = [Item(0, i * unit, (i + 1) * unit, 0, Layout.HEAD_TAIL, L).pair_work() for i in range(c)]
    assert len(set(per_rank)) == 1
    assert sum(per_rank) == L * L

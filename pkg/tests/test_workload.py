import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadsim.core import Chunk, ConfigError, Segment, documents_from_lengths, validate_chunking
from cadsim.workload import (
    DistributionKind,
    LengthDistribution,
    base_distribution,
    length_stats,
    load_histogram_csv,
    pack_fixed,
    place_sequential,
    sample_batch,
    sample_lengths,
    split_chunk,
    write_batch_csv,
)


@pytest.mark.parametrize("kind", list(DistributionKind))
def test_samples_fill_budget_and_respect_cap(kind):
    extra = {}
    if kind is DistributionKind.CUSTOM_HISTOGRAM:
        extra = {"hist_lengths": (100, 2000), "hist_probs": (0.5, 0.5)}
    dist = LengthDistribution(kind=kind, max_doc_len=8192, **extra)
    lengths = sample_lengths(dist, 65536, seed=3)
    assert sum(lengths) == 65536
    assert all(1 <= x <= 8192 for x in lengths)


def test_same_seed_same_batch():
    dist = LengthDistribution()
    assert sample_lengths(dist, 50000, seed=9) == sample_lengths(dist, 50000, seed=9)
    assert sample_lengths(dist, 50000, seed=9) != sample_lengths(dist, 50000, seed=10)


def test_upsampling_shifts_mass_to_long_documents():
    dist = LengthDistribution(max_doc_len=65536)
    up = sample_lengths(dist, 2_000_000, seed=1)
    base = sample_lengths(base_distribution(dist), 2_000_000, seed=1)
    assert np.mean(up) > 2 * np.mean(base)


def test_prolong_mix_has_long_tail():
    dist = LengthDistribution(kind="prolong_like", max_doc_len=65536, min_len_threshold=0)
    lengths = sample_lengths(dist, 4_000_000, seed=2)
    assert max(lengths) >= 65536 // 2


def test_fixed_distribution_exact():
    dist = LengthDistribution(kind="fixed", max_doc_len=4096, fixed_len=1024)
    assert sample_lengths(dist, 4096) == [1024] * 4


@pytest.mark.parametrize(
    "kwargs",
    [
        {"max_doc_len": 0},
        {"drop_probability": 1.5},
        {"sigma": 0},
        {"kind": "fixed", "max_doc_len": 10, "fixed_len": 11},
        {"kind": "custom_histogram"},
        {"kind": "custom_histogram", "hist_lengths": (5,), "hist_probs": (-1.0,)},
        {"kind": "nonsense"},
    ],
)
def test_bad_distributions(kwargs):
    with pytest.raises((ConfigError, ValueError)):
        LengthDistribution(**kwargs)


def test_unknown_distribution_field():
    with pytest.raises(ConfigError):
        LengthDistribution.from_dict({"kind": "uniform", "maxlen": 5})


def test_histogram_csv(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("length,probability\n128,0.25\n4096,0.75\n")
    dist = LengthDistribution.from_dict({"histogram_csv": str(path), "max_doc_len": 4096})
    assert dist.kind is DistributionKind.CUSTOM_HISTOGRAM
    assert load_histogram_csv(path) == ((128, 4096), (0.25, 0.75))
    assert set(sample_lengths(dist, 100_000, seed=0)) <= {128, 4096, 100_000 % 128} | set(range(1, 4097))


@settings(max_examples=80)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=30), st.integers(1, 8))
def test_pack_fixed_is_a_valid_chunking(lengths, chunks):
    total = sum(lengths)
    pad = (-total) % chunks
    lengths = lengths + ([pad] if pad else [])
    cap = sum(lengths) // chunks
    docs = documents_from_lengths(lengths)
    packed = pack_fixed(docs, cap, chunks)
    assert [c.total_tokens for c in packed] == [cap] * chunks
    assert validate_chunking(docs, packed) == []


def test_pack_fixed_rejects_wrong_total():
    with pytest.raises(ConfigError):
        pack_fixed(documents_from_lengths([4096, 1024, 1024, 1024, 1024]), 4096, 4)


def test_place_sequential_intro_example():
    chunks = place_sequential(documents_from_lengths([4096, 1024, 1024, 1024, 1024]), 2, 4096)
    assert chunks[0].lengths == [4096]
    assert chunks[1].lengths == [1024] * 4


@given(st.lists(st.integers(1, 300), min_size=1, max_size=10), st.integers(1, 5))
def test_split_chunk_preserves_tokens(lengths, parts):
    segs, pos = [], 0
    for i, n in enumerate(lengths):
        segs.append(Segment(i, 0, n))
    chunk = Chunk(0, tuple(segs))
    pieces = split_chunk(chunk, parts)
    assert sum(p.total_tokens for p in pieces) == chunk.total_tokens
    sizes = [p.total_tokens for p in pieces]
    assert max(sizes) - min(sizes) <= 1


def test_batch_csv_and_stats(tmp_path):
    docs = sample_batch(LengthDistribution(kind="fixed", max_doc_len=10), 30)
    path = tmp_path / "b.csv"
    write_batch_csv([docs], path)
    assert path.read_text().splitlines()[0] == "batch,doc_id,length"
    assert length_stats([1, 2, 3])["p50"] == 2.0

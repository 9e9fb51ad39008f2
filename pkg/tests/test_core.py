import pytest

from cadsim.core import (
    CATask,
    Chunk,
    ClusterConfig,
    ConfigError,
    Document,
    DomainError,
    Item,
    Layout,
    ModelConfig,
    Segment,
    documents_from_lengths,
    validate_chunking,
)


def test_presets_derive_sizes():
    m = ModelConfig.from_dict({"preset": "llama-34b"})
    assert (m.hidden, m.kv_hidden, m.ffn_intermediate) == (8192, 2048, 22016)
    assert m.size_q == 8192 * 2
    assert m.size_kv == 2 * 2048 * 2


def test_single_kv_tensor_halves_size_kv():
    both = ModelConfig.from_dict({"preset": "llama-34b"})
    one = ModelConfig.from_dict({"preset": "llama-34b", "kv_counts_both": False})
    assert one.size_kv * 2 == both.size_kv


def test_inconsistent_explicit_size_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"preset": "llama-8b", "size_q": 123})


def test_unknown_model_keys_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"preset": "llama-8b", "hiddn": 3})


def test_cluster_collapses_tp_into_devices():
    c = ClusterConfig(num_gpus=64, tp=8, dp=8)
    assert c.num_devices == 8
    assert c.fully_assigned


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_gpus": 0},
        {"num_gpus": 8, "tp": 3},
        {"num_gpus": 8, "tp": 4, "dp": 4},
        {"num_gpus": 8, "mfu_linear": 0.0},
        {"num_gpus": 8, "interconnect_bandwidth": 0},
        {"num_gpus": 8, "message_latency": -1},
    ],
)
def test_bad_cluster_configs(kwargs):
    with pytest.raises(ConfigError):
        ClusterConfig(**kwargs)


def test_cluster_from_dict_accepts_string_numbers():
    c = ClusterConfig.from_dict({"num_gpus": 2, "peak_flops": "1e15"})
    assert c.peak_flops == 1e15


def test_document_length_positive():
    with pytest.raises((ConfigError, DomainError)):
        Document(0, 0)


def test_item_ranges_and_work():
    it = Item(0, 2, 5, 0)
    assert it.n_q == 3 and it.kv_extent == 5
    assert it.pair_work() == 3 * (2 * 5 - 3)
    ht = Item(1, 1, 3, 0, Layout.HEAD_TAIL, 10)
    assert ht.ranges() == [(1, 3), (7, 9)]
    assert ht.query_tokens == 4
    # head [1,3) plus tail [7,9) which sees keys [0,9)
    assert ht.pair_work() == 2 * (2 * 3 - 2) + 2 * (2 * 9 - 2)


def test_head_tail_item_cannot_cross_middle():
    with pytest.raises(DomainError):
        Item(0, 0, 6, 0, Layout.HEAD_TAIL, 10)


def test_item_rejects_empty_range():
    with pytest.raises(DomainError):
        Item(0, 4, 4, 0)


def test_item_roundtrip():
    it = Item(3, 128, 256, 2, Layout.HEAD_TAIL, 1024)
    assert Item.from_dict(it.to_dict()) == it


def test_catask_local_means_no_bytes():
    it = Item(0, 0, 8, 1)
    CATask(it, 1, 1, 0)
    with pytest.raises(ConfigError):
        CATask(it, 1, 1, 10)
    with pytest.raises(ConfigError):
        CATask(it, 1, 0, 0)
    t = CATask(it, 1, 0, 40, 16, 2.0)
    assert t.migrated
    assert CATask.from_dict(t.to_dict()) == t


def test_validate_chunking_detects_gaps_and_overlaps():
    docs = documents_from_lengths([4, 4])
    good = [Chunk(0, (Segment(0, 0, 4),)), Chunk(1, (Segment(1, 0, 4),))]
    assert validate_chunking(docs, good) == []
    gap = [Chunk(0, (Segment(0, 0, 3),)), Chunk(1, (Segment(1, 0, 4),))]
    assert validate_chunking(docs, gap)
    overlap = [Chunk(0, (Segment(0, 0, 4), Segment(0, 2, 4))), Chunk(1, (Segment(1, 0, 4),))]
    assert validate_chunking(docs, overlap)

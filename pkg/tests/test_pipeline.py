import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadsim.core import ClusterConfig, ConfigError, Item, ModelConfig
from cadsim.cost import CostCoefficients
from cadsim.pipeline import (
    BWD,
    FWD,
    Microbatch,
    PPConfig,
    PPSchedule,
    one_f_one_b_order,
    one_f_one_b_ticks,
    phase_sync_ticks,
    simulate_pp_iteration,
)

MODEL = ModelConfig.from_dict({"preset": "llama-8b"})
CFG = PPConfig(CostCoefficients.from_model(MODEL), ClusterConfig(num_gpus=4))


def mb(length, count=1, doc=0):
    return Microbatch(tuple(Item(doc + k, 0, length, 0, doc_length=length) for k in range(count)), length * count)


def test_1f1b_order_small():
    order = one_f_one_b_order(2, 3)
    assert [(o.phase, o.microbatch) for o in order[0]] == [("F", 0), ("F", 1), ("B", 0), ("F", 2), ("B", 1), ("B", 2)]
    assert [(o.phase, o.microbatch) for o in order[1]] == [("F", 0), ("B", 0), ("F", 1), ("B", 1), ("F", 2), ("B", 2)]


def test_1f1b_tick_count_closed_form():
    for s in range(1, 6):
        for m in range(s, 10):
            assert len(one_f_one_b_ticks(s, m)) == 2 * (m + s - 1)


def test_too_few_microbatches():
    with pytest.raises(ConfigError):
        one_f_one_b_order(4, 3)
    with pytest.raises(ConfigError):
        phase_sync_ticks(0, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 24))
def test_phase_sync_table_is_valid(stages, extra):
    m = stages + extra
    ticks = phase_sync_ticks(stages, m)
    assert len(ticks) == len(one_f_one_b_ticks(stages, m))
    done = {}
    for t, (phase, ops) in enumerate(ticks):
        assert all(op.phase == phase for op in ops)
        assert len({op.stage for op in ops}) == len(ops)
        for op in ops:
            if op.phase == FWD and op.stage > 0:
                assert done[(op.stage - 1, FWD, op.microbatch)] < t
            if op.phase == BWD:
                dep = (op.stage, FWD, op.microbatch) if op.stage == stages - 1 else (op.stage + 1, BWD, op.microbatch)
                assert done[dep] < t
            done[(op.stage, op.phase, op.microbatch)] = t
    assert len(done) == 2 * stages * m


def test_uniform_microbatches_match_1f1b():
    mbs = [mb(2048) for _ in range(8)]
    van = simulate_pp_iteration(mbs, 4, "vanilla_1f1b", CFG)
    cad = simulate_pp_iteration(mbs, 4, PPSchedule.CAD_PHASE_SYNC, CFG)
    assert cad.ticks == van.ticks == 2 * (8 + 4 - 1)
    assert cad.iteration_s <= van.iteration_s * (1 + 1e-9)


def test_heavy_microbatch_gains_from_pooling():
    mbs = [mb(2048) for _ in range(7)]
    mbs.insert(3, mb(32768, doc=100))
    van = simulate_pp_iteration(mbs, 4, "vanilla_1f1b", CFG)
    cad = simulate_pp_iteration(mbs, 4, "cad_phase_sync", CFG)
    assert cad.iteration_s < van.iteration_s
    assert cad.total_wire_bytes > 0


def test_idle_stages_help_during_warmup():
    mbs = [mb(8192, doc=10 * k) for k in range(4)]
    active = simulate_pp_iteration(mbs, 4, "cad_phase_sync", PPConfig(CFG.coeff, CFG.cluster, serve_idle_stages=False))
    pooled = simulate_pp_iteration(mbs, 4, "cad_phase_sync", CFG)
    assert pooled.iteration_s < active.iteration_s


def test_memory_peaks_at_stage_zero_under_1f1b():
    mbs = [mb(1024) for _ in range(6)]
    rep = simulate_pp_iteration(mbs, 3, "vanilla_1f1b", CFG)
    peaks = [d.peak_memory for d in rep.per_device]
    assert peaks[0] == 3 * CFG.coeff.gamma_mem * 1024
    assert peaks == sorted(peaks, reverse=True)

"""Tests for the reverse-engineering benches, attacks and mitigation."""

import math

import pytest

from afterimage.experiments import (
    ATTACK_CHANNELS,
    MitigationReport,
    NoiseModel,
    UnsupportedChannelError,
    load_trace,
    mitigation_eval,
    rev_conf_stride,
    rev_entries,
    rev_indexing,
    rev_page,
    rev_replacement,
    run_attack,
    synthetic_workload,
)


# --------------------------------------------------------------------------
# entry indexing
# --------------------------------------------------------------------------


def test_indexing_matches_low_byte_only():
    result = rev_indexing(trained_tag=0x2C)
    assert result.matching_offsets() == [0x2C]
    assert result.verify() == []


def test_indexing_rows_schema():
    result = rev_indexing(trained_tag=0x2C)
    rows = result.rows()
    assert len(rows) == 256
    assert rows[0x2C] == {"offset": 0x2C, "triggered": 1}
    assert rows[0x2D] == {"offset": 0x2D, "triggered": 0}


def test_indexing_rejects_wide_tag():
    with pytest.raises(ValueError):
        rev_indexing(trained_tag=0x100)


# --------------------------------------------------------------------------
# confidence counter
# --------------------------------------------------------------------------


def test_conf_stride_random_offset():
    # a confident entry fires its stale stride once, goes quiet while
    # confidence rebuilds, then fires the new stride
    result = rev_conf_stride(st1=7, st2=5, tr1=4, tr2=3, offset_mode="random")
    assert result.labels == [7, None, 5]
    assert result.verify() == []


def test_conf_stride_offset_equals_new_stride():
    # when the jump itself equals the new stride no quiet iteration occurs
    result = rev_conf_stride(st1=7, st2=5, tr1=4, tr2=3,
                             offset_mode="equals_st2")
    assert result.labels == [7, 5, 5]
    assert result.verify() == []


def test_conf_stride_short_training_never_confident():
    # one training load leaves confidence below the trigger threshold,
    # so the first phase-two iteration fetches nothing
    result = rev_conf_stride(st1=7, st2=5, tr1=1, tr2=3,
                             offset_mode="random")
    assert result.labels[0] is None
    assert result.verify() == []


def test_conf_stride_validates_arguments():
    with pytest.raises(ValueError):
        rev_conf_stride(offset_mode="sideways")
    with pytest.raises(ValueError):
        rev_conf_stride(st1=5, st2=5)


# --------------------------------------------------------------------------
# page boundaries
# --------------------------------------------------------------------------


def test_page_reclaimed_pool_always_triggers():
    result = rev_page()
    for off in (1, 2, 3, 4):
        assert result.verdicts[("reclaimed", off)] is True


def test_page_locked_pool_stops_after_next_page():
    result = rev_page()
    assert result.verdicts[("locked", 1)] is True
    for off in (2, 3, 4):
        assert result.verdicts[("locked", off)] is False


def test_page_cold_translation_needs_second_access():
    # first access only installs the translation; the repeat triggers
    result = rev_page()
    assert result.cold_next_page == (False, True)
    assert result.verify() == []


# --------------------------------------------------------------------------
# capacity and replacement
# --------------------------------------------------------------------------


def test_entries_capacity_is_twenty_four():
    assert rev_entries(24).dead_positions() == []
    assert rev_entries(26).dead_positions() == [1, 2]
    assert rev_entries(30).dead_positions() == [1, 2, 3, 4, 5, 6]


def test_entries_verify_clean():
    for n in (24, 26, 30):
        assert rev_entries(n).verify() == []


def test_replacement_victims_follow_refreshed_prefix():
    result = rev_replacement(n_retrain=8, n_new=8)
    assert result.evicted_positions() == [9, 10, 11, 12, 13, 14, 15, 16]
    assert result.verify() == []


def test_replacement_without_refresh_evicts_from_front():
    assert rev_replacement(0, 8).evicted_positions() == list(range(1, 9))


def test_replacement_no_newcomers_no_victims():
    assert rev_replacement(8, 0).evicted_positions() == []


# --------------------------------------------------------------------------
# attacks: allowed pairs and zero-noise transmission
# --------------------------------------------------------------------------


def test_disallowed_pairs_raise():
    for channel in ("prime_probe", "status_probe"):
        for variant in (2, 3):
            with pytest.raises(UnsupportedChannelError):
                run_attack(variant, channel, rounds=1)
    with pytest.raises(UnsupportedChannelError):
        run_attack(4, "flush_reload", rounds=1)


def test_all_supported_pairs_transmit_perfectly():
    for variant, channels in ATTACK_CHANNELS.items():
        for channel in channels:
            rounds = 20 if channel == "prime_probe" else 60
            outcome = run_attack(variant, channel, rounds=rounds, seed=5)
            assert outcome.success_rate == 1.0, (variant, channel)


def test_attack_records_schema():
    outcome = run_attack(1, "flush_reload", rounds=10, seed=2)
    rows = outcome.rows()
    assert [row["round"] for row in rows] == list(range(10))
    for row, record in zip(rows, outcome.records):
        assert row["truth"] == record.truth
        assert row["success"] == int(record.success)
        assert record.detected in (7, 13)
        assert record.inferred == record.truth


def test_attack_is_seed_reproducible():
    first = run_attack(2, "flush_reload", rounds=40, seed=11)
    second = run_attack(2, "flush_reload", rounds=40, seed=11)
    assert first.records == second.records
    assert first.rows() == second.rows()
    other = run_attack(2, "flush_reload", rounds=40, seed=12)
    assert other.records != first.records


def test_kernel_attack_finds_matching_group_via_channel():
    outcome = run_attack(3, "flush_reload", rounds=30, seed=4)
    # tag 0x4B lives among tags 72..95, covered by the fourth group
    assert outcome.detail["matched_group"] == 3
    assert outcome.success_rate == 1.0


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------


def test_noise_model_validates_probabilities():
    with pytest.raises(ValueError):
        NoiseModel(p_evict=1.5)
    with pytest.raises(ValueError):
        NoiseModel(p_extra_load=-0.1)


def test_eviction_noise_sweep_is_monotone():
    rates = []
    for p in (0.0, 0.02, 0.05, 0.1, 0.2):
        outcome = run_attack(1, "flush_reload", rounds=120,
                             noise=NoiseModel(p_evict=p), seed=3)
        rates.append(outcome.success_rate)
    assert rates[0] == 1.0
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] < 1.0


def test_small_eviction_noise_keeps_accuracy_high():
    outcome = run_attack(1, "flush_reload", rounds=200,
                         noise=NoiseModel(p_evict=0.01), seed=3)
    assert outcome.success_rate >= 0.9


def test_adjacent_line_noise_does_not_fool_the_detector():
    # neighbours sit one line off either candidate stride, so the pair
    # count for 7 and 13 is untouched
    outcome = run_attack(1, "flush_reload", rounds=100,
                         noise=NoiseModel(next_line_noise=True), seed=3)
    assert outcome.success_rate == 1.0


def test_noise_reaches_other_channels():
    pp = run_attack(1, "prime_probe", rounds=30,
                    noise=NoiseModel(p_evict=0.3), seed=3)
    status = run_attack(1, "status_probe", rounds=60,
                        noise=NoiseModel(p_evict=0.3), seed=3)
    assert pp.success_rate < 1.0
    assert status.success_rate < 1.0


# --------------------------------------------------------------------------
# mitigation: blocking and cost
# --------------------------------------------------------------------------


def test_flush_on_switch_blocks_cross_domain_attacks():
    for variant in (2, 3):
        outcome = run_attack(variant, "flush_reload", rounds=60, seed=6,
                             flush_on_switch=True)
        assert outcome.success_rate == 0.0, variant
        assert all(record.truth == 1 for record in outcome.records)


def test_flush_on_switch_spares_same_address_space_variant():
    # variant 1 never crosses a domain, so the switch flush never fires
    outcome = run_attack(1, "flush_reload", rounds=40, seed=6,
                         flush_on_switch=True)
    assert outcome.success_rate == 1.0


def test_mitigated_kernel_search_comes_up_empty():
    outcome = run_attack(3, "flush_reload", rounds=20, seed=6,
                         flush_on_switch=True)
    assert outcome.detail["matched_group"] is None


def test_mitigation_reset_cost_identity():
    for ports in (1, 2, 4):
        report = mitigation_eval(write_ports=ports)
        assert report.reset_cycles == report.flushes * math.ceil(24 / ports)
        assert report.flushes > 0


def test_mitigation_coverage_delta_is_small():
    report = mitigation_eval()
    assert report.coverage_no_flush > 0.7
    assert 0.0 <= report.coverage_delta <= 0.02


def test_mitigation_without_flushing_costs_nothing():
    for period in (None, math.inf):
        report = mitigation_eval(flush_period_cycles=period)
        assert report.flushes == 0
        assert report.coverage_delta == 0.0


def test_mitigation_rejects_impossible_period():
    with pytest.raises(ValueError):
        mitigation_eval(flush_period_cycles=10, write_ports=1)


def test_mitigation_report_rows():
    report = mitigation_eval()
    (row,) = report.rows()
    assert row["flushes"] == report.flushes
    assert row["coverage_delta"] == f"{report.coverage_delta:.6f}"
    assert isinstance(report, MitigationReport)


# --------------------------------------------------------------------------
# workloads and traces
# --------------------------------------------------------------------------


def test_synthetic_workload_interleaves_streams():
    loads = synthetic_workload(n_loads=16, n_ips=8)
    ips = [ip for ip, _ in loads]
    assert ips[:8] == ips[8:]
    assert len(set(ips)) == 8
    first_ip, first_addr = loads[0]
    second_round_addr = loads[8][1]
    assert second_round_addr - first_addr == 448


def test_synthetic_workload_guards_stream_overlap():
    with pytest.raises(ValueError):
        synthetic_workload(n_loads=10_000_000, spacing=1 << 20)


def test_load_trace_roundtrip(tmp_path):
    trace = tmp_path / "loads.txt"
    trace.write_text(
        "# ip_hex,vaddr_hex,domain_id\n"
        "\n"
        "400a4b,20001c0,0\n"
        "0x7fff00f04b, 0x7a0640, 1\n")
    records = load_trace(trace)
    assert records == [(0x400A4B, 0x20001C0, 0),
                       (0x7FFF00F04B, 0x7A0640, 1)]


def test_load_trace_reports_line_numbers(tmp_path):
    trace = tmp_path / "bad.txt"
    trace.write_text("400a4b,20001c0,0\nnot-hex,123,0\n")
    with pytest.raises(ValueError, match="bad.txt:2"):
        load_trace(trace)
    trace.write_text("400a4b,20001c0\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        load_trace(trace)


def test_trace_workload_feeds_mitigation_eval(tmp_path):
    lines = ["# synthetic"]
    for ip, addr in synthetic_workload(n_loads=2_000):
        lines.append(f"{ip:x},{addr:x},0")
    trace = tmp_path / "trace.txt"
    trace.write_text("\n".join(lines) + "\n")
    report = mitigation_eval(load_trace(trace), flush_period_cycles=500)
    assert report.loads == 2_000
    assert report.flushes > 0
    assert report.reset_cycles == report.flushes * 24

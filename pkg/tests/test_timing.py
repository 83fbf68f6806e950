import math

import pytest
from hypothesis import given, settings, strategies as st

from codistill.timing import (
    ClientTiming,
    Schedule,
    closed_form_round_time,
    simulate,
    speedup_report,
)

ARITH = ClientTiming(t_gm_epoch=2.0, t_pm_epoch=3.0, t_up=2.0, t_down=2.0)


def full_schedule(rounds, n, e_g=1, e_p=1):
    return Schedule(tuple(tuple(range(n)) for _ in range(rounds)), e_g, e_p)


def test_closed_form_arithmetic():
    assert closed_form_round_time(ARITH, 1, 1, 0.0, "compute_and_wait") == 9.0
    assert closed_form_round_time(ARITH, 1, 1, 0.0, "wait_free") == 6.0


def test_closed_form_degenerate_cases():
    no_pm = ClientTiming(2.0, 0.0, 1.0, 3.0)
    assert closed_form_round_time(no_pm, 1, 1, 0.5, "wait_free") == closed_form_round_time(no_pm, 1, 1, 0.5, "compute_and_wait")
    no_comm = ClientTiming(2.0, 3.0, 0.0, 0.0)
    assert closed_form_round_time(no_comm, 2, 3, 0.0, "wait_free") == closed_form_round_time(no_comm, 2, 3, 0.0, "compute_and_wait")


@pytest.mark.parametrize("protocol", ["compute_and_wait", "wait_free"])
def test_homogeneous_simulation_matches_closed_form(protocol):
    tl = simulate(full_schedule(10, 4, 2, 3), [ARITH] * 4, t_agg=0.5, protocol=protocol)
    per_round = closed_form_round_time(ARITH, 2, 3, 0.5, protocol)
    for r, rec in enumerate(tl.rounds, start=1):
        assert abs(rec.end - r * per_round) < 1e-9
    assert abs(tl.total - 10 * per_round) < 1e-9


def test_arithmetic_speedup_is_one_and_a_half():
    sched = full_schedule(10, 3)
    cw = simulate(sched, [ARITH] * 3, 0.0, "compute_and_wait")
    wf = simulate(sched, [ARITH] * 3, 0.0, "wait_free")
    report = speedup_report(cw, wf, [0.1 * r for r in range(1, 11)], target_acc=1.0)
    assert report["rounds_to_target"] == 10
    assert report["zeta_baseline"] == pytest.approx(90.0, abs=1e-9)
    assert report["zeta_waitfree"] == pytest.approx(60.0, abs=1e-9)
    assert report["speedup"] == pytest.approx(1.5, rel=1e-12)


def test_target_not_reached():
    sched = full_schedule(3, 2)
    cw = simulate(sched, [ARITH] * 2, 0.0, "compute_and_wait")
    wf = simulate(sched, [ARITH] * 2, 0.0, "wait_free")
    report = speedup_report(cw, wf, [0.1, 0.2, 0.3], target_acc=0.9)
    assert report["reached"] is False and report["speedup"] is None
    with pytest.raises(ValueError):
        speedup_report(cw, wf, [], 0.5)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        ClientTiming(t_up=-1.0)
    with pytest.raises(ValueError):
        simulate(full_schedule(1, 1), [ARITH], t_agg=-1.0)
    with pytest.raises(ValueError):
        simulate(Schedule((), 1, 1), [ARITH])
    with pytest.raises(ValueError):
        simulate(full_schedule(1, 1), [ARITH], protocol="async")


def test_causality_and_straggler_bound():
    timings = [ClientTiming(1.0, 2.0, 0.5, 0.25), ClientTiming(3.0, 1.0, 2.0, 1.0), ClientTiming(0.5, 4.0, 0.1, 0.1)]
    for protocol in ("compute_and_wait", "wait_free"):
        tl = simulate(full_schedule(5, 3, 2, 2), timings, 0.3, protocol)
        prev_end = 0.0
        for rec in tl.rounds:
            assert rec.agg_start == max(rec.upload_done.values())
            assert rec.agg_done == pytest.approx(rec.agg_start + 0.3)
            for k, t in rec.start.items():
                assert t <= rec.upload_done[k] <= rec.agg_start <= rec.broadcast_done[k]
                assert rec.broadcast_done[k] == pytest.approx(rec.agg_done + timings[k].t_down)
            assert min(rec.start.values()) >= prev_end - max(t.t_down for t in timings) - 1e-12
            prev_end = rec.end


def test_wait_free_pm_overlaps_upload():
    tl = simulate(full_schedule(1, 1), [ARITH], 0.0, "wait_free")
    rec = tl.rounds[0]
    assert rec.upload_done[0] == 2.0 + 2.0
    assert rec.pm_done[0] == 2.0 + 3.0
    assert rec.end == 6.0


def test_partial_participation():
    sched = Schedule(((0, 1), (1, 2), (0, 2)), 1, 1)
    tl = simulate(sched, [ARITH] * 3, 0.0, "compute_and_wait")
    assert set(tl.rounds[1].start) == {1, 2}
    # client 2 idles through round 1 and starts as soon as the round-1 broadcast lands
    assert tl.rounds[1].start[2] == tl.rounds[0].broadcast_done[2]
    assert tl.total == pytest.approx(27.0)


timing_values = st.floats(0.01, 10.0, allow_nan=False)
client_timing = st.builds(ClientTiming, timing_values, timing_values, timing_values, timing_values)


@settings(max_examples=60, deadline=None)
@given(st.lists(client_timing, min_size=1, max_size=6), st.integers(1, 5), st.integers(0, 3),
       st.integers(1, 4), st.floats(0.0, 3.0))
def test_wait_free_strictly_faster_with_positive_overlap(timings, rounds, e_g, e_p, t_agg):
    sched = full_schedule(rounds, len(timings), e_g, e_p)
    cw = simulate(sched, timings, t_agg, "compute_and_wait")
    wf = simulate(sched, timings, t_agg, "wait_free")
    assert wf.total < cw.total
    for a, b in zip(wf.round_ends, cw.round_ends):
        assert a < b


@settings(max_examples=40, deadline=None)
@given(st.lists(client_timing, min_size=1, max_size=5), st.integers(1, 4), st.floats(0.01, 100.0))
def test_speedup_is_scale_invariant(timings, rounds, c):
    sched = full_schedule(rounds, len(timings), 2, 3)
    base = [simulate(sched, timings, 0.5, p).total for p in ("compute_and_wait", "wait_free")]
    scaled = [simulate(sched, [t.scaled(c) for t in timings], 0.5 * c, p).total
              for p in ("compute_and_wait", "wait_free")]
    for a, b in zip(base, scaled):
        assert math.isclose(b, a * c, rel_tol=1e-9)
    assert math.isclose(scaled[0] / scaled[1], base[0] / base[1], rel_tol=1e-9)


@settings(max_examples=40, deadline=None)
@given(timing_values, timing_values, timing_values, st.integers(1, 4))
def test_simulated_speedup_matches_closed_form(gm, pm, comm, e_p):
    t = ClientTiming(gm, pm, comm / 2, comm / 2)
    sched = full_schedule(3, 2, 1, e_p)
    cw = simulate(sched, [t, t], 0.0, "compute_and_wait").total
    wf = simulate(sched, [t, t], 0.0, "wait_free").total
    assert math.isclose(cw, 3 * closed_form_round_time(t, 1, e_p, 0.0, "compute_and_wait"), rel_tol=1e-12)
    assert math.isclose(wf, 3 * closed_form_round_time(t, 1, e_p, 0.0, "wait_free"), rel_tol=1e-12)

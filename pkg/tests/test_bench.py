import math
import statistics
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aeropose.bench import StageError, StageTiming, bench_pipeline, compose_report, format_latency_table, time_stage
from aeropose.pipeline import Frame, MockDetector, MockPoseBackend
from aeropose.synthetic import centered_box, template_keypoints


def fixed(name, samples):
    return StageTiming(name, list(samples))


def test_compose_report_examples():
    r = compose_report([fixed("detect", [13.0]), fixed("pose", [6.54])])
    assert r.total == 19.54
    assert r.headroom == pytest.approx(40.0 - 19.54, abs=1e-9)
    r = compose_report([fixed("detect", [13.0]), fixed("pose", [6.54]), fixed("crop", [0.5])])
    assert r.total == pytest.approx(20.04, abs=1e-9)
    assert r.headroom == pytest.approx(19.96, abs=1e-9)
    assert compose_report([fixed("a", [30.0]), fixed("b", [15.0])]).headroom == pytest.approx(-5.0)
    assert compose_report([fixed("a", [10.0])], fps_budget=50).headroom == pytest.approx(10.0)
    assert "19.96" in format_latency_table(r)


@given(st.lists(st.floats(0.001, 1000), min_size=1, max_size=200))
def test_stage_statistics_against_oracle(xs):
    t = fixed("s", xs)
    assert t.mean == pytest.approx(statistics.fmean(xs), rel=1e-12)
    assert t.median == statistics.median(xs)
    s = sorted(xs)
    rank = math.ceil(0.95 * len(s))
    assert t.p95 == s[rank - 1]
    assert t.min <= t.median <= t.max and t.p95 <= t.max


@given(st.lists(st.lists(st.floats(0, 100), min_size=1, max_size=10), min_size=1, max_size=6))
def test_total_is_sum_of_means(groups):
    stages = [fixed(f"s{i}", g) for i, g in enumerate(groups)]
    r = compose_report(stages)
    assert r.total == pytest.approx(sum(statistics.fmean(g) for g in groups), abs=1e-9)


def test_jitter_flag():
    assert compose_report([fixed("x", [1.0, 11.0])]).jitter_flag
    assert not compose_report([fixed("x", [1.0, 9.0])]).jitter_flag


def test_sleep_stage_is_measured():
    t = time_stage(lambda: time.sleep(0.010), iterations=20, warmup=2)
    assert t.count == 20 and t.warmup_count == 2
    assert 10.0 <= t.median <= 12.0


def test_empty_stage_is_tiny():
    t = time_stage(lambda: None, iterations=1000)
    assert t.mean < 0.1


def test_warmup_runs_excluded():
    calls = []
    t = time_stage(lambda: calls.append(1), iterations=7, warmup=4)
    assert len(calls) == 11 and t.count == 7


def test_stage_error_keeps_partial_samples():
    n = {"i": 0}

    def flaky():
        n["i"] += 1
        if n["i"] > 5:
            raise RuntimeError("x")

    with pytest.raises(StageError) as e:
        time_stage(flaky, iterations=10, warmup=2)
    assert e.value.timing.count == 3


def _backends(n_persons, det_ms, pose_ms):
    det = MockDetector(lambda fid: [centered_box(320, 240)] * n_persons, delay_ms=det_ms)
    pose = MockPoseBackend(lambda ctx: template_keypoints(ctx.box), delay_ms=pose_ms)
    return det, pose


FRAMES = [Frame(i, np.zeros((240, 320, 3), np.uint8)) for i in range(1, 6)]


def test_bench_pipeline_recovers_injected_delays():
    r = bench_pipeline(FRAMES, *_backends(1, 5, 3), repeats=4, warmup=2)
    assert r.stages["detect"]["mean"] == pytest.approx(5, rel=0.2)
    assert r.stages["pose"]["mean"] == pytest.approx(3, rel=0.2)
    assert r.total >= 8


def test_pose_time_scales_with_persons():
    one = bench_pipeline(FRAMES, *_backends(1, 0, 2), warmup=1).stages["pose"]["mean"]
    three = bench_pipeline(FRAMES, *_backends(3, 0, 2), warmup=1).stages["pose"]["mean"]
    assert three == pytest.approx(3 * one, rel=0.25)


def test_zero_person_frames_have_no_pose_samples():
    r = bench_pipeline(FRAMES, *_backends(0, 0, 2), warmup=1)
    assert r.stages["pose"]["count"] == 0
    assert r.stages["detect"]["count"] == len(FRAMES)

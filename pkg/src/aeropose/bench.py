"""Per-stage latency measurement and realtime budget accounting."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

DEFAULT_WARMUP = 10
DEFAULT_FPS = 25.0
JITTER_RATIO = 10.0


@dataclass
class StageTiming:
    stage: str
    samples: List[float] = field(default_factory=list)
    warmup_count: int = 0

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def mean(self) -> float:
        return math.fsum(self.samples) / len(self.samples) if self.samples else 0.0

    @property
    def median(self) -> float:
        return float(statistics.median(self.samples)) if self.samples else 0.0

    @property
    def p95(self) -> float:
        # nearest rank on the sorted samples
        if not self.samples:
            return 0.0
        s = sorted(self.samples)
        return s[max(math.ceil(0.95 * len(s)), 1) - 1]

    @property
    def min(self) -> float:
        return min(self.samples) if self.samples else 0.0

    @property
    def max(self) -> float:
        return max(self.samples) if self.samples else 0.0

    @property
    def jittery(self) -> bool:
        lo = self.min
        return bool(self.samples) and lo > 0 and self.max / lo > JITTER_RATIO

    def summary(self) -> Dict[str, float]:
        return {
            "count": self.count,
            "warmup": self.warmup_count,
            "mean": self.mean,
            "median": self.median,
            "p95": self.p95,
            "min": self.min,
            "max": self.max,
            "jitter_flag": self.jittery,
        }


class StageError(RuntimeError):
    """A timed stage raised; ``timing`` holds the samples taken before it."""

    def __init__(self, timing: StageTiming, cause: BaseException):
        super().__init__(f"stage {timing.stage!r} failed after {timing.count} samples: {cause!r}")
        self.timing = timing


def time_stage(
    stage: Callable[[], object], iterations: int, warmup: int = DEFAULT_WARMUP, name: str = "stage"
) -> StageTiming:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    timing = StageTiming(name, [], warmup)
    clock = time.perf_counter_ns
    try:
        for _ in range(warmup):
            stage()
        for _ in range(iterations):
            t0 = clock()
            stage()
            timing.samples.append((clock() - t0) / 1e6)
    except Exception as e:
        raise StageError(timing, e) from e
    return timing


@dataclass
class LatencyReport:
    stages: Dict[str, Dict[str, float]]
    total: float
    total_median: float
    fps_budget: float
    headroom: float
    jitter_flag: bool

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "total_ms": self.total,
            "total_median_ms": self.total_median,
            "fps_budget": self.fps_budget,
            "headroom_ms": self.headroom,
            "jitter_flag": self.jitter_flag,
        }


def compose_report(stages: Sequence[StageTiming], fps_budget: float = DEFAULT_FPS) -> LatencyReport:
    """Totals are sums of stage means; headroom is what the frame budget leaves."""
    if not stages:
        raise ValueError("compose_report needs at least one stage")
    if not fps_budget > 0:
        raise ValueError("fps_budget must be positive")
    total = sum(s.mean for s in stages)
    return LatencyReport(
        stages={s.stage: s.summary() for s in stages},
        total=total,
        total_median=sum(s.median for s in stages),
        fps_budget=fps_budget,
        headroom=1000.0 / fps_budget - total,
        jitter_flag=any(s.jittery for s in stages),
    )


def format_latency_table(report: LatencyReport) -> str:
    head = f"{'Stage':<16}{'Latency [ms]':>14}{'median':>10}{'p95':>10}{'min':>10}{'max':>10}{'n':>7}"
    lines = [head, "-" * len(head)]
    for name, s in report.stages.items():
        lines.append(
            f"{name:<16}{s['mean']:>14.2f}{s['median']:>10.2f}{s['p95']:>10.2f}"
            f"{s['min']:>10.2f}{s['max']:>10.2f}{s['count']:>7}"
        )
    lines.append("-" * len(head))
    lines.append(f"{'total':<16}{report.total:>14.2f}{report.total_median:>10.2f}")
    lines.append(f"budget {report.fps_budget:g} fps -> headroom {report.headroom:.2f} ms")
    if report.jitter_flag:
        lines.append("warning: max/min ratio above 10 on some stage; timings may include preemption")
    return "\n".join(lines)


def bench_pipeline(
    frames,
    det,
    pose,
    cfg=None,
    det_conf_threshold: float = 0.4,
    repeats: int = 1,
    warmup: int = DEFAULT_WARMUP,
    fps_budget: float = DEFAULT_FPS,
    batch_size=None,
) -> LatencyReport:
    """Time each pipeline stage over ``frames`` (replayed ``repeats`` times).

    Warmup runs cycle through the frames and are discarded. The pose sample
    for a frame is the summed time of its pose calls; frames without
    persons contribute no pose sample.
    """
    from .heatmap import CodecConfig
    from .pipeline import run_frame

    cfg = cfg or CodecConfig()
    frames = list(frames)
    if not frames:
        raise ValueError("bench_pipeline needs at least one frame")
    for i in range(warmup):
        run_frame(frames[i % len(frames)], det, pose, det_conf_threshold, cfg, batch_size)
    stages = {name: StageTiming(name, [], warmup) for name in ("preprocess", "detect", "crop_decode", "pose")}
    for _ in range(repeats):
        for f in frames:
            r = run_frame(f, det, pose, det_conf_threshold, cfg, batch_size)
            for name in ("preprocess", "detect", "crop_decode"):
                if name in r.timings:
                    stages[name].samples.append(r.timings[name])
            if r.persons and "pose" in r.timings:
                stages["pose"].samples.append(r.timings["pose"])
    return compose_report(list(stages.values()), fps_budget)

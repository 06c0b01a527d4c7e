# timing.py
from __future__ import annotations

import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Sequence

import numpy as np
from loguru import logger


# ------------------------------
# Stage timing storage
# ------------------------------

@dataclass
class StageTiming:
    calls: int
    total_ms: float
    median_ms: float
    p95_ms: float
    max_ms: float
    # fraction of the summed pipeline-stage time; sub-timers inside a parallel stage can exceed 1
    share: float


class StageRecorder:
    """
    Wall-clock samples in milliseconds keyed by timer name, safe to share across worker
    threads. `stages` names the sequential pipeline stages; their totals make up the run's
    wall time, any other name (a per-patch timer, say) is reported relative to it.
    """

    def __init__(self, stages: Sequence[str] = ()) -> None:
        self.stages = tuple(stages)
        self.samples: Dict[str, List[float]] = defaultdict(list)
        self._lock = threading.Lock()

    def record(self, stage: str, ms: float) -> None:
        with self._lock:
            self.samples[stage].append(ms)

    def _snapshot(self) -> Dict[str, np.ndarray]:
        with self._lock:
            return {k: np.asarray(v, dtype=float) for k, v in self.samples.items() if v}

    def wall_ms(self) -> float:
        snap = self._snapshot()
        names = self.stages or tuple(snap)
        return float(sum(snap[s].sum() for s in names if s in snap))

    def summary(self) -> Dict[str, StageTiming]:
        """Pipeline stages in their declared order, then the remaining timers by name."""
        snap = self._snapshot()
        names = self.stages or tuple(snap)
        wall = float(sum(snap[s].sum() for s in names if s in snap))
        order = [s for s in self.stages if s in snap] + sorted(set(snap) - set(self.stages))
        out = {}
        for name in order:
            vals = snap[name]
            total = float(vals.sum())
            out[name] = StageTiming(
                calls=int(vals.size),
                total_ms=total,
                median_ms=float(np.median(vals)),
                p95_ms=float(np.percentile(vals, 95)),
                max_ms=float(vals.max()),
                share=total / wall if wall > 0 else 0.0,
            )
        return out

    def as_dict(self) -> Dict[str, Dict[str, float]]:
        return {stage: asdict(t) for stage, t in self.summary().items()}

    def log_summary(self) -> None:
        summary = self.summary()
        if not summary:
            return
        for stage, t in summary.items():
            if t.calls == 1:
                logger.info("{:<14} {:>10.1f}ms {:>6.1%}", stage, t.total_ms, t.share)
            else:
                logger.info(
                    "{:<14} {:>10.1f}ms {:>6.1%}  calls={} median={:.1f}ms p95={:.1f}ms",
                    stage, t.total_ms, t.share, t.calls, t.median_ms, t.p95_ms,
                )
        timed_stages = [s for s in self.stages if s in summary]
        if timed_stages:
            slowest = max(timed_stages, key=lambda s: summary[s].total_ms)
            logger.info("pipeline wall {:.1f}ms, slowest stage {}", self.wall_ms(), slowest)


# ------------------------------
# Wrapper
# ------------------------------

def timed(recorder: StageRecorder, name: str, fn: Callable[..., Any], *args: Any, **kwargs: Any) -> Any:
    start = time.perf_counter_ns()
    try:
        return fn(*args, **kwargs)
    finally:
        dur = (time.perf_counter_ns() - start) / 1e6
        recorder.record(name, dur)
        logger.debug("{} took {:.3f}ms", name, dur)

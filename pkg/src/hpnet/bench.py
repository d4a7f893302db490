"""Batched inference latency and activation-memory benchmark."""

from __future__ import annotations

import gc
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np

from .infer import infer_logits
from .model import ModelConfig
from .packets import HEADER_LEN

DEFAULT_LEVELS = (1, 10, 100, 1000)


@dataclass
class BenchRow:
    level: int
    total_time: float        # median seconds for one batched forward of `level` packets
    time_per_packet: float   # total_time / level
    peak_memory: int         # bytes allocated above the baseline during one forward
    reps: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self, level: int) -> BenchRow:
        for r in self.rows:
            if r.level == level:
                return r
        raise KeyError(level)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "meta": self.meta}

    def csv(self) -> str:
        lines = ["level,total_time_s,time_per_packet_ms,peak_memory_bytes,reps"]
        for r in self.rows:
            lines.append(f"{r.level},{r.total_time:.6e},{r.time_per_packet * 1e3:.6f},"
                         f"{r.peak_memory},{r.reps}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        lines = [f"{'level':>7}  {'total ms':>10}  {'ms/packet':>10}  {'peak MB':>9}"]
        for r in self.rows:
            lines.append(f"{r.level:7d}  {r.total_time * 1e3:10.3f}  {r.time_per_packet * 1e3:10.4f}"
                         f"  {r.peak_memory / 2 ** 20:9.3f}")
        return "\n".join(lines) + "\n"


def _peak_bytes(fn) -> int:
    gc.collect()
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn()
        return tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()


def bench_inference(params, cfg: ModelConfig, levels=DEFAULT_LEVELS, reps: int = 20,
                    warmup: int = 3, seed: int = 0, min_time: float = 0.0) -> BenchReport:
    """Median wall time of batched eval-mode forwards on random byte inputs.

    Every level runs ``warmup`` untimed forwards, then ``reps`` timed ones
    (more if ``min_time`` seconds have not elapsed).  Memory is measured in a
    separate forward so tracing overhead never enters the timings.
    """
    if any(int(l) < 1 for l in levels):
        raise ValueError("bench levels must be >= 1")
    rng = np.random.default_rng(seed)
    report = BenchReport(meta={"reps": reps, "warmup": warmup, "seed": seed})
    for level in (int(l) for l in levels):
        h = rng.integers(0, 256, (level, HEADER_LEN)).astype(np.float32) / np.float32(255)
        p = rng.integers(0, 256, (level, cfg.payload_len)).astype(np.float32) / np.float32(255)
        run = lambda: infer_logits(params, cfg, h, p)  # noqa: E731
        for _ in range(warmup):
            run()
        times = []
        start = time.perf_counter()
        while len(times) < reps or time.perf_counter() - start < min_time:
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        total = float(np.median(times))
        report.rows.append(BenchRow(level, total, total / level, _peak_bytes(run), len(times)))
    return report

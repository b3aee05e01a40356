"""Timing and allocation benchmark: conventional vs transpose cross-attention.

Both mechanisms run with Q/K/V projections on identical random inputs, so
the only difference is the shape of the score matrix (N x N vs d x d).
Allocation figures come from :class:`gia.core.AllocationTracker` and count
live Matrix elements exactly.
"""
from __future__ import annotations

import csv
import json
import math
import os
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import GiaParams, conventional_cross_attention, glorot, transpose_cross_attention
from .core import AllocationTracker, Matrix, Tape, backward, sum_all
from .errors import ValidationError
from .seeding import stream

MECHANISMS = ("cca", "tca")
PASSES = ("forward", "forward+backward")
CSV_HEADER = ["mechanism", "n", "d", "pass", "median_ns", "min_ns", "peak_alloc_elems"]
SKIPPED = "skipped: memory"

# live N x N matrices at the peak of each CCA pass (scores + weights; plus one gradient)
_CCA_SQUARES = {"forward": 2, "forward+backward": 3}


@dataclass
class BenchRow:
    mechanism: str
    n: int
    d: int
    pass_: str
    median_ns: Optional[float] = None
    min_ns: Optional[float] = None
    peak_alloc_elems: Optional[int] = None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    d: int = 16
    reps: int = 5

    def select(self, mechanism: str, pass_: str = "forward") -> list:
        return [r for r in self.rows if r.mechanism == mechanism and r.pass_ == pass_]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                if r.ok:
                    w.writerow([r.mechanism, r.n, r.d, r.pass_, int(round(r.median_ns)),
                                int(round(r.min_ns)), r.peak_alloc_elems])
                else:
                    w.writerow([r.mechanism, r.n, r.d, r.pass_, r.status, "", ""])
        return path

    def summary(self) -> dict:
        exponents = {}
        for mech in MECHANISMS:
            for p in PASSES:
                if not self.select(mech, p):
                    continue
                try:
                    value = fit_scaling_exponent(self, mech, p)
                except ValidationError:
                    value = None
                exponents.setdefault(mech, {})[p] = value
        return {
            "d": self.d,
            "reps": self.reps,
            "n_values": sorted({r.n for r in self.rows}),
            "exponents": exponents,
            "skipped": [{"mechanism": r.mechanism, "n": r.n, "pass": r.pass_, "reason": r.status}
                        for r in self.rows if not r.ok],
        }

    def write_summary(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")
        return path


def fit_scaling_exponent(report: BenchReport, mechanism: str, pass_: str = "forward") -> float:
    """Least-squares slope of log(median time) against log(N)."""
    rows = [r for r in report.select(mechanism, pass_) if r.ok]
    if len(rows) < 3:
        raise ValidationError(f"need timings at >= 3 sizes for {mechanism}/{pass_}, have {len(rows)}")
    x = np.log([r.n for r in rows])
    y = np.log([r.median_ns for r in rows])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def available_memory_bytes() -> Optional[int]:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def cca_bytes_needed(n: int, pass_: str) -> int:
    return 8 * n * n * _CCA_SQUARES[pass_]


@contextmanager
def single_core():
    """Limit BLAS to one thread and pin the process to one CPU where possible."""
    old = None
    if hasattr(os, "sched_getaffinity"):
        try:
            old = os.sched_getaffinity(0)
            os.sched_setaffinity(0, {min(old)})
        except OSError:
            old = None
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if old is not None:
            os.sched_setaffinity(0, old)


def make_inputs(n: int, d: int, seed: int, rep: int) -> dict:
    rng = stream(seed, "bench", n, rep)
    return {
        "x_hat": rng.standard_normal((n, d)),
        "p_hat": rng.standard_normal((n, d)),
        "w_q": glorot(rng, d, d),
        "w_k": glorot(rng, d, d),
        "w_v": glorot(rng, d, d),
    }


def _params(d: int, weights: dict) -> GiaParams:
    zero_row = Matrix(np.zeros((1, d)), copy=False)
    return GiaParams(
        w_embed=Matrix(np.eye(d), copy=False), b_embed=zero_row,
        w_pos=Matrix(np.zeros((2, d)), copy=False), b_pos=zero_row,
        w_q=weights["w_q"], w_k=weights["w_k"], w_v=weights["w_v"],
        w_res=Matrix(np.zeros((d, d)), copy=False), b_res=zero_row,
    )


_ATTENTION = {"cca": conventional_cross_attention, "tca": transpose_cross_attention}


def run_pass(mechanism: str, pass_: str, inputs: dict):
    """Execute one pass; returns the forward output (forward) or the gradients."""
    fn = _ATTENTION[mechanism]
    d = inputs["x_hat"].shape[1]
    if pass_ == "forward":
        w = {k: Matrix(inputs[k], copy=False) for k in ("w_q", "w_k", "w_v")}
        return fn(Matrix(inputs["x_hat"], copy=False), Matrix(inputs["p_hat"], copy=False), _params(d, w))
    tape = Tape()
    leaves = {k: tape.watch(k, v) for k, v in inputs.items()}
    loss = sum_all(fn(leaves["x_hat"], leaves["p_hat"], _params(d, leaves)))
    return backward(tape, loss)


def _check_output(out, n: int, d: int, mechanism: str):
    if isinstance(out, Matrix):
        if out.shape != (n, d) or not np.all(np.isfinite(out.data)):
            raise RuntimeError(f"{mechanism} produced an invalid {out.shape} output at N={n}")
    else:
        for name, g in out.items():
            if not np.all(np.isfinite(g)):
                raise RuntimeError(f"{mechanism} produced non-finite gradient {name} at N={n}")


class CacheEvictor:
    """Reads a buffer larger than the last-level cache so the next call starts cold.

    Without this, small problem sizes run entirely from cache while large ones
    stream from DRAM, and the size sweep measures the memory hierarchy rather
    than the algorithm.
    """

    def __init__(self, nbytes: int = 64 * 2 ** 20):
        self.buffer = np.ones(max(nbytes // 8, 1))

    def __call__(self):
        self.buffer.sum()


def _measure(mechanism, pass_, n, d, reps, seed, min_rep_ns, evict):
    times, peak = [], 0
    number = None
    for rep in range(reps):
        inputs = make_inputs(n, d, seed, rep)
        if number is None:
            evict()
            t0 = time.perf_counter_ns()
            _check_output(run_pass(mechanism, pass_, inputs), n, d, mechanism)
            once = max(time.perf_counter_ns() - t0, 1)
            number = max(1, min(100, math.ceil(min_rep_ns / once)))
        elapsed = 0
        for _ in range(number):
            evict()
            t0 = time.perf_counter_ns()
            run_pass(mechanism, pass_, inputs)
            elapsed += time.perf_counter_ns() - t0
        times.append(elapsed / number)
        with AllocationTracker() as tracker:
            out = run_pass(mechanism, pass_, inputs)
            del out
        peak = max(peak, tracker.peak)
    return statistics.median(times), min(times), peak


def run_bench(n_values: Sequence[int], d: int = 16, reps: int = 5, passes: Sequence[str] = PASSES,
              mechanisms: Sequence[str] = MECHANISMS, seed: int = 0,
              memory_budget_bytes: Optional[int] = None, min_rep_ns: float = 5e6,
              flush_bytes: int = 64 * 2 ** 20, log=None) -> BenchReport:
    """Time every (mechanism, N, pass) combination.

    CCA sizes whose N x N buffers would exceed ``memory_budget_bytes``
    (default: half of the currently available RAM) are recorded as skipped
    instead of being run; so is a run that raises ``MemoryError``. Each timed
    call is preceded by a read of ``flush_bytes`` so every size starts from a
    cold cache; a rep averages enough calls to cover ``min_rep_ns``.
    """
    n_values = [int(n) for n in n_values]
    if len(n_values) < 3 or n_values != sorted(n_values):
        raise ValidationError("n_values must be ascending with at least 3 entries")
    if reps < 5:
        raise ValidationError("reps must be >= 5")
    for p in passes:
        if p not in PASSES:
            raise ValidationError(f"unknown pass {p!r}; expected one of {PASSES}")
    for m in mechanisms:
        if m not in MECHANISMS:
            raise ValidationError(f"unknown mechanism {m!r}; expected one of {MECHANISMS}")
    if memory_budget_bytes is None:
        avail = available_memory_bytes()
        memory_budget_bytes = avail // 2 if avail else 2 ** 31

    report = BenchReport(d=d, reps=reps)
    evict = CacheEvictor(flush_bytes) if flush_bytes else (lambda: None)
    with single_core():
        for p in passes:
            for mech in mechanisms:
                for n in n_values:
                    row = BenchRow(mech, n, d, p)
                    if mech == "cca" and cca_bytes_needed(n, p) > memory_budget_bytes:
                        row.status = SKIPPED
                    else:
                        try:
                            row.median_ns, row.min_ns, row.peak_alloc_elems = _measure(
                                mech, p, n, d, reps, seed, min_rep_ns, evict)
                        except MemoryError:
                            row.status = SKIPPED
                    report.rows.append(row)
                    if log:
                        log(row)
    return report

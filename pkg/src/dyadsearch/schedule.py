"""Greedy LPT assignment of per-partition index builds to machines."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import DataError


@dataclass(frozen=True)
class BuildSchedule:
    machines: int
    assignment: tuple[int, ...]    # job index -> machine index
    loads: tuple[float, ...]

    @property
    def makespan(self) -> float:
        return max(self.loads)


def schedule_lpt(job_costs: Sequence[float], m: int) -> BuildSchedule:
    """Longest job first onto the least-loaded machine.

    Equal costs keep job order; equal loads go to the lower machine index.
    """
    if m < 1:
        raise DataError("need at least one machine")
    if len(job_costs) == 0:
        raise DataError("no jobs to schedule")
    if any(c <= 0 for c in job_costs):
        raise DataError("job costs must be positive")
    order = sorted(range(len(job_costs)), key=lambda j: (-job_costs[j], j))
    heap = [(0.0, i) for i in range(m)]
    assignment = [0] * len(job_costs)
    loads = [0.0] * m
    for j in order:
        load, i = heapq.heappop(heap)
        assignment[j] = i
        loads[i] = load + job_costs[j]
        heapq.heappush(heap, (loads[i], i))
    return BuildSchedule(m, tuple(assignment), tuple(loads))


def simulate_build(build_times: Sequence[float], machine_counts: Sequence[int]) -> list[tuple[int, float]]:
    """Makespan of the LPT schedule for each machine count.

    Zero-cost jobs (empty partitions) are dropped; they cannot change a
    makespan.
    """
    jobs = [float(t) for t in build_times if t > 0]
    if not jobs:
        return [(int(m), 0.0) for m in machine_counts]
    return [(int(m), schedule_lpt(jobs, int(m)).makespan) for m in machine_counts]


def write_schedule_tsv(path: str | Path, rows: list[tuple[int, float]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("machines\tmakespan_seconds\n")
        for m, t in rows:
            fh.write(f"{m}\t{t:.6f}\n")

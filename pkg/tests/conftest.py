"""Shared small graph builders."""

import pytest

from dyadsearch.graph import InteractionRecord, build_graph


def biclique_records(blocks, q_per=2, d_per=2, cross=()):
    """Disjoint complete bipartite blocks plus optional unit cross edges.

    ``cross`` holds (block_a, block_b) pairs joining query 0 of block a to
    doc 0 of block b.
    """
    recs = []
    for b in range(blocks):
        for i in range(q_per):
            for j in range(d_per):
                recs.append(InteractionRecord(f"q{b}_{i}", f"d{b}_{j}", 1))
    for a, b in cross:
        recs.append(InteractionRecord(f"q{a}_0", f"d{b}_0", 1))
    return recs


def random_records(rng, nq, nd, n_edges, max_w=3):
    recs = []
    for _ in range(n_edges):
        recs.append(InteractionRecord(f"q{rng.integers(nq)}", f"d{rng.integers(nd)}", int(rng.integers(1, max_w + 1))))
    return recs


@pytest.fixture
def two_blocks_one_cross():
    return build_graph(biclique_records(2, cross=[(0, 1)]))


# acceptance verdict lines, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

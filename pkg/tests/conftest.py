"""Shared fixtures and the acceptance-gate reporter.

Gate results are collected by test_acceptance.py through record_gate() and
printed as one line per gate in the terminal summary, pass or fail, so a
full run always ends with the scoreboard.
"""

import numpy as np
import pytest

from seqnp.corpus import Catalog, SynthConfig, build_sequences, synth_generate

GATE_LINES: list[str] = []


def record_gate(number: int, name: str, ok: bool, detail: str) -> bool:
    status = "PASS" if ok else "FAIL"
    GATE_LINES.append(f"[gate {number}] {status}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not GATE_LINES:
        return
    terminalreporter.section("acceptance gates")
    for line in sorted(GATE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture()
def rng():
    return np.random.default_rng(7)


def small_corpus(users=24, items=15, seq_len=12, seed=5):
    """Quick synthetic corpus for trainer and CLI tests."""
    scfg = SynthConfig(users=users, items=items, genres=3, seq_len=seq_len,
                       p_stay=0.7)
    catalog = Catalog()
    seqs = build_sequences(synth_generate(scfg, np.random.default_rng(seed)),
                           catalog, cap=seq_len)
    return catalog, seqs

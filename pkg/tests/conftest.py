import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One [PASS]/[FAIL] line per release-gate check, with wall time."""
    rows = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", ""):
                continue
            name = rep.nodeid.split("::")[-1]
            prev = rows.get(name)
            # a test that failed in setup has no call report; keep the worst outcome
            if prev is None or (prev[0] == "passed" and key != "passed"):
                rows[name] = (key, rep.duration)
            elif prev[0] != "passed":
                rows[name] = (prev[0], prev[1] + rep.duration)
    if not rows:
        return
    terminalreporter.section("release gate")
    for name in sorted(rows):
        outcome, duration = rows[name]
        flag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{flag}] {name} ({duration:.1f}s)")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def fresh_rng():
    return np.random.default_rng(99)


@pytest.fixture(scope="session")
def speech_pair():
    """Two fixed synthetic utterances, 1 s each."""
    from c2tse.synth import speechlike_utterance

    a = speechlike_utterance(np.random.default_rng(7), duration_s=1.0)
    b = speechlike_utterance(np.random.default_rng(8), duration_s=1.0)
    return a, b

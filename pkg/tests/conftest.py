import numpy as np
import pytest
import torch

from adaptseg.harness import RunConfig, SynthSpec, synthesize_episode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cfg():
    return RunConfig.toy()


@pytest.fixture(scope="session")
def episode():
    return synthesize_episode(11, SynthSpec())


def rand_volume(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """Returns ``report(number, ok, detail)``; lines are echoed live and in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

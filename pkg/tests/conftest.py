import numpy as np
import pytest

from comlab.models import NetworkConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(n_s=2, n_c=1, n_f=0, width=4, rank=2, depth=1):
    return NetworkConfig(n_s=n_s, n_c=n_c, n_f=n_f, width=width, depth_hidden=depth, rank=rank)


def tiny_twin(seed=0, **kw):
    cfg = tiny_config(**kw)
    return init_params(cfg, "meta-comet", seed), cfg


def tiny_comet(seed=0, **kw):
    cfg = tiny_config(**kw)
    return init_params(cfg, "comet", seed), cfg


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary and return the flag."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(label, ok, detail, gating=True):
        status = ("PASS" if ok else "FAIL") if gating else "ADVISORY"
        line = f"{status} {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from affinegs.dynamics import DynamicsModel, ModelConfig

TINY = dict(K=2, code_dim=3, pos_freqs=2, time_freqs=2, encoder_hidden=(5,), coef_hidden=(4,),
            accel_hidden=(4,), adf_hidden=(5,), velocity_hidden=(5,))


def tiny_config(**kw):
    return ModelConfig(**{**TINY, **kw})


def randomize(model, seed=0, scale=0.4):
    """Overwrite every parameter (including zero-initialised last layers) with noise."""
    rng = np.random.default_rng(seed)
    for name in list(model.params.keys()):
        model.params[name] = scale * rng.normal(size=model.params[name].shape)
    return model


@pytest.fixture
def tiny_model():
    return randomize(DynamicsModel(tiny_config(), seed=1))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; echoed live and in the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(num, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {detail}"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)

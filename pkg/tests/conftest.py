import pytest
from hypothesis import HealthCheck, settings

from director.model import ModelConfig, init_params
from helpers import randomize

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=8, embed_dim=16, n_layers=2, n_heads=2, max_seq_len=16, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return randomize(init_params(tiny_config), seed=1)


# acceptance criteria report: tests append (number, title, passed, detail)
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d} {title}: {detail}")

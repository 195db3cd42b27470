import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from entailrl.mdp import MdpLimits
from entailrl.policy import Architecture, PolicyParams, ValueParams
from entailrl.synthtask import CorpusConfig, FactWorld, generate_corpus

# the acceptance suite re-runs property tests from fresh class instances
settings.register_profile("entailrl", suppress_health_check=[HealthCheck.differing_executors])
settings.load_profile("entailrl")


@pytest.fixture(scope="session")
def world():
    return FactWorld()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusConfig(n_train=300, n_val=60, n_test=60, seed=7))


@pytest.fixture
def tiny_arch():
    return Architecture(vocab_size=7, embed_dim=3, window=2, hidden_size=5)


def random_policy(arch, seed, scale=1.0):
    """Parameters well away from zero so gradient checks exercise every path."""
    rng = np.random.default_rng(seed)
    p = PolicyParams.init(arch, rng)
    return p.unravel(rng.normal(0, scale, p.size))


def random_value(arch, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    v = ValueParams.init(arch, rng)
    return v.unravel(rng.normal(0, scale, v.size))


def random_state(rng, vocab_size, eos_id=0, max_ctx=6, max_prefix=4):
    content = [t for t in range(vocab_size) if t != eos_id]
    ctx = tuple(int(x) for x in rng.choice(content, size=rng.integers(1, max_ctx + 1)))
    prefix = tuple(int(x) for x in rng.choice(content, size=rng.integers(0, max_prefix + 1)))
    return ctx, prefix


LIMITS = MdpLimits(horizon=32, context_max=32)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

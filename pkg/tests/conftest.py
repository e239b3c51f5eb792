import pytest

from fedzkt.data import make_synthetic_dataset
from fedzkt.federation import FederationConfig
from fedzkt.zoo import GeneratorSpec

SHAPE = (1, 8, 8)
TINY_GEN = GeneratorSpec(SHAPE, latent_dim=8, hidden_channels=(4, 2))


@pytest.fixture(scope="session")
def toy_data():
    train = make_synthetic_dataset(4, 40, SHAPE, seed=0, noise=0.3)
    test = make_synthetic_dataset(4, 20, SHAPE, seed=1, noise=0.3)
    return train, test


def tiny_cfg(**kw) -> FederationConfig:
    base = dict(
        rounds=1, local_epochs=1, distill_iterations=3, num_devices=2, device_batch_size=32,
        server_batch_size=16, lr_device=0.05, seed=0,
    )
    base.update(kw)
    return FederationConfig(**base)


def assert_metrics_equal(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        dx, dy = dict(vars(x)), dict(vars(y))
        dx.pop("seconds"), dy.pop("seconds")
        assert repr(dx) == repr(dy)


# acceptance report -----------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``record(criterion, passed, detail)`` stores one line for the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(criterion: int, passed: bool, detail: str) -> None:
        results[criterion] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

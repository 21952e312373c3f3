import numpy as np
import pytest

from wsiscreen.dataset import SyntheticSpec, generate_synthetic, split_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A quick, clearly separable dataset shared by the module tests."""
    root = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec(
        n_bags=40,
        instances_per_bag=(10, 16),
        dim=8,
        positive_bag_fraction=0.5,
        planted_per_positive=(2, 4),
        separation=4.0,
        noise_sigma=1.0,
        seed=3,
    )
    manifest = split_dataset(generate_synthetic(spec, root), 0.7, seed=3)
    manifest.save(root / "manifest.csv")
    return root, manifest


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str):
        store[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(store[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n])

import pytest

from msam import harness


@pytest.fixture(scope="session")
def preset_runs():
    """Memoized preset training runs, shared by the acceptance tests.

    Several criteria look at the same (preset, optimizer, seed) runs from
    different angles; caching keeps the suite at one training run per triple.
    """
    cache = {}

    def get(name: str, kind: str, seed: int):
        key = (name, kind, seed)
        if key not in cache:
            raw = harness.preset(name, seed=seed, optimizer={"kind": kind})
            cache[key] = harness.run(harness.resolve_config(raw))
        return cache[key]

    return get

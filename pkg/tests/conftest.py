import numpy as np
import pytest

from hypo_ood.data import preset
from hypo_ood.train import TrainConfig, train_run


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def small_data():
    return preset("default", seed=3, n_per_class_per_env=40)


@pytest.fixture(scope="session")
def small_runs(small_data):
    """Short HYPO and ERM runs shared by several test modules."""
    out = {}
    for method in ("hypo", "erm"):
        cfg = TrainConfig(method=method, epochs=15, seed=5, hidden_dims=(16,), embed_dim=8)
        out[method] = train_run(cfg, small_data)
    return out


DESK_SEEDS = range(5)


@pytest.fixture(scope="session")
def desk_runs():
    """Default-preset HYPO and ERM runs with default settings, 5 seeds."""
    import time

    from hypo_ood.train import init_state

    start = time.perf_counter()
    runs = []
    for seed in DESK_SEEDS:
        ds = preset("default", seed=seed)
        entry = {"seed": seed, "data": ds}
        for method in ("hypo", "erm"):
            cfg = TrainConfig(method=method, seed=seed)
            entry[method] = train_run(cfg, ds)
            entry[method + "_init"] = init_state(cfg, ds.d_in, ds.n_classes)
        runs.append(entry)
    return {"runs": runs, "train_seconds": time.perf_counter() - start}


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])

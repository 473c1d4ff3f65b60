import numpy as np
import pytest

from aoi_coopt import errmodel
from aoi_coopt.core import SourceConfig, TransmissionModel

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance(request):
    """Record a pass/fail line for an acceptance criterion: ``acceptance(ok, detail)``."""

    def record(ok: bool, detail: str) -> bool:
        name = request.node.name
        _ACCEPTANCE[name] = (bool(ok), detail)
        print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


def linear_config(slope=1.0, T=1, B=1, delta_bound=12):
    table = errmodel.synthetic_table("linear", B, delta_bound, slope)
    return SourceConfig(table, TransmissionModel.constant(T, B))


def custom_config(values, T=1):
    table = errmodel.InferenceErrorTable(np.asarray(values, dtype=float))
    return SourceConfig(table, TransmissionModel.constant(T, table.B))


# err = 5, 1, 10, 10, ... for delta = 1, 2, 3, ...; delta = 0 row is 5 as well
NON_MONOTONE = [[5.0], [5.0], [1.0]] + [[10.0]] * 9


@pytest.fixture(scope="session")
def jakes10():
    return errmodel.jakes_error_table(errmodel.JakesParams.from_velocity(15.0, 2e9), 10, 50)


def random_small_config(rng: np.random.Generator, B_max=2, delta_bound=8, deterministic=True):
    B = int(rng.integers(1, B_max + 1))
    if deterministic:
        trans = TransmissionModel.det(float(rng.choice([0.5, 1.0, 1.5, 2.0, 3.0])), B)
    else:
        dists = []
        for _ in range(B):
            sup = np.sort(rng.choice(np.arange(1, 4), size=int(rng.integers(1, 4)), replace=False))
            dists.append((sup, rng.dirichlet(np.ones(sup.size))))
        trans = TransmissionModel(dists)
    kind = int(rng.integers(3))
    shape = (delta_bound + 1, B)
    if kind == 0:
        v = rng.uniform(0, 1, shape)
    elif kind == 1:
        v = np.sort(rng.uniform(0, 1, shape), axis=0)
    else:
        v = rng.integers(0, 5, shape).astype(float)
    return SourceConfig(errmodel.InferenceErrorTable(v), trans)

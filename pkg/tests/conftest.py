import numpy as np
import pytest

from igmrf2d.gmrf import GridSpec
from igmrf2d.model import Dataset, HierarchyMap


def make_dataset(rows, T=5, hierarchy=None, n_cov=0, seed=0):
    """rows: (country, year) pairs; one study per row, unit sampling variance."""
    rng = np.random.default_rng(seed)
    if hierarchy is None:
        names = sorted({c for c, _ in rows})
        hierarchy = HierarchyMap.from_rows([(c, "R1", "S1") for c in names])
    N = len(rows)
    y = np.column_stack([80 + rng.normal(size=N), 125 + rng.normal(size=N),
                         10000 + rng.normal(size=N)])
    return Dataset(
        study_id=np.array([f"s{i}" for i in range(N)], dtype=object),
        country=np.array([hierarchy.country_index(c) for c, _ in rows], dtype=int),
        year=np.array([t for _, t in rows], dtype=int),
        age=np.full(N, 50.0),
        sex=np.array(["female"] * N, dtype=object),
        y=y.reshape(N, 3),
        sd=np.ones((N, 3)),
        n=np.ones(N, dtype=int),
        X=rng.normal(size=(N, n_cov)),
        hierarchy=hierarchy,
        grid=GridSpec(T),
        covariate_names=tuple(f"cov_{k}" for k in range(n_cov)),
    )


@pytest.fixture
def tiny_dataset():
    return make_dataset([("A", 2), ("A", 3), ("A", 4)])


# one line per acceptance criterion, printed after the test session
# (name, status, detail) with status PASS, FAIL or INFO
ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {name}: {detail}")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drgt.dataset import DtiMatrix, ExpressionMatrix, FingerprintMatrix, LabeledResponse, ProcessedDataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_dataset(n=4, m=3, l=5, seed=0, task="classification", full=True, bits=32):
    """Random ProcessedDataset small enough for finite-difference checks."""
    rng = np.random.default_rng(seed)
    drugs = [f"D{i}" for i in range(n)]
    cells = [f"C{j}" for j in range(m)]
    genes = [f"G{k}" for k in range(l)]
    pairs = [(i, j) for i in range(n) for j in range(m) if full or rng.random() < 0.8]
    if task == "classification":
        values = rng.integers(0, 2, len(pairs)).astype(float)
    else:
        values = rng.uniform(2, 9, len(pairs))
    labels = LabeledResponse(drugs, cells, pairs, values, task)
    expr = ExpressionMatrix(cells, genes, rng.normal(size=(m, l)))
    dti = DtiMatrix(drugs, genes, rng.random((n, l)) < 0.3)
    fps = FingerprintMatrix(drugs, (rng.random((n, bits)) < 0.4).astype(float))
    return ProcessedDataset(labels, expr, dti, fps)


@pytest.fixture
def tiny():
    return tiny_dataset()


CRITERIA: list[str] = []


class Criterion:
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:>2} {status}: {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        if exc_type is not None and exc is not None:
            line += f" ({exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        CRITERIA.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

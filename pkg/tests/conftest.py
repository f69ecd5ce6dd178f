import numpy as np
import pytest
from hypothesis import settings

from utopia import _accel
from utopia.tabular import Dataset, FeatureSpec, Schema

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def rel_err(a, b):
    """Norm-wise relative error between two tensors."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_schema(rng, d_num=None, d_cat=None, num_classes=None):
    d_num = int(rng.integers(1, 5)) if d_num is None else d_num
    d_cat = int(rng.integers(0, 3)) if d_cat is None else d_cat
    feats = [FeatureSpec.numeric(f"x{k}", -3.0, 3.0) for k in range(d_num)]
    feats += [FeatureSpec.categorical(f"c{k}", [f"t{t}" for t in range(int(rng.integers(2, 5)))])
              for k in range(d_cat)]
    return Schema(tuple(feats), int(rng.integers(2, 4)) if num_classes is None else num_classes)


def random_dataset(rng, schema, n):
    x = rng.uniform(-3.0, 3.0, (n, schema.d_num))
    c = np.stack([rng.integers(0, t, n) for t in schema.token_counts], 1) if schema.d_cat else np.zeros((n, 0))
    return Dataset(schema, x, c, rng.integers(0, schema.num_classes, n)).validate()


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def accel_mode(request, monkeypatch):
    if request.param and not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_accel, "USE_NUMBA", request.param)
    return request.param


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from utopia.tabular import (Dataset, FeatureSpec, InvariantError, ParseError, Perturbation,
                            Schema, apply_perturbation, difference, fit_standardizer, load_csv,
                            load_schema, mixed_norm, save_schema, split, write_csv)


def small_schema(lo=-5.0, hi=5.0):
    return Schema((FeatureSpec.numeric("a", lo, hi), FeatureSpec.numeric("b", lo, hi),
                   FeatureSpec.categorical("color", ["red", "green"])), 2)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_feature_spec_invariants():
    with pytest.raises(InvariantError):
        FeatureSpec.numeric("x", 1.0, 1.0)
    with pytest.raises(InvariantError):
        FeatureSpec.categorical("c", [])
    with pytest.raises(InvariantError):
        FeatureSpec.categorical("c", ["a", "a"])


def test_schema_invariants():
    with pytest.raises(InvariantError):
        Schema((FeatureSpec.numeric("x"), FeatureSpec.numeric("x")), 2)
    with pytest.raises(InvariantError):
        Schema((FeatureSpec.categorical("c", ["a"]),), 2)
    with pytest.raises(InvariantError):
        Schema((FeatureSpec.numeric("x"),), 1)


def test_load_csv_valid(tmp_path):
    f = write(tmp_path / "d.csv", "a,b,color,label\n0.5,1,red,0\n-1,2,green,1\n3,0,red,1\n")
    d = load_csv(f, small_schema())
    assert d.n_rows == 3
    assert d.categorical[:, 0].tolist() == [0, 1, 0]
    assert d.labels.tolist() == [0, 1, 1]
    assert d.numeric[1].tolist() == [-1.0, 2.0]


def test_load_csv_unknown_token_names_row(tmp_path):
    f = write(tmp_path / "d.csv", "a,b,color,label\n0.5,1,red,0\n-1,2,blue,1\n")
    with pytest.raises(ParseError, match=r"row 3.*color.*blue"):
        load_csv(f, small_schema())


def test_load_csv_out_of_range(tmp_path):
    f = write(tmp_path / "d.csv", "a,b,color,label\n9.9,1,red,0\n")
    with pytest.raises(ParseError, match=r"row 2.*'a'"):
        load_csv(f, small_schema(hi=5.0))


def test_load_csv_missing_column_and_malformed_row(tmp_path):
    with pytest.raises(ParseError, match="missing column"):
        load_csv(write(tmp_path / "m.csv", "a,color,label\n1,red,0\n"), small_schema())
    with pytest.raises(ParseError, match="row 2"):
        load_csv(write(tmp_path / "r.csv", "a,b,color,label\n1,2,red\n"), small_schema())
    with pytest.raises(ParseError, match="not a number"):
        load_csv(write(tmp_path / "n.csv", "a,b,color,label\nx,2,red,0\n"), small_schema())


def test_missing_bounds_default_to_observed_range(tmp_path):
    schema = Schema((FeatureSpec.numeric("a"), FeatureSpec.numeric("b", 0, 10)), 2)
    d = load_csv(write(tmp_path / "d.csv", "a,b,label\n-2,1,0\n7,2,1\n"), schema)
    f = d.schema.numeric_features
    assert (f[0].numeric_min, f[0].numeric_max) == (-2.0, 7.0)
    assert (f[1].numeric_min, f[1].numeric_max) == (0.0, 10.0)


def test_schema_json_round_trip(tmp_path):
    s = small_schema()
    save_schema(s, tmp_path / "s.json")
    raw = json.loads((tmp_path / "s.json").read_text())
    assert {e["kind"] for e in raw["features"]} == {"numeric", "categorical"}
    assert set(raw) == {"num_classes", "features"}
    assert load_schema(tmp_path / "s.json") == s


def test_fit_standardizer_population_convention():
    s = Schema((FeatureSpec.numeric("a", -10, 10), FeatureSpec.numeric("b", -10, 10)), 2)
    d = Dataset(s, np.array([[0.0, 5.0], [2.0, 5.0]]), np.zeros((2, 0)), [0, 1])
    st_ = fit_standardizer(d)
    assert st_.mean.tolist() == [1.0, 5.0]
    assert st_.std.tolist() == [1.0, 1e-8]
    again = fit_standardizer(d)
    assert np.array_equal(again.mean, st_.mean) and np.array_equal(again.std, st_.std)
    with pytest.raises(ValueError):
        fit_standardizer(d.take([0]))


def dataset(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(small_schema(), rng.uniform(-4, 4, (n, 2)), rng.integers(0, 2, (n, 1)),
                   np.arange(n) % 2).validate()


def test_zero_perturbation_is_identity():
    d = dataset()
    out = apply_perturbation(d, Perturbation.zeros(d.n_rows, 2), fit_standardizer(d))
    assert out.equals(d)


def test_perturbation_clamps_to_domain():
    d = dataset()
    s = fit_standardizer(d)
    delta = np.zeros((d.n_rows, 2))
    delta[0, 0] = 100.0
    out = apply_perturbation(d, Perturbation(delta), s)
    assert out.numeric[0, 0] == 5.0
    assert np.array_equal(out.numeric[1:], d.numeric[1:])


def test_substitution_budget_and_range():
    d = dataset()
    s = fit_standardizer(d)
    subs = [[(0, 1 - int(d.categorical[r, 0]))] for r in range(d.n_rows)]
    out = apply_perturbation(d, Perturbation(np.zeros((d.n_rows, 2)), subs), s)
    assert np.all((out.categorical != d.categorical).sum(axis=1) <= 1)
    with pytest.raises(ValueError):
        apply_perturbation(d, Perturbation(np.zeros((d.n_rows, 2)), [[(0, 2)]] + [[]] * 5), s)


def test_mixed_norm_examples():
    assert mixed_norm(Perturbation.zeros(3, 2)) == (0.0, 0)
    delta = np.zeros((3, 2))
    delta[1, 1] = -0.03
    assert mixed_norm(Perturbation(delta)) == (0.03, 0)
    p = Perturbation(np.zeros((2, 2)), [[(0, 1), (1, 0)], []])
    assert mixed_norm(p)[1] == 2


def test_split_sizes_and_determinism():
    s = Schema((FeatureSpec.numeric("a", 0, 100),), 2)
    d = Dataset(s, np.arange(100.0)[:, None], np.zeros((100, 0)), np.arange(100) % 2)
    tr, va, te = split(d, (0.8, 0.1, 0.1), seed=3)
    assert (tr.n_rows, va.n_rows, te.n_rows) == (80, 10, 10)
    used = np.concatenate([tr.numeric[:, 0], va.numeric[:, 0], te.numeric[:, 0]])
    assert sorted(used.tolist()) == list(range(100))
    for part in (tr, va, te):
        assert np.bincount(part.labels).tolist() == [part.n_rows // 2] * 2
    again = split(d, (0.8, 0.1, 0.1), seed=3)
    assert all(a.equals(b) for a, b in zip((tr, va, te), again))


def test_split_rejects_tiny_class_and_bad_fractions():
    s = Schema((FeatureSpec.numeric("a", 0, 100),), 2)
    labels = np.array([0] * 9 + [1])
    d = Dataset(s, np.arange(10.0)[:, None], np.zeros((10, 0)), labels)
    with pytest.raises(ValueError, match="class 1"):
        split(d, (0.8, 0.1, 0.1))
    with pytest.raises(ValueError):
        split(d, (0.8, 0.1, 0.2))


# --- properties -------------------------------------------------------------

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite, st.sampled_from(["red", "green"]), st.integers(0, 1)),
                min_size=1, max_size=20))
def test_csv_round_trip(tmp_path_factory, rows):
    tmp = tmp_path_factory.mktemp("rt")
    text = "a,b,color,label\n" + "".join(f"{a!r},{b!r},{c},{y}\n" for a, b, c, y in rows)
    schema = Schema((FeatureSpec.numeric("a"), FeatureSpec.numeric("b"),
                     FeatureSpec.categorical("color", ["red", "green"])), 2)
    d = load_csv(write(tmp / "in.csv", text), schema)
    write_csv(d, tmp / "out.csv")
    d2 = load_csv(tmp / "out.csv", d.schema)
    np.testing.assert_allclose(d2.numeric, d.numeric, rtol=1e-12, atol=0)
    assert np.array_equal(d2.categorical, d.categorical)
    assert np.array_equal(d2.labels, d.labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0), st.integers(0, 2))
def test_apply_never_breaks_invariants(seed, eps, budget):
    rng = np.random.default_rng(seed)
    d = dataset(8, seed)
    s = fit_standardizer(d)
    delta = rng.uniform(-eps, eps, (8, 2))
    subs = [[(0, int(rng.integers(0, 2)))] if budget and rng.random() < 0.5 else [] for _ in range(8)]
    out = apply_perturbation(d, Perturbation(delta, subs), s)
    out.validate()
    assert np.array_equal(out.labels, d.labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_mixed_norm_of_effective_difference(seed):
    rng = np.random.default_rng(seed)
    d = dataset(8, seed)
    s = fit_standardizer(d)
    # small deltas far from the bounds: no clamping occurs
    d = d.replace(numeric=np.clip(d.numeric, -3, 3))
    delta = rng.uniform(-0.03, 0.03, (8, 2))
    subs = [[(0, 1 - int(d.categorical[r, 0]))] if rng.random() < 0.5 else [] for r in range(8)]
    p = Perturbation(delta, subs)
    out = apply_perturbation(d, p, s)
    linf, ham = mixed_norm(difference(d, out, s))
    assert ham == mixed_norm(p)[1]
    assert linf == pytest.approx(mixed_norm(p)[0], rel=1e-9)

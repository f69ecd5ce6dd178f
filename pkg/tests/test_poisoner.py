import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dataset, random_schema, rel_err
from utopia.decoupler import MaskPair
from utopia.models import TrainConfig, encode, init_model, one_hot, per_row_loss
from utopia.poisoner import (FeasibilityError, PoisonConfig, categorical_substitute,
                             craft_unlearnable, domain_box, dse_gradient, dse_objective,
                             em_baseline, feasibility_report, pgd_step, protect, spectral_ratio)
from utopia.tabular import Perturbation, fit_standardizer, mixed_norm, write_csv


def setup(seed=0, d_num=4, d_cat=1, n=10, hidden=(8,)):
    rng = np.random.default_rng(seed)
    schema = random_schema(rng, d_num, d_cat, 2)
    data = random_dataset(rng, schema, n)
    model = init_model(schema, hidden, 3, seed=seed, scaler=fit_standardizer(data))
    return model, data, rng


def masks(phi, psi):
    return MaskPair(np.array(phi, bool), np.array(psi, bool))


def test_config_validation():
    for bad in ({"eps_num": -1}, {"iterations": 0}, {"step_size": 0.0}, {"amplification": -1},
                {"momentum": -0.5}, {"eps_cat": -1}):
        with pytest.raises(ValueError):
            PoisonConfig(**bad)
    assert PoisonConfig().eta == pytest.approx(0.003)
    c = PoisonConfig()
    assert (c.eps_num, c.amplification, c.momentum, c.iterations) == (0.03, 5.0, 1.0, 20)


def test_dse_gradient_trivial_cases():
    model, data, _ = setup()
    x, sels = encode(model, data)
    m = masks([1, 0, 1, 0], [0, 1, 0, 0])
    from utopia.models import input_gradient
    full = input_gradient(model, x, sels, data.labels).numeric
    g, _ = dse_gradient(model, x, sels, data.labels, m, 0.0)
    assert np.array_equal(g, full * m.phi)
    g, _ = dse_gradient(model, x, sels, data.labels, MaskPair.empty(4), 5.0)
    assert not g.any()


@pytest.mark.parametrize("seed", range(4))
def test_dse_gradient_matches_objective_fd(seed):
    model, data, _ = setup(seed)
    x, sels = encode(model, data)
    m = masks([1, 0, 0, 1], [0, 1, 1, 0])
    g, _ = dse_gradient(model, x, sels, data.labels, m, 5.0)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd[idx] = (dse_objective(model, x, sels, data.labels, m, 5.0, e)
                   - dse_objective(model, x, sels, data.labels, m, 5.0, -e)) / (2 * h)
    assert rel_err(g, fd) <= 1e-4


def test_ablation_switches():
    model, data, _ = setup(1)
    x, sels = encode(model, data)
    m = masks([1, 0, 0, 0], [0, 1, 0, 0])
    g, _ = dse_gradient(model, x, sels, data.labels, m, 5.0, suppression=False)
    assert not g[:, 0].any() and g[:, 1].any()
    g, _ = dse_gradient(model, x, sels, data.labels, m, 5.0, injection=False)
    assert g[:, 0].any() and not g[:, 1].any()


def test_pgd_step_examples():
    cfg = PoisonConfig()
    z = np.zeros((2, 2))
    lo, hi = np.full((2, 2), -1.0), np.full((2, 2), 1.0)
    d, m = pgd_step(z, z, cfg, lo, hi, z)
    assert not d.any() and not m.any()
    d, _ = pgd_step(np.full((2, 2), 0.03), np.ones((2, 2)), cfg, lo, hi, z)
    assert np.all(d == 0.03)


def test_domain_projection_lands_on_the_bound():
    model, data, _ = setup(2, d_cat=0)
    raw = data.numeric.copy()
    raw[0, 0] = data.schema.numeric_features[0].numeric_max
    data = data.replace(numeric=raw)
    lo, hi = domain_box(data.numeric, model.scaler, *data.schema.bounds)
    d, _ = pgd_step(np.zeros_like(raw), np.ones_like(raw), PoisonConfig(), lo, hi, np.zeros_like(raw))
    assert d[0, 0] == 0.0
    out = model.scaler.inverse(model.scaler.transform(raw) + d)
    assert out[0, 0] == pytest.approx(data.schema.numeric_features[0].numeric_max, abs=1e-12)


def test_categorical_substitute_examples():
    acc = np.array([[0.0, 0.5, 2.0, 1.0]])
    assert categorical_substitute(acc, [4], np.array([[0]]), 0) == [[]]
    assert categorical_substitute(acc, [4], np.array([[0]]), 1) == [[(0, 2)]]


@pytest.mark.parametrize("seed", range(6))
def test_substitution_maximises_actual_loss(seed):
    rng = np.random.default_rng(seed)
    schema = random_schema(rng, 2, 1, 2)
    T = schema.token_counts[0]
    model = init_model(schema, [], 3, seed=seed)
    # small embeddings keep logits near-linear in the selector
    model = model.with_parameters(model.parameters()[:-1] + [model.embeddings[0] * 1e-2])
    x = rng.normal(size=(1, 2))
    cur = np.array([[int(rng.integers(0, T))]])
    y = np.array([int(rng.integers(0, 2))])
    _, scores = dse_gradient(model, x, one_hot(cur, [T]), y, MaskPair.empty(2), 5.0)
    (sub,) = categorical_substitute(scores, [T], cur, 1)
    losses = [per_row_loss(model, x, one_hot(np.array([[t]]), [T]), y)[0] for t in range(T)]
    best = int(np.argmax(losses))
    if best == cur[0, 0]:
        assert sub == []
    else:
        assert sub == [(0, best)]


def test_single_step_closed_form():
    model, data, _ = setup(3, d_cat=0, n=30)
    cfg = PoisonConfig(iterations=1, step_size=0.06)
    full = masks([1, 1, 1, 1], [0, 0, 0, 0])
    _, p = craft_unlearnable(data, model, full, cfg)
    x, sels = encode(model, data)
    from utopia.models import input_gradient
    g = input_gradient(model, x, sels, data.labels).numeric
    lo, hi = domain_box(data.numeric, model.scaler, *data.schema.bounds)
    free = (lo < -0.03) & (hi > 0.03) & (g != 0)
    assert free.sum() > 100
    assert np.array_equal(p.numeric_delta[free], 0.03 * np.sign(g[free]))


def test_craft_preserves_labels_and_budget():
    model, data, _ = setup(4, d_cat=2, n=25)
    m = masks([1, 0, 1, 0], [0, 1, 0, 1])
    out, p = craft_unlearnable(data, model, m, PoisonConfig())
    out.validate()
    assert out.n_rows == data.n_rows and np.array_equal(out.labels, data.labels)
    linf, ham = mixed_norm(p)
    assert linf <= 0.03 and ham <= 1
    rep = feasibility_report(data, out, p, PoisonConfig())
    assert rep["within_budget"] and rep["labels_unchanged"]
    json.dumps(rep)


def test_monotone_steering_on_linear_model():
    rng = np.random.default_rng(5)
    schema = random_schema(rng, 4, 0, 2)
    data = random_dataset(rng, schema, 40)
    model = init_model(schema, [], seed=5, scaler=fit_standardizer(data))
    m = masks([1, 1, 0, 1], [0, 0, 1, 0])
    x, sels = encode(model, data)
    prev = -np.inf
    for t in range(1, 16):
        _, p = craft_unlearnable(data, model, m, PoisonConfig(iterations=t, amplification=0.0, eps_num=0.3))
        cur = per_row_loss(model, x + p.numeric_delta * m.phi, sels, data.labels).sum()
        assert cur >= prev - 1e-6
        prev = cur


def test_feasibility_asserted_every_iteration(monkeypatch):
    from utopia import poisoner
    model, data, _ = setup(6, d_cat=0)
    real = poisoner.pgd_step
    monkeypatch.setattr(poisoner, "pgd_step", lambda *a: (lambda d, mo: (d + 1.0, mo))(*real(*a)))
    with pytest.raises(FeasibilityError):
        craft_unlearnable(data, model, masks([1, 0, 0, 0], [0, 1, 0, 0]), PoisonConfig())


def test_batching_does_not_change_result():
    model, data, _ = setup(7, n=23)
    m = masks([1, 0, 0, 0], [0, 1, 0, 0])
    _, a = craft_unlearnable(data, model, m, PoisonConfig())
    _, b = craft_unlearnable(data, model, m, PoisonConfig(batch_size=5))
    assert np.array_equal(a.numeric_delta, b.numeric_delta) and a.cat_subs == b.cat_subs


def test_protect_is_byte_deterministic(tmp_path):
    _, data, _ = setup(8, n=60)
    tc = TrainConfig(epochs=3)
    for k in range(2):
        r = protect(data, PoisonConfig(), train_cfg=tc, surrogate_hidden=(8,))
        write_csv(r.protected, tmp_path / f"p{k}.csv")
    assert (tmp_path / "p0.csv").read_bytes() == (tmp_path / "p1.csv").read_bytes()


def test_protect_mask_modes():
    _, data, _ = setup(9, n=40)
    tc = TrainConfig(epochs=2)
    r = protect(data, PoisonConfig(iterations=2), tau=0.0, train_cfg=tc, masks="none", surrogate_hidden=())
    assert r.decoupling.masks.phi.all() and not r.decoupling.masks.psi.any()
    r = protect(data, PoisonConfig(iterations=2), tau=0.0, train_cfg=tc, masks="random", surrogate_hidden=())
    assert (r.decoupling.masks.phi | r.decoupling.masks.psi).all()
    with pytest.raises(ValueError):
        protect(data, PoisonConfig(iterations=1), train_cfg=tc, masks="bogus")


def test_em_zero_rounds_returns_clean():
    _, data, _ = setup(10)
    out, p = em_baseline(data, rounds=0)
    assert out.equals(data) and mixed_norm(p) == (0.0, 0)


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_em_feasibility(seed):
    _, data, _ = setup(seed, d_cat=2, n=15)
    cfg = PoisonConfig(iterations=3)
    out, p = em_baseline(data, cfg, TrainConfig(epochs=1), rounds=2, hidden_dims=(4,))
    out.validate()
    linf, ham = mixed_norm(p)
    assert linf <= cfg.eps_num and ham <= cfg.eps_cat
    assert np.array_equal(out.labels, data.labels)


def test_spectral_ratio_cases():
    m = masks([1, 0], [0, 1])
    rng = np.random.default_rng(0)
    delta = np.stack([rng.normal(0, 0.1, 50), rng.normal(0, 0.3, 50)], 1)
    assert spectral_ratio(Perturbation(delta), m) == pytest.approx(
        np.var(delta[:, 1]) / np.var(delta[:, 0]), rel=1e-9)
    delta[:, 0] = 0.0
    assert spectral_ratio(Perturbation(delta), m) == float("inf")
    assert np.isnan(spectral_ratio(Perturbation(np.zeros((5, 2))), m))

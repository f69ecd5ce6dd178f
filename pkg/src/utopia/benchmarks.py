"""Shipped datasets: a synthetic mixed-type benchmark and a small real survey table."""
from __future__ import annotations

from importlib import resources

import numpy as np

from .tabular import Dataset, FeatureSpec, Schema, load_csv, load_schema, split

P_TOKENS = np.array([0.4, 0.3, 0.2, 0.1])


def synthetic_schema(n_signals=4, n_noise=2, n_cat=1, n_tokens=4, bound=5.0) -> Schema:
    feats = []
    for k in range(n_signals):
        feats += [FeatureSpec.numeric(f"sig{k}_a", -bound, bound),
                  FeatureSpec.numeric(f"sig{k}_b", -bound, bound)]
    feats += [FeatureSpec.numeric(f"noise{k}", -bound, bound) for k in range(n_noise)]
    feats += [FeatureSpec.categorical(f"cat{k}", [f"t{t}" for t in range(n_tokens)]) for k in range(n_cat)]
    return Schema(tuple(feats), 2)


def _draw(n, rng, mu, n_signals, n_noise, n_cat, cat_strength, pair_noise):
    y = rng.integers(0, 2, n)
    s = 2 * y - 1
    cols = []
    for k in range(n_signals):
        # latent signal, class mean alternating in sign, observed twice
        z = rng.normal(0.0, 1.0, n) + mu * s * (1 if k % 2 == 0 else -1)
        cols.append(z + pair_noise * rng.normal(size=n))
        cols.append(z + pair_noise * rng.normal(size=n))
    for _ in range(n_noise):
        cols.append(rng.normal(size=n))
    p0 = (1 - cat_strength) * 0.25 + cat_strength * P_TOKENS
    p1 = p0[::-1]
    cats = []
    for _ in range(n_cat):
        t0 = rng.choice(4, size=n, p=p0)
        t1 = rng.choice(4, size=n, p=p1)
        cats.append(np.where(y == 1, t1, t0))
    cat = np.stack(cats, 1) if cats else np.zeros((n, 0), dtype=np.int64)
    return np.stack(cols, 1), cat, y


def synthetic_benchmark(n_train=3000, n_test=2000, seed=0, mu=0.55, cat_strength=0.8,
                        pair_noise=0.03, n_signals=4, n_noise=2, n_cat=1, bound=5.0):
    """Binary task with redundant numeric pairs and one class-skewed categorical.

    Each of ``n_signals`` latent Gaussians shifts by ``+-mu`` with the class
    and appears as two columns differing by small noise, so every pair is
    strongly correlated. Token frequencies follow ``[.4, .3, .2, .1]`` mixed
    with uniform at ``cat_strength`` for class 0 and the reverse for class 1.
    Returns ``(train, test)``; numerics are clipped into ``[-bound, bound]``.
    """
    schema = synthetic_schema(n_signals, n_noise, n_cat, 4, bound)
    rng = np.random.default_rng(seed)
    out = []
    for n in (n_train, n_test):
        x, c, y = _draw(n, rng, mu, n_signals, n_noise, n_cat, cat_strength, pair_noise)
        out.append(Dataset(schema, np.clip(x, -bound, bound), c, y).validate())
    return tuple(out)


def bayes_accuracy(data: Dataset, mu=0.55, cat_strength=0.8, pair_noise=0.03, n_signals=4) -> float:
    """Accuracy of the exact posterior classifier of :func:`synthetic_benchmark`
    (clipping ignored). Each latent pair is summarised by its mean, which is
    sufficient for that pair."""
    s = np.array([1 if k % 2 == 0 else -1 for k in range(n_signals)], dtype=float)
    x = data.numeric[:, :2 * n_signals].reshape(-1, n_signals, 2).mean(axis=2)
    var = 1.0 + pair_noise ** 2 / 2
    llr = (2 * mu * s * x / var).sum(axis=1)
    p0 = (1 - cat_strength) * 0.25 + cat_strength * P_TOKENS
    p1 = p0[::-1]
    for j in range(data.schema.d_cat):
        t = data.categorical[:, j]
        llr = llr + np.log(p1[t] / p0[t])
    return float(np.mean((llr > 0).astype(int) == data.labels))


def anes96_paths():
    root = resources.files("utopia") / "data"
    return root / "anes96.csv", root / "anes96.schema.json"


def anes96(seed=0, fractions=(0.7, 0.1, 0.2)):
    """1996 US election survey (944 rows, vote choice). Returns ``(train, test)``."""
    csv_path, schema_path = anes96_paths()
    with resources.as_file(csv_path) as c, resources.as_file(schema_path) as s:
        data = load_csv(c, load_schema(s))
    train, _, test = split(data, fractions, seed)
    return train, test

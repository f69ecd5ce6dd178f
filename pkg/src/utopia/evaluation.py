"""Victim training, defenses, and diagnostic emitters (saliency, loss
landscape, input-noise robustness)."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .models import (SurrogateModel, TrainConfig, accuracy, encode, init_model,
                     logits, per_row_loss, train)
from .tabular import Dataset, fit_standardizer

# ---------------------------------------------------------------------------
# defenses

DEFENSE_DEFAULTS = {
    "feature_masking": 0.1,      # per-cell replacement probability
    "feature_squeezing": 1,      # decimals kept in standardised units
    "gaussian_noise": 0.05,      # std in standardised units
    "label_smoothing": 0.1,
    "mixup": 1.0,                # Beta(alpha, alpha)
    "quantization": 16,          # levels over the column range
    "swap_noise": 0.1,           # per-cell swap probability
}
TRAINING_LEVEL = ("label_smoothing", "mixup")


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    strength: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_DEFAULTS:
            raise ValueError(f"unknown defense {self.kind!r}; choose from {sorted(DEFENSE_DEFAULTS)}")
        s = self.value
        k = self.kind
        ok = {
            "feature_masking": 0.0 <= s <= 1.0,
            "feature_squeezing": s >= 0 and float(s).is_integer(),
            "gaussian_noise": s >= 0.0,
            "label_smoothing": 0.0 <= s < 1.0,
            "mixup": s > 0.0,
            "quantization": s >= 2 and float(s).is_integer(),
            "swap_noise": 0.0 <= s <= 1.0,
        }[k]
        if not ok:
            raise ValueError(f"invalid strength {s} for defense {k!r}")

    @property
    def value(self) -> float:
        return DEFENSE_DEFAULTS[self.kind] if self.strength is None else self.strength

    @property
    def training_level(self) -> bool:
        return self.kind in TRAINING_LEVEL

    @property
    def label(self) -> str:
        return self.kind if self.strength is None else f"{self.kind}={self.strength:g}"


def _mode(col, n_tokens):
    return int(np.argmax(np.bincount(col, minlength=n_tokens)))


def _label_smoothing(eps):
    def hook(x, sels, t, rng):
        return x, sels, (1.0 - eps) * t + eps / t.shape[1]
    return hook


def _mixup(alpha):
    # one coefficient per batch; numerics and targets interpolate, tokens stay
    # discrete and come from whichever partner carries the larger weight
    def hook(x, sels, t, rng):
        lam = rng.beta(alpha, alpha)
        perm = rng.permutation(x.shape[0])
        mix = lambda a: lam * a + (1.0 - lam) * a[perm]
        sels = [s if lam >= 0.5 else s[perm] for s in sels]
        return mix(x), sels, mix(t)
    return hook


def apply_defense(data: Dataset, spec: DefenseSpec):
    """Data-level defenses return a new :class:`Dataset`; label smoothing and
    mixup return a trainer hook ``(x, selectors, targets, rng) -> same``."""
    s = spec.value
    if spec.kind == "label_smoothing":
        return _label_smoothing(float(s))
    if spec.kind == "mixup":
        return _mixup(float(s))
    rng = np.random.default_rng(spec.seed)
    lo, hi = data.schema.bounds
    x = data.numeric.copy()
    cat = data.categorical.copy()
    n = data.n_rows
    if spec.kind == "feature_masking":
        mask = rng.random(x.shape) < s
        x = np.where(mask, x.mean(axis=0), x)
        cmask = rng.random(cat.shape) < s
        modes = np.array([_mode(cat[:, j], t) for j, t in enumerate(data.schema.token_counts)], dtype=np.int64)
        cat = np.where(cmask, modes, cat)
    elif spec.kind == "feature_squeezing":
        st = fit_standardizer(data)
        x = st.inverse(np.round(st.transform(x), int(s)))
    elif spec.kind == "gaussian_noise":
        st = fit_standardizer(data)
        x = x + float(s) * st.std * rng.standard_normal(x.shape)
    elif spec.kind == "quantization":
        levels = int(s) - 1
        cmin, cmax = x.min(axis=0), x.max(axis=0)
        span = np.where(cmax > cmin, cmax - cmin, 1.0)
        q = np.round((x - cmin) / span * levels) / levels * span + cmin
        x = np.where(cmax > cmin, q, x)
    elif spec.kind == "swap_noise":
        mask = rng.random(x.shape) < s
        src = rng.integers(0, n, x.shape)
        x = np.where(mask, np.take_along_axis(x, src, axis=0), x)
        cmask = rng.random(cat.shape) < s
        csrc = rng.integers(0, n, cat.shape)
        cat = np.where(cmask, np.take_along_axis(cat, csrc, axis=0), cat)
    x = np.clip(x, lo, hi)
    return data.replace(numeric=x, categorical=cat).validate()


# ---------------------------------------------------------------------------
# victims


@dataclass(frozen=True)
class VictimSpec:
    name: str
    hidden: tuple = ()
    embed_width: int = 4


VICTIMS = {
    "logistic": VictimSpec("logistic", ()),
    "mlp16": VictimSpec("mlp16", (16, 16)),
    "mlp64": VictimSpec("mlp64", (64, 64)),
}
DEFAULT_VICTIMS = tuple(VICTIMS.values())


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # (victim, variant, defense, accuracy)
    metadata: dict = field(default_factory=dict)

    def accuracy(self, variant: str, defense: str = "none", victim: str | None = None) -> float:
        """Accuracy of one victim, or the mean over victims when ``victim`` is None."""
        vals = [a for v, var, d, a in self.rows
                if var == variant and d == defense and (victim is None or v == victim)]
        if not vals:
            raise KeyError(f"no rows for variant={variant!r} defense={defense!r} victim={victim!r}")
        return float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["victim", "variant", "defense", "accuracy"])
        for v, var, d, a in self.rows:
            w.writerow([v, var, d, repr(float(a))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _fit_and_score(job):
    victim, data, test, cfg, hooks = job
    model = init_model(data.schema, victim.hidden, victim.embed_width, seed=cfg.seed)
    model = train(model, data, cfg, hooks)
    return accuracy(model, test)


def train_victims(variants: Mapping[str, Dataset], test: Dataset,
                  victims: Sequence[VictimSpec] = DEFAULT_VICTIMS,
                  train_cfg: TrainConfig = TrainConfig(),
                  defenses: Sequence[DefenseSpec] = (),
                  defended: Sequence[str] | None = None,
                  threads: int = 1) -> EvalReport:
    """Train every victim on every variant (and on each defended copy of the
    variants named in ``defended``, default all but ``"clean"``) and score
    it on ``test``. Each victim standardises its own training data. Jobs are
    independent, so ``threads`` changes wall time only."""
    if defended is None:
        defended = [k for k in variants if k != "clean"]
    jobs, keys = [], []
    for name, data in variants.items():
        settings = [("none", data, ())]
        if name in defended:
            for spec in defenses:
                out = apply_defense(data, spec)
                if spec.training_level:
                    settings.append((spec.label, data, (out,)))
                else:
                    settings.append((spec.label, out, ()))
        for dname, dset, hooks in settings:
            for v in victims:
                jobs.append((v, dset, test, train_cfg, hooks))
                keys.append((v.name, name, dname))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            accs = list(ex.map(_fit_and_score, jobs))
    else:
        accs = [_fit_and_score(j) for j in jobs]
    rows = [k + (a,) for k, a in zip(keys, accs)]
    meta = {"train_config": train_cfg.__dict__, "victims": [v.name for v in victims],
            "defenses": [d.label for d in defenses]}
    return EvalReport(rows, meta)


# ---------------------------------------------------------------------------
# diagnostics


def saliency_report(model: SurrogateModel, data: Dataset) -> dict:
    """Mean |input gradient| per numeric feature and Top-K / Bottom-K
    ablation accuracy for K = 0..d_num. Removed features are set to the
    model's training mean (0 after standardisation)."""
    from .decoupler import influence_scores
    sal = influence_scores(model, data)
    xnum, sels = encode(model, data)
    d = model.d_num
    top = np.argsort(-sal, kind="stable")
    bottom = np.argsort(sal, kind="stable")

    def ablated(order, k):
        x = xnum.copy()
        x[:, order[:k]] = 0.0
        return float(np.mean(np.argmax(logits(model, x, sels), axis=1) == data.labels))

    return {
        "saliency": sal,
        "top_k": np.array([ablated(top, k) for k in range(d + 1)]),
        "bottom_k": np.array([ablated(bottom, k) for k in range(d + 1)]),
    }


def _mean_loss(model, xnum, sels, labels):
    return float(per_row_loss(model, xnum, sels, labels).mean())


def random_directions(model: SurrogateModel, seed: int = 0):
    """Two orthonormal directions in the flattened parameter space."""
    sizes = [p.size for p in model.parameters()]
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(sum(sizes))
    v = rng.standard_normal(sum(sizes))
    u /= np.linalg.norm(u)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    return u, v


def _unflatten(model, flat):
    out, k = [], 0
    for p in model.parameters():
        out.append(flat[k:k + p.size].reshape(p.shape))
        k += p.size
    return out


def loss_landscape(model: SurrogateModel, data: Dataset, radius: float, grid: int,
                   seed: int = 0, directions=None) -> np.ndarray:
    """``grid x grid`` mean losses at ``theta + a u + b v`` with offsets
    ``radius * (k - c) / c``, ``c = (grid - 1) / 2``; row index follows ``a``."""
    if grid < 3 or grid % 2 == 0:
        raise ValueError("grid must be odd and >= 3")
    u, v = directions if directions is not None else random_directions(model, seed)
    xnum, sels = encode(model, data)
    theta = np.concatenate([p.ravel() for p in model.parameters()])
    c = (grid - 1) / 2
    offs = radius * ((np.arange(grid) - c) / c)
    out = np.empty((grid, grid))
    for i, a in enumerate(offs):
        for j, b in enumerate(offs):
            m = model.with_parameters(_unflatten(model, theta + a * u + b * v))
            out[i, j] = _mean_loss(m, xnum, sels, data.labels)
    return out


def noise_robustness(model: SurrogateModel, data: Dataset, sigma_grid, draws: int = 32,
                     seed: int = 0) -> np.ndarray:
    """Mean loss under Gaussian noise on standardised numerics, averaged over
    ``draws`` draws. Every sigma reuses the same base draws, so the curve is
    smooth in sigma; sigma = 0 is the clean loss."""
    sig = np.asarray(sigma_grid, dtype=float)
    if np.any(sig < 0):
        raise ValueError("sigma_grid must be non-negative")
    xnum, sels = encode(model, data)
    clean = _mean_loss(model, xnum, sels, data.labels)
    out = np.empty(len(sig))
    for k, s in enumerate(sig):
        if s == 0.0:
            out[k] = clean
            continue
        rng = np.random.default_rng(seed)
        out[k] = np.mean([_mean_loss(model, xnum + s * rng.standard_normal(xnum.shape), sels, data.labels)
                          for _ in range(draws)])
    return out

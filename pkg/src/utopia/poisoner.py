"""Shortcut injection by masked, counter-directional PGD on a frozen surrogate,
and an error-minimising (min-min) baseline for comparison."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import kernels
from .decoupler import Decoupling, MaskPair, decouple, random_masks
from .errors import NumericalError
from .models import (SurrogateModel, Trainer, TrainConfig, encode, init_model,
                     input_gradient, per_row_loss, train)
from .tabular import (Dataset, Perturbation, ScalerStats, apply_perturbation,
                      fit_standardizer, mixed_norm)


class FeasibilityError(AssertionError):
    """An iterate left the feasible set; indicates a bug, never expected."""


@dataclass(frozen=True)
class PoisonConfig:
    eps_num: float = 0.03
    eps_cat: int = 1
    iterations: int = 20
    step_size: float | None = None      # None -> eps_num / 10
    amplification: float = 5.0
    momentum: float = 1.0
    seed: int = 0
    batch_size: int | None = None       # None -> all rows at once
    # ablation switches
    suppression: bool = True            # dominant-channel ascent + categorical ascent
    injection: bool = True              # recessive-channel descent

    def __post_init__(self):
        if not self.eps_num >= 0:
            raise ValueError("eps_num must be >= 0")
        if self.eps_cat < 0:
            raise ValueError("eps_cat must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not self.amplification >= 0:
            raise ValueError("amplification must be >= 0")
        if not self.momentum >= 0:
            raise ValueError("momentum must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def eta(self) -> float:
        return self.step_size if self.step_size is not None else self.eps_num / 10.0


def domain_box(raw: np.ndarray, scaler: ScalerStats, lo_raw, hi_raw):
    """Per-cell delta bounds (standardised units) that keep raw values in the domain."""
    return (lo_raw - raw) / scaler.std, (hi_raw - raw) / scaler.std


def dse_objective(model: SurrogateModel, xnum, sels, labels, masks: MaskPair, lam: float, h):
    """Scalar whose gradient in ``h`` at ``h = 0`` is the steering direction:
    ``L(x + phi*h) - lam * L(x + psi*h)`` summed over rows."""
    a = per_row_loss(model, xnum + masks.phi * h, sels, labels).sum()
    b = per_row_loss(model, xnum + masks.psi * h, sels, labels).sum()
    return float(a - lam * b)


def dse_gradient(model: SurrogateModel, xnum, sels, labels, masks: MaskPair, lam: float,
                 suppression: bool = True, injection: bool = True):
    """``phi*grad - lam*psi*grad`` per row, plus the raw token scores."""
    g = input_gradient(model, xnum, sels, labels)
    if not np.all(np.isfinite(g.numeric)):
        raise NumericalError("non-finite input gradient during crafting")
    w = np.zeros(model.d_num)
    if suppression:
        w[masks.phi] = 1.0
    if injection:
        w[masks.psi] = -lam
    return g.numeric * w, g.cat_matrix()


def pgd_step(delta, grad, cfg: PoisonConfig, lo, hi, momentum):
    """Momentum sign step then projection; returns ``(delta, momentum)``."""
    return kernels.pgd_update(delta, grad, momentum, cfg.momentum, cfg.eta, cfg.eps_num, lo, hi)


def categorical_substitute(acc: np.ndarray, token_counts, current: np.ndarray, eps_cat: int) -> list:
    """Greedy top-``eps_cat`` swaps per row from accumulated token scores."""
    offsets = np.concatenate([[0], np.cumsum(token_counts)]).astype(np.int64)
    if eps_cat == 0 or len(token_counts) == 0:
        return [[] for _ in range(current.shape[0])]
    subs = kernels.greedy_substitute(acc, offsets, current, eps_cat)
    return [[(int(j), int(t)) for j, t in row if j >= 0] for row in subs]


def _check_feasible(delta, eps, lo, hi, it):
    if np.any(np.abs(delta) > eps) or np.any(delta < lo) or np.any(delta > hi):
        raise FeasibilityError(f"iterate {it} left the feasible set")


def _batches(n, size):
    size = n if size is None else size
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def craft_unlearnable(data: Dataset, model: SurrogateModel, masks: MaskPair,
                      cfg: PoisonConfig = PoisonConfig()):
    """Run the steering PGD for every row against the frozen surrogate.

    Returns ``(protected, perturbation)``. Token scores are accumulated over
    all iterations under the ascent sign and committed once at the end.
    """
    xnum, sels = encode(model, data)
    lo_raw, hi_raw = data.schema.bounds
    lo, hi = domain_box(data.numeric, model.scaler, lo_raw, hi_raw)
    n = data.n_rows
    delta = np.zeros_like(xnum)
    acc = np.zeros((n, sum(model.token_counts)))
    cat_sign = 1.0 if cfg.suppression else 0.0
    for b in _batches(n, cfg.batch_size):
        d = np.zeros_like(xnum[b])
        mom = np.zeros_like(d)
        sb = [s[b] for s in sels]
        for it in range(cfg.iterations):
            grad, scores = dse_gradient(model, xnum[b] + d, sb, data.labels[b], masks,
                                        cfg.amplification, cfg.suppression, cfg.injection)
            d, mom = pgd_step(d, grad, cfg, lo[b], hi[b], mom)
            _check_feasible(d, cfg.eps_num, lo[b], hi[b], it)
            acc[b] += cat_sign * scores
        delta[b] = d
    subs = categorical_substitute(acc, model.token_counts, data.categorical, cfg.eps_cat if cfg.suppression else 0)
    p = Perturbation(delta, subs)
    return apply_perturbation(data, p, model.scaler), p


def em_baseline(data: Dataset, cfg: PoisonConfig = PoisonConfig(), train_cfg: TrainConfig = TrainConfig(),
                rounds: int = 10, hidden_dims=(16, 16), embed_width: int = 4):
    """Error-minimising noise by alternating minimisation.

    A surrogate initialised once trains one more epoch per round on the
    currently perturbed data, then takes ``cfg.iterations`` sign-descent steps
    on the loss with the shared projection. Token scores accumulate under the
    descent sign and are committed at the end. ``rounds = 0`` returns the
    data unchanged. Returns ``(protected, perturbation)``.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    scaler = fit_standardizer(data)
    n = data.n_rows
    if rounds == 0:
        p = Perturbation.zeros(n, data.schema.d_num)
        return apply_perturbation(data, p, scaler), p
    model = init_model(data.schema, hidden_dims, embed_width, seed=train_cfg.seed, scaler=scaler)
    xnum, sels = encode(model, data)
    lo_raw, hi_raw = data.schema.bounds
    lo, hi = domain_box(data.numeric, scaler, lo_raw, hi_raw)
    trainer = Trainer(model, replace(train_cfg, cosine_t=rounds))
    delta = np.zeros_like(xnum)
    acc = np.zeros((n, sum(model.token_counts)))
    step_cfg = replace(cfg, momentum=0.0)
    for r in range(rounds):
        trainer.run_epoch(xnum + delta, sels, data.labels)
        model = trainer.current()
        for it in range(cfg.iterations):
            g = input_gradient(model, xnum + delta, sels, data.labels)
            if not np.all(np.isfinite(g.numeric)):
                raise NumericalError("non-finite input gradient in the error-minimising baseline")
            delta, _ = pgd_step(delta, -g.numeric, step_cfg, lo, hi, np.zeros_like(delta))
            _check_feasible(delta, cfg.eps_num, lo, hi, it)
            acc -= g.cat_matrix()
    subs = categorical_substitute(acc, model.token_counts, data.categorical, cfg.eps_cat)
    p = Perturbation(delta, subs)
    return apply_perturbation(data, p, scaler), p


def spectral_ratio(p: Perturbation, masks: MaskPair) -> float:
    """Largest covariance eigenvalue of recessive-channel deltas over that of
    dominant-channel deltas. ``inf`` when only the dominant block is
    degenerate, ``nan`` when both are."""
    def top(block):
        if block.shape[1] == 0:
            return 0.0
        c = np.atleast_2d(np.cov(block, rowvar=False, bias=True))
        return kernels.power_iteration(c)[0]
    num = top(p.numeric_delta[:, masks.psi])
    den = top(p.numeric_delta[:, masks.phi])
    if den > 0:
        return float(num / den)
    return float("inf") if num > 0 else float("nan")


def feasibility_report(original: Dataset, protected: Dataset, p: Perturbation, cfg: PoisonConfig,
                       bins: int = 10) -> dict:
    linf, ham = mixed_norm(p)
    edges = np.linspace(-cfg.eps_num, cfg.eps_num, bins + 1) if cfg.eps_num > 0 else np.array([-1.0, 1.0])
    hist = {}
    for k, f in enumerate(original.schema.numeric_features):
        counts, _ = np.histogram(np.clip(p.numeric_delta[:, k], edges[0], edges[-1]), bins=edges)
        hist[f.name] = [int(c) for c in counts]
    changed = (protected.categorical != original.categorical).sum(axis=0)
    return {
        "config": asdict(cfg),
        "n_rows": original.n_rows,
        "max_linf": linf,
        "max_hamming": ham,
        "within_budget": bool(linf <= cfg.eps_num and ham <= cfg.eps_cat),
        "labels_unchanged": bool(np.array_equal(original.labels, protected.labels)),
        "histogram_edges": [float(e) for e in edges],
        "numeric_delta_histograms": hist,
        "substitutions_per_feature": {f.name: int(c) for f, c in
                                      zip(original.schema.categorical_features, changed)},
    }


def write_feasibility_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True, eq=False)
class ProtectResult:
    protected: Dataset
    perturbation: Perturbation
    surrogate: SurrogateModel
    decoupling: Decoupling


def protect(data: Dataset, cfg: PoisonConfig = PoisonConfig(), tau: float = 0.5,
            train_cfg: TrainConfig = TrainConfig(), surrogate_hidden=(16, 16), embed_width: int = 4,
            masks: str = "guided") -> ProtectResult:
    """Full pipeline: train the surrogate on clean rows, decouple, craft.

    ``masks`` selects the channel split: ``"guided"`` (influence ranking),
    ``"random"`` (seeded random split of the same pair members), or
    ``"none"`` (every numeric feature in the dominant channel, no pairing).
    """
    model = init_model(data.schema, surrogate_hidden, embed_width, seed=train_cfg.seed)
    model = train(model, data, train_cfg)
    dec = decouple(model, data, tau)
    if masks == "random":
        dec = replace(dec, masks=random_masks(dec.pairs, data.schema.d_num, cfg.seed))
    elif masks == "none":
        d = data.schema.d_num
        dec = replace(dec, masks=MaskPair(np.ones(d, bool), np.zeros(d, bool)))
    elif masks != "guided":
        raise ValueError(f"unknown mask mode {masks!r}")
    protected, p = craft_unlearnable(data, model, dec.masks, cfg)
    return ProtectResult(protected, p, model, dec)

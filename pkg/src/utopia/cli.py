"""Command-line front end: ``utopia {protect, eval, diagnose, theory}``.

Every command writes ``resolved_config.json`` into ``--out`` before doing any
work. Exit codes: 0 ok, 2 configuration, 3 numerical failure, 4 I/O.
Failures print one line ``error=<class>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .tabular import ParseError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
BENCHMARKS = ("synthetic", "anes96")


@dataclass
class RunConfig:
    data: str | None = None
    schema: str | None = None
    benchmark: str | None = None
    protected: str | None = None
    out: str = "utopia_out"
    eps_num: float = 0.03
    eps_cat: int = 1
    iterations: int = 20
    step_size: float | None = None
    amplification: float = 5.0
    momentum: float = 1.0
    tau: float = 0.5
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 1e-2
    seed: int = 0
    threads: int = 1
    defense: list = field(default_factory=list)
    victim: list = field(default_factory=lambda: ["logistic", "mlp16", "mlp64"])
    surrogate_hidden: list = field(default_factory=lambda: [16, 16])
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    # diagnose
    radius: float = 1.0
    grid: int = 11
    sigma_grid: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.5, 1.0])
    # theory
    kappa_grid: list = field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    theory_n: int = 5000
    gamma: float = 1e-2
    sigma: float = 1.0
    trials: int = 200


FLAGS = {f.name: "--" + f.name.replace("_", "-") for f in fields(RunConfig)}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="utopia", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("protect", "craft a protected copy of a dataset"),
                        ("eval", "train victims on clean/protected/defended data"),
                        ("diagnose", "saliency, loss landscape, noise robustness, spectral ratio"),
                        ("theory", "suppression and certified-bound experiments")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file with RunConfig fields")
        for f in fields(RunConfig):
            flag = FLAGS[f.name]
            if f.name in ("defense", "victim"):
                sp.add_argument(flag, action="append", default=None)
            elif f.name in ("surrogate_hidden", "split", "sigma_grid", "kappa_grid"):
                sp.add_argument(flag, default=None, help="comma-separated list")
            else:
                sp.add_argument(flag, default=None)
    return p


def _coerce(name, value, default_obj):
    ftype = {f.name: f for f in fields(RunConfig)}[name]
    default = getattr(default_obj, name)
    if value is None:
        return None
    try:
        if name in ("surrogate_hidden",):
            return [int(v) for v in (value.split(",") if isinstance(value, str) else value) if str(v).strip()]
        if name in ("split", "sigma_grid", "kappa_grid"):
            return [float(v) for v in (value.split(",") if isinstance(value, str) else value)]
        if name in ("defense", "victim"):
            return [str(v) for v in value]
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int) and name != "step_size":
            return int(value)
        if isinstance(default, float) or name == "step_size":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{ftype.name}: cannot parse {value!r}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Shipped default < config file < command-line flag; ``UTOPIA_SEED``
    overrides the seed from any source."""
    cfg = RunConfig()
    base = RunConfig()
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: invalid JSON ({exc})") from None
        unknown = set(raw) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise ConfigError(f"config file has unknown keys {sorted(unknown)}")
        for k, v in raw.items():
            setattr(cfg, k, _coerce(k, v, base) if v is not None else None)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, _coerce(f.name, v, base))
    env = os.environ.get("UTOPIA_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"UTOPIA_SEED must be an integer, got {env!r}") from None
    return cfg


# ---------------------------------------------------------------------------
# shared plumbing


def _poison_cfg(cfg: RunConfig):
    from .poisoner import PoisonConfig
    return PoisonConfig(eps_num=cfg.eps_num, eps_cat=cfg.eps_cat, iterations=cfg.iterations,
                        step_size=cfg.step_size, amplification=cfg.amplification,
                        momentum=cfg.momentum, seed=cfg.seed)


def _train_cfg(cfg: RunConfig):
    from .models import TrainConfig
    return TrainConfig(epochs=cfg.epochs, learning_rate=cfg.lr, weight_decay=cfg.weight_decay,
                       batch_size=cfg.batch_size, seed=cfg.seed)


def _defense(text: str, seed: int):
    """``kind`` or ``kind=strength``."""
    from .evaluation import DefenseSpec
    kind, _, strength = str(text).partition("=")
    return DefenseSpec(kind.strip(), float(strength) if strength else None, seed)


def _validate(cfg: RunConfig, command: str):
    from .evaluation import VICTIMS
    try:
        _poison_cfg(cfg)
        _train_cfg(cfg)
        defenses = [_defense(d, cfg.seed) for d in cfg.defense]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not 0.0 <= cfg.tau <= 1.0:
        raise ConfigError("tau must lie in [0, 1]")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    bad = [v for v in cfg.victim if v not in VICTIMS]
    if bad:
        raise ConfigError(f"unknown victim(s) {bad}; choose from {sorted(VICTIMS)}")
    if command != "theory":
        if cfg.benchmark is not None:
            if cfg.benchmark not in BENCHMARKS:
                raise ConfigError(f"unknown benchmark {cfg.benchmark!r}; choose from {list(BENCHMARKS)}")
        else:
            if not cfg.data or not cfg.schema:
                raise ConfigError("--data and --schema are required (or --benchmark)")
            for label, path in (("data", cfg.data), ("schema", cfg.schema)):
                if not Path(path).is_file():
                    raise ConfigError(f"{label} file not found: {path}")
        if cfg.protected is not None and not Path(cfg.protected).is_file():
            raise ConfigError(f"protected file not found: {cfg.protected}")
    if cfg.grid < 3 or cfg.grid % 2 == 0:
        raise ConfigError("grid must be odd and >= 3")
    if any(s < 0 for s in cfg.sigma_grid):
        raise ConfigError("sigma_grid must be non-negative")
    kg = cfg.kappa_grid
    if not kg or any(k <= 0 for k in kg) or any(b <= a for a, b in zip(kg, kg[1:])):
        raise ConfigError("kappa_grid must be positive and strictly increasing")
    if cfg.trials < 100:
        raise ConfigError("trials must be >= 100")
    if cfg.sigma <= 0 or cfg.gamma <= 0:
        raise ConfigError("sigma and gamma must be > 0")
    return defenses


def _load(cfg: RunConfig):
    from .benchmarks import anes96_paths, synthetic_benchmark
    from .tabular import Dataset, load_csv, load_schema
    if cfg.benchmark == "synthetic":
        tr, te = synthetic_benchmark(seed=cfg.seed)
        return Dataset(tr.schema, np.vstack([tr.numeric, te.numeric]),
                       np.vstack([tr.categorical, te.categorical]),
                       np.concatenate([tr.labels, te.labels]))
    if cfg.benchmark == "anes96":
        c, s = anes96_paths()
        return load_csv(c, load_schema(s))
    return load_csv(cfg.data, load_schema(cfg.schema))


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _echo(cfg: RunConfig, out: Path, command: str):
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **asdict(cfg)}
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_protect(cfg: RunConfig, out: Path) -> None:
    from .poisoner import feasibility_report, protect, write_feasibility_report
    from .tabular import write_csv
    data = _load(cfg)
    res = protect(data, _poison_cfg(cfg), cfg.tau, _train_cfg(cfg), tuple(cfg.surrogate_hidden))
    write_csv(res.protected, out / "protected.csv")
    write_feasibility_report(feasibility_report(data, res.protected, res.perturbation, _poison_cfg(cfg)),
                             out / "feasibility.json")
    res.decoupling.write_report(out / "decoupling.json", [f.name for f in data.schema.numeric_features])


def _split_variants(cfg: RunConfig, data):
    from .tabular import load_csv, split_indices
    tr, _, te = split_indices(data.labels, data.schema.num_classes, cfg.split, cfg.seed)
    variants = {"clean": data.take(tr)}
    prot = None
    if cfg.protected is not None:
        prot = load_csv(cfg.protected, data.schema)
        if prot.n_rows != data.n_rows or not np.array_equal(prot.labels, data.labels):
            raise ConfigError("protected file is not row-aligned with the clean data")
        variants["protected"] = prot.take(tr)
    return variants, data.take(te), prot, tr


def cmd_eval(cfg: RunConfig, out: Path, defenses) -> None:
    from .evaluation import VICTIMS, train_victims
    data = _load(cfg)
    variants, test, _, _ = _split_variants(cfg, data)
    report = train_victims(variants, test, [VICTIMS[v] for v in cfg.victim], _train_cfg(cfg),
                           defenses, defended=["protected"], threads=cfg.threads)
    report.write_csv(out / "eval_runs.csv")
    rows = []
    for variant in variants:
        settings = ["none"] + ([d.label for d in defenses] if variant == "protected" else [])
        for d in settings:
            rows.append([variant, d, report.accuracy(variant, d)]
                        + [report.accuracy(variant, d, v) for v in cfg.victim])
    _write_rows(out / "eval_report.csv", ["variant", "defense", "mean_accuracy"]
                + [f"acc_{v}" for v in cfg.victim], rows)


def cmd_diagnose(cfg: RunConfig, out: Path) -> None:
    from .evaluation import (VICTIMS, loss_landscape, noise_robustness, saliency_report)
    from .models import accuracy, dataset_loss, init_model, train
    from .poisoner import protect, spectral_ratio
    from .tabular import difference
    data = _load(cfg)
    variants, test, prot, tr = _split_variants(cfg, data)
    subject = variants.get("protected", variants["clean"])
    victim = VICTIMS[cfg.victim[0]]
    model = train(init_model(subject.schema, victim.hidden, victim.embed_width, seed=cfg.seed),
                  subject, _train_cfg(cfg))
    train_loss = dataset_loss(model, subject)
    sal = saliency_report(model, test)
    names = [f.name for f in data.schema.numeric_features]
    _write_rows(out / "saliency.csv", ["feature", "mean_abs_gradient"], zip(names, sal["saliency"]))
    _write_rows(out / "ablation.csv", ["k", "top_k_accuracy", "bottom_k_accuracy"],
                [(k, a, b) for k, (a, b) in enumerate(zip(sal["top_k"], sal["bottom_k"]))])
    land = loss_landscape(model, subject, cfg.radius, cfg.grid, seed=cfg.seed)
    c = (cfg.grid - 1) / 2
    offs = [cfg.radius * ((k - c) / c) for k in range(cfg.grid)]
    _write_rows(out / "landscape.csv", ["a\\b"] + [repr(o) for o in offs],
                [[o] + list(row) for o, row in zip(offs, land)])
    rob = noise_robustness(model, subject, cfg.sigma_grid, seed=cfg.seed)
    _write_rows(out / "robustness.csv", ["sigma", "mean_loss"], zip(cfg.sigma_grid, rob))
    summary = [("train_loss", train_loss), ("test_accuracy", accuracy(model, test))]
    if prot is not None:
        # same seeds and config as protect, so this reproduces its surrogate and masks
        res = protect(data, _poison_cfg(cfg), cfg.tau, _train_cfg(cfg), tuple(cfg.surrogate_hidden))
        p = difference(data, prot, res.surrogate.scaler)
        summary.append(("kappa_hat", spectral_ratio(p, res.decoupling.masks)))
    _write_rows(out / "diagnostics.csv", ["quantity", "value"], summary)


def cmd_theory(cfg: RunConfig, out: Path) -> None:
    from .theory import empirical_vs_certified, loglog_slope
    rows, c_const = empirical_vs_certified(cfg.kappa_grid, gamma=cfg.gamma, sigma=cfg.sigma,
                                           n=cfg.theory_n, trials=cfg.trials, seed=cfg.seed)
    _write_rows(out / "suppression.csv", ["kappa", "clean_weight_norm"], [(r[0], r[1]) for r in rows])
    _write_rows(out / "certified.csv", ["kappa", "clean_weight_norm", "bound", "empirical", "mc_stderr"], rows)
    extra = [("calibrated_constant", c_const)]
    if len(rows) >= 2:
        extra.append(("loglog_slope_top_interval", loglog_slope([rows[-2][0], rows[-1][0]],
                                                                [rows[-2][1], rows[-1][1]])))
    _write_rows(out / "theory_summary.csv", ["quantity", "value"], extra)


def _fail(kind: str, code: int, msg: str) -> int:
    print(f"error={kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        defenses = _validate(cfg, args.command)
        out = Path(cfg.out)
        _echo(cfg, out, args.command)
        if args.command == "protect":
            cmd_protect(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out, defenses)
        elif args.command == "diagnose":
            cmd_diagnose(cfg, out)
        else:
            cmd_theory(cfg, out)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except NumericalError as exc:
        return _fail("numerical", EXIT_NUMERIC, exc)
    except (ParseError, OSError) as exc:
        return _fail("io", EXIT_IO, exc)
    except ValueError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

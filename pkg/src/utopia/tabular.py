"""Mixed-type tabular data: schema, dataset container, CSV/JSON I/O,
standardisation, and the type-aware perturbation operator."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"
STD_FLOOR = 1e-8


class ParseError(ValueError):
    """Malformed CSV or schema input; the message names the row/column."""


class InvariantError(ValueError):
    """A dataset or perturbation violates its structural invariants."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    numeric_min: float | None = None
    numeric_max: float | None = None
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind == NUMERIC:
            lo, hi = self.numeric_min, self.numeric_max
            if lo is not None and hi is not None and not lo < hi:
                raise InvariantError(f"feature {self.name!r}: min {lo} must be < max {hi}")
        elif self.kind == CATEGORICAL:
            if not self.tokens:
                raise InvariantError(f"feature {self.name!r}: empty token list")
            if len(set(self.tokens)) != len(self.tokens):
                raise InvariantError(f"feature {self.name!r}: duplicate tokens")
            object.__setattr__(self, "tokens", tuple(self.tokens))
        else:
            raise InvariantError(f"feature {self.name!r}: unknown kind {self.kind!r}")

    @property
    def has_bounds(self) -> bool:
        return self.numeric_min is not None and self.numeric_max is not None

    @classmethod
    def numeric(cls, name, lo=None, hi=None):
        return cls(name, NUMERIC, None if lo is None else float(lo), None if hi is None else float(hi))

    @classmethod
    def categorical(cls, name, tokens):
        return cls(name, CATEGORICAL, tokens=tuple(str(t) for t in tokens))


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise InvariantError("feature names must be distinct")
        if "label" in names:
            raise InvariantError("'label' is reserved for the target column")
        if not any(f.kind == NUMERIC for f in self.features):
            raise InvariantError("schema needs at least one numeric feature")
        if self.num_classes < 2:
            raise InvariantError("num_classes must be >= 2")

    @property
    def numeric_features(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind == NUMERIC]

    @property
    def categorical_features(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.kind == CATEGORICAL]

    @property
    def d_num(self) -> int:
        return len(self.numeric_features)

    @property
    def d_cat(self) -> int:
        return len(self.categorical_features)

    @property
    def token_counts(self) -> list[int]:
        return [len(f.tokens) for f in self.categorical_features]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        num = self.numeric_features
        if not all(f.has_bounds for f in num):
            raise InvariantError("numeric bounds unresolved; call resolve_bounds first")
        return (np.array([f.numeric_min for f in num], dtype=float),
                np.array([f.numeric_max for f in num], dtype=float))

    def resolve_bounds(self, numeric: np.ndarray) -> "Schema":
        """Fill missing numeric bounds with the observed column min/max.

        A constant column gets ``[v - 0.5, v + 0.5]`` so that min < max holds.
        """
        numeric = np.asarray(numeric, dtype=float)
        out, k = [], 0
        for f in self.features:
            if f.kind == NUMERIC:
                lo, hi = f.numeric_min, f.numeric_max
                if not f.has_bounds:
                    col = numeric[:, k] if numeric.size else np.zeros(1)
                    cmin, cmax = float(col.min()), float(col.max())
                    if cmin == cmax:
                        cmin, cmax = cmin - 0.5, cmax + 0.5
                    lo = cmin if lo is None else lo
                    hi = cmax if hi is None else hi
                f = FeatureSpec.numeric(f.name, lo, hi)
                k += 1
            out.append(f)
        return Schema(tuple(out), self.num_classes)

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            if f.kind == NUMERIC:
                entry = {"name": f.name, "kind": NUMERIC}
                if f.numeric_min is not None:
                    entry["min"] = f.numeric_min
                if f.numeric_max is not None:
                    entry["max"] = f.numeric_max
            else:
                entry = {"name": f.name, "kind": CATEGORICAL, "tokens": list(f.tokens)}
            feats.append(entry)
        return {"num_classes": self.num_classes, "features": feats}

    @classmethod
    def from_dict(cls, raw: dict) -> "Schema":
        try:
            feats = []
            for i, entry in enumerate(raw["features"]):
                kind = entry["kind"]
                if kind == NUMERIC:
                    feats.append(FeatureSpec.numeric(entry["name"], entry.get("min"), entry.get("max")))
                elif kind == CATEGORICAL:
                    feats.append(FeatureSpec.categorical(entry["name"], entry["tokens"]))
                else:
                    raise ParseError(f"schema feature {i}: unknown kind {kind!r}")
            return cls(tuple(feats), int(raw["num_classes"]))
        except KeyError as exc:
            raise ParseError(f"schema missing field {exc}") from None


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from None
    return Schema.from_dict(raw)


def save_schema(schema: Schema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: Schema
    numeric: np.ndarray
    categorical: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        object.__setattr__(self, "numeric",
                           np.asarray(self.numeric, dtype=np.float64).reshape(n, self.schema.d_num))
        object.__setattr__(self, "categorical",
                           np.asarray(self.categorical, dtype=np.int64).reshape(n, self.schema.d_cat))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(n))

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    def validate(self) -> "Dataset":
        """Raise :class:`InvariantError` unless every cell is structurally valid."""
        lo, hi = self.schema.bounds
        x = self.numeric
        if not np.all(np.isfinite(x)):
            raise InvariantError("non-finite numeric cell")
        bad = np.argwhere((x < lo) | (x > hi))
        if len(bad):
            r, c = bad[0]
            f = self.schema.numeric_features[c]
            raise InvariantError(f"row {r}, column {f.name!r}: {x[r, c]} outside [{lo[c]}, {hi[c]}]")
        counts = np.array(self.schema.token_counts, dtype=np.int64)
        bad = np.argwhere((self.categorical < 0) | (self.categorical >= counts))
        if len(bad):
            r, c = bad[0]
            raise InvariantError(f"row {r}, column {self.schema.categorical_features[c].name!r}: "
                                 f"token index {self.categorical[r, c]} out of range")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.schema.num_classes))
        if len(bad):
            raise InvariantError(f"row {bad[0]}: label {self.labels[bad[0]]} out of range")
        return self

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.schema, self.numeric[idx], self.categorical[idx], self.labels[idx])

    def replace(self, **changes) -> "Dataset":
        fields = dict(schema=self.schema, numeric=self.numeric,
                      categorical=self.categorical, labels=self.labels)
        fields.update(changes)
        return Dataset(**fields)

    def equals(self, other: "Dataset") -> bool:
        return (self.schema == other.schema
                and np.array_equal(self.numeric, other.numeric)
                and np.array_equal(self.categorical, other.categorical)
                and np.array_equal(self.labels, other.labels))


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, schema: Schema) -> Dataset:
    """Parse a CSV whose header is the schema's feature names plus ``label``.

    Missing numeric bounds in ``schema`` are filled from the data.
    """
    names = [f.name for f in schema.features]
    expected = names + ["label"]
    num_idx = [i for i, f in enumerate(schema.features) if f.kind == NUMERIC]
    cat_idx = [i for i, f in enumerate(schema.features) if f.kind == CATEGORICAL]
    lookups = {i: {t: k for k, t in enumerate(schema.features[i].tokens)} for i in cat_idx}
    numeric, categorical, labels = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in expected if c not in header]
        if missing:
            raise ParseError(f"{path}: missing column(s) {missing}")
        if header != expected:
            raise ParseError(f"{path}: header {header} does not match expected {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                raise ParseError(f"{path}: row {lineno}: expected {len(expected)} cells, got {len(row)}")
            nums = []
            for i in num_idx:
                cell = row[i].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {lineno}, column {names[i]!r}: "
                                     f"not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {lineno}, column {names[i]!r}: non-finite value")
                f = schema.features[i]
                if (f.numeric_min is not None and v < f.numeric_min) or \
                        (f.numeric_max is not None and v > f.numeric_max):
                    raise ParseError(f"{path}: row {lineno}, column {names[i]!r}: value {v} outside "
                                     f"[{f.numeric_min}, {f.numeric_max}]")
                nums.append(v)
            cats = []
            for i in cat_idx:
                tok = row[i].strip()
                if tok not in lookups[i]:
                    raise ParseError(f"{path}: row {lineno}, column {names[i]!r}: unknown token {tok!r}")
                cats.append(lookups[i][tok])
            cell = row[-1].strip()
            try:
                lab = int(cell)
            except ValueError:
                raise ParseError(f"{path}: row {lineno}, column 'label': not an integer: {cell!r}") from None
            if not 0 <= lab < schema.num_classes:
                raise ParseError(f"{path}: row {lineno}, column 'label': {lab} outside [0, {schema.num_classes})")
            numeric.append(nums)
            categorical.append(cats)
            labels.append(lab)
    numeric = np.array(numeric, dtype=np.float64).reshape(len(labels), schema.d_num)
    schema = schema.resolve_bounds(numeric)
    return Dataset(schema, numeric, np.array(categorical, dtype=np.int64), np.array(labels)).validate()


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` in the exact layout :func:`load_csv` reads; floats use
    ``repr`` so the file round-trips bit for bit."""
    feats = data.schema.features
    num_pos = {id(f): k for k, f in enumerate(data.schema.numeric_features)}
    cat_pos = {id(f): k for k, f in enumerate(data.schema.categorical_features)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in feats] + ["label"])
        for r in range(data.n_rows):
            row = []
            for f in feats:
                if f.kind == NUMERIC:
                    row.append(repr(float(data.numeric[r, num_pos[id(f)]])))
                else:
                    row.append(f.tokens[data.categorical[r, cat_pos[id(f)]]])
            row.append(str(int(data.labels[r])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# standardisation


@dataclass(frozen=True, eq=False)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


def fit_standardizer(data: Dataset) -> ScalerStats:
    """Population mean/std per numeric column, std floored at 1e-8."""
    if data.n_rows < 2:
        raise ValueError("fit_standardizer needs at least 2 rows")
    mean = data.numeric.mean(axis=0)
    std = np.maximum(data.numeric.std(axis=0), STD_FLOOR)
    return ScalerStats(mean, std)


# ---------------------------------------------------------------------------
# perturbations


@dataclass(eq=False)
class Perturbation:
    """Per-row numeric delta in standardised units plus token substitutions.

    ``cat_subs[i]`` lists ``(categorical feature index, new token index)``.
    """
    numeric_delta: np.ndarray
    cat_subs: list = field(default_factory=list)

    def __post_init__(self):
        self.numeric_delta = np.asarray(self.numeric_delta, dtype=np.float64)
        if not self.cat_subs:
            self.cat_subs = [[] for _ in range(len(self.numeric_delta))]

    @classmethod
    def zeros(cls, n_rows: int, d_num: int) -> "Perturbation":
        return cls(np.zeros((n_rows, d_num)))

    @classmethod
    def from_array(cls, numeric_delta, subs: np.ndarray) -> "Perturbation":
        """Build from the padded ``n x k x 2`` array :func:`kernels.greedy_substitute` returns."""
        cat = [[(int(j), int(t)) for j, t in row if j >= 0] for row in np.asarray(subs)]
        return cls(numeric_delta, cat)


def apply_perturbation(data: Dataset, p: Perturbation, s: ScalerStats) -> Dataset:
    """Add the numeric delta (in standardised units, then clamped to
    the feature domain) and substitution on categorical tokens."""
    n, d = data.numeric.shape
    if p.numeric_delta.shape != (n, d):
        raise ValueError(f"numeric delta shape {p.numeric_delta.shape} != {(n, d)}")
    if len(p.cat_subs) != n:
        raise ValueError(f"cat_subs has {len(p.cat_subs)} rows, data has {n}")
    lo, hi = data.schema.bounds
    numeric = np.clip(data.numeric + p.numeric_delta * s.std, lo, hi)
    # rows untouched by the delta stay bit-identical
    numeric = np.where(p.numeric_delta == 0.0, data.numeric, numeric)
    cat = data.categorical.copy()
    counts = data.schema.token_counts
    for r, subs in enumerate(p.cat_subs):
        for j, t in subs:
            if not 0 <= j < len(counts):
                raise ValueError(f"row {r}: categorical feature index {j} out of range")
            if not 0 <= t < counts[j]:
                raise ValueError(f"row {r}: token index {t} out of range for feature {j}")
            cat[r, j] = t
    return data.replace(numeric=numeric, categorical=cat).validate()


def mixed_norm(p: Perturbation) -> tuple[float, int]:
    """``(max |numeric delta|, max substitutions in any row)``."""
    linf = float(np.max(np.abs(p.numeric_delta))) if p.numeric_delta.size else 0.0
    ham = max((len({j for j, _ in row}) for row in p.cat_subs), default=0)
    return linf, int(ham)


def difference(original: Dataset, perturbed: Dataset, s: ScalerStats) -> Perturbation:
    """Recover the effective perturbation between two aligned datasets."""
    delta = (perturbed.numeric - original.numeric) / s.std
    changed = perturbed.categorical != original.categorical
    subs = [[(int(j), int(perturbed.categorical[r, j])) for j in np.flatnonzero(changed[r])]
            for r in range(original.n_rows)]
    return Perturbation(delta, subs)


# ---------------------------------------------------------------------------
# splitting


def split_indices(labels: np.ndarray, num_classes: int,
                  fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Class-stratified, seeded partition of row indices into train/val/test.

    Each class contributes ``round(f * n_c)`` rows to validation and test
    (at least one each) and the remainder to train. Indices come back sorted,
    so rows keep their original relative order inside each part.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            raise ValueError(f"class {c} has {len(idx)} rows; stratified 3-way split needs >= 3")
        idx = rng.permutation(idx)
        n_val = max(1, int(round(fr[1] * len(idx))))
        n_test = max(1, int(round(fr[2] * len(idx))))
        if n_val + n_test >= len(idx):
            n_val, n_test = 1, 1
        parts[1].append(idx[:n_val])
        parts[2].append(idx[n_val:n_val + n_test])
        parts[0].append(idx[n_val + n_test:])
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts)


def split(data: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Stratified train/val/test datasets; see :func:`split_indices`."""
    return tuple(data.take(i) for i in split_indices(data.labels, data.schema.num_classes, fractions, seed))

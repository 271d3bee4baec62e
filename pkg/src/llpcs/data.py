"""Datasets: synthetic covariate-shift generation, CSV ingestion, label scaling."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ArchConfig, ConfigurationError, Model


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Rows of numeric features, categorical ids and a real label."""

    features: np.ndarray
    labels: np.ndarray
    categorical: np.ndarray | None = None
    domain: str = "target"
    feature_names: tuple[str, ...] = ()
    categorical_names: tuple[str, ...] = ()
    cardinalities: tuple[int, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {features.shape}")
        labels = np.array(self.labels, dtype=np.float64).reshape(-1)
        if labels.shape[0] != features.shape[0]:
            raise DataError("features and labels disagree on row count")
        if not np.all(np.isfinite(labels)):
            raise DataError("labels must be finite")
        n = features.shape[0]
        cat = self.categorical
        cat = np.zeros((n, 0), dtype=np.int64) if cat is None else np.array(cat, dtype=np.int64)
        if cat.ndim != 2 or cat.shape[0] != n:
            raise DataError("categorical ids must be an (n, c) array")
        names = self.feature_names or tuple(f"x{i}" for i in range(features.shape[1]))
        cat_names = self.categorical_names or tuple(f"c{i}" for i in range(cat.shape[1]))
        cards = self.cardinalities or tuple(int(cat[:, i].max()) + 1 if n else 1 for i in range(cat.shape[1]))
        if len(names) != features.shape[1] or len(cat_names) != cat.shape[1] or len(cards) != cat.shape[1]:
            raise DataError("schema names do not match array widths")
        for arr in (features, labels, cat):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "categorical", cat)
        object.__setattr__(self, "feature_names", tuple(names))
        object.__setattr__(self, "categorical_names", tuple(cat_names))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in cards))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        return replace(
            self,
            features=self.features[index],
            labels=self.labels[index],
            categorical=self.categorical[index],
        )

    def with_labels(self, labels) -> "Dataset":
        return replace(self, labels=np.asarray(labels, dtype=np.float64))

    def arch(self, hidden=(128, 128), embedding_dim=8, domain_head=False) -> ArchConfig:
        return ArchConfig(
            input_dim=self.dim,
            hidden=tuple(hidden),
            categorical_cardinalities=self.cardinalities,
            embedding_dim=embedding_dim,
            domain_head=domain_head,
        )


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian source/target generator.

    ``N(a, b)`` parameters are (mean, variance).
    """

    dim: int = 64
    source_mean: tuple[float, float] = (0.0, 16.0)
    target_mean: tuple[float, float] = (50.0, 16.0)
    cov_diag: tuple[float, float] = (10.0, 16.0)
    covariance: str = "diagonal"
    n_source: int = 200_000
    n_target: int = 200_000
    n_test: int = 65_000
    label_hidden: tuple[int, ...] = (128, 128)
    label_seed: int = 1234
    # perturbation ablation (generate_perturbed)
    perturb_mean: tuple[float, float] = (50.0, 8.0)
    perturb_cov: tuple[float, float] = (10.0, 8.0)
    perturb_delta: tuple[float, float] = (50.0, 8.0)

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError(f"dim must be >= 1, got {self.dim}")
        if self.covariance not in ("diagonal", "full"):
            raise ConfigurationError(f"covariance must be 'diagonal' or 'full', got {self.covariance!r}")
        for name in ("source_mean", "target_mean", "cov_diag", "perturb_mean", "perturb_cov", "perturb_delta"):
            if getattr(self, name)[1] < 0:
                raise ConfigurationError(f"{name} variance must be >= 0")
        if min(self.n_source, self.n_target, self.n_test) < 0:
            raise ConfigurationError("sizes must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("source_mean", "target_mean", "cov_diag", "label_hidden",
                    "perturb_mean", "perturb_cov", "perturb_delta"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray  # full matrix

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n == 0:
            return np.zeros((0, self.mean.size))
        if np.count_nonzero(self.cov - np.diag(np.diag(self.cov))) == 0:
            return self.mean + rng.standard_normal((n, self.mean.size)) * np.sqrt(np.diag(self.cov))
        return rng.multivariate_normal(self.mean, self.cov, size=n, method="eigh")


def check_psd(cov: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise DataError("covariance must be a symmetric square matrix")
    if np.linalg.eigvalsh(cov).min() < -tol * max(1.0, np.abs(cov).max()):
        raise DataError("covariance matrix is not positive semidefinite")
    return cov


def _draw(rng, params, size):
    mean, var = params
    return rng.normal(mean, np.sqrt(var), size=size)


def _covariance(spec: SynthSpec, rng) -> np.ndarray:
    scales = np.abs(_draw(rng, spec.cov_diag, spec.dim))
    if spec.covariance == "diagonal":
        return np.diag(scales)
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    return check_psd((q * scales) @ q.T)


def label_network(spec: SynthSpec) -> Model:
    """The fixed random network that labels both domains."""
    return Model(ArchConfig(input_dim=spec.dim, hidden=spec.label_hidden), seed=spec.label_seed)


def _dataset(x, label_net, domain):
    return Dataset(features=x, labels=label_net.predict(x), domain=domain)


def synthetic_domains(spec: SynthSpec, seed: int) -> tuple[Gaussian, Gaussian]:
    """Draw the (source, target) Gaussian parameters."""
    rng = np.random.default_rng([seed, 0])
    source = Gaussian(_draw(rng, spec.source_mean, spec.dim), _covariance(spec, rng))
    target = Gaussian(_draw(rng, spec.target_mean, spec.dim), _covariance(spec, rng))
    return source, target


def generate_synthetic(spec: SynthSpec, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Source train, target train and target test sets labelled by one network."""
    source_dist, target_dist = synthetic_domains(spec, seed)
    rng = np.random.default_rng([seed, 1])
    net = label_network(spec)
    xs = source_dist.sample(spec.n_source, rng)
    xt = target_dist.sample(spec.n_target + spec.n_test, rng)
    return (
        _dataset(xs, net, "source"),
        _dataset(xt[: spec.n_target], net, "target"),
        _dataset(xt[spec.n_target:], net, "target"),
    )


def perturbed_domains(spec: SynthSpec, eps: float, delta: float, seed: int) -> tuple[Gaussian, Gaussian]:
    """Target ``N(mu, Sigma)`` and source ``N(mu - eps*Delta, Sigma + |N(0, 8 delta^2)|)``."""
    if eps < 0 or delta < 0:
        raise ConfigurationError(f"eps and delta must be >= 0, got {eps}, {delta}")
    rng = np.random.default_rng([seed, 2])
    mu = _draw(rng, spec.perturb_mean, spec.dim)
    sigma = np.abs(_draw(rng, spec.perturb_cov, spec.dim))
    shift = _draw(rng, spec.perturb_delta, spec.dim)
    bump = np.abs(rng.normal(0.0, np.sqrt(spec.perturb_cov[1]) * delta, size=spec.dim))
    target = Gaussian(mu, np.diag(sigma))
    source = Gaussian(mu - eps * shift, np.diag(sigma + bump))
    return source, target


def perturbation_shift(spec: SynthSpec, seed: int) -> np.ndarray:
    """The mean-shift direction Delta used by :func:`perturbed_domains`."""
    rng = np.random.default_rng([seed, 2])
    _draw(rng, spec.perturb_mean, spec.dim)
    _draw(rng, spec.perturb_cov, spec.dim)
    return _draw(rng, spec.perturb_delta, spec.dim)


def generate_perturbed(spec: SynthSpec, eps: float, delta: float, seed: int) -> tuple[Dataset, Dataset]:
    source_dist, target_dist = perturbed_domains(spec, eps, delta, seed)
    rng = np.random.default_rng([seed, 3])
    net = label_network(spec)
    return (
        _dataset(source_dist.sample(spec.n_source, rng), net, "source"),
        _dataset(target_dist.sample(spec.n_target, rng), net, "target"),
    )


# --------------------------------------------------------------------------
# splitting and label scaling


def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def standardize_labels(source: Dataset, target_train: Dataset, target_test: Dataset):
    """Standardize all splits with statistics from source and target-train labels only.

    Returns ``(source, target_train, target_test, (mu, sigma))``.
    """
    pool = np.concatenate([source.labels, target_train.labels])
    mu, sigma = float(pool.mean()), float(pool.std())
    if not sigma > 0:
        raise DataError("labels have zero variance in the fitting pool")
    scale = lambda d: d.with_labels((d.labels - mu) / sigma)  # noqa: E731
    return scale(source), scale(target_train), scale(target_test), (mu, sigma)


def standardize_features(source: Dataset, target_train: Dataset, target_test: Dataset):
    """Standardize numeric features with statistics of source and target-train rows.

    Constant columns keep scale 1. Returns ``(source, target_train,
    target_test, (mu, sigma))``.
    """
    pool = np.vstack([source.features, target_train.features])
    mu = pool.mean(axis=0)
    sigma = pool.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    scale = lambda d: replace(d, features=(d.features - mu) / sigma)  # noqa: E731
    return scale(source), scale(target_train), scale(target_test), (mu, sigma)


def minmax_labels(*datasets: Dataset) -> tuple[list[Dataset], tuple[float, float]]:
    """Map labels into [0, 1] using the joint min and max (theory mode)."""
    pool = np.concatenate([d.labels for d in datasets])
    lo, hi = float(pool.min()), float(pool.max())
    span = hi - lo if hi > lo else 1.0
    return [d.with_labels((d.labels - lo) / span) for d in datasets], (lo, span)


# --------------------------------------------------------------------------
# CSV ingestion

KINDS = ("numeric", "categorical", "onehot", "label", "drop", "domain")


@dataclass
class Schema:
    """Column kinds plus row filters.

    ``columns`` maps a header name to one of ``numeric``, ``categorical``,
    ``onehot``, ``label``, ``drop`` or ``domain``. ``categories`` fixes the
    level order of ``onehot``/``categorical`` columns (otherwise sorted
    observed values). ``filter_invalid`` drops rows holding NaN or -1 in
    any used column. ``label_top_percentile`` drops rows whose label is
    above that upper percentile of the raw labels.
    """

    columns: dict[str, str]
    categories: dict[str, list] = field(default_factory=dict)
    filter_invalid: bool = False
    label_top_percentile: float | None = None
    source_values: list = field(default_factory=list)

    def __post_init__(self):
        for name, kind in self.columns.items():
            if kind not in KINDS:
                raise ConfigurationError(f"column {name!r}: unknown kind {kind!r}")
        if list(self.columns.values()).count("label") != 1:
            raise ConfigurationError("schema needs exactly one label column")

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Schema":
        text = Path(path).read_text(encoding="utf-8")
        if str(path).endswith(".toml"):
            from .config import loads_toml

            return cls.from_dict(loads_toml(text))
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "columns": dict(self.columns),
            "categories": {k: list(v) for k, v in self.categories.items()},
            "filter_invalid": self.filter_invalid,
            "label_top_percentile": self.label_top_percentile,
            "source_values": list(self.source_values),
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_rows(path, schema: Schema) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        rows = [r for r in reader if r]
    missing = [c for c in schema.columns if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    for line, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {line} has {len(row)} cells, header has {len(header)}")
    return header, rows


def _invalid(cell: str) -> bool:
    s = cell.strip().lower()
    return s in ("", "nan", "-1", "-1.0")


def _as_float(cell, path, line, col):
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}: row {line}, column {col!r}: cannot parse {cell!r} as a number") from None


def _levels(schema: Schema, col: str, values: list[str]) -> list[str]:
    if col in schema.categories:
        return [str(v) for v in schema.categories[col]]
    try:
        return sorted(set(values), key=float)
    except ValueError:
        return sorted(set(values))


def _parse(path, schema: Schema):
    header, rows = _read_rows(path, schema)
    pos = {name: header.index(name) for name in schema.columns}
    used = [c for c, k in schema.columns.items() if k != "drop"]
    lines = list(range(2, len(rows) + 2))
    if schema.filter_invalid:
        keep = [i for i, r in enumerate(rows) if not any(_invalid(r[pos[c]]) for c in used)]
        rows = [rows[i] for i in keep]
        lines = [lines[i] for i in keep]

    label_col = next(c for c, k in schema.columns.items() if k == "label")
    labels = np.array([_as_float(r[pos[label_col]], path, ln, label_col) for r, ln in zip(rows, lines)])
    if schema.label_top_percentile is not None and len(labels):
        cut = np.percentile(labels, 100.0 - schema.label_top_percentile)
        keep = np.flatnonzero(labels <= cut)
        rows = [rows[i] for i in keep]
        lines = [lines[i] for i in keep]
        labels = labels[keep]

    blocks, names, cat_cols, cat_names, cards = [], [], [], [], []
    for col, kind in schema.columns.items():
        values = [r[pos[col]].strip() for r in rows]
        if kind == "numeric":
            blocks.append(np.array([[_as_float(v, path, ln, col)] for v, ln in zip(values, lines)]).reshape(-1, 1))
            names.append(col)
        elif kind in ("onehot", "categorical"):
            levels = _levels(schema, col, values)
            index = {v: i for i, v in enumerate(levels)}
            alt = {}
            for v in levels:
                try:
                    alt[float(v)] = index[v]
                except ValueError:
                    pass
            ids = []
            for v, ln in zip(values, lines):
                if v in index:
                    ids.append(index[v])
                else:
                    try:
                        ids.append(alt[float(v)])
                    except (ValueError, KeyError):
                        raise DataError(f"{path}: row {ln}, column {col!r}: unknown level {v!r}") from None
            ids = np.array(ids, dtype=np.int64)
            if kind == "onehot":
                blocks.append(np.eye(len(levels))[ids].reshape(-1, len(levels)))
                names += [f"{col}={lv}" for lv in levels]
            else:
                cat_cols.append(ids)
                cat_names.append(col)
                cards.append(len(levels))
    n = len(rows)
    features = np.hstack(blocks) if blocks else np.zeros((n, 0))
    categorical = np.stack(cat_cols, axis=1) if cat_cols else np.zeros((n, 0), dtype=np.int64)
    domain_col = next((c for c, k in schema.columns.items() if k == "domain"), None)
    domain = None
    if domain_col is not None:
        src = {str(v) for v in schema.source_values}
        domain = np.array([r[pos[domain_col]].strip() in src for r in rows], dtype=bool)
    return features, labels, categorical, tuple(names), tuple(cat_names), tuple(cards), domain


def load_csv(path, schema: Schema, domain: str = "target") -> Dataset:
    """Load a CSV file under ``schema`` (header row, comma separated, UTF-8)."""
    features, labels, categorical, names, cat_names, cards, _ = _parse(path, schema)
    if len(labels) == 0:
        raise DataError(f"{path}: no data rows")
    return Dataset(features, labels, categorical, domain, names, cat_names, cards)


def load_domains(path, schema: Schema) -> tuple[Dataset, Dataset]:
    """Load a CSV and split rows into (source, target) on the schema's domain column."""
    features, labels, categorical, names, cat_names, cards, is_source = _parse(path, schema)
    if is_source is None:
        raise ConfigurationError("schema has no domain column")
    full = Dataset(features, labels, categorical, "target", names, cat_names, cards)
    source = full.subset(np.flatnonzero(is_source))
    target = full.subset(np.flatnonzero(~is_source))
    return replace(source, domain="source"), target


def save_csv(dataset: Dataset, path) -> Schema:
    """Write a dataset as CSV (full float precision) plus a ``.schema.json`` sidecar."""
    path = Path(path)
    cols = {name: "numeric" for name in dataset.feature_names}
    cols.update({name: "categorical" for name in dataset.categorical_names})
    if "label" in cols:
        raise DataError("feature named 'label' clashes with the label column")
    cols["label"] = "label"
    schema = Schema(
        columns=cols,
        categories={n: list(range(c)) for n, c in zip(dataset.categorical_names, dataset.cardinalities)},
    )
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(dataset.feature_names) + list(dataset.categorical_names) + ["label"])
        for x, c, y in zip(dataset.features, dataset.categorical, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [str(int(v)) for v in c] + [repr(float(y))])
    schema.dump(path.with_suffix(".schema.json"))
    return schema


# Presets for the public datasets (not shipped).


def wine_schema(n_words: int = 39, country_column: str = "country", source: str = "France") -> Schema:
    cols = {f"word{i}": "onehot" for i in range(n_words)}
    cols["points"] = "onehot"
    cols["price"] = "label"
    cols[country_column] = "domain"
    cats = {f"word{i}": [0, 1] for i in range(n_words)}
    cats["points"] = list(range(80, 100))
    return Schema(cols, cats, label_top_percentile=5.0, source_values=[source])


def ipums_schema() -> Schema:
    cols = {
        "REGION": "categorical",
        "STATEICP": "categorical",
        "AGE": "numeric",
        "IND": "categorical",
        "GQ": "onehot",
        "SEX": "onehot",
        "WKSWORK2": "onehot",
        "INCWAGE": "label",
        "YEAR": "domain",
    }
    return Schema(cols, source_values=["1970"])


CRITEO_CATEGORICAL = (
    "product_age_group", "device_type", "audience_id", "product_gender", "product_brand",
    "product_category_1", "product_category_2", "product_category_3", "product_category_4",
    "product_category_5", "product_category_6", "product_category_7", "product_title",
    "partner_id", "user_id",
)
CRITEO_NUMERIC = ("time_delay_for_conversion", "nb_clicks_1week", "product_price")


def criteo_schema(source_country: str) -> Schema:
    cols = {c: "categorical" for c in CRITEO_CATEGORICAL}
    cols.update({c: "numeric" for c in CRITEO_NUMERIC})
    cols["sales_amount_in_euro"] = "label"
    cols["product_country"] = "domain"
    return Schema(cols, filter_invalid=True, source_values=[source_country])

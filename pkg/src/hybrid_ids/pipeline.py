"""UNSW-NB15-schema ingestion, encoding, balancing and splitting.

Encoded feature layout: the z-scored numeric columns in schema order, then
one one-hot block per categorical column (categories in order of first
appearance among the fit rows; unseen values encode as all zeros).

Binary matrix file (``save_matrix`` / ``load_matrix``), little-endian::

    offset  size  field
    0       8     magic b"HYIDSMAT"
    8       4     uint32 version (1)
    12      8     uint64 N (rows)
    20      8     uint64 F (columns)
    28      8*N*F float64 values, row-major
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IntegrityError, RowError, SchemaError, UsageError, ValidationError, VersionError

logger = logging.getLogger(__name__)

CLASS_NAMES = (
    "Normal",
    "Fuzzers",
    "Backdoor",
    "DoS",
    "Exploits",
    "Generic",
    "Reconnaissance",
    "Analysis",
    "Shellcode",
    "Worms",
)
BINARY_NAMES = ("Normal", "Attack")
LABEL_MODES = ("binary", "multiclass")

# spellings seen in Table-II-style listings and in the raw capture files
_ALIASES = {
    "backdoors": "Backdoor",
    "denial of service": "DoS",
    "shell code": "Shellcode",
    "worm": "Worms",
    "fuzzer": "Fuzzers",
}
_CANON = {name.lower(): name for name in CLASS_NAMES} | _ALIASES

NORM_EPS = 1e-8
MATRIX_MAGIC = b"HYIDSMAT"
MATRIX_VERSION = 1
_MATRIX_HEADER = struct.Struct("<8sIQQ")


def data_file(name: str) -> Path:
    return Path(str(resources.files("hybrid_ids") / "data" / name))


def default_schema_path() -> Path:
    return data_file("unsw_nb15_schema.json")


def fixture_path() -> Path:
    return data_file("fixture_1000.csv")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_category(value: str) -> str | None:
    return _CANON.get(value.strip().lower())


# ---------------------------------------------------------------------------
# schema and raw records


@dataclass(frozen=True)
class Schema:
    numeric: tuple[str, ...]
    categorical: tuple[str, ...]
    category_column: str = "attack_cat"
    label_column: str = "label"
    ignored: tuple[str, ...] = ()
    name: str = ""

    @classmethod
    def load(cls, path=None) -> "Schema":
        path = Path(path) if path is not None else default_schema_path()
        if not path.is_file():
            raise SchemaError(f"schema file not found: {path}")
        try:
            spec = json.loads(path.read_text(encoding="utf-8"))
            columns = spec["columns"]
            kinds = {c["name"]: c["type"] for c in columns}
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema file {path}: {exc}") from None
        bad = sorted({t for t in kinds.values()} - {"numeric", "categorical"})
        if bad:
            raise SchemaError(f"schema {path} uses unknown column types {bad}")
        return cls(
            numeric=tuple(n for n, t in kinds.items() if t == "numeric"),
            categorical=tuple(n for n, t in kinds.items() if t == "categorical"),
            category_column=spec.get("category_column", "attack_cat"),
            label_column=spec.get("label_column", "label"),
            ignored=tuple(spec.get("ignored", ())),
            name=spec.get("name", ""),
        )

    @property
    def required(self) -> tuple[str, ...]:
        return self.numeric + self.categorical + (self.category_column, self.label_column)


@dataclass
class RawDataset:
    schema: Schema
    numeric: np.ndarray  # (N, n_numeric) float64
    categorical: np.ndarray  # (N, n_categorical) str objects
    category: np.ndarray  # (N,) index into CLASS_NAMES
    label: np.ndarray  # (N,) 0 = normal, 1 = attack

    def __len__(self) -> int:
        return self.label.shape[0]

    def subset(self, index) -> "RawDataset":
        index = np.asarray(index, dtype=np.int64)
        return RawDataset(self.schema, self.numeric[index], self.categorical[index], self.category[index], self.label[index])

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.category, minlength=len(CLASS_NAMES))
        return {name: int(n) for name, n in zip(CLASS_NAMES, counts)}

    def targets(self, label_mode: str) -> np.ndarray:
        if label_mode == "binary":
            return self.label.copy()
        if label_mode == "multiclass":
            return self.category.copy()
        raise UsageError(f"unknown label mode {label_mode!r}; expected one of {LABEL_MODES}")


def load_csv(path, schema: Schema | None = None) -> RawDataset:
    """Parse a comma-separated UNSW-NB15 partition file with a header row."""
    schema = schema or Schema.load()
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty (no header row)") from None
        pos = {name: i for i, name in enumerate(header)}
        for col in schema.required:
            if col not in pos:
                raise SchemaError(f"{path}: missing column {col!r}")
        extra = [h for h in header if h not in schema.required and h not in schema.ignored]
        if extra:
            raise SchemaError(f"{path}: unexpected columns {extra}")

        num_idx = [pos[c] for c in schema.numeric]
        cat_idx = [pos[c] for c in schema.categorical]
        cat_pos, lab_pos = pos[schema.category_column], pos[schema.label_column]
        numeric, categorical, category, label = [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise RowError(line, f"expected {len(header)} cells, found {len(row)}")
            values = []
            for j in num_idx:
                try:
                    v = float(row[j])
                except ValueError:
                    raise RowError(line, f"column {header[j]!r}: cannot parse {row[j]!r} as a number") from None
                if not np.isfinite(v):
                    raise RowError(line, f"column {header[j]!r}: non-finite value {row[j]!r}")
                values.append(v)
            cat = canonical_category(row[cat_pos]) if row[cat_pos].strip() else None
            if cat is None:
                raise ValidationError(f"line {line}: unknown attack category {row[cat_pos]!r}")
            lab = row[lab_pos].strip()
            if lab not in ("0", "1"):
                raise RowError(line, f"label must be 0 or 1, got {row[lab_pos]!r}")
            if (cat == "Normal") != (lab == "0"):
                raise RowError(line, f"attack category {cat!r} inconsistent with label {lab}")
            numeric.append(values)
            categorical.append([row[j].strip() for j in cat_idx])
            category.append(CLASS_NAMES.index(cat))
            label.append(int(lab))

    n = len(label)
    ds = RawDataset(
        schema=schema,
        numeric=np.array(numeric, dtype=np.float64).reshape(n, len(num_idx)),
        categorical=np.array(categorical, dtype=object).reshape(n, len(cat_idx)),
        category=np.array(category, dtype=np.int64),
        label=np.array(label, dtype=np.int64),
    )
    logger.info("loaded %d rows from %s: %s", n, path, ds.class_counts())
    return ds


# ---------------------------------------------------------------------------
# encoding


@dataclass
class CategoricalEncoder:
    columns: list[str]
    categories: list[list[str]]

    @classmethod
    def fit(cls, ds: RawDataset, rows=None) -> "CategoricalEncoder":
        rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
        if rows.size == 0:
            raise ValidationError("cannot fit an encoder on zero rows")
        cats = []
        for j in range(ds.categorical.shape[1]):
            # dict keeps first-appearance order
            cats.append(list(dict.fromkeys(ds.categorical[rows, j])))
        return cls(list(ds.schema.categorical), cats)

    @property
    def width(self) -> int:
        return sum(len(c) for c in self.categories)

    def transform(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((values.shape[0], self.width))
        offset = 0
        for j, cats in enumerate(self.categories):
            lookup = {c: i for i, c in enumerate(cats)}
            for r, v in enumerate(values[:, j]):
                i = lookup.get(v)
                if i is not None:
                    out[r, offset + i] = 1.0
            offset += len(cats)
        return out

    def decode(self, column: str, vector) -> str | None:
        cats = self.categories[self.columns.index(column)]
        vector = np.asarray(vector)
        hot = np.flatnonzero(vector == 1)
        return cats[int(hot[0])] if hot.size == 1 else None

    def feature_names(self) -> list[str]:
        return [f"{col}={c}" for col, cats in zip(self.columns, self.categories) for c in cats]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, rows=None) -> "Normalizer":
        rows = np.arange(X.shape[0]) if rows is None else np.asarray(rows)
        if rows.size == 0:
            raise ValidationError("cannot fit a normalizer on zero rows")
        sub = X[rows]
        return cls(sub.mean(axis=0), sub.std(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / (self.std + NORM_EPS)


def encode_categoricals(ds: RawDataset, fit_rows=None) -> CategoricalEncoder:
    return CategoricalEncoder.fit(ds, fit_rows)


def normalize(X: np.ndarray, fit_rows=None) -> tuple[np.ndarray, Normalizer]:
    norm = Normalizer.fit(X, fit_rows)
    return norm.transform(X), norm


@dataclass
class Preprocessor:
    """Fitted encoder + normalizer; turns raw records into a feature matrix."""

    encoder: CategoricalEncoder
    normalizer: Normalizer
    numeric_columns: list[str]

    @classmethod
    def fit(cls, ds: RawDataset, rows=None) -> "Preprocessor":
        return cls(CategoricalEncoder.fit(ds, rows), Normalizer.fit(ds.numeric, rows), list(ds.schema.numeric))

    def transform(self, ds: RawDataset) -> np.ndarray:
        if list(ds.schema.numeric) != self.numeric_columns or list(ds.schema.categorical) != self.encoder.columns:
            raise SchemaError("dataset schema differs from the one the preprocessor was fitted on")
        num = self.normalizer.transform(ds.numeric)
        return np.ascontiguousarray(np.hstack([num, self.encoder.transform(ds.categorical)]))

    @property
    def n_features(self) -> int:
        return len(self.numeric_columns) + self.encoder.width

    def feature_names(self) -> list[str]:
        return self.numeric_columns + self.encoder.feature_names()

    def to_dict(self) -> dict:
        return {
            "numeric_columns": self.numeric_columns,
            "categorical_columns": self.encoder.columns,
            "categories": self.encoder.categories,
        }

    @classmethod
    def from_dict(cls, d: dict, mean: np.ndarray, std: np.ndarray) -> "Preprocessor":
        return cls(
            CategoricalEncoder(list(d["categorical_columns"]), [list(c) for c in d["categories"]]),
            Normalizer(np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)),
            list(d["numeric_columns"]),
        )


@dataclass
class EncodedMatrix:
    X: np.ndarray
    y: np.ndarray  # integer class per row (0/1 in binary mode)
    label_mode: str
    feature_names: list[str] = field(default_factory=list)
    preprocessor: Preprocessor | None = None

    @property
    def n_classes(self) -> int:
        return 2 if self.label_mode == "binary" else len(CLASS_NAMES)

    @property
    def class_names(self) -> tuple[str, ...]:
        return BINARY_NAMES if self.label_mode == "binary" else CLASS_NAMES

    @property
    def targets(self) -> np.ndarray:
        """``(N, 1)`` 0/1 column in binary mode, ``(N, 10)`` one-hot otherwise."""
        return label_targets(self.y, self.label_mode)

    def __len__(self) -> int:
        return self.X.shape[0]


def label_targets(y: np.ndarray, label_mode: str) -> np.ndarray:
    if label_mode == "binary":
        return y.astype(np.float64).reshape(-1, 1)
    return np.eye(len(CLASS_NAMES))[y]


# ---------------------------------------------------------------------------
# balancing and splitting


def balance_indices(y: np.ndarray, n_classes: int, rng: np.random.Generator, class_names: Sequence[str] | None = None) -> np.ndarray:
    """Row indices with every class oversampled (with replacement) to the majority count.

    Input that is already balanced comes back unchanged and consumes no
    randomness.
    """
    y = np.asarray(y)
    counts = np.bincount(y, minlength=n_classes)[:n_classes]
    for c in np.flatnonzero(counts == 0):
        name = class_names[c] if class_names is not None else str(c)
        raise ValidationError(f"class {name!r} has no instances; cannot balance")
    target = counts.max()
    base = np.arange(y.size)
    if np.all(counts == target):
        return base
    extra = [rng.choice(np.flatnonzero(y == c), size=target - counts[c], replace=True) for c in range(n_classes) if counts[c] < target]
    return np.concatenate([base, *extra])


def balance_classes(ds: RawDataset, label_mode: str, rng: np.random.Generator) -> RawDataset:
    names = BINARY_NAMES if label_mode == "binary" else CLASS_NAMES
    return ds.subset(balance_indices(ds.targets(label_mode), len(names), rng, names))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_indices(
    n: int, test_fraction: float, rng: np.random.Generator, strata: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted (train, test) index arrays covering ``range(n)``.

    With ``strata`` each group contributes ``round(count * test_fraction)``
    rows to the test side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise UsageError(f"test fraction must lie strictly between 0 and 1, got {test_fraction}")
    if strata is None:
        perm = rng.permutation(n)
        n_test = _round_half_up(n * test_fraction)
        test = perm[:n_test]
    else:
        strata = np.asarray(strata)
        if strata.size != n:
            raise UsageError(f"strata has {strata.size} entries for {n} rows")
        parts = []
        for s in np.unique(strata):
            members = np.flatnonzero(strata == s)
            members = members[rng.permutation(members.size)]
            parts.append(members[: _round_half_up(members.size * test_fraction)])
        test = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    mask[test] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def split(ds: RawDataset, test_fraction: float, rng: np.random.Generator, stratified: bool = True):
    train, test = split_indices(len(ds), test_fraction, rng, ds.category if stratified else None)
    return ds.subset(train), ds.subset(test)


# ---------------------------------------------------------------------------
# end-to-end preparation


@dataclass
class PreparedData:
    train: EncodedMatrix
    test: EncodedMatrix
    preprocessor: Preprocessor
    train_index: np.ndarray  # rows of the raw dataset, duplicates where oversampled
    test_index: np.ndarray


def prepare(
    raw: RawDataset,
    label_mode: str = "binary",
    test_fraction: float = 0.3,
    seed: int = 0,
    stratified: bool = True,
    balance: bool = True,
) -> PreparedData:
    """Split, fit encoders on the training rows, balance the training rows, encode.

    The test split is never balanced. Every random draw comes from one
    generator seeded with ``seed``: first the split, then the oversampling.
    """
    if label_mode not in LABEL_MODES:
        raise UsageError(f"unknown label mode {label_mode!r}; expected one of {LABEL_MODES}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = split_indices(len(raw), test_fraction, rng, raw.category if stratified else None)
    pre = Preprocessor.fit(raw, train_idx)
    if balance:
        names = BINARY_NAMES if label_mode == "binary" else CLASS_NAMES
        y_train = raw.targets(label_mode)[train_idx]
        train_idx = train_idx[balance_indices(y_train, len(names), rng, names)]
    return PreparedData(
        train=encode(raw, train_idx, pre, label_mode),
        test=encode(raw, test_idx, pre, label_mode),
        preprocessor=pre,
        train_index=train_idx,
        test_index=test_idx,
    )


def encode(raw: RawDataset, rows, pre: Preprocessor, label_mode: str) -> EncodedMatrix:
    sub = raw.subset(rows)
    X = pre.transform(sub)
    if not np.all(np.isfinite(X)):
        raise ValidationError("encoding produced non-finite values")
    return EncodedMatrix(X, sub.targets(label_mode), label_mode, pre.feature_names(), pre)


# ---------------------------------------------------------------------------
# binary matrix files


def save_matrix(path, X: np.ndarray) -> None:
    X = np.asarray(X, dtype="<f8")
    if X.ndim != 2:
        raise UsageError(f"only 2-d matrices can be saved, got shape {X.shape}")
    with open(path, "wb") as f:
        f.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, X.shape[0], X.shape[1]))
        f.write(np.ascontiguousarray(X).tobytes())


def load_matrix(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _MATRIX_HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, version, n, f = _MATRIX_HEADER.unpack_from(blob)
    if magic != MATRIX_MAGIC:
        raise IntegrityError(f"{path}: not an encoded-matrix file")
    if version != MATRIX_VERSION:
        raise VersionError(f"{path}: unsupported matrix version {version}")
    expected = _MATRIX_HEADER.size + 8 * n * f
    if len(blob) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f8", offset=_MATRIX_HEADER.size).astype(np.float64).reshape(n, f)

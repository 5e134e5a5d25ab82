"""Dataset schema, CSV ingestion, temporal splitting, census joining,
postal-region mapping, and the seeded synthetic generator.

A dataset row is one credit applicant: an opaque id, a reference date, ten
named numeric features (age, eight behavioral aggregates, and the 3-digit
postal prefix ``cep3``), and a binary default label (1 = default).
"""
from __future__ import annotations

import csv
import datetime as dt
import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

CEP3_MIN = 0
CEP3_MAX = 999

REGIONS = ("North", "Northeast", "Central-West", "Southeast", "South")

#: canonical feature order: age, eight behavioral aggregates, postal prefix
DEFAULT_SCHEMA = (
    "age",
    "beh_1",
    "beh_2",
    "beh_3",
    "beh_4",
    "beh_5",
    "beh_6",
    "beh_7",
    "beh_8",
    "cep3",
)

GEO_FEATURE = "cep3"
WHITENESS_FEATURE = "not_white_prop"

_INT_COLUMNS = frozenset({GEO_FEATURE})


@dataclass(frozen=True)
class ExampleRow:
    """One applicant: id, reference date, named features, default label."""

    id: str
    ref_date: dt.date
    features: dict[str, float]
    label: int


@dataclass
class Dataset:
    """Column-oriented table of applicants sharing one feature schema.

    Arrays are treated as immutable after construction; derived datasets
    (splits, joins) copy rather than alias mutated columns.
    """

    ids: np.ndarray           # shape (n,), unicode
    ref_dates: np.ndarray     # shape (n,), datetime64[D]
    X: np.ndarray             # shape (n, F), float64
    y: np.ndarray             # shape (n,), int64, values in {0, 1}
    schema: tuple[str, ...]
    provenance: str = "ingested"

    def __post_init__(self) -> None:
        self.schema = tuple(self.schema)
        n = len(self.ids)
        if self.X.shape != (n, len(self.schema)) or self.y.shape != (n,):
            raise DataError("dataset arrays disagree on shape")
        if len(np.unique(self.ids)) != n:
            raise DataError("duplicate ids in dataset")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise DataError("labels must be 0 or 1")
        if not np.all(np.isfinite(self.X)):
            raise DataError("non-finite feature value")
        if n and GEO_FEATURE in self.schema:
            cep = self.feature_column(GEO_FEATURE)
            if np.any(cep != np.floor(cep)) or cep.min() < CEP3_MIN or cep.max() > CEP3_MAX:
                raise DataError(f"cep3 out of range [{CEP3_MIN},{CEP3_MAX}]")
        if n and "age" in self.schema and self.feature_column("age").min() <= 0:
            raise DataError("age must be positive")

    @property
    def n_rows(self) -> int:
        return len(self.ids)

    def feature_index(self, name: str) -> int:
        try:
            return self.schema.index(name)
        except ValueError:
            raise DataError(f"feature {name!r} not in schema {self.schema}") from None

    def feature_column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_index(name)]

    def row(self, i: int) -> ExampleRow:
        date = self.ref_dates[i].astype("datetime64[D]").astype(dt.date)
        feats = {name: float(v) for name, v in zip(self.schema, self.X[i])}
        return ExampleRow(str(self.ids[i]), date, feats, int(self.y[i]))

    def rows(self) -> Iterator[ExampleRow]:
        return (self.row(i) for i in range(self.n_rows))

    def take(self, index: np.ndarray) -> "Dataset":
        """Row subset (boolean mask or integer index), order preserving."""
        return Dataset(
            ids=self.ids[index].copy(),
            ref_dates=self.ref_dates[index].copy(),
            X=self.X[index].copy(),
            y=self.y[index].copy(),
            schema=self.schema,
            provenance=self.provenance,
        )


@dataclass
class CensusTable:
    """Map cep3 -> self-declared not-white proportion, optional fallback."""

    entries: dict[int, float]
    fallback: float | None = None

    def __post_init__(self) -> None:
        for code, p in self.entries.items():
            if not (CEP3_MIN <= int(code) <= CEP3_MAX):
                raise DataError(f"census cep3 {code} out of range")
            if not (0.0 <= p <= 1.0):
                raise DataError(f"census proportion {p} for cep3 {code} outside [0,1]")
        if self.fallback is not None and not (0.0 <= self.fallback <= 1.0):
            raise DataError("census fallback outside [0,1]")

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Vector lookup; fallback fills gaps (with a warning) when set."""
        out = np.empty(len(codes), dtype=np.float64)
        missing: list[int] = []
        for i, c in enumerate(codes):
            v = self.entries.get(int(c))
            if v is None:
                missing.append(int(c))
                v = self.fallback if self.fallback is not None else math.nan
            out[i] = v
        if missing:
            unique_missing = sorted(set(missing))
            if self.fallback is None:
                raise DataError(
                    "census has no entry and no fallback for cep3 codes: "
                    + ", ".join(map(str, unique_missing))
                )
            warnings.warn(
                f"census fallback {self.fallback} used for {len(unique_missing)} cep3 code(s): "
                + ", ".join(map(str, unique_missing[:10]))
                + ("..." if len(unique_missing) > 10 else ""),
                stacklevel=2,
            )
        return out


@dataclass
class RegionMapping:
    """Disjoint cep3 ranges covering [0, 999], each tagged with a macro-region."""

    ranges: tuple[tuple[int, int, str], ...]
    source: str = ""
    _lookup: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        lookup = np.full(CEP3_MAX + 1, "", dtype=object)
        for lo, hi, region in self.ranges:
            if region not in REGIONS:
                raise DataError(f"unknown macro-region {region!r}")
            if not (CEP3_MIN <= lo <= hi <= CEP3_MAX):
                raise DataError(f"bad cep3 range [{lo},{hi}]")
            if np.any(lookup[lo : hi + 1] != ""):
                raise DataError(f"overlapping cep3 ranges at [{lo},{hi}]")
            lookup[lo : hi + 1] = region
        if np.any(lookup == ""):
            gaps = np.nonzero(lookup == "")[0]
            raise DataError(f"region mapping leaves cep3 {gaps[0]} uncovered")
        self._lookup = lookup

    def region_of(self, cep3: int) -> str:
        if not (CEP3_MIN <= cep3 <= CEP3_MAX):
            raise DataError(f"cep3 {cep3} out of range [{CEP3_MIN},{CEP3_MAX}]")
        return str(self._lookup[cep3])

    def regions_of(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < CEP3_MIN or codes.max() > CEP3_MAX):
            raise DataError("cep3 out of range in region lookup")
        return self._lookup[codes]


def region_of_cep3(cep3: int, mapping: RegionMapping) -> str:
    """Macro-region whose cep3 range contains the code."""
    return mapping.region_of(cep3)


def default_region_mapping() -> RegionMapping:
    """Bundled mapping at cep3 granularity, built from the public postal
    range allocation (first digits 6 and 7 straddle two macro-regions)."""
    ref = resources.files(__package__).joinpath("regions_default.csv")
    with ref.open("r", encoding="utf-8") as fh:
        return _read_region_mapping(fh, source="bundled default")


def load_region_mapping(path) -> RegionMapping:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return _read_region_mapping(fh, source=str(path))


def _read_region_mapping(fh, source: str) -> RegionMapping:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != ["cep3_lo", "cep3_hi", "region"]:
        raise DataError(f"region mapping {source}: expected header cep3_lo,cep3_hi,region")
    ranges = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            ranges.append((int(row[0]), int(row[1]), row[2]))
        except (ValueError, IndexError) as exc:
            raise DataError(f"region mapping {source}: bad row at line {lineno}") from exc
    return RegionMapping(tuple(ranges), source=source)


def write_region_mapping(mapping: RegionMapping, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cep3_lo", "cep3_hi", "region"])
        for lo, hi, region in mapping.ranges:
            writer.writerow([lo, hi, region])


# ---------------------------------------------------------------------------
# CSV ingestion / emission


def _parse_number(cell: str, column: str, lineno: int) -> float:
    if cell == "":
        raise DataError(f"line {lineno}: empty cell in column {column!r} (missing values unsupported)")
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric value {cell!r} in column {column!r}") from None


def load_dataset(path, schema: Sequence[str] = DEFAULT_SCHEMA) -> Dataset:
    """Parse a dataset CSV with header ``id,ref_date,<schema...>,label``.

    Errors carry 1-based line numbers. Rejects unknown/misordered columns,
    duplicate ids, empty cells, and out-of-range cep3/age/label values.
    """
    schema = tuple(schema)
    expected_header = ["id", "ref_date", *schema, "label"]
    ids: list[str] = []
    dates: list[np.datetime64] = []
    feats: list[list[float]] = []
    labels: list[int] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no header")
        if header != expected_header:
            unknown = [c for c in header if c not in expected_header]
            if unknown:
                raise DataError(f"{path}: unknown column(s) {unknown}")
            raise DataError(
                f"{path}: header mismatch: expected {expected_header}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise DataError(f"line {lineno}: expected {len(expected_header)} fields, got {len(row)}")
            rid = row[0]
            if rid == "":
                raise DataError(f"line {lineno}: empty id")
            if rid in seen:
                raise DataError(f"line {lineno}: duplicate id {rid!r}")
            seen.add(rid)
            try:
                date = dt.date.fromisoformat(row[1])
            except ValueError:
                raise DataError(f"line {lineno}: bad ref_date {row[1]!r} (expected YYYY-MM-DD)") from None
            values = [_parse_number(cell, col, lineno) for cell, col in zip(row[2:-1], schema)]
            for col, v in zip(schema, values):
                if col == GEO_FEATURE and not (v == int(v) and CEP3_MIN <= v <= CEP3_MAX):
                    raise DataError(f"line {lineno}: cep3 out of range [{CEP3_MIN},{CEP3_MAX}]")
                if col == "age" and v <= 0:
                    raise DataError(f"line {lineno}: age must be positive")
            label_f = _parse_number(row[-1], "label", lineno)
            if label_f not in (0.0, 1.0):
                raise DataError(f"line {lineno}: label must be 0 or 1")
            ids.append(rid)
            dates.append(np.datetime64(date))
            feats.append(values)
            labels.append(int(label_f))
    n = len(ids)
    return Dataset(
        ids=np.array(ids, dtype=object),
        ref_dates=np.array(dates, dtype="datetime64[D]"),
        X=np.array(feats, dtype=np.float64).reshape(n, len(schema)),
        y=np.array(labels, dtype=np.int64),
        schema=schema,
        provenance="ingested",
    )


def format_number(v: float) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    f = float(v)
    if f == int(f) and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "ref_date", *ds.schema, "label"])
        dates = ds.ref_dates.astype("datetime64[D]").astype(str)
        for i in range(ds.n_rows):
            writer.writerow(
                [ds.ids[i], dates[i], *(format_number(v) for v in ds.X[i]), int(ds.y[i])]
            )


def load_census(path) -> CensusTable:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["cep3", "not_white_prop"]:
            raise DataError(f"{path}: expected header cep3,not_white_prop")
        entries: dict[int, float] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                code = int(row[0])
                prop = float(row[1])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: bad census row at line {lineno}") from exc
            if code in entries:
                raise DataError(f"{path}: duplicate cep3 {code} at line {lineno}")
            entries[code] = prop
    return CensusTable(entries)


def write_census(census: CensusTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cep3", "not_white_prop"])
        for code in sorted(census.entries):
            writer.writerow([code, format_number(census.entries[code])])


# ---------------------------------------------------------------------------
# Splitting and joining


def temporal_split(ds: Dataset, cutoff: dt.date) -> tuple[Dataset, Dataset]:
    """Partition rows: ref_date strictly before the cutoff goes to train."""
    mask = ds.ref_dates < np.datetime64(cutoff)
    if not mask.any():
        warnings.warn(f"temporal split at {cutoff}: train side is empty", stacklevel=2)
    if mask.all():
        warnings.warn(f"temporal split at {cutoff}: eval side is empty", stacklevel=2)
    return ds.take(mask), ds.take(~mask)


def join_whiteness(ds: Dataset, census: CensusTable) -> Dataset:
    """Replace the cep3 column with the census not-white proportion.

    Schema position, row order, ids, labels, and every other feature are
    preserved bit-exactly.
    """
    idx = ds.feature_index(GEO_FEATURE)
    codes = ds.X[:, idx].astype(np.int64)
    props = census.lookup(codes)
    X = ds.X.copy()
    X[:, idx] = props
    schema = list(ds.schema)
    schema[idx] = WHITENESS_FEATURE
    return Dataset(
        ids=ds.ids.copy(),
        ref_dates=ds.ref_dates.copy(),
        X=X,
        y=ds.y.copy(),
        schema=tuple(schema),
        provenance=ds.provenance,
    )


# ---------------------------------------------------------------------------
# Synthetic generator

#: 2010-census not-white proportion by macro-region, and its national mean.
REGION_NOT_WHITE = {
    "North": 0.764,
    "Northeast": 0.712,
    "Central-West": 0.585,
    "Southeast": 0.433,
    "South": 0.215,
}
NATIONAL_NOT_WHITE = 0.52

#: sampling weight per leading cep3 digit; the Sao Paulo ranges (0xx, 1xx)
#: are deliberately overrepresented, mirroring market-style credit data.
_DIGIT_WEIGHTS = np.array([0.22, 0.20, 0.09, 0.09, 0.06, 0.05, 0.05, 0.06, 0.09, 0.09])

_WAVE_AMPLITUDE = 0.055
_WAVE_PERIOD = 137.0

# label model coefficients (log-odds scale)
_BETA_LATENT = 1.15
_BETA_AGE = 0.45
_BEH_LOADINGS = np.array([0.55, 0.45, 0.62, -0.35, 0.50, 0.30, -0.68, 0.40])
_BEH_LOGNORMAL = (1, 3, 5, 7)  # beh_2, beh_4, beh_6, beh_8


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the planted geography -> race -> default linkage.

    ``geo_race_strength`` scales how steeply the synthetic census varies
    along the spatial gradient; ``race_default_strength`` is the log-odds
    coefficient coupling the not-white proportion to default risk.
    ``train_weight``, when set, is the probability a row's reference date
    falls before the split cutoff (dates uniform within each side);
    ``train_rate``/``eval_rate`` allow per-side default-rate targets.
    """

    n_rows: int
    base_default_rate: float = 0.345
    geo_race_strength: float = 1.0
    race_default_strength: float = 2.5
    noise_scale: float = 0.9
    seed: int = 0
    date_start: dt.date = dt.date(2017, 4, 1)
    date_end: dt.date = dt.date(2018, 3, 31)
    split_cutoff: dt.date = dt.date(2018, 1, 1)
    train_weight: float | None = None
    train_rate: float | None = None
    eval_rate: float | None = None
    census_jitter: float = 0.02

    def __post_init__(self) -> None:
        if self.n_rows <= 0:
            raise ConfigError("n_rows must be positive")
        if not (0.0 < self.base_default_rate < 1.0):
            raise ConfigError("base_default_rate must be in (0,1)")
        if self.noise_scale <= 0:
            raise ConfigError("noise_scale must be positive")
        if self.census_jitter < 0:
            raise ConfigError("census_jitter must be >= 0")
        if self.date_start > self.date_end:
            raise ConfigError("date_start after date_end")
        if self.train_weight is not None:
            if not (0.0 < self.train_weight < 1.0):
                raise ConfigError("train_weight must be in (0,1)")
            if not (self.date_start < self.split_cutoff <= self.date_end):
                raise ConfigError("split_cutoff outside date range")
        for name in ("train_rate", "eval_rate"):
            v = getattr(self, name)
            if v is not None and not (0.0 < v < 1.0):
                raise ConfigError(f"{name} must be in (0,1)")


def synth_census(cfg: SynthConfig, mapping: RegionMapping | None = None) -> CensusTable:
    """Synthetic census over all 1000 cep3 codes.

    Regional base levels follow the 2010-census macro-region proportions; a
    smooth within-region wave plus per-code jitter are scaled into [0,1].
    """
    mapping = mapping if mapping is not None else default_region_mapping()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 11])))
    codes = np.arange(CEP3_MIN, CEP3_MAX + 1)
    base = np.array([REGION_NOT_WHITE[r] for r in mapping.regions_of(codes)])
    wave = _WAVE_AMPLITUDE * np.sin(2.0 * np.pi * codes / _WAVE_PERIOD)
    jitter = rng.normal(0.0, cfg.census_jitter, codes.size) if cfg.census_jitter > 0 else 0.0
    props = NATIONAL_NOT_WHITE + cfg.geo_race_strength * (base - NATIONAL_NOT_WHITE + wave) + jitter
    props = np.clip(props, 0.005, 0.995)
    return CensusTable({int(c): float(p) for c, p in zip(codes, props)})


def _calibrate_labels(raw: np.ndarray, target: float, uniforms: np.ndarray) -> tuple[np.ndarray, float]:
    """Find the intercept whose thresholded labels hit the target rate.

    The realized rate is monotone in the intercept; bisection lands within
    1/n of the target. Probabilities are sigmoid(intercept + raw) and labels
    come from thresholding against the supplied uniforms.
    """
    def rate(c: float) -> float:
        return float(np.mean(uniforms < _sigmoid(raw + c)))

    lo, hi = -40.0, 40.0
    if rate(lo) > target or rate(hi) < target:
        raise DataError("unreachable base default rate for given coefficients")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    c = lo if abs(rate(lo) - target) < abs(rate(hi) - target) else hi
    if abs(rate(c) - target) > max(2.0 / len(raw), 1e-6):
        raise DataError("default-rate calibration failed to converge")
    labels = (uniforms < _sigmoid(raw + c)).astype(np.int64)
    return labels, c


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def generate_synthetic(cfg: SynthConfig) -> tuple[Dataset, CensusTable]:
    """Seeded synthetic dataset plus its census table.

    Default log-odds are a sum of behavioral signal, an age effect, the
    planted ``race_default_strength * not_white_prop(cep3)`` term, and
    noise; the intercept is calibrated so the realized default rate matches
    the configured target (per side when side targets are given). Output is
    a pure function of the config.
    """
    census = synth_census(cfg)
    seq = np.random.SeedSequence([cfg.seed, 23])
    rng_cep, rng_date, rng_feat, rng_noise, rng_label = (
        np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(5)
    )
    n = cfg.n_rows

    digits = rng_cep.choice(10, size=n, p=_DIGIT_WEIGHTS)
    cep3 = digits * 100 + rng_cep.integers(0, 100, size=n)

    start = np.datetime64(cfg.date_start)
    cutoff = np.datetime64(cfg.split_cutoff)
    end = np.datetime64(cfg.date_end)
    if cfg.train_weight is None:
        total_days = int((end - start).astype(int)) + 1
        dates = start + rng_date.integers(0, total_days, size=n)
        train_side = dates < cutoff
    else:
        train_side = rng_date.random(n) < cfg.train_weight
        train_days = int((cutoff - start).astype(int))
        eval_days = int((end - cutoff).astype(int)) + 1
        offsets = np.where(
            train_side,
            rng_date.integers(0, train_days, size=n),
            train_days + rng_date.integers(0, eval_days, size=n),
        )
        dates = start + offsets

    latent = rng_feat.normal(0.0, 1.0, size=n)
    age = np.clip(rng_feat.normal(42.0, 13.0, size=n), 18.0, 90.0)
    beh = np.empty((n, 8))
    for j, a in enumerate(_BEH_LOADINGS):
        z = a * latent + math.sqrt(1.0 - a * a) * rng_feat.normal(0.0, 1.0, size=n)
        beh[:, j] = np.exp(0.6 * z) if j in _BEH_LOGNORMAL else z

    nwp_by_code = np.array([census.entries[c] for c in range(CEP3_MIN, CEP3_MAX + 1)])
    raw = (
        _BETA_LATENT * latent
        + _BETA_AGE * (42.0 - age) / 13.0
        + cfg.race_default_strength * nwp_by_code[cep3]
        + cfg.noise_scale * rng_noise.normal(0.0, 1.0, size=n)
    )

    uniforms = rng_label.random(n)
    y = np.empty(n, dtype=np.int64)
    if cfg.train_rate is not None or cfg.eval_rate is not None:
        train_target = cfg.train_rate if cfg.train_rate is not None else cfg.base_default_rate
        eval_target = cfg.eval_rate if cfg.eval_rate is not None else cfg.base_default_rate
        for side, target in ((train_side, train_target), (~train_side, eval_target)):
            if side.any():
                y[side], _ = _calibrate_labels(raw[side], target, uniforms[side])
    else:
        y, _ = _calibrate_labels(raw, cfg.base_default_rate, uniforms)

    X = np.column_stack([age, beh, cep3.astype(np.float64)])
    ids = np.array([f"synth-{i:06d}" for i in range(n)], dtype=object)
    ds = Dataset(
        ids=ids,
        ref_dates=dates.astype("datetime64[D]"),
        X=X,
        y=y,
        schema=DEFAULT_SCHEMA,
        provenance="synthetic",
    )
    return ds, census

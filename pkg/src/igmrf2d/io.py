"""Data ingestion, configuration files and chain persistence.

Formats:

* data CSV: UTF-8, comma separated, header row; floats written with 17
  significant digits and parsed with pandas' round-trip parser, so numeric
  fields survive ingest -> write -> ingest unchanged.
* chain directory: ``scalars.csv`` (one column per scalar parameter, one row
  per stored draw, 17 significant digits), ``u_<level>.npy`` (raw float64
  arrays, iteration x unit x T^2) and ``manifest.json``.  Nothing time- or
  host-dependent is written, so reruns are byte-identical.
* config: INI file with flat sections, echoed verbatim into the manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .errors import ConfigurationError, MappingError, ValidationError
from .gmrf import GridSpec
from .mcmc import SCALAR_KEYS, ChainConfig, ChainOutput
from .model import LEVELS, Dataset, HierarchyMap
from .sim import SimDesign

REQUIRED_COLUMNS = ("study_id", "country", "region", "super_region", "year", "age_mid", "sex",
                    "mean_dbp", "sd_dbp", "mean_sbp", "sd_sbp", "mean_int", "sd_int", "n")
HIERARCHY_COLUMNS = ("country", "region", "super_region")
FLOAT_FORMAT = "%.17g"
MANIFEST = "manifest.json"
SCALARS = "scalars.csv"


@dataclasses.dataclass(frozen=True)
class RowIssue:
    row: int  # 1-based data row (header excluded)
    message: str

    def __str__(self) -> str:
        return f"row {self.row}: {self.message}"


class SchemaError(ValidationError):
    """Input file violates the data schema; ``issues`` lists every offending row."""

    def __init__(self, path, issues: list[RowIssue]):
        self.issues = issues
        shown = "\n  ".join(str(i) for i in issues[:20])
        more = f"\n  ... and {len(issues) - 20} more" if len(issues) > 20 else ""
        super().__init__(f"{path}: {len(issues)} invalid row(s)\n  {shown}{more}")


@dataclasses.dataclass
class IngestReport:
    n_rows: int
    T: int
    year_origin: int
    flagged: list[RowIssue]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip", dtype={"study_id": str, "country": str,
                                                                      "region": str, "super_region": str,
                                                                      "sex": str},
                           keep_default_na=True, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise ValidationError(f"{path}: file is empty") from exc


def read_hierarchy_csv(path) -> list[tuple[str, str, str]]:
    df = _read_csv(path)
    missing = [c for c in HIERARCHY_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {missing}")
    return [tuple(str(v) for v in r) for r in df[list(HIERARCHY_COLUMNS)].itertuples(index=False)]


def _hierarchy(rows: list[tuple[str, str, str]]) -> HierarchyMap:
    seen: dict[str, tuple[str, str]] = {}
    for c, r, s in rows:
        if c in seen and seen[c] != (r, s):
            raise MappingError(f"country {c!r} assigned to both {seen[c]} and {(r, s)}")
        seen[c] = (r, s)
    return HierarchyMap.from_rows([(c, r, s) for c, (r, s) in seen.items()])


def ingest_csv(path, T: int | None = None, year_origin: int | None = None,
               hierarchy_path=None) -> tuple[Dataset, IngestReport]:
    """Read a study-level CSV into a Dataset.

    Calendar years map to 1..T with ``year_origin`` (default: the earliest
    year) becoming 1; T defaults to the observed span.  A year outside 1..T is
    an error.  Every malformed row is reported, not only the first.
    """
    df = _read_csv(path)
    if df.empty:
        raise ValidationError(f"{path}: no data rows")
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {missing}")
    cov_cols = [c for c in df.columns if c.startswith("cov_")]
    unknown = [c for c in df.columns if c not in REQUIRED_COLUMNS and c not in cov_cols]

    issues: list[RowIssue] = []
    numeric = ["year", "age_mid", "mean_dbp", "sd_dbp", "mean_sbp", "sd_sbp", "mean_int",
               "sd_int", "n", *cov_cols]
    num = df[numeric].apply(pd.to_numeric, errors="coerce")
    for i in range(len(df)):
        row = i + 1
        raw = df.iloc[i]
        for col in ("study_id", "country", "region", "super_region", "sex"):
            if pd.isna(raw[col]) or str(raw[col]).strip() == "":
                issues.append(RowIssue(row, f"{col} is empty"))
        for col in numeric:
            if pd.isna(num.at[i, col]) and not pd.isna(raw[col]):
                issues.append(RowIssue(row, f"{col}={raw[col]!r} is not numeric"))
        for col in ("year", "age_mid", "mean_dbp", "sd_dbp", "mean_sbp", "sd_sbp", "n", *cov_cols):
            if pd.isna(raw[col]):
                issues.append(RowIssue(row, f"{col} is missing"))
        y, n = num.at[i, "year"], num.at[i, "n"]
        if not pd.isna(y) and y != int(y):
            issues.append(RowIssue(row, f"year={y} is not an integer"))
        if not pd.isna(n) and (n != int(n) or n < 1):
            issues.append(RowIssue(row, f"n={n} must be a positive integer"))
        for m, s in (("mean_dbp", "sd_dbp"), ("mean_sbp", "sd_sbp"), ("mean_int", "sd_int")):
            sd = num.at[i, s]
            if pd.isna(num.at[i, m]):
                continue
            if pd.isna(sd):
                if m == "mean_int":
                    issues.append(RowIssue(row, "sd_int is missing while mean_int is present"))
                continue
            if not sd > 0:
                issues.append(RowIssue(row, f"{s}={sd} must be > 0"))
    if issues:
        raise SchemaError(path, issues)

    years = num["year"].astype(int).to_numpy()
    origin = int(years.min()) if year_origin is None else int(year_origin)
    idx = years - origin + 1
    T = int(years.max() - origin + 1) if T is None else int(T)
    bad = np.flatnonzero((idx < 1) | (idx > T))
    if bad.size:
        raise SchemaError(path, [RowIssue(int(r) + 1, f"year {years[r]} is outside "
                                 f"{origin}..{origin + T - 1} (T={T})") for r in bad])

    rows = read_hierarchy_csv(hierarchy_path) if hierarchy_path is not None else []
    rows += [tuple(str(v) for v in r)
             for r in df[list(HIERARCHY_COLUMNS)].itertuples(index=False)]
    hierarchy = _hierarchy(rows)

    y = num[["mean_dbp", "mean_sbp", "mean_int"]].to_numpy(dtype=float)
    sd = num[["sd_dbp", "sd_sbp", "sd_int"]].to_numpy(dtype=float)
    sd[np.isnan(y)] = np.nan
    dataset = Dataset(
        study_id=df["study_id"].astype(str).to_numpy(dtype=object),
        country=np.array([hierarchy.country_index(c) for c in df["country"].astype(str)], dtype=int),
        year=idx.astype(int),
        age=num["age_mid"].to_numpy(dtype=float),
        sex=df["sex"].astype(str).to_numpy(dtype=object),
        y=y, sd=sd,
        n=num["n"].astype(int).to_numpy(),
        X=num[cov_cols].to_numpy(dtype=float).reshape(len(df), len(cov_cols)),
        hierarchy=hierarchy, grid=GridSpec(T),
        covariate_names=tuple(cov_cols),
    )
    flagged = [RowIssue(0, f"unknown column {c!r} ignored") for c in unknown]
    return dataset, IngestReport(dataset.N, T, origin, flagged)


def dataset_frame(dataset: Dataset, year_origin: int = 1) -> pd.DataFrame:
    h = dataset.hierarchy
    r = h.country_region[dataset.country]
    df = pd.DataFrame({
        "study_id": dataset.study_id.astype(str),
        "country": [h.countries[c] for c in dataset.country],
        "region": [h.regions[i] for i in r],
        "super_region": [h.super_regions[s] for s in h.region_super[r]],
        "year": dataset.year + year_origin - 1,
        "age_mid": dataset.age,
        "sex": dataset.sex.astype(str),
        "mean_dbp": dataset.y[:, 0], "sd_dbp": dataset.sd[:, 0],
        "mean_sbp": dataset.y[:, 1], "sd_sbp": dataset.sd[:, 1],
        "mean_int": dataset.y[:, 2], "sd_int": dataset.sd[:, 2],
        "n": dataset.n,
    })
    for k, name in enumerate(dataset.covariate_names):
        df[name if name.startswith("cov_") else f"cov_{name}"] = dataset.X[:, k]
    return df


def write_dataset_csv(dataset: Dataset, path, year_origin: int = 1) -> None:
    dataset_frame(dataset, year_origin).to_csv(path, index=False, float_format=FLOAT_FORMAT,
                                               encoding="utf-8", lineterminator="\n")


def write_hierarchy_csv(hierarchy: HierarchyMap, path) -> None:
    pd.DataFrame(hierarchy.rows(), columns=list(HIERARCHY_COLUMNS)).to_csv(
        path, index=False, encoding="utf-8", lineterminator="\n")


# ---------------------------------------------------------------- config

def _coerce(value: str, default: Any, name: str):
    v = value.strip()
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[v.lower()]
        if isinstance(default, int):
            return int(v)
        if isinstance(default, float):
            return float(v)
        if isinstance(default, tuple):
            if not v or v.lower() == "none":
                return None
            items = [s.strip() for s in v.split(",")]
            if default and isinstance(default[0], str):
                return tuple(items)
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return tuple(int(s) for s in items)
            return tuple(float(s) for s in items)
        if default is None:
            return None if v.lower() == "none" else float(v)
        return v
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"cannot parse {name} = {value!r}") from exc


def _fill(cls, section: configparser.SectionProxy | None, skip=(), hints=None) -> dict:
    if section is None:
        return {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in section.items():
        if key in skip:
            continue
        if key not in fields:
            raise ConfigurationError(f"unknown option [{section.name}] {key}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        default = (hints or {}).get(key, default)
        out[key] = _coerce(value, default, f"[{section.name}] {key}")
    return out


@dataclasses.dataclass
class RunConfig:
    """Parsed INI configuration plus its verbatim text."""

    chain: ChainConfig = dataclasses.field(default_factory=ChainConfig)
    design: SimDesign = dataclasses.field(default_factory=SimDesign)
    T: int | None = None
    year_origin: int | None = None
    folds: int = 5
    seeds: tuple[int, ...] = (0,)
    chains: int = 1
    jobs: int = 1
    text: str = ""


def parse_config(text: str) -> RunConfig:
    """Sections: [chain], [proposal_sd], [simulation], [grid], [crossval], [run]."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    known = {"chain", "proposal_sd", "simulation", "grid", "crossval", "run"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigurationError(f"unknown config section(s) {sorted(extra)}")
    get = lambda s: cp[s] if cp.has_section(s) else None  # noqa: E731
    chain_kw = _fill(ChainConfig, get("chain"), skip=("proposal_sd",))
    if cp.has_section("proposal_sd"):
        chain_kw["proposal_sd"] = {k: _coerce(v, 0.0, f"[proposal_sd] {k}")
                                   for k, v in cp["proposal_sd"].items()}
    design_kw = _fill(SimDesign, get("simulation"), skip=("regions", "extra_singleton"),
                      hints={"years_observed": (0,)})
    rc = RunConfig(text=text)
    try:
        rc.chain = ChainConfig(**chain_kw)
        rc.design = SimDesign(**design_kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    for sec, keys in (("grid", {"T": int, "year_origin": int}),
                      ("crossval", {"folds": int, "seeds": tuple}),
                      ("run", {"chains": int, "jobs": int})):
        if not cp.has_section(sec):
            continue
        for k, v in cp[sec].items():
            if k not in keys:
                raise ConfigurationError(f"unknown option [{sec}] {k}")
            if keys[k] is tuple:
                setattr(rc, k, _coerce(v, (0,), f"[{sec}] {k}"))
            else:
                setattr(rc, k, _coerce(v, 0, f"[{sec}] {k}"))
    return rc


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- chains

def _column_names(key: str, shape: tuple[int, ...]) -> list[str]:
    if not shape:
        return [key]
    return [f"{key}[{','.join(map(str, ix))}]" for ix in np.ndindex(*shape)]


def scalar_columns(output: ChainOutput) -> tuple[list[str], np.ndarray]:
    """(column names, (S, P) matrix) of every non-surface parameter."""
    names, blocks = [], []
    S = output.n_stored
    for key in SCALAR_KEYS:
        arr = output.draws[key]
        names += _column_names(key, arr.shape[1:])
        blocks.append(arr.reshape(S, -1))
    return names, np.concatenate(blocks, axis=1)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_chain(output: ChainOutput, directory, inputs: dict[str, str] | None = None,
                config_text: str = "", extra: dict | None = None) -> Path:
    """Persist a chain; ``inputs`` maps a label to an input file whose sha256 is recorded."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names, mat = scalar_columns(output)
    pd.DataFrame(mat, columns=names).to_csv(d / SCALARS, index=False, float_format=FLOAT_FORMAT,
                                            lineterminator="\n")
    for lev in LEVELS:
        np.save(d / f"u_{lev.value}.npy", np.ascontiguousarray(output.draws[f"u_{lev.value}"]))
    manifest = {
        "format": 1,
        "config": _jsonable(output.config.to_dict()),
        "config_text": config_text,
        "seed": output.config.seed,
        "inputs": {k: sha256_file(p) for k, p in sorted((inputs or {}).items())},
        "acceptance": _jsonable({b: list(v) for b, v in output.accept.items()}),
        "acceptance_rates": _jsonable(output.acceptance_rates()),
        "shapes": {k: list(output.draws[k].shape[1:]) for k in output.draws},
        "scenarios": output.scenarios,
        "null_dims": _jsonable(output.null_dims),
        "max_constraint_violation": _jsonable(output.max_constraint_violation),
        "constraint_resolution": "within-unit: A u_j = 0 for every unit at every level",
        "nonfinite_rejections": output.nonfinite_rejections,
        "age_center": output.age_center,
    }
    if extra:
        manifest.update(_jsonable(extra))
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    return d


def chain_files() -> list[str]:
    return [MANIFEST, SCALARS] + [f"u_{lev.value}.npy" for lev in LEVELS]


def check_run_dir(directory, expected: list[str]) -> None:
    d = Path(directory)
    missing = [f for f in expected if not (d / f).exists()]
    if missing:
        raise ValidationError(f"{d}: missing run artifact(s): {', '.join(missing)}; "
                              f"expected {', '.join(expected)}")


def _config_from_dict(cfg: dict) -> ChainConfig:
    kw = dict(cfg)
    for k in ("log_lambda_prior", "u_loading", "linear_prior_sd", "tau_prior_scale",
              "kappa_prior_scale", "blocks"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return ChainConfig(**kw)


def read_chain(directory) -> ChainOutput:
    d = Path(directory)
    check_run_dir(d, chain_files())
    manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    df = pd.read_csv(d / SCALARS, float_precision="round_trip")
    mat = df.to_numpy(dtype=float)
    S = mat.shape[0]
    draws: dict[str, np.ndarray] = {}
    col = 0
    for key in SCALAR_KEYS:
        shape = tuple(manifest["shapes"][key])
        width = int(np.prod(shape)) if shape else 1
        draws[key] = mat[:, col:col + width].reshape((S, *shape))
        col += width
    if col != mat.shape[1]:
        raise ValidationError(f"{d / SCALARS}: column count does not match the manifest")
    for lev in LEVELS:
        draws[f"u_{lev.value}"] = np.load(d / f"u_{lev.value}.npy")
    return ChainOutput(
        draws=draws,
        accept={b: tuple(v) for b, v in manifest["acceptance"].items()},
        config=_config_from_dict(manifest["config"]),
        scenarios=manifest["scenarios"],
        null_dims=manifest["null_dims"],
        max_constraint_violation=manifest["max_constraint_violation"],
        nonfinite_rejections=manifest["nonfinite_rejections"],
        age_center=manifest["age_center"],
    )

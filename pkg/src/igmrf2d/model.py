"""Data model, hierarchy, translation matrices and likelihood of the bivariate panel model.

Each observation row carries three components (D = diastolic, S = systolic,
I = interaction cross-moment).  The row mean is

    a_j + b_j * t~ + s * loading * u_total(t, t) + x.beta + gamma * (z - z_c) + e_study + offset

with variance sd^2/n + tau^2, where t~ = t - (T+1)/2 and u_total sums the
country, region, super-region and global surfaces at the diagonal cell.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import MappingError, ValidationError
from .gaussian import LOG_2PI, LinearConstraint
from .gmrf import GridSpec

COMPONENTS = ("D", "S", "I")


class Level(str, Enum):
    COUNTRY = "country"
    REGION = "region"
    SUPER_REGION = "super_region"
    GLOBAL = "global"


LEVELS = (Level.COUNTRY, Level.REGION, Level.SUPER_REGION, Level.GLOBAL)


class Scenario(Enum):
    NO_DATA = 0
    ONE_YEAR = 1
    TWO_YEARS = 2
    THREE_PLUS = 3

    @property
    def zeroed(self) -> tuple[str, ...]:
        """Constraints the data cannot inform (imposed through the generalized inverse)."""
        return {0: ("intercept", "dbp_trend", "sbp_trend"),
                1: ("dbp_trend", "sbp_trend"),
                2: ("sbp_trend",),
                3: ()}[self.value]

    @property
    def mean_constrained(self) -> tuple[str, ...]:
        """Constraints imposed for identifiability although the data inform them."""
        return tuple(c for c in ("intercept", "dbp_trend", "sbp_trend") if c not in self.zeroed)


def classify_scenario(country_years: Iterable[int]) -> Scenario:
    n = len(set(country_years))
    return Scenario(min(n, 3))


@dataclass(frozen=True)
class HierarchyMap:
    countries: tuple[str, ...]
    regions: tuple[str, ...]
    super_regions: tuple[str, ...]
    country_region: np.ndarray
    region_super: np.ndarray

    def __post_init__(self):
        cr = np.asarray(self.country_region, dtype=int)
        rs = np.asarray(self.region_super, dtype=int)
        if cr.shape != (len(self.countries),) or rs.shape != (len(self.regions),):
            raise MappingError("hierarchy arrays do not match the unit name lists")
        if cr.size and (cr.min() < 0 or cr.max() >= len(self.regions)):
            raise MappingError("country mapped to unknown region")
        if rs.size and (rs.min() < 0 or rs.max() >= len(self.super_regions)):
            raise MappingError("region mapped to unknown super-region")
        object.__setattr__(self, "country_region", cr)
        object.__setattr__(self, "region_super", rs)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, str]]) -> "HierarchyMap":
        """Build from (country, region, super_region) triples; first-seen order is kept."""
        countries, regions, supers = {}, {}, {}
        c_reg, r_sup = [], []
        for country, region, sup in rows:
            if sup not in supers:
                supers[sup] = len(supers)
            if region not in regions:
                regions[region] = len(regions)
                r_sup.append(supers[sup])
            elif r_sup[regions[region]] != supers[sup]:
                raise MappingError(f"region {region!r} assigned to two super-regions")
            if country not in countries:
                countries[country] = len(countries)
                c_reg.append(regions[region])
            elif c_reg[countries[country]] != regions[region]:
                raise MappingError(f"country {country!r} assigned to two regions")
        return cls(tuple(countries), tuple(regions), tuple(supers),
                   np.array(c_reg, dtype=int), np.array(r_sup, dtype=int))

    @property
    def J(self) -> int:
        return len(self.countries)

    @property
    def K(self) -> int:
        return len(self.regions)

    @property
    def L(self) -> int:
        return len(self.super_regions)

    @property
    def country_super(self) -> np.ndarray:
        return self.region_super[self.country_region]

    def n_units(self, level: Level) -> int:
        return {Level.COUNTRY: self.J, Level.REGION: self.K,
                Level.SUPER_REGION: self.L, Level.GLOBAL: 1}[Level(level)]

    def unit_names(self, level: Level) -> tuple[str, ...]:
        return {Level.COUNTRY: self.countries, Level.REGION: self.regions,
                Level.SUPER_REGION: self.super_regions, Level.GLOBAL: ("global",)}[Level(level)]

    def unit_of(self, level: Level, country: np.ndarray) -> np.ndarray:
        country = np.asarray(country, dtype=int)
        level = Level(level)
        if level is Level.COUNTRY:
            return country
        if level is Level.REGION:
            return self.country_region[country]
        if level is Level.SUPER_REGION:
            return self.country_super[country]
        return np.zeros_like(country)

    def country_index(self, name: str) -> int:
        try:
            return self.countries.index(name)
        except ValueError:
            raise MappingError(f"unknown country {name!r}") from None

    def singleton_countries(self) -> np.ndarray:
        """Countries that are the only member of their region."""
        counts = np.bincount(self.country_region, minlength=self.K)
        return np.flatnonzero(counts[self.country_region] == 1)

    def rows(self) -> list[tuple[str, str, str]]:
        return [(c, self.regions[r], self.super_regions[self.region_super[r]])
                for c, r in zip(self.countries, self.country_region)]


@dataclass(frozen=True)
class ObservationRecord:
    study_id: str
    country: str
    year: int
    age: float
    sex: str
    y: tuple[float, float, float]
    sd: tuple[float, float, float]
    n: int
    x: tuple[float, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"study {self.study_id}: sample size must be >= 1")
        for k, (yk, sk) in enumerate(zip(self.y, self.sd)):
            if np.isnan(yk):
                if k < 2:
                    raise ValidationError(f"study {self.study_id}: missing {COMPONENTS[k]} mean")
                continue
            if not sk > 0:
                raise ValidationError(f"study {self.study_id}: sd_{COMPONENTS[k]} must be > 0")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented observation table bound to a grid and hierarchy."""

    study_id: np.ndarray
    country: np.ndarray
    year: np.ndarray
    age: np.ndarray
    sex: np.ndarray
    y: np.ndarray
    sd: np.ndarray
    n: np.ndarray
    X: np.ndarray
    hierarchy: HierarchyMap
    grid: GridSpec
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        N = len(self.study_id)
        for name in ("country", "year", "age", "sex", "n"):
            if len(getattr(self, name)) != N:
                raise ValidationError(f"column {name} has wrong length")
        if self.y.shape != (N, 3) or self.sd.shape != (N, 3):
            raise ValidationError("y and sd must be N x 3")
        if self.X.shape[0] != N or self.X.shape[1] != len(self.covariate_names):
            raise ValidationError("covariate matrix does not match names")
        if N:
            if self.year.min() < 1 or self.year.max() > self.grid.T:
                raise ValidationError(f"years must lie in 1..{self.grid.T}")
            if self.country.min() < 0 or self.country.max() >= self.hierarchy.J:
                raise MappingError("observation references an unknown country")
            if np.any(self.n < 1):
                raise ValidationError("sample sizes must be >= 1")
            if np.any(np.isnan(self.y[:, :2])):
                raise ValidationError("D and S means are required")
            ok = ~np.isnan(self.y)
            if np.any(~(self.sd[ok] > 0)):
                raise ValidationError("standard deviations must be > 0")

    @classmethod
    def from_records(cls, records: Sequence[ObservationRecord], hierarchy: HierarchyMap,
                     grid: GridSpec, covariate_names: Sequence[str] = ()) -> "Dataset":
        p = len(covariate_names)
        return cls(
            study_id=np.array([r.study_id for r in records], dtype=object),
            country=np.array([hierarchy.country_index(r.country) for r in records], dtype=int),
            year=np.array([r.year for r in records], dtype=int),
            age=np.array([r.age for r in records], dtype=float),
            sex=np.array([r.sex for r in records], dtype=object),
            y=np.array([r.y for r in records], dtype=float).reshape(-1, 3),
            sd=np.array([r.sd for r in records], dtype=float).reshape(-1, 3),
            n=np.array([r.n for r in records], dtype=int),
            X=np.array([r.x for r in records], dtype=float).reshape(len(records), p),
            hierarchy=hierarchy, grid=grid, covariate_names=tuple(covariate_names),
        )

    def records(self) -> list[ObservationRecord]:
        return [ObservationRecord(str(self.study_id[i]), self.hierarchy.countries[self.country[i]],
                                  int(self.year[i]), float(self.age[i]), str(self.sex[i]),
                                  tuple(self.y[i]), tuple(self.sd[i]), int(self.n[i]),
                                  tuple(self.X[i]))
                for i in range(self.N)]

    @property
    def N(self) -> int:
        return len(self.study_id)

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.y)

    @property
    def sampling_var(self) -> np.ndarray:
        """sd^2 / n per row and component (NaN where the component is missing)."""
        v = self.sd ** 2 / self.n[:, None]
        return np.where(self.mask, v, np.nan)

    @property
    def centered_year(self) -> np.ndarray:
        return self.year - (self.grid.T + 1) / 2.0

    def studies(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique study ids in first-seen order, per-row study index)."""
        return self._studies

    @cached_property
    def _studies(self) -> tuple[np.ndarray, np.ndarray]:
        seen: dict = {}
        idx = np.array([seen.setdefault(s, len(seen)) for s in self.study_id], dtype=int)
        return np.array(list(seen), dtype=object), idx

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return replace(self, study_id=self.study_id[rows], country=self.country[rows],
                       year=self.year[rows], age=self.age[rows], sex=self.sex[rows],
                       y=self.y[rows], sd=self.sd[rows], n=self.n[rows], X=self.X[rows])

    def years_by_unit(self, level: Level) -> list[set[int]]:
        units = self.hierarchy.unit_of(level, self.country)
        out: list[set[int]] = [set() for _ in range(self.hierarchy.n_units(level))]
        for g, t in zip(units, self.year):
            out[g].add(int(t))
        return out

    def scenarios(self, level: Level) -> list[Scenario]:
        return [classify_scenario(ys) for ys in self.years_by_unit(level)]


@dataclass
class ModelState:
    """Full parameter state of one chain; mutated in place by the sampler."""

    a: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    e: np.ndarray
    tau2: np.ndarray
    kappa2: np.ndarray
    u: dict[Level, np.ndarray]
    lam: np.ndarray
    age_scaling: np.ndarray
    age_offsets: np.ndarray
    age_center: float = 50.0

    @classmethod
    def zeros(cls, dataset: Dataset, age_center: float | None = None,
              per_study_tau: bool = False) -> "ModelState":
        h = dataset.hierarchy
        n = dataset.grid.n_cells
        n_studies = len(dataset.studies()[0])
        p = dataset.X.shape[1]
        if age_center is None:
            age_center = float(np.mean(dataset.age)) if dataset.N else 50.0
        return cls(
            a=np.zeros((h.J, 3)), b=np.zeros((h.J, 3)), beta=np.zeros((p, 3)),
            gamma=np.zeros(3), e=np.zeros((n_studies, 3)),
            tau2=np.ones((n_studies, 3)) if per_study_tau else np.ones(3),
            kappa2=np.ones(3),
            u={lev: np.zeros((h.n_units(lev), n)) for lev in LEVELS},
            lam=np.ones(4),
            age_scaling=np.ones(dataset.N), age_offsets=np.zeros((dataset.N, 3)),
            age_center=age_center,
        )

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def validate(self) -> None:
        if np.any(~(np.asarray(self.tau2) > 0)) or np.any(~(self.lam > 0)):
            raise ValidationError("tau2 and lambda must be positive")


@dataclass(frozen=True)
class TranslationMatrix:
    level: Level
    matrix: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def build_translation(level: Level, dataset: Dataset, grid: GridSpec | None = None,
                      hierarchy: HierarchyMap | None = None) -> TranslationMatrix:
    """0/1 matrix mapping each row to its unit's diagonal cell (t, t)."""
    grid = grid or dataset.grid
    hierarchy = hierarchy or dataset.hierarchy
    level = Level(level)
    if dataset.N and (dataset.country.max() >= hierarchy.J or dataset.country.min() < 0):
        raise MappingError("observation references an unknown country")
    units = hierarchy.unit_of(level, dataset.country)
    t = dataset.year - 1
    cols = units * grid.n_cells + t * grid.T + t
    M = sp.csr_matrix((np.ones(dataset.N), (np.arange(dataset.N), cols)),
                      shape=(dataset.N, hierarchy.n_units(level) * grid.n_cells))
    return TranslationMatrix(level, M)


def constraint_matrix(grid: GridSpec) -> LinearConstraint:
    """Rows: ones, centered DBP-year ramp, centered SBP-year ramp."""
    r, c = grid.centered_ramps()
    return LinearConstraint(np.vstack([np.ones(grid.n_cells), r, c]), np.zeros(3))


def u_total_at_rows(dataset: Dataset, state: ModelState, exclude: Level | None = None) -> np.ndarray:
    """Sum of the level surfaces at each row's diagonal cell."""
    cell = (dataset.year - 1) * (dataset.grid.T + 1)
    total = np.zeros(dataset.N)
    for lev in LEVELS:
        if lev is exclude:
            continue
        units = dataset.hierarchy.unit_of(lev, dataset.country)
        total += state.u[lev][units, cell]
    return total


def linear_predictor(dataset: Dataset, state: ModelState,
                     loading: Sequence[float] = (1.0, 1.0, 1.0),
                     include_study_effect: bool = True) -> np.ndarray:
    """N x 3 row means."""
    c = dataset.country
    ld = np.asarray(loading, dtype=float)
    mu = (state.a[c] + state.b[c] * dataset.centered_year[:, None]
          + (state.age_scaling * u_total_at_rows(dataset, state))[:, None] * ld
          + dataset.X @ state.beta
          + np.outer(dataset.age - state.age_center, state.gamma)
          + state.age_offsets)
    if include_study_effect:
        mu = mu + state.e[dataset.studies()[1]]
    return mu


def obs_variance(dataset: Dataset, state: ModelState) -> np.ndarray:
    tau2 = np.asarray(state.tau2)
    if tau2.ndim == 2:
        tau2 = tau2[dataset.studies()[1]]
    return dataset.sampling_var + tau2


def log_likelihood(dataset: Dataset, state: ModelState, grid: GridSpec | None = None,
                   hierarchy: HierarchyMap | None = None,
                   loading: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    if dataset.N == 0:
        return 0.0
    mu = linear_predictor(dataset, state, loading)
    v = obs_variance(dataset, state)
    m = dataset.mask
    r = dataset.y[m] - mu[m]
    return float(np.sum(-0.5 * (LOG_2PI + np.log(v[m])) - 0.5 * r * r / v[m]))

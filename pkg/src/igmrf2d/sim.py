"""Simulation study: synthetic panels, cross-validation folds, coverage scoring, fit curves."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ConfigurationError, MappingError
from .gaussian import make_rng
from .gmrf import GridSpec
from .mcmc import ChainConfig, ChainOutput, predictive_draws, prior_structure, run_chain
from .model import (
    COMPONENTS,
    LEVELS,
    Dataset,
    HierarchyMap,
    ModelState,
    constraint_matrix,
    linear_predictor,
)

log = logging.getLogger(__name__)

# 21 regions grouped into the 8 super-regions of the cross-validation table
DEFAULT_REGIONS: tuple[tuple[str, str], ...] = (
    ("Central Europe", "Central and Eastern Europe"),
    ("Eastern Europe", "Central and Eastern Europe"),
    ("Central Asia", "C. Asia, Middle East & N. Africa"),
    ("Middle East and North Africa", "C. Asia, Middle East & N. Africa"),
    ("East Asia", "East and South East Asia"),
    ("Southeast Asia", "East and South East Asia"),
    ("High-income English-speaking countries", "High-income Western countries"),
    ("Northwestern Europe", "High-income Western countries"),
    ("Southwestern Europe", "High-income Western countries"),
    ("Andean Latin America", "Latin America and Caribbean"),
    ("Central Latin America", "Latin America and Caribbean"),
    ("Southern Latin America", "Latin America and Caribbean"),
    ("Caribbean", "Latin America and Caribbean"),
    ("Polynesia and Micronesia", "Oceania"),
    ("Melanesia", "Oceania"),
    ("South Asia", "South Asia"),
    ("Central Africa", "Sub-Saharan Africa"),
    ("East Africa", "Sub-Saharan Africa"),
    ("Southern Africa", "Sub-Saharan Africa"),
    ("West Africa", "Sub-Saharan Africa"),
)
SINGLETON = ("Japan", "High-income Asia Pacific", "High-income Western countries")
SUPER_REGION_ORDER = (
    "Central and Eastern Europe",
    "C. Asia, Middle East & N. Africa",
    "East and South East Asia",
    "High-income Western countries",
    "Latin America and Caribbean",
    "Oceania",
    "South Asia",
    "Sub-Saharan Africa",
)


@dataclass(frozen=True)
class SimDesign:
    regions: tuple[tuple[str, str], ...] = DEFAULT_REGIONS
    countries_per_region: int = 3
    extra_singleton: tuple[str, str, str] | None = SINGLETON
    T: int = 5
    years_observed: tuple[int, ...] | None = None
    a_mean: tuple[float, float, float] = (80.0, 125.0, 10000.0)
    a_sd: float = 5.0
    b_sd: float = 0.5
    log_lambda_mean: float = 2.0
    log_lambda_sd: float = 1.0
    tau_sd: float = 2.0
    se_range: tuple[float, float] = (0.5, 2.0)
    n_range: tuple[int, int] = (100, 2000)
    study_effect_sd: float = 0.0
    n_covariates: int = 1
    beta_sd: float = 1.0
    ages: tuple[float, ...] = (30.0, 40.0, 50.0, 60.0, 70.0)
    gamma_mean: float = 0.3
    gamma_sd: float = 0.1
    age_center: float = 50.0
    sex: str = "female"
    prior_structure: str = "thin-plate"
    u_loading: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def hierarchy(self) -> HierarchyMap:
        rows = []
        for region, sup in self.regions:
            for c in range(self.countries_per_region):
                rows.append((f"{region} {c + 1}", region, sup))
        if self.extra_singleton is not None:
            rows.append(tuple(self.extra_singleton))
        return HierarchyMap.from_rows(rows)

    @property
    def n_countries(self) -> int:
        return len(self.regions) * self.countries_per_region + (self.extra_singleton is not None)


@dataclass
class SimTruth:
    state: ModelState
    means: np.ndarray
    lam: np.ndarray
    tau: np.ndarray


def draw_constrained_prior(lam: float, n_units: int, grid: GridSpec, structure_name: str,
                           rng: np.random.Generator) -> np.ndarray:
    """(n_units, T^2) draws from the IGMRF prior restricted to A u = 0."""
    P = prior_structure(structure_name, grid.T).dense().astype(float)
    B = constraint_matrix(grid).null_basis
    L = np.linalg.cholesky(lam * (B.T @ P @ B))
    z = np.linalg.solve(L.T, rng.standard_normal((B.shape[1], n_units))).T
    return z @ B.T


def simulate_dataset(design: SimDesign, rng: np.random.Generator | int | None = None
                     ) -> tuple[Dataset, SimTruth]:
    """Synthetic panel from the model itself, observed on diagonal cells only."""
    rng = make_rng(design.seed if rng is None else rng)
    h = design.hierarchy()
    grid = GridSpec(design.T)
    years = design.years_observed or tuple(range(1, design.T + 1))
    if any(not 1 <= t <= design.T for t in years):
        raise ConfigurationError("years_observed outside 1..T")
    p = design.n_covariates

    country = np.repeat(np.arange(h.J), len(years))
    year = np.tile(np.array(years, dtype=int), h.J)
    N = country.size
    study_id = np.array([f"{h.countries[c]}-{t}" for c, t in zip(country, year)], dtype=object)
    age = rng.choice(np.asarray(design.ages, dtype=float), size=N)
    X = rng.standard_normal((N, p))
    n = rng.integers(design.n_range[0], design.n_range[1] + 1, size=N)
    se = rng.uniform(*design.se_range, size=(N, 3))
    sd = se * np.sqrt(n)[:, None]

    lam = np.exp(design.log_lambda_mean + design.log_lambda_sd * rng.standard_normal(4))
    tau = np.abs(design.tau_sd * rng.standard_normal(3))
    u = {}
    for i, lev in enumerate(LEVELS):
        u[lev] = draw_constrained_prior(lam[i], h.n_units(lev), grid, design.prior_structure, rng)
    state = ModelState(
        a=np.asarray(design.a_mean) + design.a_sd * rng.standard_normal((h.J, 3)),
        b=design.b_sd * rng.standard_normal((h.J, 3)),
        beta=design.beta_sd * rng.standard_normal((p, 3)),
        gamma=design.gamma_mean + design.gamma_sd * rng.standard_normal(3),
        e=design.study_effect_sd * rng.standard_normal((N, 3)),
        tau2=tau ** 2, kappa2=np.full(3, design.study_effect_sd ** 2),
        u=u, lam=lam, age_scaling=np.ones(N), age_offsets=np.zeros((N, 3)),
        age_center=design.age_center,
    )
    placeholder = np.zeros((N, 3))
    ds = Dataset(study_id=study_id, country=country, year=year, age=age,
                 sex=np.full(N, design.sex, dtype=object), y=placeholder, sd=sd, n=n, X=X,
                 hierarchy=h, grid=grid,
                 covariate_names=tuple(f"cov_{i + 1}" for i in range(p)))
    means = linear_predictor(ds, state, design.u_loading)
    noise_sd = np.sqrt(se ** 2 + tau ** 2)
    y = means + noise_sd * rng.standard_normal((N, 3))
    return replace(ds, y=y), SimTruth(state=state, means=means, lam=lam, tau=tau)


def make_cv_folds(dataset: Dataset, k: int = 5, rng: np.random.Generator | int | None = None
                  ) -> list[tuple[np.ndarray, np.ndarray]]:
    """k (train_rows, test_rows) splits holding out whole studies.

    Countries alone in their region stay in every training set.  Each other
    country's studies are dealt round-robin over the folds from a random
    starting fold, so every fold holds out at most ceil(n_c / k) of them.
    """
    if k < 2:
        raise ConfigurationError("need at least 2 folds")
    rng = make_rng(rng)
    names, sidx = dataset.studies()
    study_country = np.zeros(len(names), dtype=int)
    study_country[sidx] = dataset.country
    singletons = set(dataset.hierarchy.singleton_countries().tolist())
    eligible = np.array([c not in singletons for c in study_country])
    if eligible.sum() < k:
        raise ConfigurationError(f"{eligible.sum()} test-eligible studies for {k} folds")
    fold_of = np.full(len(names), -1)
    for c in np.unique(study_country[eligible]):
        studies = np.flatnonzero((study_country == c) & eligible)
        studies = studies[rng.permutation(studies.size)]
        start = int(rng.integers(k))
        fold_of[studies] = (start + np.arange(studies.size)) % k
    row_fold = fold_of[sidx]
    all_rows = np.arange(dataset.N)
    return [(all_rows[row_fold != f], all_rows[row_fold == f]) for f in range(k)]


@dataclass
class CoverageTable:
    """Coverage and mean error per group (plus Total), per component."""

    rows: list[str]
    coverage: np.ndarray
    error: np.ndarray
    count: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"region": self.rows})
        for k, c in enumerate(COMPONENTS):
            df[f"coverage_{c}"] = self.coverage[:, k]
        for k, c in enumerate(COMPONENTS):
            df[f"error_{c}"] = self.error[:, k]
        return df

    def total(self) -> tuple[np.ndarray, np.ndarray]:
        i = self.rows.index("Total")
        return self.coverage[i], self.error[i]


def coverage_and_error(quantiles: np.ndarray, truth: np.ndarray, groups: np.ndarray,
                       group_order: tuple[str, ...] | None = None) -> CoverageTable:
    """Score (M, 3, 3) quantiles [2.5%, 50%, 97.5%] against (M, 3) truths.

    NaN truths (missing components) are skipped.
    """
    quantiles = np.asarray(quantiles, dtype=float)
    truth = np.asarray(truth, dtype=float)
    groups = np.asarray(groups, dtype=object)
    if quantiles.shape[:2] != truth.shape or groups.shape[0] != truth.shape[0]:
        raise MappingError("quantiles, truths and groups do not line up")
    if group_order is None:
        group_order = tuple(dict.fromkeys(groups.tolist()))
    elif set(groups.tolist()) - set(group_order):
        raise MappingError("group labels outside the declared grouping")
    lo, med, hi = quantiles[..., 0], quantiles[..., 1], quantiles[..., 2]
    ok = ~np.isnan(truth)
    inside = (truth >= lo) & (truth <= hi)
    err = med - truth
    names = list(group_order) + ["Total"]
    cov = np.full((len(names), 3), np.nan)
    er = np.full((len(names), 3), np.nan)
    cnt = np.zeros((len(names), 3), dtype=int)
    for i, name in enumerate(names):
        sel = np.ones(len(groups), bool) if name == "Total" else groups == name
        for k in range(3):
            m = sel & ok[:, k]
            cnt[i, k] = m.sum()
            if m.any():
                cov[i, k] = inside[m, k].mean()
                er[i, k] = err[m, k].mean()
    return CoverageTable(names, cov, er, cnt)


def export_fit_curve(output: ChainOutput, unit: str | int, dataset: Dataset) -> pd.DataFrame:
    """Posterior mean and 95% band of a country's summed surface over all T^2 combos."""
    h = dataset.hierarchy
    j = h.country_index(unit) if isinstance(unit, str) else int(unit)
    if not 0 <= j < h.J:
        raise MappingError(f"unknown unit {unit!r}")
    draws = output.u_total(j, h)
    grid = dataset.grid
    observed = {int(t) for t in dataset.year[dataset.country == j]}
    cells = [grid.cell(k) for k in range(1, grid.n_cells + 1)]
    return pd.DataFrame({
        "combo": np.arange(1, grid.n_cells + 1),
        "dbp_year": [i for i, _ in cells],
        "sbp_year": [jj for _, jj in cells],
        "mean": draws.mean(axis=0),
        "lower95": np.quantile(draws, 0.025, axis=0),
        "upper95": np.quantile(draws, 0.975, axis=0),
        "has_data": [i == jj and i in observed for i, jj in cells],
    })


@dataclass
class FoldResult:
    fold: int
    seed: int
    test_rows: np.ndarray
    quantiles: np.ndarray
    acceptance: dict[str, float]


def run_fold(dataset: Dataset, train: np.ndarray, test: np.ndarray, config: ChainConfig,
             fold: int, seed_seq: np.random.SeedSequence) -> FoldResult:
    chain_ss, pred_ss = seed_seq.spawn(2)
    out = run_chain(config, dataset.subset(train), rng=make_rng(chain_ss))
    draws = predictive_draws(out, dataset.subset(test), make_rng(pred_ss))
    q = np.quantile(draws, [0.025, 0.5, 0.975], axis=0)  # (3, M, 3)
    return FoldResult(fold, config.seed, test, np.moveaxis(q, 0, -1), out.acceptance_rates())


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(dataset: Dataset, config: ChainConfig, k: int = 5, seed: int = 0,
                   jobs: int = 1) -> tuple[CoverageTable, list[FoldResult]]:
    """k-fold posterior-predictive cross-validation scored per super-region."""
    root = np.random.SeedSequence(seed)
    fold_ss, *chain_ss = root.spawn(k + 1)
    folds = make_cv_folds(dataset, k, make_rng(fold_ss))
    cfg = replace(config, seed=seed)
    tasks = [(dataset, tr, te, cfg, f, chain_ss[f]) for f, (tr, te) in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, tasks))
    else:
        results = [_run_fold_job(t) for t in tasks]
    return score_folds(dataset, results), results


def score_folds(dataset: Dataset, results: list[FoldResult]) -> CoverageTable:
    rows = np.concatenate([r.test_rows for r in results])
    q = np.concatenate([r.quantiles for r in results])
    h = dataset.hierarchy
    groups = np.array([h.super_regions[s] for s in h.country_super[dataset.country[rows]]],
                      dtype=object)
    order = tuple(s for s in SUPER_REGION_ORDER if s in h.super_regions) + tuple(
        s for s in h.super_regions if s not in SUPER_REGION_ORDER)
    return coverage_and_error(q, dataset.y[rows], groups, order)

"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is
printed in the session summary.

Informational lines (status INFO) are printed but never gate.
"""

import copy
import os
import time

import numpy as np
import pytest
import scipy.linalg as sla
from scipy import stats

from igmrf2d.cli import main
from igmrf2d.gaussian import CanonicalGaussian, LinearConstraint, logdens_constrained, sample_constrained
from igmrf2d.gmrf import (
    GridSpec,
    boundary_blocks,
    build_boundary_structure,
    build_rw1_precision,
    build_rw2_precision,
    build_thin_plate_structure,
    build_torus_C,
    build_torus_structure,
    neighbor_count,
)
from igmrf2d.mcmc import ChainConfig, Sampler, run_chain
from igmrf2d.model import LEVELS, HierarchyMap, Level, Scenario, constraint_matrix
from igmrf2d.sim import SimDesign, cross_validate, simulate_dataset

from conftest import ACCEPTANCE, make_dataset
from oracles import (
    A1, A2, A3, A4, A5, PRINTED_P5, lambda_grid_posterior, oracle_log_ratio, random_spd,
    schur_conditional, stencil_row, wasserstein_to_grid,
)

CV_ITER = int(os.environ.get("IGMRF2D_CV_ITER", "4000"))
T11_ITER = int(os.environ.get("IGMRF2D_T11_ITER", "10000"))


def report(name, ok, detail):
    ACCEPTANCE.append((name, "PASS" if ok else "FAIL", detail))
    return bool(ok)


def info(name, detail):
    ACCEPTANCE.append((name, "INFO", detail))


def one_country_instance(seed=7):
    hier = HierarchyMap.from_rows([("A", "R1", "S1")])
    rows = [("A", t) for t in (1, 2, 3, 4, 5) for _ in range(2)]
    ds = make_dataset(rows, hierarchy=hier, seed=seed)
    B = constraint_matrix(ds.grid).null_basis
    truth = 1.5 * B @ np.random.default_rng(3).normal(size=B.shape[1])
    ds.y[:] = np.array([80.0, 125.0, 1e4]) + truth[(ds.year - 1) * 6][:, None] \
        + np.random.default_rng(4).normal(scale=1.2, size=(ds.N, 3))
    return ds


# ---------------------------------------------------------------------------

def test_matrix_exactness():
    t0 = time.perf_counter()
    rw1 = build_rw1_precision(5).dense()
    rw2 = build_rw2_precision(5).dense()
    P = build_boundary_structure(5).dense()
    blocks = boundary_blocks(5)
    elapsed = time.perf_counter() - t0
    rw1_printed = np.array([[1, -1, 0, 0, 0], [-1, 2, -1, 0, 0], [0, -1, 2, -1, 0],
                            [0, 0, -1, 2, -1], [0, 0, 0, -1, 1]])
    rw2_printed = np.array([[1, -2, 1, 0, 0], [-2, 5, -4, 1, 0], [1, -4, 6, -4, 1],
                            [0, 1, -4, 5, -2], [0, 0, 1, -2, 1]])
    ok = (np.array_equal(rw1, rw1_printed) and np.array_equal(rw2, rw2_printed)
          and np.array_equal(P, PRINTED_P5)
          and all(np.array_equal(blocks[k], v) for k, v in
                  {"A1": A1, "A2": A2, "A3": A3, "A4": A4, "A5": A5}.items())
          and all(np.issubdtype(m.dtype, np.integer) for m in (rw1, rw2, P))
          and elapsed < 1.0)
    assert report("Matrix exactness", ok, f"RW1, RW2, A1..A5 exact integers; {elapsed * 1e3:.1f} ms")


def test_rank_law():
    ranks, angles = {}, {}
    for T in range(5, 13):
        S = build_boundary_structure(T)
        ranks[T] = S.rank
        A = constraint_matrix(GridSpec(T)).A
        N = S.null_space
        # spans can only coincide when the dimensions agree
        angles[T] = (float(np.max(sla.subspace_angles(A.T, N))) if N.shape[1] == A.shape[0]
                     else np.pi / 2)
    ok = all(ranks[T] == T * T - 3 for T in ranks) and max(angles.values()) <= 1e-8
    detail = ", ".join(f"T={T}: rank {r} (T^2-3={T * T - 3}, null dim {T * T - r})"
                       for T, r in ranks.items())
    tp = {T: build_thin_plate_structure(T) for T in range(5, 13)}
    tp_ok = all(s.rank == T * T - 3 for T, s in tp.items()) and max(
        float(np.max(sla.subspace_angles(constraint_matrix(GridSpec(T)).A.T, s.null_space)))
        for T, s in tp.items()) <= 1e-8
    info("Rank law on the thin-plate structure (model default)",
         f"rank T^2-3 and null space = span(A) for T=5..12: {'yes' if tp_ok else 'no'}")
    # the printed boundary matrix annihilates only constants, so this fails
    assert report("Rank law", ok, f"printed boundary matrix: {detail}; null space vs span(A) "
                                  f"max angle {max(angles.values()):.3g}")


def test_stencil_law():
    T = 7
    ok = True
    for build in (build_boundary_structure, build_thin_plate_structure):
        P = build(T).dense()
        for i in range(3, T - 1):
            for j in range(3, T - 1):
                ok &= np.array_equal(P[(i - 1) * T + (j - 1)], stencil_row(T, i, j))
    C = build_torus_C(6).dense()
    torus_ok = np.array_equal(build_torus_structure(6).dense(), C.T @ C)
    values = {neighbor_count(i, j, 5) for i in range(1, 6) for j in range(1, 6)}
    ok = ok and torus_ok and values == {6, 8, 9, 11, 12, 13}
    assert report("Stencil law", ok, f"interior rows {{20,-8,2,1}} in both 2D structures; "
                                     f"torus P = C'C: {torus_ok}; neighbor counts {sorted(values)}")


def test_constrained_gaussian_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_z = 0.0
    for n, k in ((2, 1), (3, 1), (4, 2), (4, 3)):
        Q = random_spd(rng, n)
        b = rng.normal(size=n)
        A = rng.normal(size=(k, n))
        e = rng.normal(size=k)
        g, c = CanonicalGaussian(b, Q), LinearConstraint(A, e)
        Sigma = np.linalg.inv(Q)
        mean, cov = schur_conditional(Sigma @ b, Sigma, A, e)
        S = 100_000
        draws = np.array([sample_constrained(g, c, rng) for _ in range(S)])
        sd = np.sqrt(np.clip(np.diag(cov), 0, None))
        live = sd > 1e-12
        z_mean = np.abs(draws.mean(0) - mean)[live] / (sd[live] / np.sqrt(S))
        emp = np.cov(draws.T)
        se_cov = np.sqrt((np.outer(sd ** 2, sd ** 2) + cov ** 2) / S)
        mask = np.outer(live, live)
        z_cov = np.abs(emp - cov)[mask] / se_cov[mask]
        worst_z = max(worst_z, z_mean.max(), z_cov.max())
    # density on the constraint plane against scipy in orthonormal coordinates
    dens_err = 0.0
    for n, k in ((3, 1), (4, 2)):
        Q = random_spd(rng, n)
        b = rng.normal(size=n)
        A = rng.normal(size=(k, n))
        e = rng.normal(size=k)
        Sigma = np.linalg.inv(Q)
        mean, cov = schur_conditional(Sigma @ b, Sigma, A, e)
        B = sla.null_space(A)
        for _ in range(5):
            x = mean + B @ rng.normal(size=n - k)
            ref = stats.multivariate_normal(B.T @ mean, B.T @ cov @ B).logpdf(B.T @ x)
            dens_err = max(dens_err, abs(logdens_constrained(x, CanonicalGaussian(b, Q),
                                                             LinearConstraint(A, e)) - ref))
    elapsed = time.perf_counter() - t0
    ok = worst_z <= 3.0 and dens_err <= 1e-10 and elapsed < 60
    assert report("Constrained-Gaussian oracle", ok,
                  f"worst moment |z| {worst_z:.2f} (<= 3) at 1e5 draws, dim <= 4; "
                  f"logdens error {dens_err:.1e}; {elapsed:.1f} s")


def dual_decisions(mode, n_iter, seed=11):
    """Run n_iter sweeps; at every (lambda, u) update compare the sampler's
    decision with the oracle's decision under the same random stream."""
    ds = one_country_instance()
    cfg = ChainConfig(n_iter=n_iter, n_burnin=0, proposal_lambda=mode, seed=seed,
                      log_lambda_prior=(0.0, 3.0))
    sampler = Sampler(ds, cfg)
    state = sampler.initial_state()
    rng = np.random.default_rng(seed)
    agree = total = 0
    worst = 0.0
    for _ in range(n_iter):
        sampler.update_linear_block(state, rng)
        sampler.update_tau(state, rng)
        for lev in LEVELS:
            twin = copy.deepcopy(rng)
            prop = sampler.propose_u_block(state, lev, twin)
            log_u = np.log(twin.uniform())
            if np.isfinite(prop.log_ratio):
                ref = oracle_log_ratio(sampler, state, lev, prop.lam_new, prop.u_new)
                worst = max(worst, abs(ref - prop.log_ratio) / max(1.0, abs(ref)))
                expected = bool(log_u < ref)
            else:
                expected = False
            before = sampler.accept[f"u_{lev.value}"][0]
            sampler.update_u_block(state, lev, rng)
            got = sampler.accept[f"u_{lev.value}"][0] > before
            agree += got == expected
            total += 1
        sampler.adapter.step += 1
    return agree, total, worst


def fixed_lambda_w1():
    """Stationary u marginals at fixed lambda against the conjugate posterior."""
    ds = one_country_instance()
    lam = 2.0
    cfg = ChainConfig(n_iter=11000, n_burnin=1000, blocks=("u_country",), seed=3, adapt=False,
                      init_lambda=lam, proposal_sd={"log_lambda_country": 1e-300})
    state = Sampler(ds, cfg).initial_state()
    state.a[:] = [80.0, 125.0, 1e4]
    state.tau2[:] = 1.0
    out = run_chain(cfg, ds, state=state)
    u = out.draws["u_country"][:, 0, :]
    # conjugate posterior: constraint imposed by a stiff penalty, no subspace basis
    grid = ds.grid
    P = build_thin_plate_structure(grid.T).dense()
    A = constraint_matrix(grid).A
    v = 2.0
    W = np.zeros(grid.n_cells)
    c = np.zeros(grid.n_cells)
    for i in range(ds.N):
        cell = (ds.year[i] - 1) * (grid.T + 1)
        r = ds.y[i] - state.a[0]
        W[cell] += 3 / v
        c[cell] += r.sum() / v
    Q = lam * P + np.diag(W) + 1e9 * A.T @ A
    cov = np.linalg.inv(Q)
    mean = cov @ c
    worst = 0.0
    for k in range(grid.n_cells):
        sd = np.sqrt(cov[k, k])
        xs = np.linspace(mean[k] - 7 * sd, mean[k] + 7 * sd, 2001)
        w1 = wasserstein_to_grid(u[:, k], xs, stats.norm.pdf(xs, mean[k], sd))
        worst = max(worst, w1 / sd)
    return worst, out.n_stored


def mixture_w1(mode):
    """log-lambda marginal against the exact grid posterior (lambda not fixed)."""
    ds = one_country_instance()
    cfg = ChainConfig(n_iter=22000, n_burnin=2000, blocks=("u_country",), seed=5,
                      log_lambda_prior=(0.0, 1.0), check_constraints=False, proposal_lambda=mode)
    sampler = Sampler(ds, cfg)
    state = sampler.initial_state()
    state.a[:] = [80.0, 125.0, 1e4]
    state.tau2[:] = 1.0
    out = run_chain(cfg, ds, state=state.copy())
    xs = np.linspace(-8, 8, 1601)
    logp, *_ = lambda_grid_posterior(ds, state, sampler, xs)
    dens = np.exp(logp - logp.max())
    dens /= dens.sum()
    sd = np.sqrt(np.sum(dens * xs ** 2) - np.sum(dens * xs) ** 2)
    return wasserstein_to_grid(np.log(out.draws["lambda"][:, 0]), xs, dens) / sd


@pytest.mark.slow
def test_mh_correctness():
    t0 = time.perf_counter()
    results = {mode: dual_decisions(mode, 10_000) for mode in ("proposed", "previous")}
    w1, n = fixed_lambda_w1()
    for mode in ("proposed", "previous"):
        info(f"lambda-marginal W1/sd ({mode} proposal densities)", f"{mixture_w1(mode):.3f}")
    ok = all(a == t for a, t, _ in results.values()) and w1 <= 0.05
    detail = "; ".join(f"{m}: {a}/{t} identical decisions, max rel ratio diff {d:.1e}"
                       for m, (a, t, d) in results.items())
    assert report("MH correctness", ok, f"{detail}; fixed-lambda W1/sd max over 25 cells "
                                        f"{w1:.3f} (<= 0.05, {n} draws); "
                                        f"{time.perf_counter() - t0:.0f} s")


@pytest.mark.slow
def test_scenario_handling():
    hier = HierarchyMap.from_rows([("A", "R1", "S1"), ("B", "R1", "S1"), ("C", "R2", "S1"),
                                   ("D", "R2", "S1")])
    rows = [("A", 1), ("A", 3), ("A", 5), ("A", 4), ("B", 2), ("B", 4), ("C", 3)]
    ds = make_dataset(rows, hierarchy=hier, seed=1)
    scen = ds.scenarios(Level.COUNTRY)
    assert scen == [Scenario.THREE_PLUS, Scenario.TWO_YEARS, Scenario.ONE_YEAR, Scenario.NO_DATA]
    out = run_chain(ChainConfig(n_iter=6000, n_burnin=1000, seed=8), ds)
    A = constraint_matrix(ds.grid).A
    stored = max(np.abs(out.draws[f"u_{lev.value}"] @ A.T).max() for lev in LEVELS)
    tracked = max(out.max_constraint_violation.values())
    u = out.draws["u_country"][:, 3, :]
    nb = 25
    batches = u[: (u.shape[0] // nb) * nb].reshape(nb, -1, u.shape[1]).mean(axis=1)
    se = batches.std(axis=0, ddof=1) / np.sqrt(nb)
    z = np.abs(u.mean(axis=0)) / se
    info("measured full-conditional null dims (NoData/OneYear/TwoYears/ThreePlus)",
         str([out.null_dims["country"][i] for i in (3, 2, 1, 0)]))
    ok = max(stored, tracked) <= 1e-8 and z.max() <= 3.0
    assert report("Scenario handling", ok,
                  f"max |A u| {max(stored, tracked):.1e} over every update, all four scenarios; "
                  f"NoData u^c mean max |z| {z.max():.2f} over 25 cells (batch-means SE)")


@pytest.mark.slow
def test_desk_scale_cross_validation():
    t0 = time.perf_counter()
    ds, _ = simulate_dataset(SimDesign())
    assert ds.hierarchy.J == 61 and ds.grid.T == 5
    cfg = ChainConfig(n_iter=CV_ITER, n_burnin=CV_ITER // 2)
    covs, errs = [], []
    for seed in (1, 2, 3):
        table, _ = cross_validate(ds, cfg, k=5, seed=seed)
        cov, err = table.total()
        covs.append(cov)
        errs.append(err)
    cov, err = np.mean(covs, axis=0), np.mean(errs, axis=0)
    elapsed = time.perf_counter() - t0
    ok = cov[0] >= 0.85 and cov[1] >= 0.85 and abs(err[0]) <= 1.0 and abs(err[1]) <= 1.0
    info("interaction component (not gated)", f"coverage {cov[2]:.3f}, mean error {err[2]:.2f}")
    per_seed = ", ".join(f"{c[0]:.3f}/{c[1]:.3f}" for c in covs)
    assert report("Desk-scale reproduction", ok,
                  f"3 seeds x 5 folds, {CV_ITER} iterations: coverage D {cov[0]:.3f}, "
                  f"S {cov[1]:.3f} (per seed D/S {per_seed}); mean error D {err[0]:.3f}, "
                  f"S {err[1]:.3f}; {elapsed / 60:.1f} min on 1 core")


@pytest.mark.slow
def test_t11_tractability():
    design = SimDesign(regions=(("R1", "S1"), ("R2", "S1"), ("R3", "S2"), ("R4", "S2")),
                       countries_per_region=3, extra_singleton=None, T=11,
                       years_observed=(1, 3, 5, 7, 9, 11))
    ds, _ = simulate_dataset(design, 6)
    cfg = ChainConfig(n_iter=T11_ITER, n_burnin=T11_ITER // 2, thin=10, seed=1)
    t0 = time.perf_counter()
    out = run_chain(cfg, ds)
    elapsed = time.perf_counter() - t0
    A = constraint_matrix(ds.grid).A
    viol = max(max(out.max_constraint_violation.values()),
               max(np.abs(out.draws[f"u_{lev.value}"] @ A.T).max() for lev in LEVELS))
    ok = T11_ITER >= 10_000 and elapsed <= 4 * 3600 and viol <= 1e-8 and out.nonfinite_rejections == 0
    assert report("T=11 tractability", ok,
                  f"{T11_ITER} iterations, 121-cell surfaces, {ds.hierarchy.J} countries: "
                  f"{elapsed / 60:.1f} min single chain; max |A u| {viol:.1e}")


def tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_determinism(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[chain]\nn_iter = 40\nn_burnin = 10\n[simulation]\ncountries_per_region = 2\n"
                   "[crossval]\nfolds = 2\nseeds = 1\n[run]\nchains = 2\n")
    same = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        steps = [
            ["simulate", "--config", str(cfg), "--seed", "3", "--out", str(d / "sim")],
            ["fit", "--config", str(cfg), "--seed", "5", "--data", str(d / "sim" / "data.csv"),
             "--out", str(d / "fit"), "--jobs", "2" if tag == "b" else "1"],
            ["crossval", "--config", str(cfg), "--data", str(d / "sim" / "data.csv"),
             "--out", str(d / "cv")],
            ["diagnose", str(d / "fit"), "--out", str(d / "diag")],
            ["export", str(d / "fit"), "--what", "fit-curves", "--out", str(d / "curves.csv")],
            ["export", str(d / "fit"), "--what", "chains", "--out", str(d / "chains")],
            ["export", str(d / "cv"), "--what", "coverage", "--out", str(d / "coverage.csv")],
        ]
        for argv in steps:
            assert main(argv) == 0, argv
        same[tag] = tree(d)
    # input paths differ between the two runs but are not recorded, only hashes
    diff = sorted(k for k in same["a"] if same["a"][k] != same["b"].get(k))
    ok = not diff and same["a"].keys() == same["b"].keys()
    assert report("Determinism", ok, f"simulate, fit (1 vs 2 jobs), crossval, diagnose and 3 exports: "
                                     f"{len(same['a'])} files byte-identical" if ok else f"differ: {diff}")

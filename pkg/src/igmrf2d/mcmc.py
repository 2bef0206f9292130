"""Metropolis-within-Gibbs sampler.

One sweep runs, in order: the conjugate linear block (a, b, beta, gamma, e),
random-walk MH on log tau^2 and log kappa^2, then one joint (lambda, u) block
per hierarchy level.  A (lambda, u) block proposes log lambda* ~ N(log lambda,
omega^2), draws every unit's surface from its full conditional given lambda*
restricted to A u = 0, and accepts or rejects the whole level at once.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, NumericalError
from .gaussian import LOG_2PI, make_rng
from .gmrf import StructureMatrix, build_boundary_structure, build_thin_plate_structure
from .model import (
    COMPONENTS,
    LEVELS,
    Dataset,
    Level,
    ModelState,
    constraint_matrix,
)

log = logging.getLogger(__name__)

BLOCKS = ("linear", "tau", "u_country", "u_region", "u_super_region", "u_global")
LEVEL_INDEX = {lev: i for i, lev in enumerate(LEVELS)}
# adapted proposal sds stay within [1e-3, 5] on the log scale
LOG_SD_BOUNDS = (np.log(1e-3), np.log(5.0))


@dataclass
class ChainConfig:
    n_iter: int = 4000
    n_burnin: int = 2000
    thin: int = 1
    seed: int = 0
    proposal_sd: dict[str, float] = field(default_factory=dict)
    adapt: bool = True
    target_accept: float = 0.3
    log_lambda_prior: tuple[float, float] = (0.0, 10.0)
    init_lambda: float = 1.0
    u_loading: tuple[float, float, float] = (1.0, 1.0, 1.0)
    linear_prior_sd: tuple[float, float, float] = (100.0, 100.0, 1.0e4)
    tau_prior_scale: tuple[float, float, float] = (10.0, 10.0, 10.0)
    kappa_prior_scale: tuple[float, float, float] = (10.0, 10.0, 10.0)
    per_study_tau: bool = False
    # "proposed": proposal densities at the lambda each surface was drawn with;
    # "previous": both at the previous lambda, as the ratio is printed
    proposal_lambda: str = "proposed"
    prior_structure: str = "thin-plate"
    blocks: tuple[str, ...] = BLOCKS
    check_constraints: bool = True
    age_center: float | None = None

    def __post_init__(self):
        if not self.n_iter > self.n_burnin >= 0:
            raise ConfigurationError("need n_iter > n_burnin >= 0")
        if self.thin < 1:
            raise ConfigurationError("thin must be >= 1")
        if any(not v > 0 for v in self.proposal_sd.values()):
            raise ConfigurationError("proposal sds must be positive")
        if self.proposal_lambda not in ("proposed", "previous"):
            raise ConfigurationError(f"unknown proposal_lambda {self.proposal_lambda!r}")
        if self.prior_structure not in ("thin-plate", "printed"):
            raise ConfigurationError(f"unknown prior_structure {self.prior_structure!r}")
        unknown = set(self.blocks) - set(BLOCKS)
        if unknown:
            raise ConfigurationError(f"unknown blocks {sorted(unknown)}")
        self.u_loading = tuple(float(v) for v in self.u_loading)
        self.linear_prior_sd = tuple(float(v) for v in self.linear_prior_sd)
        self.tau_prior_scale = tuple(float(v) for v in self.tau_prior_scale)
        self.kappa_prior_scale = tuple(float(v) for v in self.kappa_prior_scale)
        self.log_lambda_prior = tuple(float(v) for v in self.log_lambda_prior)
        self.blocks = tuple(self.blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    def initial_proposal_sd(self, name: str) -> float:
        if name in self.proposal_sd:
            return float(self.proposal_sd[name])
        return 0.3 if name.startswith("log_lambda") else 0.5


def hyper_names() -> list[str]:
    return ([f"log_lambda_{lev.value}" for lev in LEVELS]
            + [f"log_tau2_{c}" for c in COMPONENTS]
            + [f"log_kappa2_{c}" for c in COMPONENTS])


def prior_structure(name: str, T: int) -> StructureMatrix:
    if name == "thin-plate":
        return build_thin_plate_structure(T)
    return build_boundary_structure(T)


@dataclass
class UProposal:
    """Everything the accept step of a (lambda, u) block needs."""

    level: Level
    lam_old: float
    lam_new: float
    z_old: np.ndarray
    z_new: np.ndarray
    u_new: np.ndarray
    log_ratio: float
    terms: dict[str, float]


class _Adapter:
    """Robbins-Monro on log proposal sd during burn-in, frozen afterwards."""

    def __init__(self, config: ChainConfig):
        self.log_sd = {n: np.log(config.initial_proposal_sd(n)) for n in hyper_names()}
        self.target = config.target_accept
        self.enabled = config.adapt
        self.step = 0

    def sd(self, name: str) -> float:
        return float(np.exp(self.log_sd[name]))

    def update(self, name: str, accept_prob: float, burning: bool) -> None:
        if self.enabled and burning:
            gain = 1.0 / (self.step + 1) ** 0.6
            x = self.log_sd[name] + gain * (accept_prob - self.target)
            self.log_sd[name] = float(np.clip(x, LOG_SD_BOUNDS[0], LOG_SD_BOUNDS[1]))


class Sampler:
    """Holds the precomputed design for one dataset and performs block updates in place."""

    def __init__(self, dataset: Dataset, config: ChainConfig | None = None):
        self.data = dataset
        self.config = config or ChainConfig()
        grid = dataset.grid
        self.T = grid.T
        self.n_cells = grid.n_cells
        self.structure = prior_structure(self.config.prior_structure, self.T)
        self.constraint = constraint_matrix(grid)
        self.B = self.constraint.null_basis
        self.m = self.B.shape[1]
        P = self.structure.dense().astype(float)
        self.P = P
        PB = self.B.T @ P @ self.B
        self.PB = 0.5 * (PB + PB.T)
        sign, self.logdet_PB = np.linalg.slogdet(self.PB)
        if sign <= 0:
            raise NumericalError("prior structure is singular on the constraint subspace")
        self.Bd = self.B[grid.diagonal_flat()]
        self.diag_flat = grid.diagonal_flat()

        h = dataset.hierarchy
        self.mask = dataset.mask
        self.y0 = np.where(self.mask, dataset.y, 0.0)
        self.svar = np.where(self.mask, dataset.sampling_var, 0.0)
        self.tc = dataset.centered_year
        self.dpos = dataset.year - 1
        self.units = {lev: h.unit_of(lev, dataset.country) for lev in LEVELS}
        self.n_units = {lev: h.n_units(lev) for lev in LEVELS}
        self.study_names, self.study_idx = dataset.studies()
        self.n_studies = len(self.study_names)
        N = dataset.N
        self.G = sp.csr_matrix((np.ones(N), (self.study_idx, np.arange(N))),
                               shape=(self.n_studies, N))
        self.loading = np.asarray(self.config.u_loading, dtype=float)

        age_center = self.config.age_center
        if age_center is None:
            age_center = float(np.mean(dataset.age)) if N else 50.0
        self.age_center = age_center
        J, p = h.J, dataset.X.shape[1]
        self.J, self.p = J, p
        F = np.zeros((N, 2 * J + p + 1))
        F[np.arange(N), dataset.country] = 1.0
        F[np.arange(N), J + dataset.country] = self.tc
        F[:, 2 * J:2 * J + p] = dataset.X
        F[:, -1] = dataset.age - age_center
        self.F = F
        self.scenarios = {lev: dataset.scenarios(lev) for lev in LEVELS}
        self.adapter = _Adapter(self.config)
        self.accept = {b: [0, 0] for b in BLOCKS}
        self.nonfinite = 0
        self.max_violation = {lev: 0.0 for lev in LEVELS}

    # -- state helpers -------------------------------------------------

    def initial_state(self) -> ModelState:
        st = ModelState.zeros(self.data, self.age_center, self.config.per_study_tau)
        if self.data.N:
            for k in range(3):
                col = self.data.y[self.mask[:, k], k]
                if col.size:
                    st.a[:, k] = col.mean()
        st.lam[:] = self.config.init_lambda
        return st

    def u_rows(self, state: ModelState, exclude: Level | None = None) -> np.ndarray:
        cell = self.dpos * (self.T + 1)
        tot = np.zeros(self.data.N)
        for lev in LEVELS:
            if lev is not exclude:
                tot += state.u[lev][self.units[lev], cell]
        return tot

    def tau2_rows(self, state: ModelState) -> np.ndarray:
        tau2 = np.asarray(state.tau2)
        return tau2[self.study_idx] if tau2.ndim == 2 else np.broadcast_to(tau2, (self.data.N, 3))

    def precision_rows(self, state: ModelState) -> np.ndarray:
        v = self.svar + self.tau2_rows(state)
        return np.where(self.mask, 1.0 / v, 0.0)

    def linear_part(self, state: ModelState) -> np.ndarray:
        c = self.data.country
        return (state.a[c] + state.b[c] * self.tc[:, None] + self.data.X @ state.beta
                + np.outer(self.data.age - self.age_center, state.gamma))

    def mean_rows(self, state: ModelState, exclude: Level | None = None,
                  with_u: bool = True) -> np.ndarray:
        mu = self.linear_part(state) + state.e[self.study_idx] + state.age_offsets
        if with_u:
            mu = mu + (state.age_scaling * self.u_rows(state, exclude))[:, None] * self.loading
        return mu

    # -- linear block --------------------------------------------------

    def update_linear_block(self, state: ModelState, rng: np.random.Generator) -> ModelState:
        """Joint draw of (a, b, beta, gamma, e) from their Gaussian full conditional.

        (a, b, beta, gamma) come from the marginal with e integrated out,
        then e | rest; together an exact joint draw.
        """
        prec = self.precision_rows(state)
        u_off = (state.age_scaling * self.u_rows(state))[:, None] * self.loading + state.age_offsets
        F, G = self.F, self.G
        J, p = self.J, self.p
        for k in range(3):
            w = prec[:, k]
            r = np.where(self.mask[:, k], self.y0[:, k] - u_off[:, k], 0.0)
            Fw = F * w[:, None]
            H = F.T @ Fw
            H[np.diag_indices_from(H)] += 1.0 / self.config.linear_prior_sd[k] ** 2
            bt = Fw.T @ r
            Fs = G @ Fw
            ws = G @ w
            rs = G @ (w * r)
            D = ws + 1.0 / state.kappa2[k]
            H -= Fs.T @ (Fs / D[:, None])
            bt -= Fs.T @ (rs / D)
            H = 0.5 * (H + H.T)
            try:
                L = np.linalg.cholesky(H)
            except np.linalg.LinAlgError as exc:
                np.save("linear_block_precision_dump.npy", H)
                raise NumericalError(
                    "linear-block precision is not positive definite "
                    "(dumped to linear_block_precision_dump.npy)") from exc
            mu = np.linalg.solve(L.T, np.linalg.solve(L, bt))
            theta = mu + np.linalg.solve(L.T, rng.standard_normal(mu.size))
            state.a[:, k] = theta[:J]
            state.b[:, k] = theta[J:2 * J]
            state.beta[:, k] = theta[2 * J:2 * J + p]
            state.gamma[k] = theta[-1]
            e_mean = (rs - Fs @ theta) / D
            state.e[:, k] = e_mean + rng.standard_normal(self.n_studies) / np.sqrt(D)
        return state

    # -- variance block ------------------------------------------------

    @staticmethod
    def _log_halfnormal_logvar(x: np.ndarray, scale: float) -> np.ndarray:
        """Half-normal(0, scale) prior on sqrt(v), expressed as a density of log v."""
        return -np.exp(x) / (2.0 * scale ** 2) + 0.5 * x

    def update_tau(self, state: ModelState, rng: np.random.Generator,
                   burning: bool = False) -> ModelState:
        """Random-walk MH on log tau^2 (per component or per study) and log kappa^2."""
        res = np.where(self.mask, self.y0 - self.mean_rows(state), 0.0)
        per_study = np.asarray(state.tau2).ndim == 2
        for k in range(3):
            name = f"log_tau2_{COMPONENTS[k]}"
            sd = self.adapter.sd(name)
            m = self.mask[:, k]
            cur = np.log(np.asarray(state.tau2)[..., k])
            prop = cur + sd * rng.standard_normal(np.shape(cur))

            def group_loglik(logt2):
                t2 = np.exp(logt2)[self.study_idx] if per_study else np.exp(logt2)
                v = self.svar[:, k] + t2
                ll = np.where(m, -0.5 * np.log(v) - 0.5 * res[:, k] ** 2 / v, 0.0)
                return self.G @ ll if per_study else ll.sum()

            scale = self.config.tau_prior_scale[k]
            lr = (group_loglik(prop) - group_loglik(cur)
                  + self._log_halfnormal_logvar(prop, scale)
                  - self._log_halfnormal_logvar(cur, scale))
            u = np.log(rng.uniform(size=np.shape(cur)))
            acc = u < lr
            new = np.where(acc, prop, cur)
            if per_study:
                state.tau2[:, k] = np.exp(new)
            else:
                state.tau2[k] = float(np.exp(new))
            self._count("tau", np.sum(acc), np.size(acc), burning)
            self.adapter.update(name, float(np.mean(np.minimum(1.0, np.exp(np.minimum(lr, 0.0))))),
                                burning)

        for k in range(3):
            name = f"log_kappa2_{COMPONENTS[k]}"
            sd = self.adapter.sd(name)
            cur = np.log(state.kappa2[k])
            prop = cur + sd * rng.standard_normal()
            ss = float(np.sum(state.e[:, k] ** 2))
            n = self.n_studies

            def ll(x):
                return -0.5 * n * x - (0.5 * ss * np.exp(-x) if ss > 0 else 0.0)

            scale = self.config.kappa_prior_scale[k]
            lr = (ll(prop) - ll(cur) + self._log_halfnormal_logvar(prop, scale)
                  - self._log_halfnormal_logvar(cur, scale))
            acc = np.log(rng.uniform()) < lr
            if acc:
                state.kappa2[k] = float(np.exp(prop))
            self._count("tau", int(acc), 1, burning)
            self.adapter.update(name, float(min(1.0, np.exp(min(lr, 0.0)))), burning)
        return state

    # -- (lambda, u) blocks --------------------------------------------

    def full_conditional(self, state: ModelState, level: Level) -> tuple[np.ndarray, np.ndarray]:
        """Per-unit diagonal data weights W (G x T) and canonical terms C (G x T).

        The unit's full-conditional precision is B_d' diag(W) B_d + lambda P_B in
        constraint-subspace coordinates, with canonical mean term C B_d.
        """
        level = Level(level)
        prec = self.precision_rows(state)
        r = np.where(self.mask, self.y0 - self.mean_rows(state, exclude=level), 0.0)
        h = state.age_scaling[:, None] * self.loading[None, :]
        wd = np.sum(h * h * prec, axis=1)
        cd = np.sum(h * prec * r, axis=1)
        G = self.n_units[level]
        slot = self.units[level] * self.T + self.dpos
        W = np.bincount(slot, weights=wd, minlength=G * self.T).reshape(G, self.T)
        C = np.bincount(slot, weights=cd, minlength=G * self.T).reshape(G, self.T)
        return W, C

    def subspace_precision(self, W: np.ndarray, lam: float) -> np.ndarray:
        Q = np.einsum("dm,gd,dn->gmn", self.Bd, W, self.Bd, optimize=True)
        return Q + lam * self.PB

    def _factor(self, Q: np.ndarray, bz: np.ndarray):
        try:
            L = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("full-conditional precision is not positive definite") from exc
        mu = np.linalg.solve(Q, bz[..., None])[..., 0]
        half_logdet = np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum()
        return L, mu, float(half_logdet)

    def _quad(self, Q: np.ndarray, d: np.ndarray) -> float:
        return float(np.einsum("gm,gmn,gn->", d, Q, d, optimize=True))

    def log_prior_u(self, z: np.ndarray, lam: float) -> float:
        """Sum over units of the constrained IGMRF log density at subspace coordinates z."""
        G = z.shape[0]
        quad = float(np.einsum("gm,mn,gn->", z, self.PB, z, optimize=True))
        return G * (-0.5 * self.m * LOG_2PI + 0.5 * (self.m * np.log(lam) + self.logdet_PB)) \
            - 0.5 * lam * quad

    def log_hyperprior(self, lam: float) -> float:
        mu, sd = self.config.log_lambda_prior
        return float(-0.5 * ((np.log(lam) - mu) / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI)

    def loglik_u(self, W: np.ndarray, C: np.ndarray, z: np.ndarray) -> float:
        """Level-u part of the log likelihood, up to a u-free constant."""
        x = z @ self.Bd.T
        return float(np.sum(-0.5 * W * x * x + C * x))

    def propose_u_block(self, state: ModelState, level: Level,
                        rng: np.random.Generator) -> UProposal:
        level = Level(level)
        li = LEVEL_INDEX[level]
        lam_old = float(state.lam[li])
        sd = self.adapter.sd(f"log_lambda_{level.value}")
        lam_new = float(np.exp(np.log(lam_old) + sd * rng.standard_normal()))
        W, C = self.full_conditional(state, level)
        bz = C @ self.Bd
        z_old = state.u[level] @ self.B

        Q_new = self.subspace_precision(W, lam_new)
        xi = rng.standard_normal(bz.shape)
        try:
            L_new, mu_new, hld_new = self._factor(Q_new, bz)
        except NumericalError:
            # lambda* so extreme that the conditional is numerically singular
            return UProposal(level, lam_old, lam_new, z_old, z_old, state.u[level],
                             -np.inf, {})
        z_new = mu_new + np.linalg.solve(np.swapaxes(L_new, -1, -2), xi[..., None])[..., 0]

        Q_old = self.subspace_precision(W, lam_old)
        L_old, mu_old, hld_old = self._factor(Q_old, bz)
        G = z_old.shape[0]
        const = -0.5 * self.m * LOG_2PI * G
        q_old = const + hld_old - 0.5 * self._quad(Q_old, z_old - mu_old)
        if self.config.proposal_lambda == "proposed":
            q_new = const + hld_new - 0.5 * float(np.sum(xi * xi))
        else:
            q_new = const + hld_old - 0.5 * self._quad(Q_old, z_new - mu_old)

        terms = {
            "loglik_new": self.loglik_u(W, C, z_new),
            "loglik_old": self.loglik_u(W, C, z_old),
            "prior_new": self.log_prior_u(z_new, lam_new),
            "prior_old": self.log_prior_u(z_old, lam_old),
            "hyper_new": self.log_hyperprior(lam_new),
            "hyper_old": self.log_hyperprior(lam_old),
            "proposal_old": q_old,
            "proposal_new": q_new,
        }
        log_ratio = (terms["loglik_new"] + terms["prior_new"] + terms["hyper_new"]
                     + terms["proposal_old"]
                     - terms["loglik_old"] - terms["prior_old"] - terms["hyper_old"]
                     - terms["proposal_new"])
        return UProposal(level, lam_old, lam_new, z_old, z_new, z_new @ self.B.T,
                         float(log_ratio), terms)

    def update_u_block(self, state: ModelState, level: Level, rng: np.random.Generator,
                       burning: bool = False) -> ModelState:
        level = Level(level)
        prop = self.propose_u_block(state, level, rng)
        log_u = np.log(rng.uniform())
        if not np.isfinite(prop.log_ratio):
            self.nonfinite += 1
            accepted = False
        else:
            accepted = bool(log_u < prop.log_ratio)
        if accepted:
            state.u[level] = prop.u_new
            state.lam[LEVEL_INDEX[level]] = prop.lam_new
        self._count(f"u_{level.value}", int(accepted), 1, burning)
        alpha = min(1.0, float(np.exp(min(prop.log_ratio, 0.0)))) if np.isfinite(prop.log_ratio) else 0.0
        self.adapter.update(f"log_lambda_{level.value}", alpha, burning)
        if self.config.check_constraints:
            viol = float(np.abs(state.u[level] @ self.constraint.A.T).max(initial=0.0))
            self.max_violation[level] = max(self.max_violation[level], viol)
        return state

    # -- bookkeeping ---------------------------------------------------

    def _count(self, block: str, accepted: int, tried: int, burning: bool) -> None:
        if not burning:
            self.accept[block][0] += int(accepted)
            self.accept[block][1] += int(tried)

    def sweep(self, state: ModelState, rng: np.random.Generator, burning: bool = False) -> ModelState:
        blocks = self.config.blocks
        if "linear" in blocks:
            self.update_linear_block(state, rng)
            self._count("linear", 1, 1, burning)  # exact Gibbs draw
        if "tau" in blocks:
            self.update_tau(state, rng, burning)
        for lev in LEVELS:
            if f"u_{lev.value}" in blocks:
                self.update_u_block(state, lev, rng, burning)
        self.adapter.step += 1
        return state

    def measured_null_dims(self, state: ModelState, level: Level) -> list[int]:
        """Null dimension of each unit's unconstrained full-conditional precision."""
        W, _ = self.full_conditional(state, level)
        out = []
        for g in range(W.shape[0]):
            Q = self.P.copy()
            Q[self.diag_flat, self.diag_flat] += W[g] / max(state.lam[LEVEL_INDEX[level]], 1e-300)
            w = np.linalg.eigvalsh(Q)
            out.append(int(np.sum(np.abs(w) < self.structure.tol * np.abs(w).max())))
        return out


@dataclass
class ChainOutput:
    draws: dict[str, np.ndarray]
    accept: dict[str, tuple[int, int]]
    config: ChainConfig
    scenarios: dict[str, list[str]]
    null_dims: dict[str, list[int]]
    max_constraint_violation: dict[str, float]
    nonfinite_rejections: int = 0
    age_center: float = 50.0
    timing: float = 0.0
    final_state: ModelState | None = None

    @property
    def n_stored(self) -> int:
        return int(self.draws["lambda"].shape[0])

    def acceptance_rates(self) -> dict[str, float]:
        return {b: (a / t if t else float("nan")) for b, (a, t) in self.accept.items()}

    def u_total(self, country: int, hierarchy) -> np.ndarray:
        """Stored draws of the country's summed surface, shape (S, T^2)."""
        r = hierarchy.country_region[country]
        s = hierarchy.region_super[r]
        return (self.draws["u_country"][:, country] + self.draws["u_region"][:, r]
                + self.draws["u_super_region"][:, s] + self.draws["u_global"][:, 0])


SCALAR_KEYS = ("a", "b", "beta", "gamma", "e", "tau2", "kappa2", "lambda")


def _snapshot(state: ModelState) -> dict[str, np.ndarray]:
    out = {"a": state.a, "b": state.b, "beta": state.beta, "gamma": state.gamma, "e": state.e,
           "tau2": np.asarray(state.tau2), "kappa2": state.kappa2, "lambda": state.lam}
    for lev in LEVELS:
        out[f"u_{lev.value}"] = state.u[lev]
    return {k: np.array(v, dtype=float, copy=True) for k, v in out.items()}


def run_chain(config: ChainConfig, dataset: Dataset, state: ModelState | None = None,
              rng: np.random.Generator | None = None) -> ChainOutput:
    """Run one chain; stores ceil((n_iter - n_burnin) / thin) post-burn-in states."""
    t0 = time.perf_counter()
    rng = rng if rng is not None else make_rng(config.seed)
    sampler = Sampler(dataset, config)
    state = state if state is not None else sampler.initial_state()
    null_dims = {lev.value: sampler.measured_null_dims(state, lev) for lev in LEVELS}
    stored: list[dict[str, np.ndarray]] = []
    for it in range(config.n_iter):
        burning = it < config.n_burnin
        sampler.sweep(state, rng, burning)
        if not burning and (it - config.n_burnin) % config.thin == 0:
            stored.append(_snapshot(state))
    draws = {k: np.stack([s[k] for s in stored]) for k in stored[0]}
    elapsed = time.perf_counter() - t0
    log.info("chain seed=%s finished %d iterations in %.1fs", config.seed, config.n_iter, elapsed)
    if sampler.nonfinite:
        log.warning("%d (lambda, u) proposals rejected for a non-finite ratio", sampler.nonfinite)
    return ChainOutput(
        draws=draws,
        accept={b: tuple(v) for b, v in sampler.accept.items()},
        config=config,
        scenarios={lev.value: [s.name for s in sampler.scenarios[lev]] for lev in LEVELS},
        null_dims=null_dims,
        max_constraint_violation={lev.value: sampler.max_violation[lev] for lev in LEVELS},
        nonfinite_rejections=sampler.nonfinite,
        age_center=sampler.age_center,
        timing=elapsed,
        final_state=state,
    )


def predictive_draws(output: ChainOutput, dataset: Dataset, rng: np.random.Generator,
                     with_noise: bool = True) -> np.ndarray:
    """Posterior-predictive draws (S, N, 3) for rows of ``dataset``.

    Rows are treated as new studies: their study effect is drawn from
    N(0, kappa^2) rather than read from the chain.
    """
    d = output.draws
    h = dataset.hierarchy
    c = dataset.country
    cell = (dataset.year - 1) * (dataset.grid.T + 1)
    tc = dataset.centered_year
    ld = np.asarray(output.config.u_loading)
    u = (d["u_country"][:, c, cell] + d["u_region"][:, h.country_region[c], cell]
         + d["u_super_region"][:, h.country_super[c], cell] + d["u_global"][:, 0, cell])
    mu = (d["a"][:, c] + d["b"][:, c] * tc[None, :, None]
          + np.einsum("np,spk->snk", dataset.X, d["beta"])
          + (dataset.age - output.age_center)[None, :, None] * d["gamma"][:, None, :]
          + u[..., None] * ld)
    if not with_noise:
        return mu
    tau2 = d["tau2"]
    if tau2.ndim == 3:
        tau2 = tau2.mean(axis=1)
    var = dataset.sampling_var[None] + tau2[:, None, :] + d["kappa2"][:, None, :]
    var = np.where(np.isnan(var), 0.0, var)
    return mu + np.sqrt(var) * rng.standard_normal(mu.shape)

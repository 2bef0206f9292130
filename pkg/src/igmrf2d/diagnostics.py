"""Convergence diagnostics: split-Rhat and effective sample size across chains."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigurationError

RHAT_WARN = 1.05


def _split(chains: np.ndarray) -> np.ndarray:
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    n = chains.shape[1] // 2
    return np.concatenate([chains[:, :n], chains[:, -n:]], axis=0)


def split_rhat(chains: np.ndarray) -> float:
    """Split potential scale reduction for an (n_chains, n_draws) array.

    Returns NaN when the within-chain variance is zero (degenerate chains).
    """
    x = _split(chains)
    m, n = x.shape
    if n < 2:
        return float("nan")
    W = x.var(axis=1, ddof=1).mean()
    if not W > 0:
        return float("nan")
    B = n * x.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / n


def ess(chains: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence (split chains)."""
    x = _split(chains)
    m, n = x.shape
    if n < 4:
        return float("nan")
    acov = np.array([_autocov(c) for c in x])
    W = x.var(axis=1, ddof=1).mean()
    if not W > 0:
        return float("nan")
    chain_mean = x.mean(axis=1)
    var_plus = (n - 1) / n * W + (chain_mean.var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0) * n / (n - 1)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair, forced monotone
    pairs = rho[:-1:2] + rho[1::2]
    stop = np.flatnonzero(pairs < 0)
    pairs = pairs[: stop[0]] if stop.size else pairs
    if pairs.size == 0:
        return float(m * n)
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


@dataclass
class DiagnosticReport:
    table: pd.DataFrame
    acceptance: pd.DataFrame
    warnings: list[str]

    @property
    def degenerate(self) -> list[str]:
        return self.table.loc[self.table["status"] == "degenerate", "parameter"].tolist()


def diagnose_arrays(draws: dict[str, np.ndarray]) -> pd.DataFrame:
    """draws: parameter -> (n_chains, n_draws)."""
    rows = []
    for name, x in draws.items():
        r = split_rhat(x)
        e = ess(x)
        if np.isnan(r):
            status = "degenerate"
        elif r > RHAT_WARN:
            status = "rhat>1.05"
        else:
            status = "ok"
        rows.append({"parameter": name, "ess": e, "rhat": r, "status": status})
    return pd.DataFrame(rows, columns=["parameter", "ess", "rhat", "status"])


def diagnose(outputs: list, parameters: list[str] | None = None) -> DiagnosticReport:
    """ESS, split-Rhat and acceptance rates for one or more ChainOutputs of the same run."""
    from .io import scalar_columns

    if not outputs:
        raise ConfigurationError("diagnose needs at least one chain")
    ref = {k: v for k, v in outputs[0].config.to_dict().items() if k != "seed"}
    for o in outputs[1:]:
        cfg = {k: v for k, v in o.config.to_dict().items() if k != "seed"}
        if cfg != ref:
            raise ConfigurationError("chains were run with different configurations")
    tables = [scalar_columns(o) for o in outputs]
    names = tables[0][0]
    if any(t[0] != names for t in tables[1:]):
        raise ConfigurationError("chains store different parameters")
    n = min(t[1].shape[0] for t in tables)
    stacked = np.stack([t[1][:n] for t in tables])  # chains x draws x params
    keep = parameters or names
    idx = [names.index(p) for p in keep]
    table = diagnose_arrays({names[i]: stacked[:, :, i] for i in idx})
    acc = pd.DataFrame([{"chain": c, "block": b, "accepted": a, "attempted": t,
                         "rate": (a / t if t else float("nan"))}
                        for c, o in enumerate(outputs) for b, (a, t) in o.accept.items()])
    msgs = [f"{r.parameter}: split-Rhat {r.rhat:.3f} > {RHAT_WARN}"
            for r in table.itertuples() if r.status == "rhat>1.05"]
    if msgs:
        warnings.warn(f"{len(msgs)} parameter(s) with split-Rhat > {RHAT_WARN}", stacklevel=2)
    return DiagnosticReport(table, acc, msgs)

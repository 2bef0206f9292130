import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from igmrf2d.errors import ConfigurationError, MappingError, ValidationError
from igmrf2d.io import (
    IngestReport,
    SchemaError,
    chain_files,
    ingest_csv,
    parse_config,
    read_chain,
    write_chain,
    write_dataset_csv,
)
from igmrf2d.mcmc import ChainConfig, run_chain
from igmrf2d.model import Scenario, Level
from igmrf2d.sim import SimDesign, simulate_dataset

from conftest import make_dataset


def frame(rows):
    """rows: (country, calendar year) pairs."""
    return pd.DataFrame({
        "study_id": [f"s{i}" for i in range(len(rows))],
        "country": [c for c, _ in rows],
        "region": "R1", "super_region": "S1",
        "year": [y for _, y in rows],
        "age_mid": 45.0, "sex": "female",
        "mean_dbp": 80.0, "sd_dbp": 10.0, "mean_sbp": 125.0, "sd_sbp": 15.0,
        "mean_int": 10000.0, "sd_int": 2000.0, "n": 100,
    })


def write(df, path):
    df.to_csv(path, index=False)
    return path


def test_calendar_years_map_to_grid(tmp_path):
    p = write(frame([("A", 2004), ("A", 2009), ("B", 2014)]), tmp_path / "d.csv")
    ds, report = ingest_csv(p)
    assert isinstance(report, IngestReport)
    assert (report.T, report.year_origin) == (11, 2004)
    assert ds.grid.T == 11
    assert ds.year.tolist() == [1, 6, 11]


def test_single_row_is_one_year_scenario(tmp_path):
    p = write(frame([("A", 2000)]), tmp_path / "d.csv")
    ds, _ = ingest_csv(p, T=5)
    assert ds.scenarios(Level.COUNTRY) == [Scenario.ONE_YEAR]
    assert np.allclose(ds.sampling_var, [[1.0, 2.25, 40000.0]])


def test_every_bad_row_is_reported(tmp_path):
    df = frame([("A", 2000), ("A", 2001), ("B", 2002), ("B", 2003)])
    df["mean_dbp"] = df["mean_dbp"].astype(object)
    df.loc[1, "sd_sbp"] = 0.0
    df.loc[3, "n"] = -4
    df.loc[2, "mean_dbp"] = "high"
    with pytest.raises(SchemaError) as info:
        ingest_csv(write(df, tmp_path / "d.csv"))
    rows = sorted({i.row for i in info.value.issues})
    assert rows == [2, 3, 4]
    assert "row 2: sd_sbp=0.0 must be > 0" in str(info.value)


def test_missing_intensity_is_allowed(tmp_path):
    df = frame([("A", 2000), ("A", 2001)])
    df["mean_int"] = df["mean_int"].astype(object)
    df.loc[0, ["mean_int", "sd_int"]] = np.nan
    ds, _ = ingest_csv(write(df, tmp_path / "d.csv"))
    assert np.isnan(ds.y[0, 2]) and not ds.mask[0, 2]
    df.loc[1, "sd_int"] = np.nan
    with pytest.raises(SchemaError):
        ingest_csv(write(df, tmp_path / "d2.csv"))


def test_empty_and_headerless_files(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ValidationError, match="empty"):
        ingest_csv(tmp_path / "empty.csv")
    (tmp_path / "header.csv").write_text(",".join(frame([("A", 1)]).columns) + "\n")
    with pytest.raises(ValidationError, match="no data rows"):
        ingest_csv(tmp_path / "header.csv")
    write(frame([("A", 1)]).drop(columns="n"), tmp_path / "nocol.csv")
    with pytest.raises(ValidationError, match="missing column"):
        ingest_csv(tmp_path / "nocol.csv")


def test_year_outside_grid_is_an_error(tmp_path):
    p = write(frame([("A", 2004), ("A", 2012)]), tmp_path / "d.csv")
    with pytest.raises(SchemaError, match="outside 2004..2008"):
        ingest_csv(p, T=5)


def test_conflicting_hierarchy(tmp_path):
    df = frame([("A", 2000), ("A", 2001)])
    df.loc[1, "region"] = "R2"
    with pytest.raises(MappingError):
        ingest_csv(write(df, tmp_path / "d.csv"))


def test_hierarchy_file_adds_countries(tmp_path):
    p = write(frame([("A", 2000)]), tmp_path / "d.csv")
    pd.DataFrame({"country": ["Z"], "region": ["R9"], "super_region": ["S9"]}).to_csv(
        tmp_path / "h.csv", index=False)
    ds, _ = ingest_csv(p, T=3, hierarchy_path=tmp_path / "h.csv")
    assert set(ds.hierarchy.countries) == {"A", "Z"}
    assert ds.scenarios(Level.COUNTRY)[ds.hierarchy.country_index("Z")] is Scenario.NO_DATA


def test_dataset_round_trip_is_exact(tmp_path):
    ds, _ = simulate_dataset(SimDesign(countries_per_region=1, n_covariates=2), 8)
    write_dataset_csv(ds, tmp_path / "a.csv", year_origin=1990)
    back, report = ingest_csv(tmp_path / "a.csv", T=5, year_origin=1990)
    assert report.year_origin == 1990
    for name in ("y", "sd", "X", "age", "year", "n", "country"):
        assert np.array_equal(getattr(back, name), getattr(ds, name)), name
    assert back.covariate_names == ("cov_1", "cov_2")
    write_dataset_csv(back, tmp_path / "b.csv", year_origin=1990)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# -- config ----------------------------------------------------------------

def test_parse_config():
    rc = parse_config("""
[chain]
n_iter = 500
n_burnin = 100
proposal_lambda = previous
log_lambda_prior = 0.0, 2.0
blocks = linear, tau, u_country

[proposal_sd]
log_lambda_country = 0.2

[simulation]
T = 7
years_observed = 1, 4, 7

[grid]
T = 7

[crossval]
folds = 4
seeds = 1, 2, 3

[run]
chains = 2
""")
    assert rc.chain.n_iter == 500 and rc.chain.proposal_lambda == "previous"
    assert rc.chain.log_lambda_prior == (0.0, 2.0)
    assert rc.chain.blocks == ("linear", "tau", "u_country")
    assert rc.chain.proposal_sd == {"log_lambda_country": 0.2}
    assert rc.design.years_observed == (1, 4, 7)
    assert (rc.T, rc.folds, rc.seeds, rc.chains) == (7, 4, (1, 2, 3), 2)


@pytest.mark.parametrize("text", [
    "[chain]\nbogus = 1\n",
    "[nowhere]\nx = 1\n",
    "[chain]\nn_iter = many\n",
    "[chain]\nn_iter = 10\nn_burnin = 20\n",
    "not an ini file",
])
def test_bad_config(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


# -- chains -------------------------------------------------------------------

@pytest.fixture(scope="module")
def chain():
    ds = make_dataset([("A", 1), ("A", 3), ("B", 2)], n_cov=1)
    return run_chain(ChainConfig(n_iter=30, n_burnin=10, seed=3), ds)


def test_chain_round_trip(tmp_path, chain):
    write_chain(chain, tmp_path / "c", config_text="[chain]\n")
    back = read_chain(tmp_path / "c")
    for k, v in chain.draws.items():
        assert np.array_equal(back.draws[k], v), k
    assert back.config == chain.config
    assert back.accept == chain.accept
    write_chain(back, tmp_path / "d", config_text="[chain]\n")
    for f in chain_files():
        assert (tmp_path / "c" / f).read_bytes() == (tmp_path / "d" / f).read_bytes(), f


def test_manifest_is_standard_json(tmp_path, chain):
    write_chain(chain, tmp_path / "c")
    text = (tmp_path / "c" / "manifest.json").read_text()
    manifest = json.loads(text, parse_constant=lambda c: pytest.fail(f"non-standard {c}"))
    assert manifest["seed"] == 3
    assert "constraint_resolution" in manifest


def test_undefined_rates_become_null(tmp_path, chain):
    idle = dataclasses.replace(chain, accept={**chain.accept, "u_global": (0, 0)})
    write_chain(idle, tmp_path / "c")
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["acceptance_rates"]["u_global"] is None


def test_missing_artifact_is_named(tmp_path, chain):
    write_chain(chain, tmp_path / "c")
    (tmp_path / "c" / "u_region.npy").unlink()
    with pytest.raises(ValidationError, match="u_region.npy"):
        read_chain(tmp_path / "c")

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmap_adiabatic.bench import (
    CSV_HEADER,
    FitResult,
    SweepConfig,
    config_from_mapping,
    csv_rows,
    default_config_path,
    fit_order,
    format_csv,
    format_json,
    load_config,
    run_sweep,
    verdict,
    with_overrides,
)
from qmap_adiabatic.errors import AtFloor, ConfigError, InsufficientPoints

NS = [16, 32, 64, 128, 256, 512]


# -- fit_order --------------------------------------------------------------


def test_fit_exact_inverse_law():
    fit = fit_order([(n, 7 / n) for n in NS])
    assert abs(fit.slope + 1) <= 1e-12
    assert fit.intercept == pytest.approx(math.log(7), abs=1e-12)
    assert fit.residual <= 1e-12


def test_fit_inverse_square():
    assert fit_order([(n, 3 / n**2) for n in NS]).slope == pytest.approx(-2.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(p=st.sampled_from([0.5, 1.0, 2.0]), c=st.floats(1e-3, 1e3))
def test_fit_recovers_exponents(p, c):
    fit = fit_order([(n, c * n ** (-p)) for n in [16 * 2**k for k in range(9)]])
    assert abs(fit.slope + p) <= 1e-10


def test_fit_excludes_floor_values():
    pts = [(n, 5 / n) for n in NS] + [(1024, 1e-13), (2048, 0.0)]
    fit = fit_order(pts)
    assert fit.excluded == (1024, 2048)
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)


def test_fit_errors():
    with pytest.raises(InsufficientPoints):
        fit_order([(16, 1.0), (32, 0.5), (64, 0.25)])
    with pytest.raises(AtFloor):
        fit_order([(n, 1e-14) for n in NS])
    with pytest.raises(InsufficientPoints):
        fit_order([(16, 1.0), (32, 0.5), (64, 0.25), (128, 1e-13), (256, 0.0)])


# -- verdicts ---------------------------------------------------------------


def _fit(slope):
    return FitResult(slope, 0.0, 0.0, tuple(NS), ())


def test_verdict_windows():
    cfg = SweepConfig("constant")
    assert verdict("offdiag_W", [1.0], _fit(-1.1), cfg) == "pass"
    assert verdict("offdiag_W", [1.0], _fit(-1.2), cfg) == "fail"
    assert verdict("offdiag_W", [1.0], _fit(-2.0), cfg) == "fail"
    assert verdict("R2_max", [1.0], _fit(-1.75), cfg) == "pass"
    assert verdict("R2_max", [1.0], _fit(-1.0), cfg) == "fail"
    assert verdict("diag_W", [1.0], _fit(-2.0), cfg) == "pass"
    assert verdict("diag_W", [1.0], _fit(-0.5), cfg) == "fail"
    assert verdict("offdiag_W", [1e-11, 1e-12], None, cfg) == "exact"
    assert verdict("offdiag_W", [1.0], None, cfg) == "insufficient"


@settings(max_examples=200, deadline=None)
@given(slope=st.floats(-4, 1), w1=st.floats(0.01, 1), shrink=st.floats(0.0, 1.0),
       name=st.sampled_from(["offdiag_W", "diag_W", "R2_max", "V_diag_max"]))
def test_verdict_monotone_in_window(slope, w1, shrink, name):
    loose = SweepConfig("constant", window_order1=w1, window_order2=w1)
    w2 = max(w1 * shrink, 1e-6)
    tight = SweepConfig("constant", window_order1=w2, window_order2=w2)
    if verdict(name, [1.0], _fit(slope), loose) == "fail":
        assert verdict(name, [1.0], _fit(slope), tight) == "fail"


# -- config -----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        SweepConfig("rotating_projector", N_list=(16, 32, 64))
    with pytest.raises(ConfigError):
        SweepConfig("rotating_projector", N_list=(16, 32, 32, 64))
    with pytest.raises(ConfigError):
        SweepConfig("rotating_projector", N_list=(1, 2, 3, 4))
    with pytest.raises(ConfigError):
        SweepConfig("nope")
    with pytest.raises(ConfigError):
        SweepConfig("crossing", params={"omega": 1})
    with pytest.raises(ConfigError):
        SweepConfig("constant", warp="wobble")
    with pytest.raises(ConfigError):
        SweepConfig("constant", s_start=0.0)
    with pytest.raises(ConfigError):
        SweepConfig("constant", seed=-1)


def test_config_from_flat_keys():
    cfg = config_from_mapping({"model": "kicked", "dim": 3, "seed": 5, "gap_min": 0.01,
                               "N_list": [8, 16, 32, 64]})
    assert cfg.params == {"dim": 3}
    assert cfg.seed == 5 and cfg.model_params() == {"dim": 3, "seed": 5}
    assert cfg.gap_min == 0.01 and cfg.N_list == (8, 16, 32, 64)
    with pytest.raises(ConfigError):
        config_from_mapping({"dim": 3})


def test_seed_overrides_model_seed():
    cfg = SweepConfig("kicked", params={"seed": 5}, seed=9)
    assert cfg.model_params()["seed"] == 9
    assert SweepConfig("constant", seed=9).model_params() == {}


def test_load_config_files(tmp_path):
    cfg = load_config(default_config_path())
    assert cfg.model == "rotating_projector" and cfg.warp == "sine"
    assert len(cfg.N_list) == 9
    bad = tmp_path / "bad.toml"
    bad.write_text("model = \n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_minimal_config_is_just_the_model(tmp_path):
    p = tmp_path / "m.toml"
    p.write_text('model = "constant"\n')
    cfg = load_config(p)
    assert cfg.N_list[0] == 16 and cfg.N_list[-1] == 4096


def test_with_overrides_revalidates():
    cfg = SweepConfig("constant")
    assert with_overrides(cfg, workers=None) is cfg
    assert with_overrides(cfg, workers=3).workers == 3
    with pytest.raises(ConfigError):
        with_overrides(cfg, format="xml")


# -- sweeps -----------------------------------------------------------------

SMALL = (16, 32, 64, 128)


def test_constant_sweep_is_exact():
    rep = run_sweep(SweepConfig("constant", N_list=SMALL))
    assert rep.passed
    assert set(rep.verdicts.values()) == {"exact"}
    assert all(v <= 1e-10 for r in rep.rows for k, v in r.items()
               if k in CSV_HEADER[1:-1])
    assert all(f.get("error") == "AtFloor" for f in rep.fits.values())


def test_crossing_sweep_fails_before_rows():
    rep = run_sweep(SweepConfig("crossing", N_list=(17, 33, 65, 129)))
    assert not rep.passed and rep.fits == {} and rep.verdicts == {}
    assert {r["status"] for r in rep.rows} == {"GapViolation"}
    assert all(r["offdiag_W"] is None for r in rep.rows)


def test_row_errors_are_recorded_and_block_fits():
    # gap_min above the rotating model's gap at coarse N only via the pre-check
    rep = run_sweep(SweepConfig("rotating_projector", params={"theta_plus": 0.001,
                                                              "theta_minus": 0.0},
                                N_list=SMALL, gap_min=0.01))
    assert not rep.passed
    assert rep.rows[0]["status"] == "GapViolation" and rep.fits == {}


def test_report_formats_and_determinism(tmp_path):
    cfg = SweepConfig("kicked", params={"dim": 3}, N_list=SMALL, seed=4)
    a, b = run_sweep(cfg), run_sweep(cfg)
    assert csv_rows(a) == csv_rows(b)
    text = format_csv(a)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines[1].split(",")) == len(CSV_HEADER)
    assert any(ln.startswith("# fit offdiag_W: slope=") for ln in lines)
    assert lines[-1].startswith("# elapsed_s=")
    doc = json.loads(format_json(a))
    assert {"rows", "fits", "verdicts", "config"} <= set(doc)
    assert doc["config"]["seed"] == 4 and doc["rows"][0]["N"] == 16
    other = run_sweep(with_overrides(cfg, seed=5))
    assert csv_rows(other) != csv_rows(a)


def test_workers_match_serial():
    cfg = SweepConfig("kicked", params={"dim": 3}, N_list=SMALL)
    assert csv_rows(run_sweep(cfg)) == csv_rows(run_sweep(with_overrides(cfg, workers=2)))

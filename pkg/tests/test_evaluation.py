import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lattice_count
from wavesplit.acoustics import PointSource, Wavenumber, sample_source_positions
from wavesplit.evaluation import (
    AGGREGATE_FIELDS,
    ROW_FIELDS,
    ExperimentConfig,
    MissingWeightsError,
    eval_grid,
    field_map,
    field_sdr,
    localization_errors,
    parse_plane,
    rmse,
    run_sweep,
    sdr,
    write_field_csv,
)
from wavesplit.models import build_ssl
from wavesplit.pipeline import reconstruct

K = Wavenumber(500.0).k


def test_rmse_examples():
    assert rmse([(0, 0, 0)], [(0.3, 0, 0.4)], 1) == pytest.approx(0.5)
    t = [(0, 0, 0), (1, 0, 0)]
    assert rmse(t, t[::-1], 2) == 0.0
    assert rmse(t, [(0, 0, 0), (1, 0, 1)], 2) == pytest.approx(math.sqrt(0.5))
    with pytest.raises(ValueError):
        rmse(t, t, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rmse_relabeling_symmetry(seed):
    g = np.random.default_rng(seed)
    t, e = g.normal(size=(2, 3)), g.normal(size=(2, 3))
    ref = rmse(t, e, 2)
    assert rmse(t[::-1], e[::-1], 2) == ref
    assert rmse(t, e[::-1], 2) == rmse(t[::-1], e, 2)
    assert rmse(e, t, 2) == ref


def test_sdr_examples(rng):
    p = rng.normal(size=500) + 1j * rng.normal(size=500)
    assert sdr(p, p) == 100.0
    assert sdr(p, np.zeros_like(p)) == 0.0
    e = rng.normal(size=500) + 1j * rng.normal(size=500)
    e *= math.sqrt(0.1 * np.sum(np.abs(p) ** 2) / np.sum(np.abs(e) ** 2))
    assert sdr(p, p + e) == pytest.approx(10.0, abs=1e-9)
    assert sdr(p, p + e, literal=True) == pytest.approx(-10.0, abs=1e-9)
    assert sdr(p, p + 1e9 * e) == -100.0
    with pytest.raises(ValueError):
        sdr(np.zeros(3), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(-np.pi, np.pi))
def test_sdr_invariant_to_common_complex_factor(seed, mag, phase):
    g = np.random.default_rng(seed)
    p = g.normal(size=20) + 1j * g.normal(size=20)
    r = p + 0.3 * (g.normal(size=20) + 1j * g.normal(size=20))
    c = mag * np.exp(1j * phase)
    assert sdr(c * p, c * r) == pytest.approx(sdr(p, r), abs=1e-9)


def test_eval_grid_strict_interior():
    pts = eval_grid(0.1, 1.0)
    assert np.linalg.norm(pts, axis=1).max() < 1.0
    assert len(pts) == lattice_count(0.1, 1.0, closed=False)


def test_field_sdr_skips_source_points():
    grid = eval_grid(0.2)
    truth = [PointSource((0.0, 0.0, 0.0), 1.0)]  # the origin is a grid point
    assert field_sdr(truth, truth, K, grid) == 100.0
    assert field_sdr(truth, [PointSource((0.2, 0.0, 0.0), 1.0)], K, grid) < 10.0


def test_trial_count_validated():
    with pytest.raises(ValueError):
        ExperimentConfig(trials=0)
    with pytest.raises(ValueError):
        ExperimentConfig(method="shd")
    with pytest.raises(ValueError):
        ExperimentConfig(frequencies=(0.0,))


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_sparse_sweep_csv_and_aggregates(tmp_path, mics):
    cfg = ExperimentConfig(frequencies=(300.0, 500.0), snrs=(20.0, 40.0), S=1, trials=4, method="sparse", seed=3,
                           sdr_pitch=0.2)
    out, agg = tmp_path / "m.csv", tmp_path / "a.csv"
    rows, aggs = run_sweep(cfg, None, mics, out, agg)
    assert len(rows) == 16 and len(aggs) == 4
    text = out.read_text()
    assert text.splitlines()[0] == ",".join(ROW_FIELDS)
    assert agg.read_text().splitlines()[0] == ",".join(AGGREGATE_FIELDS)
    rows_csv = _read(out)
    for a in _read(agg):
        block = [r for r in rows_csv if r["frequency_hz"] == a["frequency_hz"] and r["snr_db"] == a["snr_db"]]
        assert int(a["trials"]) == len(block) == 4
        r = np.array([float(b["rmse_m"]) for b in block])
        assert float(a["mean_rmse_m"]) == pytest.approx(r.mean(), rel=1e-15)
        assert float(a["rms_rmse_m"]) == pytest.approx(np.sqrt(np.mean(r ** 2)), rel=1e-15)
        assert float(a["mean_sdr_db"]) == pytest.approx(np.mean([float(b["sdr_db"]) for b in block]), rel=1e-15)
        assert a["method"] == "sparse-0.2"
    out2 = tmp_path / "m2.csv"
    run_sweep(cfg, None, mics, out2)
    assert out2.read_bytes() == out.read_bytes()


def test_two_source_sparse_sweep(mics):
    cfg = ExperimentConfig(S=2, trials=3, method="sparse", sdr_pitch=0.25)
    rows, _ = run_sweep(cfg, None, mics)
    assert all(r["S"] == 2 and np.isfinite(r["rmse_m"]) for r in rows)


def test_held_out_positions_are_used(mics):
    held = sample_source_positions(np.random.default_rng(0), 3, 0.5)
    cfg = ExperimentConfig(trials=3, method="sparse", positions=held, sparse_pitch=0.1, sdr_pitch=0.25)
    rows, _ = run_sweep(cfg, None, mics)
    assert all(r["rmse_m"] <= 0.1 * math.sqrt(3) / 2 for r in rows)


def test_missing_weights(mics):
    with pytest.raises(MissingWeightsError):
        run_sweep(ExperimentConfig(trials=1, method="proposed"), {}, mics)
    ssl = build_ssl(64)
    with pytest.raises(MissingWeightsError):
        run_sweep(ExperimentConfig(S=2, trials=1, method="proposed"), {"ssl": {500.0: ssl}}, mics)
    with pytest.raises(MissingWeightsError):
        run_sweep(ExperimentConfig(trials=1, frequencies=(400.0,)), {"ssl": {500.0: ssl}}, mics)


def test_proposed_single_source_sweep_runs(mics):
    rows, aggs = run_sweep(ExperimentConfig(trials=2, sdr_pitch=0.25), {"ssl": {500.0: build_ssl(64)}}, mics)
    assert len(rows) == 2 and aggs[0]["method"] == "proposed"


def test_field_map(tmp_path):
    srcs = [PointSource((0.0, 0.0, 0.0), 1.0), PointSource((0.3, -0.2, 0.1), 0.5j)]
    pts, vals = field_map(srcs, "z=0", 1.0, 0.1, K)
    assert pts.shape == (21 * 21, 3) and np.all(pts[:, 2] == 0)
    centre = np.flatnonzero(np.all(pts == 0, axis=1))[0]
    assert np.isnan(vals[centre])
    ok = ~np.isnan(vals)
    np.testing.assert_array_equal(vals[ok], reconstruct(srcs, pts[ok], K))
    path = tmp_path / "f.csv"
    write_field_csv(path, pts, vals)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,z,re,im" and len(lines) == 1 + len(pts)
    path2 = tmp_path / "g.csv"
    write_field_csv(path2, *field_map(srcs, "z=0", 1.0, 0.1, K))
    assert path2.read_bytes() == path.read_bytes()


def test_field_map_normalized_error_from_two_maps():
    true = [PointSource((0.1, 0.1, 0.3), 1.0)]
    est = [PointSource((0.12, 0.1, 0.3), 0.9)]
    _, a = field_map(true, "y=0.5", 0.8, 0.1, K)
    _, b = field_map(est, "y=0.5", 0.8, 0.1, K)
    err = np.abs(b - a) / np.nanmax(np.abs(a))
    assert np.all(np.isfinite(err)) and 0 < err.max() < 1


@pytest.mark.parametrize("spec", ["w=0", "z0", "z=", "z=1.5"])
def test_field_map_rejects_bad_planes(spec):
    with pytest.raises(ValueError):
        field_map([], spec, 0.5, 0.1, K)


def test_parse_plane():
    assert parse_plane("x=-0.25") == (0, -0.25)
    assert parse_plane(" Z = 0 ") == (2, 0.0)


def test_localization_errors_shape(mics, rng):
    pos = sample_source_positions(rng, 4)
    err = localization_errors(build_ssl(64), pos, mics, K, rng)
    assert err.shape == (4,) and np.all(err >= 0)

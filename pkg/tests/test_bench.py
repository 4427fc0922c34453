import math

import numpy as np
import pytest

from eml.bench import (
    BenchSpec,
    load_dataset,
    linear_fit,
    pearson,
    quadratic_f_test,
    read_csv,
    run_bench,
    summarize,
    write_json,
)
from eml.field import FixedPointParams
from eml.krr import train
from eml.protocol import cost_model


@pytest.fixture(scope="module")
def small_data():
    return load_dataset("CM", synthetic=60, n_test=5, seed=2)


@pytest.mark.parametrize("kw", [
    {"axis": "Q", "grid": [1]},
    {"axis": "N", "grid": []},
    {"axis": "N", "grid": [8, 8]},
    {"axis": "N", "grid": [8], "repetitions": 0},
    {"axis": "N", "grid": [8], "mode": "fast"},
    {"axis": "N", "grid": [8], "link_mbps": 0},
])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        BenchSpec(**kw)


def test_point_varies_one_axis():
    spec = BenchSpec("P", [10, 20], N=16, L=30)
    assert spec.point(20) == (16, 30, 20)
    assert BenchSpec("L", [5]).point(5) == (64, 5, 42)


def test_emulated_sweep_streams_csv(small_data, tmp_path):
    spec = BenchSpec("N", [4, 8, 16], L=20, P=15, queries=3, sigma=300.0, lam=1e-2, mode="emulate")
    path = tmp_path / "rows.csv"
    it = run_bench(spec, small_data, csv_path=path)
    first = next(it)
    # the first row is on disk before the sweep finishes
    assert len(path.read_text().splitlines()) == 2
    rows = [first, *it]
    assert [r.N for r in rows] == [4, 8, 16]
    for r in rows:
        assert r.bytes == cost_model(r.N, 20, FixedPointParams.from_precision(15)).bytes_per_query
        assert math.isnan(r.t)
    back = read_csv(path)
    assert [b.bytes for b in back] == [r.bytes for r in rows]
    s = summarize(rows)
    assert s["bytes_fit"]["r2"] == pytest.approx(1.0, abs=1e-9)
    write_json(rows, tmp_path / "rows.json", s)
    assert (tmp_path / "rows.json").stat().st_size > 0


def test_encrypted_point_over_link(small_data):
    spec = BenchSpec("N", [4], L=10, P=20, queries=1, sigma=300.0, lam=1e-2, link_mbps=50.0)
    (row,) = list(run_bench(spec, small_data))
    assert row.t > 0 and row.bytes > 0
    assert row.delta < 1e-1


def test_sweep_refuses_oversized_N(small_data):
    with pytest.raises(ValueError):
        list(run_bench(BenchSpec("N", [10_000], sigma=1.0, lam=0.1), small_data))


def test_quadratic_f_test():
    x = np.arange(10, 70, 4.0)
    exact = quadratic_f_test(x, 3 * x ** 2 + 2 * x + 1)
    assert exact.p_value < 1e-100
    assert exact.coeffs[0] == pytest.approx(3.0)
    rng = np.random.default_rng(0)
    line = quadratic_f_test(x, 5 * x + rng.normal(scale=0.01, size=len(x)))
    assert line.p_value > 0.001
    curved = quadratic_f_test(x, x ** 2 + rng.normal(scale=1.0, size=len(x)))
    assert curved.p_value < 1e-6 and curved.F > 0
    with pytest.raises(ValueError):
        quadratic_f_test([1, 2, 3], [1, 2, 3])


def test_linear_helpers():
    fit = linear_fit([1, 2, 3], [3, 5, 7])
    assert (fit.slope, fit.intercept, fit.r2) == pytest.approx((2.0, 1.0, 1.0))
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_load_dataset_split():
    d = load_dataset("CM", synthetic=30, n_test=6)
    assert d.X.shape == (24, 351) and d.Xt.shape == (6, 351)
    with pytest.raises(ValueError):
        load_dataset("CM", synthetic=5, n_test=5)
    m = train(d.X[:8], d.y[:8], 300.0, 1e-6)
    assert m.N == 8

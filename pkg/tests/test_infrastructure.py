import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqg_lab.report import EstimateReport, FitError, mean_and_se, ols
from lqg_lab.rng import Streams, as_generator, block_sizes, parallel_map


def test_streams_are_keyed():
    a = Streams(1).child("x", 3).generator().random(4)
    b = Streams(1).child("x", 3).generator().random(4)
    c = Streams(1).child("x", 4).generator().random(4)
    d = Streams(2).child("x", 3).generator().random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_as_generator_accepts_many_sources():
    g = np.random.default_rng(0)
    assert as_generator(g) is g
    assert isinstance(as_generator(5), np.random.Generator)
    assert isinstance(as_generator(Streams(5)), np.random.Generator)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10_000), st.integers(1, 2000))
def test_block_sizes_partition(total, block):
    sizes = block_sizes(total, block)
    assert sum(sizes) == total and max(sizes) <= block


def test_parallel_map_ordered():
    assert parallel_map(lambda v: v * v, range(20), threads=4) == [v * v for v in range(20)]


def test_ols_exact_line():
    x = np.arange(6.0)
    fit = ols(x, 3 * x - 1)
    assert fit.slope == pytest.approx(3) and fit.intercept == pytest.approx(-1) and fit.r2 == pytest.approx(1)
    with pytest.raises(FitError):
        ols([1.0], [2.0])


def test_mean_and_se():
    m, se = mean_and_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    m1, se1 = mean_and_se([1.0])
    assert m1 == 1.0 and math.isnan(se1)
    assert all(math.isnan(v) for v in mean_and_se([]))


def test_report_outputs(tmp_path):
    rep = EstimateReport("demo", provenance={"seed": 3, "config_hash": "abc"})
    rep.add("a", 1.5, 0.1, 10, note="x")
    rep.add_fit("slope", ols([0, 1, 2], [0, 2, 4.1]))
    rep.flags.append("careful")
    assert rep.value("a") == 1.5 and rep.flagged
    rep.to_csv(tmp_path / "r.csv")
    rep.to_json(tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert "seed" in lines[0] and "config_hash" in lines[0]
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["fits"]["slope"]["slope"] == pytest.approx(2.05)
    assert data["provenance"]["seed"] == 3
    with pytest.raises(KeyError):
        rep.row("missing")

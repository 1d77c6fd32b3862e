import math

import numpy as np
import pytest

from robfplm.errors import DegenerateScaleError, SelectionFailedError
from robfplm.model import fit
from robfplm.rho import quadratic, tukey
from robfplm.selection import (SelectionGrid, dimension_range, pick_cell, rbic, rbic_value,
                               select_dimensions)
from robfplm.simulation import SimulationConfig, simulate


@pytest.fixture(scope="module")
def sample():
    return simulate(SimulationConfig(n=120), 1)[0]


@pytest.mark.parametrize("n,p1,p2", [(300, 4, 6), (50, 5, 5), (1000, 13, 13)])
def test_rbic_reduces_to_bic(n, p1, p2):
    r = np.full(4, math.sqrt(math.e / 4))
    expected = 1.0 + math.log(n) / n * (p1 + p2)
    assert rbic_value(r, 1.0, quadratic(), n, p1, p2) == pytest.approx(expected, abs=1e-14)


def test_rbic_penalty_step_is_exact():
    r = np.random.default_rng(0).normal(size=300)
    a = rbic_value(r, 1.1, tukey(), 300, 5, 7)
    b = rbic_value(r, 1.1, tukey(), 300, 6, 7)
    assert b - a == pytest.approx(math.log(300) / 300, rel=1e-12)


def test_rbic_degenerate():
    with pytest.raises(DegenerateScaleError):
        rbic_value(np.zeros(10), 1.0, tukey(), 10, 4, 4)
    with pytest.raises(DegenerateScaleError):
        rbic_value(np.ones(10), 0.0, tukey(), 10, 4, 4)


def test_rbic_of_fit(sample):
    f = fit(sample, 5, 5, "ls")
    assert rbic(f) == f.rbic
    assert rbic(f) == pytest.approx(math.log(f.sigma**2 * np.sum((f.residuals / f.sigma) ** 2))
                                    + math.log(120) / 120 * 10)


@pytest.mark.parametrize("n,expected", [(300, (4, 14)), (32, (4, 12)), (100000, (5, 28))])
def test_dimension_range(n, expected):
    assert dimension_range(n) == expected


def test_grid_validation():
    assert SelectionGrid.from_rule(300).p1_range == (4, 14)
    with pytest.raises(ValueError):
        SelectionGrid((6, 5), (4, 5))
    with pytest.raises(ValueError):
        SelectionGrid((3, 5), (4, 5))


def bowl(center, shape=(10, 10)):
    i, j = np.indices(shape)
    return (i - center[0]) ** 2 + (j - center[1]) ** 2 + 0.5


@pytest.mark.parametrize("rule", ["global", "first-local"])
def test_unique_minimum(rule):
    p = np.arange(4, 14)
    assert pick_cell(bowl((1, 3)), p, p, rule) == (1, 3)


def test_ties_prefer_smaller_model():
    p = np.arange(4, 14)
    t = np.ones((10, 10))
    t[2, 5] = t[5, 2] = 0.0
    assert pick_cell(t, p, p) == (2, 5)
    t[3, 3] = 0.0
    assert pick_cell(t, p, p) == (3, 3)


def test_first_local_differs_from_global():
    p = np.arange(4, 14)
    t = bowl((7, 7))
    t[0, 1] = -1.0
    t[0, 0] = -0.5
    t[8, 8] = -5.0
    assert pick_cell(t, p, p, "global") == (8, 8)
    i, j = pick_cell(t, p, p, "first-local")
    assert (i, j) == (0, 1)


def test_nan_cells_are_skipped():
    p = np.arange(4, 7)
    t = np.array([[np.nan, 1.0, 2.0], [0.5, np.nan, 3.0], [4.0, 5.0, 6.0]])
    assert pick_cell(t, p, p) == (1, 0)
    assert pick_cell(np.full((3, 3), np.nan), p, p) is None
    with pytest.raises(ValueError):
        pick_cell(t, p, p, "best")


def test_select_dimensions(sample):
    grid = SelectionGrid((4, 6), (4, 7))
    res = select_dimensions(sample, grid, "ls")
    assert res.table.shape == (3, 4)
    assert np.nanmin(res.table) == res.fit.rbic
    assert (res.p1, res.p2) == (res.fit.p1, res.fit.p2)
    rows = list(res.table_rows())
    assert len(rows) == 12 and rows[0][:2] == (4, 4)
    again = select_dimensions(sample, grid, "ls")
    np.testing.assert_array_equal(again.table, res.table)


def test_table_entries_match_refits(sample):
    grid = SelectionGrid((4, 5), (4, 5))
    res = select_dimensions(sample, grid, "m_huber")
    for p1, p2, value in res.table_rows():
        assert fit(sample, p1, p2, "m_huber").rbic == value


def test_failed_cells_recorded(sample):
    small = sample.subset(np.arange(18))
    res = select_dimensions(small, SelectionGrid((4, 13), (4, 13)), "ls")
    assert (13, 13) in res.failures
    assert res.failures[(13, 13)]["error"] == "insufficient_data"
    assert np.isnan(res.table[-1, -1])
    assert res.p1 + res.p2 < 18


def test_all_cells_failed(sample):
    with pytest.raises(SelectionFailedError) as info:
        select_dimensions(sample.subset(np.arange(8)), SelectionGrid((4, 5), (4, 5)), "ls")
    assert len(info.value.diagnostics) == 4

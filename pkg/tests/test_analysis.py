import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aresgaze.analysis import (
    LIGHT_BINS, bin_index, grid_difference, light_bin_analysis, pose_bin_analysis, read_report, write_report,
)
from aresgaze.training import EvalRecord


def make_records(rng, n, light=None):
    out = []
    for i in range(n):
        out.append(EvalRecord(
            f"x{i}", f"s{i % 3}", (0.0, 0.0), (0.0, 0.0), tuple(rng.uniform(-0.9, 0.9, 2)),
            float(rng.uniform(0, 255.99) if light is None else light[i]), float(rng.uniform(0, 20)),
        ))
    return out


def groupby_oracle(records, width):
    groups = defaultdict(list)
    for r in records:
        groups[(math.floor(r.head[0] / width), math.floor(r.head[1] / width))].append(r.error_deg)
    return {k: (sum(v) / len(v), len(v)) for k, v in groups.items()}


def lstsq_oracle(records):
    groups = defaultdict(list)
    for r in records:
        groups[min(int(r.light // 25.6), 9)].append(r.error_deg)
    xs = np.array([25.6 * k + 12.8 for k in sorted(groups)])
    ys = np.array([np.mean(groups[k]) for k in sorted(groups)])
    A = np.stack([xs, np.ones_like(xs)], axis=1)
    return np.linalg.lstsq(A, ys, rcond=None)[0]


def test_bin_index_spot_values():
    assert bin_index(0.3, 0.2) == 1
    assert bin_index(-0.1, 0.2) == -1
    assert bin_index(0.0, 0.2) == 0


def test_single_record_fills_one_bin():
    rec = make_records(np.random.default_rng(0), 1)
    grid = pose_bin_analysis(rec)
    cells = list(grid.cells())
    assert len(cells) == 1 and cells[0][2] == rec[0].error_deg and cells[0][3] == 1


@pytest.mark.parametrize("seed", range(3))
def test_pose_grid_matches_group_by(seed):
    records = make_records(np.random.default_rng(seed), 400)
    grid = pose_bin_analysis(records, 0.2)
    oracle = groupby_oracle(records, 0.2)
    cells = {(p, y): (m, c) for p, y, m, c in grid.cells()}
    assert cells.keys() == oracle.keys()
    for k, (m, c) in oracle.items():
        assert cells[k][1] == c
        assert abs(cells[k][0] - m) <= 1e-9
    assert grid.count.sum() == len(records)
    assert np.all(np.isnan(grid.mean[grid.count == 0]))


def test_grid_difference_on_shared_bins():
    rng = np.random.default_rng(0)
    a = pose_bin_analysis(make_records(rng, 300))
    b = pose_bin_analysis(make_records(rng, 40))
    diff = grid_difference(a, b)
    ca = {(p, y): m for p, y, m, _ in a.cells()}
    cb = {(p, y): m for p, y, m, _ in b.cells()}
    got = {(p, y): m for p, y, m, _ in diff.cells()}
    assert got.keys() == ca.keys() & cb.keys()
    for k, m in got.items():
        assert m == ca[k] - cb[k]


def test_light_bins_exact_edges():
    bins = light_bin_analysis(make_records(np.random.default_rng(0), 50))
    assert len(bins.edges) == LIGHT_BINS + 1 == 11
    np.testing.assert_array_equal(bins.edges, [25.6 * i for i in range(11)])


def test_engineered_light_slope():
    # bin k holds errors averaging 5 - 0.1 k
    records = []
    for k in range(10):
        for j, delta in enumerate((-0.5, 0.0, 0.5)):
            records.append(EvalRecord(f"{k}-{j}", "s", (0, 0), (0, 0), (0, 0), 25.6 * k + 3.0 + 7 * j,
                                      5 - 0.1 * k + delta))
    bins = light_bin_analysis(records)
    assert abs(bins.slope - (-0.1 / 25.6)) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_light_slope_matches_least_squares(seed):
    records = make_records(np.random.default_rng(seed), 200)
    bins = light_bin_analysis(records)
    slope, intercept = lstsq_oracle(records)
    assert abs(bins.slope - slope) <= 1e-9 and abs(bins.intercept - intercept) <= 1e-9


def test_light_slope_needs_two_bins():
    records = make_records(np.random.default_rng(0), 5, light=[10.0] * 5)
    with pytest.raises(ValueError):
        light_bin_analysis(records)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 255.999), min_size=2, max_size=60))
def test_binning_is_exhaustive(lights):
    records = make_records(np.random.default_rng(0), len(lights), light=lights)
    if len({min(int(v // 25.6), 9) for v in lights}) < 2:
        return
    assert light_bin_analysis(records).count.sum() == len(records)
    assert pose_bin_analysis(records).count.sum() == len(records)


def test_report_round_trip(tmp_path):
    records = make_records(np.random.default_rng(0), 20)
    write_report(tmp_path / "r.csv", records)
    back = read_report(tmp_path / "r.csv")
    for a, b in zip(records, back):
        assert a.sample_id == b.sample_id and a.subject_id == b.subject_id
        np.testing.assert_allclose([*a.head, a.light, a.error_deg], [*b.head, b.light, b.error_deg], rtol=1e-8)


def test_report_missing_column(tmp_path):
    (tmp_path / "bad.csv").write_text("sample_id,subject\nx,y\n")
    with pytest.raises(ValueError):
        read_report(tmp_path / "bad.csv")

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metric_fixture import CAM, FROZEN, make_fixture, oracle
from rvk.evalharness import (ABLATION_COLUMNS, GROUPS, ablation_report, build_report,
                             depth_metrics, isfinite_report, position_report, range_group,
                             read_delimited, velocity_mse_report, write_ablation, write_report)
from rvk.geometry import BoundingBox
from rvk.simulator import SceneConfig, VehicleState, DEFAULT_CLASSES, render_pair, scene_from_states


@pytest.mark.parametrize("d,group", [(19.99, "near"), (20.0, "medium"), (30.0, "medium"),
                                     (44.999, "medium"), (45.0, "far"), (0.01, "near"),
                                     (1e6, "far")])
def test_range_group(d, group):
    assert range_group(d) == group


@pytest.mark.parametrize("d", [0.0, -1.0, float("nan")])
def test_range_group_rejects(d):
    with pytest.raises(ValueError):
        range_group(d)


@given(st.floats(1e-6, 1e6))
def test_range_groups_partition(d):
    assert sum(range_group(d) == g for g in GROUPS) == 1


def test_velocity_perfect():
    v = np.random.default_rng(0).normal(size=(5, 3))
    rep = velocity_mse_report(v, v, [5, 25, 50, 10, 60])
    assert rep["near"] == rep["medium"] == rep["far"] == rep["average"] == 0.0


def test_velocity_single_near():
    rep = velocity_mse_report([[0.4, 0.0, 0.3]], [[0.0, 0.0, 0.0]], [10.0])
    assert rep["near"] == pytest.approx(0.125, abs=1e-15)
    assert rep["medium"] is None and rep["far"] is None
    assert rep["average"] == pytest.approx(0.125, abs=1e-15)
    assert len(rep["warnings"]) == 2


def test_velocity_empty_group_warns(caplog):
    with caplog.at_level(logging.WARNING):
        velocity_mse_report(np.zeros((1, 3)), np.ones((1, 3)), [50.0])
    assert "near" in caplog.text and "medium" in caplog.text


def test_velocity_length_mismatch():
    with pytest.raises(ValueError):
        velocity_mse_report(np.zeros((2, 3)), np.zeros((3, 3)), [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 40), st.integers(0, 10**6))
def test_velocity_average_is_unweighted_group_mean(n, seed):
    rng = np.random.default_rng(seed)
    d = np.concatenate([[10.0, 30.0, 60.0], rng.uniform(1, 90, n - 3)])
    p, g = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    rep = velocity_mse_report(p, g, d)
    assert rep["average"] == pytest.approx(np.mean([rep[k] for k in GROUPS]), rel=1e-12)
    assert sum(rep["counts"].values()) == n


def test_position_examples():
    out = position_report([10.0], [BoundingBox(600, 300, 680, 340)], CAM, [[10.0, 0.0]])
    np.testing.assert_allclose(out["positions"], [[10.0, 0.0]])
    assert out["mse"] == 0.0
    out = position_report([10.0], [(700, 300, 780, 340)], CAM)
    assert out["positions"][0, 1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        position_report([10.0], [(700, 300, 780, 340)], CAM, [[1, 2], [3, 4]])


def test_depth_examples():
    m = depth_metrics([3.0, 7.0], [3.0, 7.0])
    assert [m[k] for k in ("abs_rel", "sq_rel", "rms", "rms_log")] == [0, 0, 0, 0]
    assert (m["delta1"], m["delta2"], m["delta3"]) == (1, 1, 1)
    m = depth_metrics([11.0], [10.0])
    assert m["abs_rel"] == pytest.approx(0.1)
    assert m["sq_rel"] == pytest.approx(0.1)
    assert m["rms"] == pytest.approx(1.0)
    assert m["delta1"] == 1.0
    g = np.array([5.0, 17.0, 60.0])
    m = depth_metrics(1.3 * g, g)
    assert m["delta1"] == 0.0 and m["delta2"] == 1.0


@pytest.mark.parametrize("pred,gt", [([0.0], [1.0]), ([1.0], [-1.0]), ([], []), ([1.0], [1, 2])])
def test_depth_rejects(pred, gt):
    with pytest.raises(ValueError):
        depth_metrics(pred, gt)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 200), min_size=1, max_size=30), st.floats(0.5, 2.0))
def test_depth_delta_monotone(g, k):
    g = np.array(g)
    m = depth_metrics(k * g, g)
    assert 0 <= m["delta1"] <= m["delta2"] <= m["delta3"] <= 1
    assert m["abs_rel"] == pytest.approx(abs(k - 1), rel=1e-9)


def test_fixture_oracle_is_frozen():
    assert oracle(*make_fixture()) == FROZEN


def test_metrics_match_oracle():
    pred_d, gt_d, pred_v, gt_v, boxes, gt_pos = make_fixture()
    zx = velocity_mse_report(pred_v, gt_v, gt_d)
    v3 = velocity_mse_report(pred_v, gt_v, gt_d, components=(0, 1, 2))
    pos = position_report(pred_d, boxes, CAM, gt_pos)
    dep = depth_metrics(pred_d, gt_d)
    for g in GROUPS + ("average",):
        assert abs(zx[g] - FROZEN["vel_zx"][g]) <= 1e-12
        assert abs(v3[g] - FROZEN["vel_3d"][g]) <= 1e-12
    assert abs(pos["mse"] - FROZEN["position_mse"]) <= 1e-12
    for k, v in FROZEN["depth"].items():
        assert abs(dep[k] - v) <= 1e-12


def test_report_files(tmp_path):
    pred_d, gt_d, pred_v, gt_v, boxes, gt_pos = make_fixture()
    rep = build_report(pred_d, pred_v, gt_d, gt_v, boxes, CAM, gt_pos, {"note": 1})
    assert isfinite_report(rep)
    j, c = write_report(rep, tmp_path / "r", {"config_hash": "abc"})
    doc = json.loads(j.read_text())
    assert doc["schema_version"] == 1 and doc["config_hash"] == "abc" and doc["note"] == 1
    assert doc["velocity_mse_zx"]["average"] == pytest.approx(FROZEN["vel_zx"]["average"])
    rows = read_delimited(c)
    assert {"section", "key", "value"} == set(rows[0])
    depth = {r["key"]: float(r["value"]) for r in rows if r["section"] == "depth"}
    assert depth["abs_rel"] == pytest.approx(FROZEN["depth"]["abs_rel"], rel=1e-5)


def _static_pair(seed):
    cfg = SceneConfig()
    cls = DEFAULT_CLASSES[1]
    v = VehicleState(cls, cls.extent_w, cls.extent_h, np.array([0.5, 0.6, 30.0]), np.zeros(3), 7)
    return render_pair(scene_from_states(cfg, [v], seed))


def test_ablation_zero_motion_is_tie(tmp_path):
    res = ablation_report([_static_pair(1)])
    s = res["summary"]
    assert s["vehicles"] == 1 and s["ties"] == 1
    assert s["win_rate_centric"] == "tie"
    assert s["mean_epe_full"] < 1e-9 and s["mean_epe_centric"] < 1e-9
    j, c = write_ablation(res, tmp_path / "abl")
    rows = read_delimited(c)
    assert len(rows) == 1 and list(rows[0]) == ABLATION_COLUMNS
    assert float(rows[0]["magnification"]) > 1.0


def test_ablation_empty():
    res = ablation_report([])
    assert res["summary"]["vehicles"] == 0
    assert res["summary"]["win_rate_centric"] == "tie"

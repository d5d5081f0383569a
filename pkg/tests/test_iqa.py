import numpy as np
import pytest

from panelnav.iqa import (CSV_HEADER, GateConfig, IqaScore, Modality, aggregate, feature_score, mdm_score,
                          score_image, select_modality)
from panelnav.scene import build_panel_scene, facing_side, generate_trajectory, render_image_proxy


def _checker(h, w):
    yy, xx = np.mgrid[:h, :w]
    return ((xx + yy) % 2).astype(float)


def test_checkerboard_and_constant():
    assert mdm_score(_checker(48, 64)) == pytest.approx((1.0, 1.0, 1.0), abs=1e-12)
    assert mdm_score(np.full((48, 64), 0.7)) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        mdm_score(np.zeros((0, 5)))


def test_contrast_compression_monotone():
    rng = np.random.default_rng(0)
    for _ in range(100):
        b = rng.uniform(0, 1, (32, 40))
        a = 0.5 + 0.5 * (b - 0.5)
        sa, sb = mdm_score(a), mdm_score(b)
        assert all(x <= y + 1e-12 for x, y in zip(sa, sb))
        assert all(0.0 <= v <= 1.0 for v in sa + sb)


def test_feature_score():
    cfg = GateConfig(max_features=100)
    assert feature_score(0, cfg) == 0.0
    assert feature_score(100, cfg) == 1.0
    assert feature_score(200, cfg) == 1.0
    with pytest.raises(ValueError):
        feature_score(-1, cfg)


def test_aggregate():
    assert aggregate((1, 1, 1), 1).average == 1.0
    assert aggregate((0, 0, 0), 0).average == 0.0
    s = aggregate((0.4, 0.6, 0.5), 0.5, t=2.0)
    assert s.average == pytest.approx(0.5, abs=1e-12) and s.timestamp == 2.0
    two_term = aggregate((0.2, 0.2, 0.2), 1.0, cfg=GateConfig(pre_average_mdm=True))
    assert two_term.average == pytest.approx(0.6)
    assert s.row(Modality.FEATURE_VO).count(",") == CSV_HEADER.count(",")


def test_gate_config_validation():
    for bad in ({"threshold": 0.0}, {"threshold": 1.0}, {"max_features": 0}):
        with pytest.raises(ValueError):
            GateConfig(**bad)


def _score(avg):
    return IqaScore((avg, avg, avg), avg, avg)


def test_select_modality_threshold():
    cfg = GateConfig()
    assert select_modality(_score(0.9), cfg) is Modality.FEATURE_VO
    assert select_modality(_score(0.1), cfg) is Modality.PLANE_VO
    assert select_modality(_score(0.45), cfg) is Modality.FEATURE_VO
    grid = np.linspace(0, 1, 201)
    picks = [select_modality(_score(a), cfg) is Modality.FEATURE_VO for a in grid]
    assert picks == sorted(picks)


def test_hysteresis_band():
    cfg = GateConfig(hysteresis=0.03)
    assert select_modality(_score(0.43), cfg, Modality.FEATURE_VO) is Modality.FEATURE_VO
    assert select_modality(_score(0.41), cfg, Modality.FEATURE_VO) is Modality.PLANE_VO
    assert select_modality(_score(0.47), cfg, Modality.PLANE_VO) is Modality.PLANE_VO
    assert select_modality(_score(0.49), cfg, Modality.PLANE_VO) is Modality.FEATURE_VO
    assert select_modality(_score(0.43), cfg) is Modality.PLANE_VO


def test_side3_scores_lowest():
    scene = build_panel_scene(0)
    traj = generate_trajectory(scene)
    by_side = {"side1": [], "side3": []}
    for k, (t, p) in enumerate(traj[::3]):
        side = facing_side(scene, p)
        if side in by_side:
            by_side[side].append(score_image(render_image_proxy(scene, p, k, t)).average)
    assert np.mean(by_side["side3"]) < np.mean(by_side["side1"])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dualrc import tensor as T
from dualrc.backbone import BackboneConfig, FeatureMap, extract_dual, init_backbone_params
from dualrc.consensus import ConsensusConfig, init_consensus_params
from dualrc.errors import AnnotationError, ConfigError, ShapeError, TrainingError
from dualrc.synth import synth
from dualrc.training import (DEFAULT_LAMBDA, GroundTruthMaps, KeypointAnnotation, TrainConfig,
                             blurred_one_hot, build_gt, loss_keypoint, loss_orthogonal,
                             loss_total, pair_loss, predicted_maps, sgd_step, train_toy)


def grid(h=8, w=8, stride=2):
    return FeatureMap(np.zeros((1, h, w)), stride)


def test_gt_row_matches_gaussian_oracle():
    # pixel (7.2, 4.9) snaps to column 3, row 2 at stride 2
    row = blurred_one_hot([[7.2, 4.9]], grid(), 1.0)[0]
    assert np.allclose(row, oracles.gaussian_row(8, 8, 2, 3, 1.0), atol=1e-15)


def test_gt_centre_is_symmetric():
    row = blurred_one_hot([[8.5, 8.5]], grid(9, 9, 2), 1.0)[0].reshape(9, 9)
    assert row.argmax() == 4 * 9 + 4
    nbrs = [row[3, 4], row[5, 4], row[4, 3], row[4, 5]]
    assert max(nbrs) - min(nbrs) < 1e-15


def test_tiny_sigma_is_one_hot():
    row = blurred_one_hot([[0.5, 0.5]], grid(), 1e-3)[0]
    assert row[0] == 1.0 and row[1:].sum() < 1e-12


def test_gt_truncation_radius():
    row = blurred_one_hot([[0.5, 0.5]], grid(12, 12), 1.0)[0].reshape(12, 12)
    assert row[3, 0] > 0 and row[4, 0] == 0 and row[0, 4] == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-0.5, 15.4), st.floats(-0.5, 11.4)), min_size=1, max_size=6),
       st.floats(0.2, 3.0))
def test_gt_rows_are_distributions(points, sigma):
    rows = blurred_one_hot(points, grid(6, 8, 2), sigma)
    assert np.all(rows >= 0)
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-6)


def test_gt_errors():
    with pytest.raises(AnnotationError):
        blurred_one_hot([[16.0, 1.0]], grid())
    with pytest.raises(ConfigError):
        blurred_one_hot([[1.0, 1.0]], grid(), 0.0)
    with pytest.raises(AnnotationError):
        KeypointAnnotation(np.zeros((2, 2)), np.zeros((3, 2)))


def test_keypoint_loss_examples():
    s = np.array([[1.0, 0.0]])
    gt = GroundTruthMaps(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]), 1.0)
    assert loss_keypoint(s, s, gt).item() == pytest.approx(2 * math.sqrt(2))
    same = GroundTruthMaps(s, s, 1.0)
    assert loss_keypoint(s, s, same).item() == 0.0
    assert loss_orthogonal(s, s, same).item() == 0.0
    with pytest.raises(ShapeError):
        loss_keypoint(np.ones((2, 2)), s, gt)


def test_orthogonal_loss_single_row():
    s = np.array([[0.6, 0.4]])
    g = np.array([[0.0, 1.0]])
    gt = GroundTruthMaps(g, g, 1.0)
    want = 2 * abs((s ** 2).sum() - 1.0)
    assert loss_orthogonal(s, s, gt).item() == pytest.approx(want)


def test_loss_total_composition():
    g = np.random.default_rng(0)
    s_ab, s_ba = g.random((3, 5)), g.random((3, 5))
    gt = GroundTruthMaps(g.random((3, 5)), g.random((3, 5)), 1.0)
    lk = np.linalg.norm(s_ab - gt.ab) + np.linalg.norm(s_ba - gt.ba)
    lo = (np.linalg.norm(s_ab @ s_ab.T - gt.ab @ gt.ab.T)
          + np.linalg.norm(s_ba @ s_ba.T - gt.ba @ gt.ba.T))
    assert loss_keypoint(s_ab, s_ba, gt).item() == pytest.approx(lk, rel=1e-12)
    assert loss_orthogonal(s_ab, s_ba, gt).item() == pytest.approx(lo, rel=1e-12)
    assert loss_total(s_ab, s_ba, gt).item() == pytest.approx(lk + DEFAULT_LAMBDA * lo, rel=1e-12)
    assert loss_total(s_ab, s_ba, gt, lam=0).item() == pytest.approx(lk, rel=1e-12)
    assert DEFAULT_LAMBDA == 0.05
    # L_k = 1, L_o = 2 -> 1.1
    assert 1.0 + DEFAULT_LAMBDA * 2.0 == pytest.approx(1.1)


def test_loss_is_row_permutation_invariant():
    g = np.random.default_rng(1)
    s_ab, s_ba = g.random((4, 6)), g.random((4, 6))
    gt = GroundTruthMaps(g.random((4, 6)), g.random((4, 6)), 1.0)
    p = [2, 0, 3, 1]
    gp = GroundTruthMaps(gt.ab[p], gt.ba[p], 1.0)
    assert loss_total(s_ab[p], s_ba[p], gp).item() == pytest.approx(loss_total(s_ab, s_ba, gt).item(),
                                                                     rel=1e-12)


def toy_setup(seed=0, variant="a", layers="3:1:2,3:2:1"):
    cfg = TrainConfig(steps=3, variant=variant, consensus=ConsensusConfig.parse(layers))
    params = init_backbone_params(BackboneConfig(width=4, variant=variant, seed=seed))
    init_consensus_params(cfg.consensus, params, seed=seed)
    size = 32 if variant == "e" else 16
    sc = synth(seed, size, "translation", 3, translation=(2.0, 0.0))
    return params, sc, cfg


def test_predicted_rows_are_softmax_of_fused_maps():
    params, sc, cfg = toy_setup()
    from dualrc.consensus import refine
    from dualrc.correlation import corr4d
    from dualrc.matcher import fused_score_map
    da = extract_dual(sc.image_a, params)
    db = extract_dual(sc.image_b, params)
    cbar = refine(corr4d(da.coarse, db.coarse), params, cfg.consensus)
    s_ab, _ = predicted_maps(da, db, cbar, sc.annotations)
    for n, (x, y) in enumerate(sc.annotations.src):
        q = da.fine.pixel_to_cell(np.array([x, y]))
        fused = fused_score_map(da.fine, db.fine, cbar.data, (int(q[0]), int(q[1])), 4).data
        e = np.exp(fused.reshape(-1) - fused.max())
        assert np.allclose(s_ab.data[n], e / e.sum(), atol=1e-12)


@pytest.mark.parametrize("variant", ["a", "c", "e"])
def test_pair_loss_gradients(variant):
    params, sc, cfg = toy_setup(1, variant)
    da = extract_dual(sc.image_a, params, variant)
    db = extract_dual(sc.image_b, params, variant)
    gt = build_gt(sc.annotations, db.fine, cfg.sigma, source=da.fine)

    def loss():
        return pair_loss(params, sc.image_a, sc.image_b, sc.annotations, cfg, gt)

    params.zero_grad()
    T.backward(loss(), params)
    g = np.random.default_rng(0)
    for name, p in params.trainable():
        flat = p.data.reshape(-1)
        for idx in g.choice(flat.size, min(4, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + 1e-5
            up = loss().item()
            flat[idx] = old - 1e-5
            down = loss().item()
            flat[idx] = old
            num = (up - down) / 2e-5
            a = p.grad.reshape(-1)[idx]
            assert abs(a - num) <= 1e-4 * max(abs(a), abs(num), 1e-3), name


def test_trunk_gets_no_update():
    params, sc, cfg = toy_setup()
    before = params["backbone.trunk1.kernel"].data.copy()
    train_toy([(sc.image_a, sc.image_b, sc.annotations)], params, cfg)
    assert np.array_equal(params["backbone.trunk1.kernel"].data, before)


def test_zero_learning_rate_is_flat():
    params, sc, cfg = toy_setup()
    cfg.lr = 0.0
    trace = train_toy([(sc.image_a, sc.image_b, sc.annotations)], params, cfg)
    assert len(trace) == 3 and trace[0] == trace[1] == trace[2]


def test_sgd_step_is_exact():
    params, sc, cfg = toy_setup()
    params.zero_grad()
    T.backward(pair_loss(params, sc.image_a, sc.image_b, sc.annotations, cfg), params)
    expect = {n: p.data - 0.01 * p.grad for n, p in params.trainable()}
    sgd_step(params, 0.01)
    assert all(np.array_equal(p.data, expect[n]) for n, p in params.trainable())


def test_learning_rate_schedule():
    cfg = TrainConfig(steps=200, lr=0.01)
    assert cfg.halving_interval == 66
    assert cfg.lr_at(0) == 0.01 and cfg.lr_at(66) == 0.005 and cfg.lr_at(199) == 0.00125
    assert TrainConfig(halve_every=5).lr_at(10) == 0.0025
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")


def test_divergence_is_reported_with_step():
    params, sc, cfg = toy_setup()
    params["nc.layer0.kernel"].data[...] = np.nan
    with pytest.raises(TrainingError) as err:
        train_toy([(sc.image_a, sc.image_b, sc.annotations)], params, cfg)
    assert err.value.step == 0


def test_adam_reduces_loss():
    params, sc, cfg = toy_setup()
    cfg.steps, cfg.optimizer = 30, "adam"
    trace = train_toy([(sc.image_a, sc.image_b, sc.annotations)], params, cfg)
    assert trace[-1] < trace[0]

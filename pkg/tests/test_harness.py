import dataclasses

import numpy as np
import pytest

from dualrc import harness as H
from dualrc import io
from dualrc.config import PipelineConfig, parse_text, resolve
from dualrc.errors import ConfigError, ShapeError
from dualrc.evaluation import Homography
from dualrc.matcher import MatchSet
from dualrc.tensor import ParamStore


def small(**kw):
    base = dict(size=64, n_annotations=32, bench_sizes="2,4")
    base.update(kw)
    return PipelineConfig(**base)


# -- config -------------------------------------------------------------------

def test_config_defaults_and_round_trip(tmp_path):
    cfg = PipelineConfig()
    assert cfg.keep_fraction == 0.5 and cfg.lam == 0.05 and cfg.n_annotations == 128
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    assert PipelineConfig.load(tmp_path / "c.cfg") == cfg


def test_config_precedence_and_errors(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nseed = 4\ntop_k=20\ntx=none\n")
    cfg = resolve(tmp_path / "c.cfg", {"seed": "9"})
    assert cfg.seed == 9 and cfg.top_k == 20 and cfg.tx is None and cfg.translation() is None
    for text in ("bogus=1", "seed", "seed=1\nseed=2", "seed=x", "keep_fraction=0",
                 "nc_layers=4:1:1", "backbone=resnet"):
        with pytest.raises(ConfigError):
            PipelineConfig().with_overrides(parse_text(text))


# -- pipeline ------------------------------------------------------------------

def test_identity_scene_is_perfect():
    cfg = small(warp="identity")
    res = H.run_scene(H.make_scene(cfg), cfg)
    assert len(res.matches) > 0 and res.curve.values[0] == 1.0


def test_translation_scene_small():
    cfg = small()
    res = H.run_scene(H.make_scene(cfg), cfg)
    assert res.curve.at(1.0) >= 0.95


def test_pruned_queries_are_a_subset(tmp_path):
    cfg = small()
    scene = H.make_scene(cfg)
    half = H.run_scene(scene, cfg)
    full = H.run_scene(scene, dataclasses.replace(cfg, keep_fraction=1.0))
    q_half = {tuple(c) for c in half.all_matches.queried}
    q_full = {tuple(c) for c in full.all_matches.queried}
    assert q_half < q_full


def test_pipeline_writes_files(tmp_path):
    cfg = small(top_k=10)
    H.run_scene(H.make_scene(cfg), cfg, matches_path=tmp_path / "m.txt", curve_path=tmp_path / "c.csv")
    src, _, scores = io.read_matches(tmp_path / "m.txt")
    assert len(src) == 10 and np.all(np.diff(scores) <= 0)
    assert io.read_curve(tmp_path / "c.csv")[0] == list(np.arange(1.0, 11.0))


def test_toy_backbone_pipeline_runs():
    cfg = small(backbone="toy", width=4, size=32, nc_init="random")
    res = H.run_scene(H.make_scene(cfg), cfg)
    assert res.curve is not None


def test_errors_carry_stage_labels():
    from dualrc.errors import ParameterError
    with pytest.raises(ParameterError, match=r"\[extract\]"):
        H.run_pipeline(np.zeros((1, 32, 32)), np.zeros((1, 32, 32)), small(backbone="toy"),
                       ParamStore())
    with pytest.raises(ShapeError, match=r"\[extract\]"):
        H.run_pipeline(np.zeros((1, 32, 32, 1)), np.zeros((1, 32, 32)), small())


# -- bench ---------------------------------------------------------------------

def test_bench_storage_audit():
    report = H.bench(small(), [2, 4])
    assert report.ok, report.failures
    a, b = report.rows
    assert a.ratio == b.ratio == 256
    assert b.coarse_elements == 16 * a.coarse_elements
    # 2 x 2 coarse: 2 kept cells x 16 fine queries, each an 8 x 8 map
    assert a.stored_elements == a.coarse_elements + 32 * 64
    # 4 x 4 coarse: 128 queries, one 64-query chunk of 16 x 16 maps
    assert b.stored_elements == b.coarse_elements + 64 * 256
    assert report.to_text() == H.bench(small(), [2, 4]).to_text()


def test_bench_paper_scale_arithmetic():
    # coarse 25 x 19 against a hypothetical fine 100 x 76
    coarse = (25 * 19) ** 2
    fine = (100 * 76) ** 2
    assert fine // coarse == 256 and fine % coarse == 0


# -- grad check ------------------------------------------------------------------

def test_grad_check_passes_and_catches_injected_bug():
    cfg = PipelineConfig()
    ok = H.grad_check(cfg, max_coords=6)
    assert ok.ok and set(ok.errors) == {"backbone.lat", "backbone.fuse", "nc"}
    bad = H.grad_check(cfg, inject=1e-2, max_coords=6)
    assert not bad.ok
    assert "FAIL" in bad.to_text()


def test_grad_check_smoke_with_delta_consensus_and_zero_laterals():
    cfg = PipelineConfig()
    params, *_ = H.grad_check_instance(cfg)
    for name, p in params.items():
        if name.startswith("nc."):
            k = p.data.shape[-1]
            p.data[...] = 0
            p.data[(0, 0) + ((k - 1) // 2,) * 4] = 1.0
        if ".lat" in name:
            p.data[...] = 0
    report = H.grad_check(cfg, params=params, max_coords=3)
    assert all(np.isfinite(v) for v in report.errors.values())
    assert report.to_text().startswith("group coordinates")


def test_param_groups():
    assert H.param_group("backbone.lat12.kernel") == "backbone.lat"
    assert H.param_group("nc.layer3.kernel") == "nc"


# -- visualize --------------------------------------------------------------------

def test_overlay(tmp_path):
    img = np.random.default_rng(0).random((1, 8, 6))
    empty = MatchSet(np.zeros((0, 2)), np.zeros((0, 2)), [])
    bare = H.overlay(empty, img, img)
    assert bare.shape == (8, 12, 3) and np.all(bare[..., 0] == bare[..., 1])
    pts = np.array([[2.0, 3.0], [4.0, 5.0]])
    ok = H.overlay(MatchSet(pts, pts, [1, 1]), img, img, Homography.identity())
    assert tuple(ok[3, 2]) == H.GREEN and tuple(ok[5, 10]) == H.GREEN
    off = H.overlay(MatchSet(pts[:1], pts[:1] + [0, 4], [1]), img, img, Homography.identity())
    assert tuple(off[3, 2]) == H.RED and tuple(off[7, 8]) == H.RED
    plain = H.overlay(MatchSet(pts, pts, [1, 1]), img, img)
    assert tuple(plain[3, 2]) == H.YELLOW
    H.visualize(MatchSet(pts, pts, [1, 1]), img, img, tmp_path / "v.ppm")
    assert io.read_ppm_rgb(tmp_path / "v.ppm").shape == (8, 12, 3)


# -- training ---------------------------------------------------------------------

def test_run_train_short():
    res = H.run_train(PipelineConfig(steps=5, train_size=16, width=4))
    assert len(res.trace) == 5 and res.trace[-1] < res.trace[0]

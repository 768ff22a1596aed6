import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import fd_gradient_check, loss_scene, reference_adam
from irtrack.fitting import (
    PARAM_GROUPS, AdamState, FitConfig, adam_step, combined_loss, evaluate, fit_frame, masked_rgb_loss,
    perceptual_loss, schedule_plan, shrink_latent, with_variant, write_trace_csv,
)
from irtrack.geometry import InvalidArgument, ObjectNode, Pose
from irtrack.prior import LatentPair, default_generator
from irtrack.renderer import CompositeOut, RenderSettings
from irtrack.synth import ScenarioConfig, render_frame, sample_scene


def comp_with(image, fg):
    return CompositeOut(np.asarray(image, float), [np.asarray(fg, float)], np.asarray(fg, float), [0])


def test_rgb_loss_identical_is_zero():
    img = np.random.default_rng(0).uniform(size=(6, 5, 3))
    assert masked_rgb_loss(img, comp_with(img, np.ones((6, 5)))) == 0.0


def test_rgb_loss_empty_foreground():
    assert masked_rgb_loss(np.ones((6, 5, 3)), comp_with(np.zeros((6, 5, 3)), np.zeros((6, 5)))) == 0.0


def test_rgb_loss_hand_value():
    obs = np.zeros((20, 20, 3))
    ren = np.zeros((20, 20, 3))
    fg = np.zeros((20, 20))
    fg[:10, :10] = 1.0
    obs[:10, :10, 1] = 0.5
    # 100 pixels, residual 0.5 in one channel: sum of squares 25 over 100 foreground pixels
    assert masked_rgb_loss(obs, comp_with(ren, fg)) == pytest.approx(0.25, abs=1e-15)


def test_rgb_loss_ignores_background():
    rng = np.random.default_rng(1)
    ren = rng.uniform(size=(8, 8, 3))
    fg = np.zeros((8, 8))
    fg[2:5, 3:6] = rng.uniform(0.1, 1, (3, 3))
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    b[fg > 0] = a[fg > 0]
    assert masked_rgb_loss(a, comp_with(ren, fg)) == masked_rgb_loss(b, comp_with(ren, fg))


def test_perceptual_identity_symmetry_nonneg():
    rng = np.random.default_rng(2)
    for phase in ("texture", "joint"):
        for _ in range(20):
            a, b = rng.uniform(size=(48, 64, 3)), rng.uniform(size=(48, 64, 3))
            assert perceptual_loss(a, a, phase) == 0.0
            assert perceptual_loss(a, b, phase) >= 0.0
            assert perceptual_loss(a, b, phase) == pytest.approx(perceptual_loss(b, a, phase), rel=1e-12)


def test_perceptual_monotone_in_noise():
    rng = np.random.default_rng(3)
    means = []
    for sigma in (0.02, 0.05, 0.1):
        vals = []
        for k in range(100):
            base = np.random.default_rng(k).uniform(size=(48, 64, 3))
            vals.append(perceptual_loss(base, base + rng.normal(0, sigma, base.shape)))
        means.append(np.mean(vals))
    assert means[0] <= means[1] <= means[2]


def test_combined_loss_arithmetic():
    # L_RGB = 0.2 with no perceptual window: total = 0.2 + 10 * 0 ...
    obs = np.zeros((10, 10, 3))
    fg = np.ones((10, 10))
    ren = np.zeros((10, 10, 3))
    ren[..., 0] = np.sqrt(0.2)
    out = combined_loss(obs, comp_with(ren, fg), FitConfig(), windows=[])
    assert out["rgb"] == pytest.approx(0.2)
    assert out["total"] == pytest.approx(out["rgb"] + 10 * out["perceptual"])
    assert 0.2 + 10 * 0.03 == pytest.approx(0.5)
    zero = combined_loss(obs, comp_with(obs, fg), FitConfig(), windows=[(0, 0, 10, 10)])
    assert zero["total"] == 0.0


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("cfg", [FitConfig(), FitConfig(use_perceptual=False), FitConfig(use_rgb=False),
                                 FitConfig(embed_mode="penalty")])
def test_loss_gradient_fd(seed, cfg):
    observed, params, cam, st_, wins = loss_scene(100 + seed)
    worst, failures = fd_gradient_check(observed, params, cam, cfg, st_, wins)
    assert not failures, failures[:5]


def test_texture_phase_gradient_fd():
    observed, params, cam, st_, wins = loss_scene(7)
    worst, failures = fd_gradient_check(observed, params, cam, FitConfig(), st_, wins, phase="texture")
    assert not failures


def test_shrink_examples():
    assert np.array_equal(shrink_latent([1.0, 2.0], [1.0, 2.0], 0.7), [1.0, 2.0])
    assert np.array_equal(shrink_latent([1.0, -2.0], [0.0, 0.0], 1.0), [1.0, -2.0])
    assert np.allclose(shrink_latent([1.0, -2.0], [0.0, 0.0], 0.7), [0.7, -1.4], atol=1e-15)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(InvalidArgument):
            shrink_latent([1.0], [0.0], bad)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.floats(0.01, 1.0))
@settings(max_examples=200, deadline=None)
def test_shrink_contraction(z, zavg, alpha):
    out = shrink_latent(z, zavg, alpha)
    assert np.linalg.norm(out) <= max(np.linalg.norm(z), np.linalg.norm(zavg)) + 1e-9


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    new, _ = adam_step(p, np.zeros(2), AdamState.like(p), 0.1)
    assert np.array_equal(new, p)


def test_adam_single_step_reference():
    new, st_ = adam_step(np.array(0.0), np.array(1.0), AdamState.like(0.0), 0.1)
    assert abs(float(new) - reference_adam([1.0], 0.1)[0]) < 1e-12
    assert abs(float(new) + 0.1 / (1 + 1e-8)) < 1e-12
    assert st_.step == 1


def test_adam_two_step_unroll():
    p, s = np.array(0.3), AdamState.like(0.0)
    got = []
    for g in (0.7, -1.3):
        p, s = adam_step(p, np.array(g), s, 0.05)
        got.append(float(p))
    assert np.allclose(got, reference_adam([0.7, -1.3], 0.05, p0=0.3), atol=1e-12, rtol=0)


def test_adam_shared_moment_keeps_direction():
    g = np.array([3.0, 0.1, -0.4])
    new, _ = adam_step(np.zeros(3), g, AdamState.like(g), 0.2, shared=True)
    assert np.allclose(new / np.linalg.norm(new), -g / np.linalg.norm(g))
    assert np.linalg.norm(new) <= 0.2 + 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(InvalidArgument):
        adam_step(np.zeros(2), np.zeros(3), AdamState.like(np.zeros(2)), 0.1)


def test_schedule_plan():
    plan = schedule_plan(FitConfig())
    assert [g for g, _, _ in plan] == [("z_T",), ("z_T",), ("z_S", "log_scale"),
                                       ("z_S", "log_scale", "t", "omega"), ("z_S", "log_scale", "t", "omega")]
    assert [p for _, p, _ in plan] == ["texture", "texture", "joint", "joint", "joint"]
    flat = schedule_plan(FitConfig(schedule=False))
    assert len(flat) == 5 and all(set(g) == set(PARAM_GROUPS) for g, _, _ in flat)


def test_config_validation_and_roundtrip():
    cfg = FitConfig(lam=3.0, embed_mode="penalty")
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidArgument):
        FitConfig(lr_t=0.0)
    with pytest.raises(InvalidArgument):
        FitConfig(steps_color=-1)
    with pytest.raises(InvalidArgument):
        FitConfig.from_dict({"bogus": 1})


def test_variants():
    base = FitConfig()
    assert with_variant(base, "full") == base
    assert not with_variant(base, "no-L_RGB").use_rgb
    assert not with_variant(base, "no-L_perceptual").use_perceptual
    assert not with_variant(base, "no-L_embed").use_embed
    assert not with_variant(base, "no-schedule").schedule
    with pytest.raises(InvalidArgument):
        with_variant(base, "nope")


@pytest.fixture(scope="module")
def single_scene():
    gen = default_generator()
    sc = ScenarioConfig(n_objects=1, n_frames=1, seed=3, latent_sigma_shape=0.0, latent_sigma_texture=0.0)
    scene = sample_scene(sc, gen)
    image, _ = render_frame(scene, 0, gen)
    return scene, image


def test_texture_steps_keep_vertices(single_scene, monkeypatch):
    """During the two colour steps the shape latent, hence every vertex, is untouched."""
    import irtrack.fitting as fitting

    scene, image = single_scene
    gen = default_generator()
    seen = []
    orig = fitting.evaluate

    def spy(observed, params, *a, **kw):
        seen.append([gen.deform_shape(p["z_S"]).copy() for p in params])
        return orig(observed, params, *a, **kw)

    monkeypatch.setattr(fitting, "evaluate", spy)
    o = scene.objects[0]
    init = LatentPair(np.full(8, 0.2), np.zeros(12))
    fit_frame(image, [(init, o.node(0))], scene.camera, FitConfig(), gen)
    # evaluations 1-3 precede steps 1, 2, 3: vertices before and after both colour steps
    assert np.array_equal(seen[0][0], seen[1][0]) and np.array_equal(seen[1][0], seen[2][0])
    assert not np.array_equal(seen[2][0], seen[3][0])


def test_fixed_point_oracle_scene(single_scene):
    scene, image = single_scene
    o = scene.objects[0]
    res = fit_frame(image, [(o.latents, o.node(0))], scene.camera, FitConfig())[0]
    totals = [row["total"] for row in res.trace]
    assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))
    assert np.linalg.norm(res.pose.t - o.centers[0]) < 0.05


def test_fit_reduces_loss_from_offset(single_scene):
    scene, image = single_scene
    o = scene.objects[0]
    node = ObjectNode(Pose(o.centers[0] + [0, 0.4, 0], [0, 0, o.yaws[0] + 0.1]), o.scale)
    res = fit_frame(image, [(LatentPair.zeros(), node)], scene.camera)[0]
    assert res.trace[-1]["total"] < res.trace[0]["total"]
    assert len(res.trace) == 6 and not res.flags


def test_all_culled_returns_inputs_flagged(single_scene):
    scene, image = single_scene
    node = ObjectNode(Pose([-30.0, 0.0, 0.8], [0, 0, 0]), 4.0)
    res = fit_frame(image, [(LatentPair.zeros(), node)], scene.camera)[0]
    assert "culled" in res.flags
    assert np.array_equal(res.pose.t, node.pose.t)


def test_empty_objects_rejected(single_scene):
    scene, image = single_scene
    with pytest.raises(InvalidArgument):
        fit_frame(image, [], scene.camera)


def test_trace_csv(tmp_path, single_scene):
    scene, image = single_scene
    o = scene.objects[0]
    res = fit_frame(image, [(LatentPair.zeros(), o.node(0))], scene.camera)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, res)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 6
    assert [r["phase"] for r in rows] == ["texture", "texture", "joint", "joint", "joint", "final"]
    assert float(rows[-1]["total"]) == pytest.approx(res[0].loss["total"], rel=1e-8)


def test_evaluate_penalty_adds_embed_term():
    observed, params, cam, st_, wins = loss_scene(3)
    gen = default_generator()
    base = evaluate(observed, params, cam, FitConfig(), gen, st_, wins, with_grad=True)[0]
    pen = evaluate(observed, params, cam, FitConfig(embed_mode="penalty"), gen, st_, wins, with_grad=True)[0]
    mu = 0.3 / 0.7
    expect = sum(0.5 * mu * (p["z_S"] @ p["z_S"] + p["z_T"] @ p["z_T"]) for p in params)
    assert pen["total"] - base["total"] == pytest.approx(expect, rel=1e-12)

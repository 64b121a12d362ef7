import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridiff.backbone import ModelConfig, build_model
from hybridiff.conditioning import build_text_encoder
from hybridiff.datagen import COLORS, SHAPES, SceneObject, SceneSpec, record_rng, render, sample_scene
from hybridiff.evalsuite import (CHANCE, EvalPrompt, SamplerConfig, compbench_report, frechet_distance,
                                 frechet_stats_distance, gaussian_stats, generate_images, image_features,
                                 load_prompts, make_prompt_set, oracle_images, save_prompts, verify, wilson_interval,
                                 write_report)
from oracles import gaussian_frechet


# -- verifier ----------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("side", [16, 32])
def test_rendered_scene_verifies_against_itself(side):
    for i in range(1000 if side == 16 else 200):
        scene = sample_scene(record_rng(77, i))
        assert verify(render(scene, side), scene) == {"color": True, "shape": True, "spatial": True}, scene


def test_wrong_colour_fails_colour_only():
    red = SceneSpec((SceneObject("circle", "red", 0, 0),))
    blue = SceneSpec((SceneObject("circle", "blue", 0, 0),))
    assert verify(render(red), blue) == {"color": False, "shape": True, "spatial": True}


def test_wrong_shape_fails_shape_only():
    a = SceneSpec((SceneObject("square", "green", 1, 1),))
    b = SceneSpec((SceneObject("triangle", "green", 1, 1),))
    assert verify(render(a), b)["shape"] is False and verify(render(a), b)["color"] is True


def test_swapped_positions_fail_spatial():
    left = SceneSpec((SceneObject("circle", "red", 0, 0), SceneObject("square", "blue", 0, 1)))
    swapped = SceneSpec((SceneObject("circle", "red", 0, 1), SceneObject("square", "blue", 0, 0)))
    res = verify(render(swapped), left)
    assert res["spatial"] is False and res["color"] and res["shape"]


def test_blank_image_fails():
    scene = SceneSpec((SceneObject("circle", "red", 0, 0),))
    blank = np.zeros((3, 16, 16), dtype=np.uint8)
    assert verify(blank, scene) == {"color": False, "shape": False, "spatial": True}


# -- prompts and report --------------------------------------------------------------

def test_prompt_set_is_deterministic_and_round_trips(tmp_path):
    a, b = make_prompt_set(10), make_prompt_set(10)
    assert a == b and len(a) == 30
    assert {p.category for p in a} == {"color", "shape", "spatial"}
    assert all(len(p.scene.objects) == (2 if p.category == "spatial" else 1) for p in a)
    save_prompts(tmp_path / "p.jsonl", a)
    assert load_prompts(tmp_path / "p.jsonl") == a
    assert make_prompt_set(10, seed=1) != a


def test_oracle_renderer_scores_perfectly(tmp_path):
    prompts = make_prompt_set(40)
    rep = compbench_report(None, prompts, image_fn=oracle_images)
    for cat, r in rep["categories"].items():
        assert r["accuracy"] == 1.0 and r["n"] == 40 and r["chance"] == CHANCE[cat]
    assert rep["composite"] == 1.0
    text = write_report(rep, tmp_path / "r.csv", tmp_path / "r.txt")
    assert "color" in text and (tmp_path / "r.csv").read_text().startswith("category")


def test_random_attribute_renderer_lands_at_chance():
    prompts = [p for p in make_prompt_set(400) if p.category in ("color", "shape")]
    rng = np.random.default_rng(0)

    def shuffled(ps):
        out = []
        for p in ps:
            o = p.scene.objects[0]
            o = SceneObject(str(rng.choice(SHAPES)), str(rng.choice(COLORS)), o.row, o.col, o.size)
            out.append(render(SceneSpec((o,), p.scene.background)))
        return np.stack(out)

    rep = compbench_report(None, prompts, image_fn=shuffled)
    for cat in ("color", "shape"):
        r = rep["categories"][cat]
        assert r["ci_low"] <= CHANCE[cat] <= r["ci_high"], (cat, r)


def test_generated_images_are_reproducible():
    cfg = ModelConfig(hidden=16, d_text=8, head_dim=8, ssm_state=4)
    model = build_model(cfg, seed=0)
    enc = build_text_encoder(cfg.d_text, seed=0, max_tokens=cfg.max_text_tokens)
    caps = ["a red circle", "a blue square", "a green triangle"]
    s = SamplerConfig(steps=3, batch_size=2)
    a = generate_images(model, enc, caps, s)
    assert a.shape == (3, 3, 16, 16) and a.dtype == np.uint8
    assert np.array_equal(a, generate_images(model, enc, caps, s))
    # batching does not change which noise a prompt gets
    assert np.array_equal(a, generate_images(model, enc, caps, SamplerConfig(steps=3, batch_size=3)))


# -- Wilson interval -----------------------------------------------------------------

def test_wilson_interval_reference_values():
    # textbook values for the 95% score interval
    lo, hi = wilson_interval(5, 10)
    assert lo == pytest.approx(0.2366, abs=1e-4) and hi == pytest.approx(0.7634, abs=1e-4)
    lo, hi = wilson_interval(0, 20)
    assert lo == 0.0 and hi == pytest.approx(0.1611, abs=1e-4)
    assert wilson_interval(0, 0) == (0.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 400), frac=st.floats(0, 1), level=st.sampled_from([0.9, 0.95, 0.99]))
def test_wilson_interval_matches_statsmodels(n, frac, level):
    proportion = pytest.importorskip("statsmodels.stats.proportion")
    k = round(frac * n)
    ref = proportion.proportion_confint(k, n, alpha=1 - level, method="wilson")
    assert wilson_interval(k, n, level) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 500), frac=st.floats(0, 1))
def test_wilson_interval_contains_estimate(n, frac):
    k = round(frac * n)
    lo, hi = wilson_interval(k, n)
    assert 0 <= lo <= k / n <= hi <= 1
    lo99, hi99 = wilson_interval(k, n, 0.99)
    assert lo99 <= lo + 1e-12 and hi99 >= hi - 1e-12


# -- Fréchet distance ----------------------------------------------------------------

def _random_cov(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T / d + 0.1 * np.eye(d)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 8))
def test_closed_form_matches_sqrtm_oracle(seed, d):
    rng = np.random.default_rng(seed)
    mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
    s1, s2 = _random_cov(rng, d), _random_cov(rng, d)
    ref = gaussian_frechet(mu1, s1, mu2, s2)
    assert frechet_distance(mu1, s1, mu2, s2) == pytest.approx(ref, rel=1e-6, abs=1e-9)
    assert frechet_distance(mu1, s1, mu2, s2) == pytest.approx(frechet_distance(mu2, s2, mu1, s1), rel=1e-9)
    assert frechet_distance(mu1, s1, mu1, s1) == pytest.approx(0.0, abs=1e-9)


def test_sample_estimate_near_gaussian_oracle():
    rng = np.random.default_rng(0)
    d = 8
    mu1, mu2 = np.zeros(d), np.full(d, 0.5)
    s1, s2 = _random_cov(rng, d), _random_cov(rng, d)
    a = rng.multivariate_normal(mu1, s1, size=10_000)
    b = rng.multivariate_normal(mu2, s2, size=10_000)
    ref = gaussian_frechet(mu1, s1, mu2, s2)
    assert frechet_stats_distance(a, b) == pytest.approx(ref, rel=0.02)


def test_identical_image_sets_score_zero_and_sets_are_symmetric():
    prompts = make_prompt_set(20)
    imgs = oracle_images(prompts)
    assert frechet_stats_distance(imgs, imgs) == 0.0
    other = oracle_images(make_prompt_set(20, seed=9))
    assert frechet_stats_distance(imgs, other) == pytest.approx(frechet_stats_distance(other, imgs), rel=1e-9)
    assert frechet_stats_distance(imgs, other) > 0


def test_image_features_shape_and_range():
    imgs = oracle_images(make_prompt_set(5))
    f = image_features(imgs)
    assert f.shape == (15, 8) and np.all(np.isfinite(f))
    assert np.all((f[:, :3] >= 0) & (f[:, :3] <= 1)) and np.all((f[:, 7] >= 0) & (f[:, 7] <= 1))


def test_too_few_samples_needs_shrinkage():
    x = np.random.default_rng(0).normal(size=(5, 8))
    with pytest.raises(ValueError, match="shrinkage=1e-6"):
        gaussian_stats(x)
    mu, sigma = gaussian_stats(x, shrinkage=1e-6)
    assert np.linalg.eigvalsh(sigma).min() > 0
    assert np.isfinite(frechet_stats_distance(x, x + 1, shrinkage=1e-6))

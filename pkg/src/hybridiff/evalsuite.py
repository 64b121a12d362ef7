"""Compositional verifier, a small compositional benchmark, and a Fréchet
distance between Gaussian fits of hand-crafted image features."""

from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import norm

from .datagen import (COLORS, SHAPES, DetectedObject, SceneSpec, caption, detect_objects, record_rng, render,
                      sample_scene)
from .diffusion import DEFAULT_GUIDANCE, DEFAULT_STEPS, NoiseSchedule, dpm_solver_sample, make_schedule
from .imageio import from_latent

CATEGORIES = ("color", "shape", "spatial")
# a uniformly random attribute matches with these probabilities
CHANCE = {"color": 1 / len(COLORS), "shape": 1 / len(SHAPES), "spatial": 0.5}


@dataclass(frozen=True)
class EvalPrompt:
    caption: str
    scene: SceneSpec
    category: str

    def to_dict(self) -> dict:
        return {"caption": self.caption, "scene": self.scene.to_dict(), "category": self.category}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalPrompt":
        return cls(d["caption"], SceneSpec.from_dict(d["scene"]), d["category"])


# -- verifier ------------------------------------------------------------------

def _covers(found: list[str], wanted: list[str]) -> bool:
    have = Counter(found)
    return all(have[k] >= n for k, n in Counter(wanted).items())


def _assignments(objects, detected: list[DetectedObject]):
    """Injective same-colour assignments of detections to objects, those that
    also agree on shape first."""
    options = [[k for k, d in enumerate(detected) if d.color == o.color] for o in objects]
    found = []
    for pick in itertools.product(*options):
        if len(set(pick)) == len(pick):
            agree = sum(detected[k].shape == o.shape for k, o in zip(pick, objects))
            found.append((-agree, pick))
    return [[detected[k] for k in pick] for _, pick in sorted(found)]


def _relations_hold(spec: SceneSpec, matched: list[DetectedObject]) -> bool:
    for i, j, rel in spec.relations:
        axis = 0 if rel == "left of" else 1
        if not matched[i].centroid[axis] < matched[j].centroid[axis]:
            return False
    return True


def verify(image: np.ndarray, spec: SceneSpec) -> dict[str, bool]:
    """Per-category checks of a (3, H, W) uint8 image against its scene.

    color:   every object's colour is present as a detected component
    shape:   every object's shape is present among detected components
    spatial: some same-colour matching of components to objects puts every
             relation's centroids in order (vacuous for single objects)
    """
    detected = detect_objects(image)
    color = _covers([d.color for d in detected], [o.color for o in spec.objects])
    shape = _covers([d.shape for d in detected], [o.shape for o in spec.objects])
    spatial = True
    if len(spec.objects) > 1:
        spatial = any(_relations_hold(spec, m) for m in _assignments(spec.objects, detected))
    return {"color": color, "shape": shape, "spatial": spatial}


# -- compositional benchmark ---------------------------------------------------

def make_prompt_set(n_per_category: int, seed: int = 1234, style: str = "long") -> list[EvalPrompt]:
    """Colour and shape prompts use one object; spatial prompts use two."""
    prompts = []
    for ci, cat in enumerate(CATEGORIES):
        for i in range(n_per_category):
            rng = record_rng(seed, ci * 1_000_000 + i)
            scene = sample_scene(rng, n_objects=2 if cat == "spatial" else 1)
            prompts.append(EvalPrompt(caption(scene, style), scene, cat))
    return prompts


def save_prompts(path, prompts: list[EvalPrompt]) -> None:
    with open(path, "w") as f:
        for p in prompts:
            f.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def load_prompts(path) -> list[EvalPrompt]:
    with open(path) as f:
        return [EvalPrompt.from_dict(json.loads(line)) for line in f if line.strip()]


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    z = norm.ppf(0.5 + level / 2)
    p = k / n
    denom = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the bounds are exact at the edges; the closed form leaves rounding residue
    lo = 0.0 if k == 0 else max(0.0, mid - half)
    hi = 1.0 if k == n else min(1.0, mid + half)
    return lo, hi


@dataclass
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    guidance: float = DEFAULT_GUIDANCE
    seed: int = 0
    batch_size: int = 50
    clip_denoised: float | None = 1.0


def generate_images(model, encoder, prompts: list[str], sampler: SamplerConfig,
                    schedule: NoiseSchedule | None = None) -> np.ndarray:
    """One image per prompt; prompt ``i`` always uses noise seeded by (seed, i)."""
    schedule = schedule or make_schedule(model.config.num_timesteps)
    cfg = model.config
    dtype = next(model.parameters()).dtype
    out = []
    model.eval()
    for start in range(0, len(prompts), sampler.batch_size):
        chunk = prompts[start:start + sampler.batch_size]
        noise = torch.stack([
            torch.randn((cfg.in_channels, cfg.resolution, cfg.resolution), dtype=dtype,
                        generator=torch.Generator().manual_seed(sampler.seed * 1_000_003 + start + i))
            for i in range(len(chunk))])
        text, mask = encoder.encode(chunk)
        x = dpm_solver_sample(model, text.to(dtype), mask, schedule, steps=sampler.steps,
                              guidance=sampler.guidance, noise=noise, clip_denoised=sampler.clip_denoised)
        out.append(from_latent(x))
    return np.concatenate(out)


def compbench_report(model, prompts: list[EvalPrompt], sampler: SamplerConfig | None = None, *,
                     encoder=None, image_fn=None) -> dict:
    """Per-category accuracy with 95% Wilson intervals.

    ``image_fn(prompts) -> images`` replaces the model (e.g. an oracle renderer).
    """
    sampler = sampler or SamplerConfig()
    if image_fn is not None:
        images = image_fn(prompts)
    else:
        images = generate_images(model, encoder, [p.caption for p in prompts], sampler)
    hits = {c: [] for c in CATEGORIES}
    for img, p in zip(images, prompts):
        hits[p.category].append(verify(img, p.scene)[p.category])
    report = {"seed": sampler.seed, "steps": sampler.steps, "guidance": sampler.guidance, "categories": {}}
    for cat, h in hits.items():
        if not h:
            continue
        k, n = int(sum(h)), len(h)
        lo, hi = wilson_interval(k, n)
        report["categories"][cat] = {"accuracy": k / n, "n": n, "ci_low": lo, "ci_high": hi,
                                     "chance": CHANCE[cat]}
    accs = [v["accuracy"] for v in report["categories"].values()]
    report["composite"] = float(np.mean(accs)) if accs else 0.0
    return report


def oracle_images(prompts: list[EvalPrompt], side: int = 16) -> np.ndarray:
    return np.stack([render(p.scene, side) for p in prompts])


def write_report(report: dict, csv_path=None, txt_path=None) -> str:
    rows = [(cat, v["n"], v["accuracy"], v["ci_low"], v["ci_high"], v["chance"])
            for cat, v in report["categories"].items()]
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["category", "n", "accuracy", "ci_low", "ci_high", "chance"])
            w.writerows(rows)
    lines = [f"seed={report['seed']} steps={report['steps']} guidance={report['guidance']}",
             f"{'category':<10}{'n':>6}{'acc':>8}{'95% CI':>18}{'chance':>9}"]
    for cat, n, acc, lo, hi, ch in rows:
        lines.append(f"{cat:<10}{n:>6}{acc:>8.3f}   [{lo:.3f}, {hi:.3f}]{ch:>9.3f}")
    lines.append(f"composite {report['composite']:.3f}")
    text = "\n".join(lines) + "\n"
    if txt_path:
        Path(txt_path).write_text(text)
    return text


# -- Fréchet statistics distance -----------------------------------------------

FEATURE_NAMES = ("mean_r", "mean_g", "mean_b", "var_tl", "var_tr", "var_bl", "var_br", "edge_density")


def image_features(images: np.ndarray) -> np.ndarray:
    """Channel means, luminance variance per quadrant, and the fraction of
    pixels with a strong horizontal or vertical gradient; (n, 8)."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    n, _, h, w = x.shape
    lum = x.mean(axis=1)
    means = x.mean(axis=(2, 3))
    hh, hw = h // 2, w // 2
    quads = [lum[:, :hh, :hw], lum[:, :hh, hw:], lum[:, hh:, :hw], lum[:, hh:, hw:]]
    variances = np.stack([q.reshape(n, -1).var(axis=1) for q in quads], axis=1)
    gx = np.abs(np.diff(lum, axis=2))[:, :-1, :]
    gy = np.abs(np.diff(lum, axis=1))[:, :, :-1]
    edges = ((np.maximum(gx, gy) > 0.1).reshape(n, -1).mean(axis=1))[:, None]
    return np.concatenate([means, variances, edges], axis=1)


def _sqrt_trace_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """tr((s1 s2)^(1/2)) via the symmetric form s1^(1/2) s2 s1^(1/2)."""
    w1, v1 = np.linalg.eigh((s1 + s1.T) / 2)
    root1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    m = root1 @ s2 @ root1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -1e-8 * scale:
        raise ValueError(f"covariance product has a negative eigenvalue {w.min():.3e}")
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """Squared Fréchet (W2) distance between two Gaussians."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    sigma1, sigma2 = np.asarray(sigma1, dtype=np.float64), np.asarray(sigma2, dtype=np.float64)
    diff = mu1 - mu2
    covmean = 0.5 * (_sqrt_trace_product(sigma1, sigma2) + _sqrt_trace_product(sigma2, sigma1))
    d = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * covmean)
    return max(d, 0.0)


def gaussian_stats(features: np.ndarray, shrinkage: float | None = None):
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if n < d + 1 and shrinkage is None:
        raise ValueError(f"{n} samples cannot fit a {d}-dimensional covariance; pass shrinkage=1e-6")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False).reshape(d, d)
    if shrinkage:
        sigma = sigma + shrinkage * np.eye(d)
    return mu, sigma


def frechet_stats_distance(set_a, set_b, shrinkage: float | None = None) -> float:
    """Fréchet distance between two image sets ``(n, 3, H, W)`` via
    :func:`image_features`, or between two feature matrices ``(n, d)``."""
    fa, fb = (np.asarray(s) for s in (set_a, set_b))
    if fa.ndim == 4:
        fa = image_features(fa)
    if fb.ndim == 4:
        fb = image_features(fb)
    if np.array_equal(fa, fb):
        return 0.0
    return frechet_distance(*gaussian_stats(fa, shrinkage), *gaussian_stats(fb, shrinkage))

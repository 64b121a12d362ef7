import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hybridiff.backbone import ModelConfig, build_model, sincos_2d
from hybridiff.checkpoint import load_checkpoint
from hybridiff.conditioning import build_text_encoder
from hybridiff.datagen import build_corpus
from hybridiff.trainer import (OptimState, TrainConfig, dataset_from_manifest, eval_loss, load_encoder,
                               optimizer_step, pretrain, quality_tune, resize_model, smoothed, step_generator)
from oracles import adam_scalar

TINY = ModelConfig(hidden=16, d_text=8, head_dim=8, ssm_state=4, max_text_tokens=24)


@pytest.fixture(scope="module")
def tiny_data():
    enc = build_text_encoder(TINY.d_text, seed=0, max_tokens=TINY.max_text_tokens)
    return dataset_from_manifest(build_corpus(64, seed=0), enc), enc


# -- optimizer -------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(grads=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=12),
       p0=st.floats(-3, 3), lr=st.sampled_from([1e-3, 1e-2, 0.1]), wd=st.sampled_from([0.0, 0.01, 0.3]))
def test_optimizer_matches_hand_stepped_oracle(grads, p0, lr, wd):
    cfg = TrainConfig(lr=lr, weight_decay=wd)
    p = torch.tensor([p0], dtype=torch.float64)
    state = OptimState()
    expected = adam_scalar(p0, grads, lr, *cfg.betas, cfg.eps, wd)
    for g, want in zip(grads, expected):
        optimizer_step({"w": p}, {"w": torch.tensor([g], dtype=torch.float64)}, state, cfg)
        assert float(p) == pytest.approx(want, rel=1e-12, abs=1e-12)
    assert state.step == len(grads)


def test_zero_gradient_without_decay_leaves_parameter():
    p = torch.tensor([1.5, -2.0], dtype=torch.float64)
    optimizer_step({"w": p}, {"w": torch.zeros(2, dtype=torch.float64)}, OptimState(), TrainConfig())
    assert p.tolist() == [1.5, -2.0]


def test_weight_decay_alone_shrinks_parameter():
    p = torch.tensor([2.0], dtype=torch.float64)
    optimizer_step({"w": p}, {"w": torch.zeros(1, dtype=torch.float64)}, OptimState(),
                   TrainConfig(lr=0.1, weight_decay=0.5))
    assert float(p) == pytest.approx(2.0 * 0.95)


def test_non_finite_gradient_names_parameter_and_writes_nothing():
    a, b = torch.ones(2), torch.ones(2)
    with pytest.raises(FloatingPointError, match="'blocks.0.w'"):
        optimizer_step({"a": a, "blocks.0.w": b}, {"a": torch.ones(2), "blocks.0.w": torch.tensor([1.0, np.nan])},
                       OptimState(), TrainConfig())
    assert a.tolist() == [1.0, 1.0]


def test_missing_gradient_is_skipped():
    p = torch.ones(3)
    state = optimizer_step({"w": p}, {"w": None}, OptimState(), TrainConfig())
    assert p.tolist() == [1.0, 1.0, 1.0] and "w" not in state.m


# -- config ----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(stage="bogus"), dict(lr=0.0), dict(batch_size=0), dict(max_steps=-1),
                                dict(ckpt_interval=-1), dict(max_steps=10, ckpt_interval=20)])
def test_invalid_train_config_rejected(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_step_generator_depends_only_on_seed_and_step():
    a = torch.rand(4, generator=step_generator(3, 17))
    assert torch.equal(a, torch.rand(4, generator=step_generator(3, 17)))
    assert not torch.equal(a, torch.rand(4, generator=step_generator(3, 18)))
    assert not torch.equal(a, torch.rand(4, generator=step_generator(4, 17)))


def test_smoothed_window():
    x = np.arange(100.0)
    s = smoothed(x, 10)
    assert len(s) == 91 and s[0] == pytest.approx(4.5) and s[-1] == pytest.approx(94.5)
    assert smoothed([1.0, 3.0], 10).tolist() == [2.0]


# -- loop ------------------------------------------------------------------------

@pytest.mark.slow
def test_pretrain_reduces_loss():
    enc = build_text_encoder(TINY.d_text, seed=0, max_tokens=TINY.max_text_tokens)
    data = dataset_from_manifest(build_corpus(512, seed=0), enc)
    model = build_model(TINY, seed=0)
    before = eval_loss(model, data, seed=9)
    res = pretrain(model, data, TrainConfig(max_steps=200, batch_size=16, lr=3e-3))
    after = eval_loss(model, data, seed=9)
    s = smoothed(res.losses, 25)
    assert len(res.losses) == 200
    assert after < 0.8 * before
    assert s[-1] < s[0]


def test_resume_replays_uninterrupted_run(tmp_path, tiny_data):
    data, enc = tiny_data
    cfg = TrainConfig(max_steps=6, batch_size=4, ckpt_interval=3)
    full = pretrain(build_model(TINY, seed=0), data, cfg, run_dir=tmp_path / "full", encoder=enc)
    assert sorted(p.name for p in (tmp_path / "full" / "checkpoints").iterdir()) == [
        "last.ckpt", "step_000003.ckpt", "step_000006.ckpt"]
    mid = load_checkpoint(tmp_path / "full" / "checkpoints" / "step_000003.ckpt")
    assert mid.meta["step"] == 3 and mid.meta["optim_step"] == 3
    resumed = pretrain(build_model(TINY, seed=5), data, cfg, resume=mid)
    assert resumed.losses == full.losses[3:]
    for k, v in full.checkpoint.tensors.items():
        if not k.startswith("text_encoder."):
            assert torch.equal(v, resumed.checkpoint.tensors[k]), k
    log_rows = (tmp_path / "full" / "train_log.csv").read_text().splitlines()
    assert log_rows[0] == "step,loss,lr,wall_ms" and len(log_rows) == 7


def test_checkpoint_carries_text_encoder(tmp_path, tiny_data):
    data, enc = tiny_data
    res = pretrain(build_model(TINY, seed=0), data, TrainConfig(max_steps=1, batch_size=2), encoder=enc)
    back = load_encoder(res.checkpoint, seed=99)
    for k, v in enc.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)


def test_empty_corpus_rejected(tiny_data):
    data, _ = tiny_data
    empty = type(data)(data.latents[:0], data.text[:0], data.mask[:0])
    with pytest.raises(ValueError, match="empty"):
        pretrain(build_model(TINY), empty, TrainConfig(max_steps=1))


# -- quality tuning --------------------------------------------------------------

def _scripted(scores):
    calls = iter(scores)
    return lambda model: next(calls)


@pytest.fixture(scope="module")
def base_ckpt(tiny_data):
    data, enc = tiny_data
    return pretrain(build_model(TINY, seed=0), data, TrainConfig(max_steps=2, batch_size=4), encoder=enc).checkpoint


def test_quality_tune_returns_scripted_peak(base_ckpt, tiny_data):
    data, _ = tiny_data
    scores = [0.1, 0.3, 0.6, 0.4, 0.2, 0.1]
    res = quality_tune(base_ckpt, data, TrainConfig(max_steps=12, eval_interval=2, patience=2, batch_size=4),
                       _scripted(scores))
    assert [h["score"] for h in res.history] == [0.1, 0.3, 0.6, 0.4, 0.2]
    assert res.checkpoint.meta["step"] == base_ckpt.meta["step"] + 6
    assert res.checkpoint.meta["eval_score"] == 0.6
    assert res.checkpoint.group("text_encoder")


def test_quality_tune_patience_zero_returns_first_eval(base_ckpt, tiny_data):
    data, _ = tiny_data
    res = quality_tune(base_ckpt, data, TrainConfig(max_steps=10, eval_interval=2, patience=0, batch_size=4),
                       _scripted([0.5, 0.9]))
    assert len(res.history) == 1 and res.checkpoint.meta["eval_score"] == 0.5


def test_quality_tune_ignores_falling_loss(base_ckpt, tiny_data):
    data, _ = tiny_data
    res = quality_tune(base_ckpt, data, TrainConfig(max_steps=8, eval_interval=2, patience=10, batch_size=4,
                                                    lr=3e-3), _scripted([0.9, 0.5, 0.4, 0.3]))
    assert res.checkpoint.meta["step"] == base_ckpt.meta["step"] + 2
    assert len(res.history) == 4


# -- resolution adaptation -------------------------------------------------------

@pytest.mark.parametrize("interp", [True, False])
def test_resize_changes_only_positional_embedding(base_ckpt, interp):
    model = resize_model(base_ckpt, 32, use_pe_interp=interp)
    old = base_ckpt.model_state()
    new = model.state_dict()
    assert set(new) == set(old)
    for k, v in old.items():
        if k != "pos_embed":
            assert torch.equal(new[k], v), k
    assert new["pos_embed"].shape[-2] == 16 * 16
    if not interp:
        assert torch.allclose(new["pos_embed"].reshape(-1, TINY.hidden), sincos_2d(16, TINY.hidden).reshape(-1, TINY.hidden))


def test_resize_validates_target(base_ckpt):
    with pytest.raises(ValueError, match="exceed"):
        resize_model(base_ckpt, 16)
    with pytest.raises(ValueError, match="patch"):
        resize_model(base_ckpt, 33)

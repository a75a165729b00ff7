import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoprune.config import TinyDefaults
from nanoprune.data import MixedStream, TokenStream, decode, encode, heldout_batch, prose_text
from nanoprune.model import init_checkpoint, logits
from nanoprune.train import (AdamState, Stage, TrainConfig, TrainingDiverged, adam_step,
                             decay_fraction_from_tokens, distill_run, kd_loss_value, lm_loss_value,
                             merge_checkpoints, train_lm, wsd_lr)


def small_model(seed=0):
    return init_checkpoint(TinyDefaults(n_layers=3, n_attn=1, d_model=16, d_ffn=32).build(), seed=seed)


# ------------------------------------------------------------ schedule

def schedule(total=1000, warmup=50):
    cfg = TrainConfig(warmup_steps=warmup, decay_fraction=decay_fraction_from_tokens(3.6e12, 20e12))
    return cfg, total


def test_wsd_endpoints():
    cfg, total = schedule()
    assert wsd_lr(cfg.warmup_steps, cfg, total) == pytest.approx(4.5e-4, abs=1e-15)
    assert wsd_lr(total, cfg, total) == pytest.approx(4.5e-6, abs=1e-15)
    assert wsd_lr(0, cfg, total) == 0.0


def test_wsd_decay_onset_at_82_percent():
    cfg, total = schedule(total=10_000)
    assert cfg.decay_fraction == pytest.approx(0.18)
    assert wsd_lr(8200, cfg, total) == 4.5e-4
    assert wsd_lr(8201, cfg, total) < 4.5e-4


@pytest.mark.parametrize("boundary", ["warmup", "decay"])
def test_wsd_continuity(boundary):
    cfg, total = schedule(total=10_000, warmup=100)
    b = cfg.warmup_steps if boundary == "warmup" else total * (1 - cfg.decay_fraction)
    for delta in (1e-6, 1e-8):
        assert abs(wsd_lr(b - delta, cfg, total) - wsd_lr(b, cfg, total)) < 1e-9
        assert abs(wsd_lr(b + delta, cfg, total) - wsd_lr(b, cfg, total)) < 1e-9


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5000), st.floats(0, 1), st.integers(0, 100))
def test_wsd_bounded_and_monotone_after_warmup(total, frac, warmup):
    warmup = min(warmup, total)
    cfg = TrainConfig(warmup_steps=warmup, decay_fraction=frac)
    lrs = [wsd_lr(s, cfg, total) for s in range(total + 1)]
    assert all(0 <= x <= cfg.lr_stable + 1e-18 for x in lrs)
    tail = lrs[warmup:]
    assert all(a >= b - 1e-18 for a, b in zip(tail, tail[1:]))


def test_wsd_rejects_out_of_range():
    cfg, total = schedule()
    with pytest.raises(ValueError):
        wsd_lr(total + 1, cfg, total)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_stable=1e-4, lr_min=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(decay_fraction=1.5)
    with pytest.raises(ValueError):
        TrainConfig(stages=[])
    assert TrainConfig(stages=[{"tokens": 4096, "seq_len": 8}], batch_tokens=1024).total_steps == 4


# ------------------------------------------------------------ optimizer

def test_adam_first_step_is_signed_lr():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0, 3.0])}
    adam_step(p, {"w": np.array([0.5, -4.0, 0.0])}, AdamState(), 0.1, cfg)
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_matches_reference_over_steps():
    cfg = TrainConfig(weight_decay=0.1)
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=4)}
    ref = p["w"].copy()
    m = v = np.zeros(4)
    state = AdamState()
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, state, 0.01, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        ref = ref - 0.01 * ((m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8) + 0.1 * ref)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12)


def test_weight_decay_skips_selected():
    cfg = TrainConfig(weight_decay=0.5)
    p = {"mat": np.ones((2, 2)), "vec": np.ones(2)}
    adam_step(p, {"mat": np.zeros((2, 2)), "vec": np.zeros(2)}, AdamState(), 0.1, cfg,
              decay=lambda n: n == "mat")
    np.testing.assert_allclose(p["mat"], 0.95)
    np.testing.assert_allclose(p["vec"], 1.0)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState(), 0.1, TrainConfig())


# ------------------------------------------------------------ losses and merge

def test_kd_loss_closed_form():
    s = np.array([[[1.0, 0.0, -1.0]]])
    t = np.array([[[0.0, 2.0, 0.0]]])
    pt = np.exp(t[0, 0]) / np.exp(t[0, 0]).sum()
    ps = np.exp(s[0, 0]) / np.exp(s[0, 0]).sum()
    assert kd_loss_value(s, t) == pytest.approx(float(np.sum(pt * np.log(pt / ps))), rel=1e-12)


def test_merge_formula():
    a, b = small_model(0), small_model(1)
    m = merge_checkpoints(a, b, 0.3)
    for k in a.tensors:
        np.testing.assert_allclose(m.tensors[k], 0.7 * a.tensors[k] + 0.3 * b.tensors[k])
    assert all(np.array_equal(merge_checkpoints(a, b, 0).tensors[k], a.tensors[k]) for k in a.tensors)
    assert all(np.array_equal(merge_checkpoints(a, b, 1).tensors[k], b.tensors[k]) for k in a.tensors)


def test_merge_rejects_mismatched_configs():
    other = init_checkpoint(TinyDefaults(n_layers=2, n_attn=1, d_model=16, d_ffn=32).build())
    with pytest.raises(ValueError):
        merge_checkpoints(small_model(), other, 0.5)


# ------------------------------------------------------------ data

def test_corpus_deterministic_and_ascii():
    assert prose_text(500, 3) == prose_text(500, 3)
    assert prose_text(500, 3) != prose_text(500, 4)
    assert decode(encode("hello\n")) == "hello\n"


def test_mixed_stream_fraction():
    a, b = TokenStream("prose", 5000, 0), TokenStream("qa", 5000, 0)
    batch = MixedStream(a, b, 0.75).sample(np.random.default_rng(0), 8, 16)
    assert batch.shape == (8, 17)
    with pytest.raises(ValueError):
        MixedStream(a, b, 1.5)


# ------------------------------------------------------------ loops

def test_training_reduces_loss_and_logs():
    ckpt = small_model()
    data = TokenStream("prose", 20_000, 0)
    held = heldout_batch(TokenStream("prose", 5000, 1), 4, 32)
    before = lm_loss_value(ckpt, held)
    cfg = TrainConfig(stages=[Stage(12_288, 32)], batch_tokens=512, lr_stable=3e-3, lr_min=3e-5,
                      warmup_steps=2)
    buf = io.StringIO()
    out, hist = train_lm(ckpt, data, cfg, buf)
    assert lm_loss_value(out, held) < before - 1.0
    records = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(records) == cfg.total_steps == len(hist)
    assert set(records[0]) == {"step", "tokens", "lr", "loss", "stage"}
    # input checkpoint untouched
    assert all(np.array_equal(ckpt.tensors[k], small_model().tensors[k]) for k in ckpt.tensors)


def test_training_is_deterministic():
    data = TokenStream("prose", 10_000, 0)
    cfg = TrainConfig(stages=[Stage(1024, 16)], batch_tokens=256, lr_stable=1e-3, lr_min=1e-5)
    a, _ = train_lm(small_model(), data, cfg)
    b, _ = train_lm(small_model(), data, cfg)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_multi_stage_sequence_lengths():
    cfg = TrainConfig(stages=[Stage(512, 8), Stage(512, 16)], batch_tokens=256, lr_stable=1e-3, lr_min=1e-5)
    _, hist = train_lm(small_model(), TokenStream("prose", 5000, 0), cfg)
    assert [r.stage for r in hist] == [0, 0, 1, 1]


def test_distillation_moves_student_toward_teacher():
    teacher, student = small_model(0), small_model(1)
    data = TokenStream("prose", 10_000, 0)
    probe = data.sample(np.random.default_rng(9), 4, 16)[:, :-1]
    before = kd_loss_value(logits(probe, student), logits(probe, teacher))
    cfg = TrainConfig(stages=[Stage(16_384, 16)], batch_tokens=512, lr_stable=3e-3, lr_min=3e-5)
    out, _ = distill_run(teacher, student, data, cfg)
    assert kd_loss_value(logits(probe, out), logits(probe, teacher)) < 0.7 * before


def test_divergence_is_reported():
    ckpt = small_model()
    ckpt.tensors["lm_head"][:] = np.nan
    cfg = TrainConfig(stages=[Stage(256, 8)], batch_tokens=256)
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_lm(ckpt, TokenStream("prose", 5000, 0), cfg)


def test_zero_lr_leaves_weights_unchanged():
    ckpt = small_model()
    cfg = TrainConfig(stages=[Stage(512, 8)], batch_tokens=256, lr_stable=0.0, lr_min=0.0)
    out, hist = train_lm(ckpt, TokenStream("prose", 5000, 0), cfg)
    assert all(np.array_equal(out.tensors[k], ckpt.tensors[k]) for k in ckpt.tensors)
    assert all(math.isfinite(r.loss) for r in hist)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoprune.config import (ConfigError, LayerKind, ModelConfig, TinyDefaults, build_layer_pattern,
                              compressed_config, nano12b_config, parse_pattern, pattern_string)
from nanoprune.model import (Checkpoint, CheckpointError, count_params, init_checkpoint, logits,
                             param_shapes)
from nanoprune.ssm import scan_chunked, scan_sequential


def tiny(**kw):
    return TinyDefaults(**kw).build()


# ------------------------------------------------------------ layer pattern

def test_pattern_62_layers_6_attention():
    pat = build_layer_pattern(62, 6)
    counts = {k: pat.count(k) for k in LayerKind}
    assert counts == {LayerKind.MAMBA: 28, LayerKind.ATTENTION: 6, LayerKind.FFN: 28}


def test_pattern_attention_slots_ten_two():
    pat = build_layer_pattern(10, 2)
    assert [i for i, k in enumerate(pat) if k is LayerKind.ATTENTION] == [2, 7]


def test_pattern_starts_with_mamba_and_alternates():
    s = pattern_string(build_layer_pattern(8, 2))
    assert s[0] == "M"
    non_attn = s.replace("*", "")
    assert all(a != b for a, b in zip(non_attn, non_attn[1:]))


def test_pattern_roundtrip_and_errors():
    assert parse_pattern("M-*M") == (LayerKind.MAMBA, LayerKind.FFN, LayerKind.ATTENTION, LayerKind.MAMBA)
    with pytest.raises(ConfigError):
        parse_pattern("MXM")
    with pytest.raises(ConfigError):
        build_layer_pattern(3, 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 80).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n))))
def test_pattern_counts_property(args):
    n, a = args
    pat = build_layer_pattern(n, a)
    assert len(pat) == n and pat.count(LayerKind.ATTENTION) == a
    rest = n - a
    assert pat.count(LayerKind.MAMBA) == (rest + 1) // 2
    assert pat.count(LayerKind.FFN) == rest // 2


# ------------------------------------------------------------ parameter counts

def test_12b_parameter_count():
    n = count_params(nano12b_config())
    assert 12.0e9 <= n <= 12.6e9
    assert n == 12_309_653_504  # agrees with closed_form_params below


def closed_form_params(n_mamba, n_attn, n_ffn, d, f, heads, *, vocab=131072, head_dim=80,
                       state=128, groups=8, window=4, nq=40, nkv=8, attn_hd=128):
    di = heads * head_dim
    bc = 2 * groups * state
    mamba = d + 2 * d * di + d * bc + d * heads + (di + bc) * window + 2 * heads + di + di * d
    attn = d + d * nq * attn_hd + 2 * d * nkv * attn_hd + nq * attn_hd * d
    ffn = d + 2 * d * f
    return 2 * vocab * d + d + n_mamba * mamba + n_attn * attn + n_ffn * ffn


def test_12b_count_matches_closed_form():
    assert count_params(nano12b_config()) == closed_form_params(28, 6, 28, 5120, 20480, 128)


@pytest.mark.parametrize("d,f,h", [(4480, 17920, 112), (4480, 15680, 128), (4800, 14400, 120)])
def test_compressed_candidate_counts(d, f, h):
    assert count_params(compressed_config(56, d, f, h)) == closed_form_params(26, 4, 26, d, f, h)


def test_candidate_two_near_reported_size():
    assert abs(count_params(compressed_config(56, 4480, 15680, 128)) / 8.89e9 - 1) < 0.03


def test_count_matches_materialized_checkpoint():
    cfg = tiny()
    assert init_checkpoint(cfg).n_params() == count_params(cfg)


def test_tied_embedding_drops_head():
    cfg = tiny()
    tied = cfg.with_(tied_embeddings=True)
    assert count_params(cfg) - count_params(tied) == cfg.vocab_size * cfg.d_model
    assert "lm_head" not in param_shapes(tied)


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny(extra={"n_q_heads": 3, "n_kv_heads": 2})
    with pytest.raises(ConfigError):
        tiny(extra={"mamba_groups": 3})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"n_layers": 2, "d_model": 8, "d_ffn": 8, "vocab_size": 5, "bogus": 1})


def test_config_dict_roundtrip():
    cfg = nano12b_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------ checkpoint

def test_checkpoint_rejects_wrong_shapes():
    ckpt = init_checkpoint(tiny())
    bad = dict(ckpt.tensors)
    bad["embedding"] = bad["embedding"][:, :-1]
    with pytest.raises(CheckpointError):
        Checkpoint(ckpt.config, bad)
    missing = dict(ckpt.tensors)
    missing.pop("final_norm")
    with pytest.raises(CheckpointError, match="missing"):
        Checkpoint(ckpt.config, missing)


def test_init_is_seeded():
    a, b = init_checkpoint(tiny(), seed=4), init_checkpoint(tiny(), seed=4)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


# ------------------------------------------------------------ forward pass

def test_forward_shape_and_finite():
    cfg = tiny()
    out = logits(np.arange(20).reshape(2, 10) % cfg.vocab_size, init_checkpoint(cfg))
    assert out.shape == (2, 10, cfg.vocab_size)
    assert np.all(np.isfinite(out))


def test_forward_is_causal():
    cfg = tiny()
    ckpt = init_checkpoint(cfg, seed=2)
    rng = np.random.default_rng(0)
    a = rng.integers(0, cfg.vocab_size, size=(1, 12))
    b = a.copy()
    b[0, 7:] = rng.integers(0, cfg.vocab_size, size=5)
    np.testing.assert_allclose(logits(a, ckpt)[:, :7], logits(b, ckpt)[:, :7], atol=1e-12)


def test_chunked_and_sequential_forward_agree():
    cfg = tiny()
    ckpt = init_checkpoint(cfg, seed=3)
    toks = np.random.default_rng(1).integers(0, cfg.vocab_size, size=(2, 37))
    np.testing.assert_allclose(logits(toks, ckpt, scan_method="chunked"),
                               logits(toks, ckpt, scan_method="sequential"), atol=1e-10)


def test_float32_forward_tracks_float64():
    cfg = tiny()
    c64 = init_checkpoint(cfg, seed=5)
    toks = np.arange(16).reshape(1, 16)
    l32 = logits(toks, c64.astype("float32"))
    assert l32.dtype == np.float32
    np.testing.assert_allclose(l32, logits(toks, c64), atol=1e-3)


# ------------------------------------------------------------ selective scan

def _scan_inputs(rng, b, s, h, p, g, n):
    return (rng.normal(size=(b, s, h, p)), rng.uniform(0.01, 1.0, size=(b, s, h)),
            np.log(rng.uniform(0.5, 8, size=h)), rng.normal(size=(b, s, g, n)),
            rng.normal(size=(b, s, g, n)), rng.normal(size=h))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 40), st.sampled_from([1, 2, 3, 8, 16]))
def test_chunked_scan_matches_recurrence(seed, s, chunk):
    args = _scan_inputs(np.random.default_rng(seed), 2, s, 4, 3, 2, 5)
    np.testing.assert_allclose(scan_chunked(*args, chunk=chunk), scan_sequential(*args), atol=1e-10)


def test_scan_single_step_closed_form():
    rng = np.random.default_rng(0)
    x, dt, a_log, b, c, d = _scan_inputs(rng, 1, 1, 2, 3, 1, 4)
    y = scan_sequential(x, dt, a_log, b, c, d)
    # h_1 = dt * B x (zero initial state), y = C.h + D x
    for head in range(2):
        h = dt[0, 0, head] * np.outer(x[0, 0, head], b[0, 0, 0])
        np.testing.assert_allclose(y[0, 0, head], h @ c[0, 0, 0] + d[head] * x[0, 0, head])


def test_scan_decay_forgets():
    rng = np.random.default_rng(1)
    x, dt, a_log, b, c, d = _scan_inputs(rng, 1, 30, 2, 2, 1, 3)
    x[:, 1:] = 0.0
    d[:] = 0
    dt[:] = 2.0
    a_log[:] = np.log(5.0)
    y = scan_sequential(x, dt, a_log, b, c, d)
    assert np.max(np.abs(y[0, -1])) < 1e-100 + 1e-12 * np.max(np.abs(y[0, 0]))


def test_scan_returns_states():
    args = _scan_inputs(np.random.default_rng(2), 1, 6, 2, 3, 2, 4)
    y, states = scan_sequential(*args, return_states=True)
    assert states.shape[-2:] == (3, 4)

import copy
import json

import pytest

TINY_PIPELINE = {
    "seed": 3,
    "precision": "float64",
    "model": {"n_layers": 6, "n_attn": 2, "d_model": 32, "d_ffn": 64, "vocab_size": 256},
    "data": {"n_chars": 20_000, "heldout_chars": 5000, "heldout_n": 4, "heldout_seq": 32},
    "train": {"stages": [{"tokens": 8192, "seq_len": 32}], "batch_tokens": 512,
              "lr_stable": 3e-3, "lr_min": 3e-5, "warmup_steps": 2},
    "importance": {"calib_n": 8, "calib_seq": 32, "batch_size": 8},
    "search": {"depths": [4, 5, 6], "d_models": [24, 32], "d_ffns": [32, 64], "mamba_heads": [2, 4],
               "top_k": 2, "seq_len": 64, "budget_bytes": 1e9,
               "short_kd": {"stages": [{"tokens": 2048, "seq_len": 32}], "batch_tokens": 512,
                            "lr_stable": 3e-3, "lr_min": 3e-5}},
    "distill": {"stages": [{"tokens": 4096, "seq_len": 32}], "batch_tokens": 512,
                "lr_stable": 2e-3, "lr_min": 2e-5},
    "merge": {"alpha": 0.5},
    "quantize": {"skip_first": 1, "skip_last": 1},
    "budget": {"n_streams": 20},
}


@pytest.fixture
def tiny_config():
    return copy.deepcopy(TINY_PIPELINE)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(tiny_config))
    return p


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)

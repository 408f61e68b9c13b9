import math

import numpy as np
import pytest

from effscale import core
from effscale.compressors import DENSE, parse_spec
from effscale.core import Tape
from effscale.data import batches, synth_corpus
from effscale.model import (ModelConfig, ModelParams, forward_logits, forward_loss, init_params,
                            load_checkpoint, param_count, param_shapes, save_checkpoint)
from effscale.trainer import AdamW, TrainConfig

TINY = ModelConfig(vocab_size=11, d_model=8, n_layers=1, n_heads=2, d_ff=16, seq_len=4)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(11, 8, 1, 3, 16, 4)
    with pytest.raises(ValueError):
        ModelConfig(11, 6, 1, 2, 16, 4)  # odd head dim
    with pytest.raises(ValueError):
        ModelConfig(0, 8, 1, 2, 16, 4)


def test_param_count_tiny():
    counts = param_count(TINY)
    assert counts["compressible"] == 4 * 64 + 2 * 128 + 128 == 640
    assert counts["embedding_and_head"] == 2 * 11 * 8 == 176
    assert counts["total"] == 640 + 176 + 3 * 8
    assert param_count(ModelConfig(11, 8, 0, 2, 16, 4))["compressible"] == 0


def test_param_count_matches_shapes():
    cfg = ModelConfig(256, 64, 3, 2, 192, 64)
    assert param_count(cfg)["total"] == sum(int(np.prod(s)) for _, s in param_shapes(cfg)) == 192_960


def test_init_is_deterministic_and_seeded():
    a, b, c = init_params(TINY, 1), init_params(TINY, 1), init_params(TINY, 2)
    for name, _ in param_shapes(TINY):
        assert a[name].data.tobytes() == b[name].data.tobytes()
    assert not np.array_equal(a["tok_emb"].data, c["tok_emb"].data)


def test_init_std():
    cfg = ModelConfig(256, 256, 0, 2, 16, 4)
    emb = init_params(cfg, 0)["tok_emb"].data
    assert abs(emb.std() - cfg.init_std) < 0.1 * cfg.init_std


def test_params_shape_check():
    arrays = init_params(TINY, 0).arrays()
    arrays["head"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        ModelParams.from_arrays(TINY, arrays)


def test_logits_shape_and_range_check():
    params = init_params(TINY, 0)
    assert forward_logits(params, np.zeros((2, 4), dtype=int)).shape == (2, 4, 11)
    with pytest.raises(IndexError):
        forward_logits(params, np.full((1, 4), 11))


@pytest.mark.parametrize("spec", ["dense", "w1", "w4a4", "s0.5"])
def test_untrained_loss_is_near_log_vocab(spec):
    cfg = ModelConfig(64, 16, 2, 2, 32, 8)
    tokens = np.random.default_rng(0).integers(0, 64, (4, 9))
    loss = forward_loss(init_params(cfg, 0), tokens, parse_spec(spec)).item()
    assert loss == pytest.approx(math.log(64), rel=0.05)


def test_dense_spec_has_no_compression_ops():
    params = init_params(TINY, 0)
    tokens = np.random.default_rng(1).integers(0, 11, (2, 5))
    with Tape() as tape:
        forward_loss(params, tokens, DENSE)
    ops = [n.backward.__qualname__ for n in tape.nodes]
    assert not any("custom_grad" in o for o in ops)


def test_model_gradient_check():
    with core.precision(64):
        params = init_params(TINY, 0)
        names = [n for n, _ in param_shapes(TINY)]
        rng = np.random.default_rng(2)
        point = [params[n].data + rng.normal(0, 0.3, params[n].shape) for n in names]
        tokens = rng.integers(0, 11, (2, 5))

        def loss(ts):
            return forward_loss(ModelParams(TINY, dict(zip(names, ts))), tokens)
        assert core.gradient_check(loss, point) <= 1e-4


def test_compressed_weights_use_per_output_groups():
    cfg = ModelConfig(11, 8, 1, 2, 16, 4)
    params = init_params(cfg, 0)
    tokens = np.random.default_rng(3).integers(0, 11, (2, 5))
    per_row = forward_loss(params, tokens, parse_spec("w2:per_row")).item()
    per_tensor = forward_loss(params, tokens, parse_spec("w2")).item()
    assert per_row != per_tensor


def _trained(cfg, steps=150):
    stream = synth_corpus(cfg.vocab_size, 60_000, 0)
    params = init_params(cfg, 0)
    opt = AdamW(params, TrainConfig(total_tokens=1))
    it = batches(stream, 16, cfg.seq_len, 0)
    for _ in range(steps):
        with Tape() as tape:
            loss = forward_loss(params, next(it))
        tape.backward(loss)
        opt.step(3e-3)
    return params, stream


def test_one_bit_forward_is_worse_on_trained_model():
    cfg = ModelConfig(32, 32, 2, 2, 64, 16)
    params, stream = _trained(cfg)
    block = next(batches(stream, 32, cfg.seq_len, 7))
    dense = forward_loss(params, block).item()
    assert dense < math.log(32) - 0.3
    assert forward_loss(params, block, parse_spec("w1")).item() >= dense


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(TINY, 5)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, 5, parse_spec("w4"))
    loaded, header = load_checkpoint(path)
    assert header["seed"] == 5 and header["spec"] == "w4" and loaded.config == TINY
    for name, _ in param_shapes(TINY):
        np.testing.assert_array_equal(loaded[name].data, params[name].data.astype(np.float32))
    assert path.stat().st_size == 4 * param_count(TINY)["total"]


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, init_params(TINY, 0), 0)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(path)

"""Tests for the token encoder and deterministic checkpoints."""

from __future__ import annotations

import hashlib
import subprocess
import sys
import textwrap

import pytest
import torch

from gradcheck import analytic_grads, finite_difference_grads, max_relative_error
from spanfuse.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    state_dict_tensors,
)
from spanfuse.encoder import (
    PAD_ID,
    UNK_ID,
    EncoderConfig,
    TokenEncoder,
    build_vocab,
    encode_tokens,
)


class TestVocab:
    def test_first_occurrence_order(self):
        vocab = build_vocab([["b", "a", "b"], ["c", "a"]])
        assert vocab == {"<pad>": 0, "<unk>": 1, "b": 2, "a": 3, "c": 4}

    def test_encode_tokens_unk(self):
        vocab = build_vocab([["x"]])
        ids = encode_tokens(["x", "zzz"], vocab)
        assert ids.tolist() == [2, UNK_ID]
        assert ids.dtype == torch.long

    def test_pad_reserved(self):
        vocab = build_vocab([])
        assert vocab["<pad>"] == PAD_ID and vocab["<unk>"] == UNK_ID


def tiny_config(vocab_size=9):
    return EncoderConfig(vocab_size=vocab_size, dim=8, num_layers=1, num_heads=2, ffn_dim=16, max_len=16)


class TestEncoder:
    def test_output_shape(self):
        torch.manual_seed(0)
        model = TokenEncoder(tiny_config())
        out = model(torch.tensor([2, 3, 4, 5]))
        assert out.shape == (4, 8)
        assert out.dtype == torch.float32

    def test_rejects_bad_inputs(self):
        torch.manual_seed(0)
        model = TokenEncoder(tiny_config())
        with pytest.raises(ValueError, match="1-D"):
            model(torch.zeros((2, 3), dtype=torch.long))
        with pytest.raises(ValueError, match="empty"):
            model(torch.zeros((0,), dtype=torch.long))
        with pytest.raises(ValueError, match="max_len"):
            model(torch.zeros((17,), dtype=torch.long))

    def test_seeded_init_reproducible(self):
        torch.manual_seed(11)
        a = TokenEncoder(tiny_config())
        torch.manual_seed(11)
        b = TokenEncoder(tiny_config())
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_forward_deterministic(self):
        torch.manual_seed(3)
        model = TokenEncoder(tiny_config())
        model.eval()
        ids = torch.tensor([2, 5, 2, 7])
        assert torch.equal(model(ids), model(ids))

    def test_context_sensitivity(self):
        # The same token id in different contexts gets different vectors.
        torch.manual_seed(5)
        model = TokenEncoder(tiny_config())
        model.eval()
        out1 = model(torch.tensor([2, 3]))
        out2 = model(torch.tensor([2, 4]))
        assert not torch.allclose(out1[0], out2[0])

    def test_dim_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            EncoderConfig(vocab_size=4, dim=10, num_heads=4)

    def test_gradient_check_tiny(self):
        torch.manual_seed(7)
        model = TokenEncoder(tiny_config(vocab_size=7)).double()
        model.eval()
        ids = torch.tensor([2, 4, 3, 6])
        torch.manual_seed(8)
        probe = torch.randn(4, 8, dtype=torch.float64)

        def loss_fn():
            return (model(ids) * probe).sum()

        params = [p for p in model.parameters() if p.requires_grad]
        analytic = analytic_grads(loss_fn, params)
        numeric = finite_difference_grads(loss_fn, params, h=1e-5)
        assert max_relative_error(analytic, numeric, atol=1e-8) <= 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        torch.manual_seed(0)
        tensors = {
            "w": torch.randn(3, 4),
            "b": torch.randn(4, dtype=torch.float64),
            "steps": torch.tensor(17),
            "flags": torch.tensor([True, False]),
        }
        meta = {"note": "hello", "nested": {"k": [1, 2, 3]}}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tensors, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        assert set(loaded) == set(tensors)
        for name, tensor in tensors.items():
            assert loaded[name].dtype == tensor.dtype
            assert torch.equal(loaded[name], tensor)

    def test_same_state_same_bytes(self, tmp_path):
        torch.manual_seed(1)
        tensors = {"a": torch.randn(5, 5), "z": torch.arange(6).reshape(2, 3)}
        p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
        save_checkpoint(p1, tensors, {"x": 1})
        save_checkpoint(p2, dict(reversed(list(tensors.items()))), {"x": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_cross_process_bytes_identical(self, tmp_path):
        script = textwrap.dedent(
            """
            import sys, torch
            from spanfuse.checkpoint import save_checkpoint
            torch.manual_seed(42)
            tensors = {"w": torch.randn(8, 8), "v": torch.randn(8, dtype=torch.float64)}
            save_checkpoint(sys.argv[1], tensors, {"run": "twin"})
            """
        )
        digests = []
        for name in ("a.ckpt", "b.ckpt"):
            path = tmp_path / name
            subprocess.run([sys.executable, "-c", script, str(path)], check=True)
            digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_module_state_round_trip(self, tmp_path):
        torch.manual_seed(2)
        model = TokenEncoder(tiny_config())
        path = tmp_path / "enc.ckpt"
        save_checkpoint(path, state_dict_tensors(model), {"config": model.config.to_dict()})
        tensors, meta = load_checkpoint(path)
        rebuilt = TokenEncoder(EncoderConfig.from_dict(meta["config"]))
        rebuilt.load_state_dict(tensors)
        ids = torch.tensor([2, 3, 4])
        model.eval()
        rebuilt.eval()
        assert torch.equal(model(ids), rebuilt(ids))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE")
        with pytest.raises(CheckpointError, match="not a spanfuse checkpoint"):
            load_checkpoint(path)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        save_checkpoint(path, {"w": torch.randn(4, 4)}, {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "extra.ckpt"
        save_checkpoint(path, {"w": torch.randn(2)}, {})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_unsupported_dtype_rejected(self):
        with pytest.raises(CheckpointError, match="unsupported"):
            save_checkpoint("/tmp/never-written.ckpt", {"w": torch.randn(2).half()}, {})

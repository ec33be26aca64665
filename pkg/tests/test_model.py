import math
import random

import pytest
import torch

from conftest import tiny_config, tiny_model
from oracles import manual_decoder, manual_encoder, naive_affine, ulm_visible
from sumalign.batching import bidirectional_mask, ulm_mask
from sumalign.model import (
    ModelConfig,
    NumericalError,
    SummarizationModel,
    check_gradients,
    decode_forward,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from sumalign.optim import AdamW, warmup_constant
from sumalign.tokenizer import PAD


def as_lists(model):
    return {k: v.tolist() for k, v in model.state_dict().items()}


def assert_close(a, b, tol=1e-10):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    assert a.shape == b.shape
    assert (a - b).abs().max().item() < tol


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, d_model=10, n_heads=4)

    def test_decoder_mirrors_encoder(self):
        assert ModelConfig(vocab_size=10, n_layers=3).n_dec_layers == 3
        assert ModelConfig(vocab_size=10, n_layers=3, dec_layers=1).n_dec_layers == 1

    def test_init_is_seeded(self):
        a = SummarizationModel(tiny_config(seed=4))
        b = SummarizationModel(tiny_config(seed=4))
        for (n, p), q in zip(a.named_parameters(), b.parameters()):
            assert torch.equal(p, q), n

    def test_init_layout(self):
        m = SummarizationModel(tiny_config())
        assert torch.all(m.encoder.layers[0].ln1.weight == 1)
        assert torch.all(m.awp_head.bias == 0)
        assert m.encoder.tok.weight.std().item() == pytest.approx(0.02, rel=0.3)


class TestEncoder:
    def test_manual_forward_ulm(self):
        model = tiny_model(seed=1)
        ids = [1, 5, 7, 2, 9, 11, 2]
        cl, sl = 4, 3
        enc = model.encode(torch.tensor([ids]), ulm_mask(cl, sl))[0]
        expect = manual_encoder(as_lists(model), ids, lambda i, j: ulm_visible(i, j, cl, sl), 2, 2)
        assert_close(enc, expect)

    def test_manual_forward_with_padding(self):
        model = tiny_model(seed=2)
        ids = [1, 6, 2, 8, 2, PAD, PAD]
        enc = model.encode(torch.tensor([ids]), bidirectional_mask(3, 2, 7))[0]
        expect = manual_encoder(as_lists(model), ids, lambda i, j: j < 5, 2, 2)
        assert_close(enc, expect)

    def test_pad_content_irrelevant(self):
        model = tiny_model(seed=3)
        vis = bidirectional_mask(3, 1, 6)
        a = model.encode(torch.tensor([[1, 6, 2, 9, PAD, PAD]]), vis)
        b = model.encode(torch.tensor([[1, 6, 2, 9, 13, 17]]), vis)
        assert torch.equal(a[:, :4], b[:, :4])

    def test_single_token_all_visible(self):
        model = tiny_model(seed=3)
        out = model.encode(torch.tensor([[1]]), torch.ones(1, 1, dtype=torch.bool))
        assert out.shape == (1, 1, 8)

    def test_attention_rows_sum_to_one(self):
        model = tiny_model(seed=5)
        attn = model.encoder.layers[1].attn
        attn.record = True
        model.encode(torch.tensor([[1, 6, 2, 9, 2, PAD]]), ulm_mask(3, 2, 6))
        w = attn.last_weights
        assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), 1e-12)
        assert torch.all(w[..., 5] == 0)

    def test_deterministic_in_eval(self):
        model = tiny_model(seed=6)
        ids = torch.tensor([[1, 6, 2, 9, 2]])
        assert torch.equal(model.encode(ids, ulm_mask(3, 2)), model.encode(ids, ulm_mask(3, 2)))

    def test_ulm_causality(self):
        model = tiny_model(seed=7)
        rng = random.Random(0)
        for _ in range(20):
            cl, sl = rng.randint(2, 6), rng.randint(2, 6)
            ids = [1] + [rng.randrange(5, 20) for _ in range(cl + sl - 1)]
            j = rng.randrange(cl, cl + sl)
            edited = list(ids)
            edited[j] = 5 + (ids[j] - 4) % 15
            vis = ulm_mask(cl, sl)
            a = model.encode(torch.tensor([ids]), vis)
            b = model.encode(torch.tensor([edited]), vis)
            assert torch.equal(a[:, :j], b[:, :j])

    def test_non_finite_names_layer(self):
        model = tiny_model(seed=0)
        with torch.no_grad():
            model.encoder.layers[1].ffn.fc2.bias.fill_(float("nan"))
        with pytest.raises(NumericalError, match="encoder layer 1"):
            model.encode(torch.tensor([[1, 5, 2]]), bidirectional_mask(3, 0))


class TestHeads:
    def test_awp_zero_head(self):
        model = tiny_model(seed=0)
        with torch.no_grad():
            model.awp_head.weight.zero_()
            model.awp_head.bias.zero_()
        enc = model.encode(torch.tensor([[1, 5, 2]]), bidirectional_mask(3, 0))
        assert torch.all(model.awp_logits(enc) == 0)

    def test_awp_bias_one_hot(self):
        model = tiny_model(seed=0)
        with torch.no_grad():
            model.awp_head.weight.zero_()
            model.awp_head.bias.zero_()
            model.awp_head.bias[17] = 3.0
        enc = model.encode(torch.tensor([[1, 5, 2]]), bidirectional_mask(3, 0))
        assert model.awp_logits(enc).argmax().item() == 17

    def test_awp_naive_affine(self):
        model = tiny_model(seed=8)
        enc = model.encode(torch.tensor([[1, 5, 6, 2], [1, 7, 2, PAD]]),
                           torch.stack([bidirectional_mask(4, 0), bidirectional_mask(3, 0, 4)]))
        expect = naive_affine(enc[:, 0].tolist(), model.awp_head.weight.tolist(), model.awp_head.bias.tolist())
        assert_close(model.awp_logits(enc), expect, 1e-12)

    def test_awp_shape_check(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.awp_logits(torch.zeros(2, 8))

    def test_lm_zero_weights_uniform(self):
        model = tiny_model(seed=0)
        with torch.no_grad():
            model.lm_head.weight.zero_()
            model.lm_head.bias.zero_()
        enc = model.encode(torch.tensor([[1, 5, 2, 9]]), ulm_mask(3, 1))
        logits = model.lm_logits(enc, torch.tensor([0, 0]), torch.tensor([2, 3]))
        loss = torch.nn.functional.cross_entropy(logits, torch.tensor([9, 2]))
        assert loss.item() == pytest.approx(math.log(20), abs=1e-12)

    def test_lm_empty_positions(self):
        model = tiny_model()
        enc = model.encode(torch.tensor([[1, 5, 2]]), bidirectional_mask(3, 0))
        empty = torch.tensor([], dtype=torch.long)
        assert model.lm_logits(enc, empty, empty).shape == (0, 20)


class TestDecoder:
    def test_manual_forward(self):
        model = tiny_model(seed=9)
        code = [1, 5, 6, 2, PAD]
        e = model.encode(torch.tensor([code]), bidirectional_mask(4, 0, 5))
        dec = [1, 8, 9]
        logits = decode_forward(model, e, torch.tensor([code]), torch.tensor([dec]))[0]
        expect = manual_decoder(as_lists(model), dec, e[0].tolist(), 4, 2, 2)
        assert_close(logits, expect)

    def test_causality(self):
        model = tiny_model(seed=10)
        rng = random.Random(1)
        code = torch.tensor([[1, 5, 6, 7, 2]])
        e = model.encode(code, bidirectional_mask(5, 0))
        for _ in range(20):
            n = rng.randint(2, 8)
            dec = [1] + [rng.randrange(5, 20) for _ in range(n - 1)]
            j = rng.randrange(1, n)
            edited = list(dec)
            edited[j] = 5 + (dec[j] - 4) % 15
            a = decode_forward(model, e, code, torch.tensor([dec]))
            b = decode_forward(model, e, code, torch.tensor([edited]))
            assert torch.equal(a[:, :j], b[:, :j])

    def test_zero_cross_attention_ignores_code(self):
        model = tiny_model(seed=11)
        with torch.no_grad():
            for layer in model.decoder.layers:
                layer.cross_attn.o.weight.zero_()
                layer.cross_attn.o.bias.zero_()
        code = torch.tensor([[1, 5, 6, 2]])
        vis = bidirectional_mask(4, 0)
        e1 = model.encode(code, vis)
        e2 = torch.randn_like(e1)
        dec = torch.tensor([[1, 8, 9]])
        assert torch.equal(decode_forward(model, e1, code, dec), decode_forward(model, e2, code, dec))

    def test_shapes(self):
        model = tiny_model()
        code = torch.tensor([[1, 5, 2, PAD], [1, 5, 6, 2]])
        e = model.encode(code, torch.stack([bidirectional_mask(3, 0, 4), bidirectional_mask(4, 0)]))
        assert e.shape == (2, 4, 8)
        assert decode_forward(model, e, code, torch.tensor([[1, 7, 8], [1, 9, 2]])).shape == (2, 3, 20)


class TestBackwardAndOptimizer:
    def test_constant_loss_zero_gradients(self):
        model = tiny_model()
        loss = sum(p.sum() for p in model.parameters()).detach() * 0 + torch.tensor(1.0, requires_grad=True)
        loss.backward()
        assert all(p.grad is None or torch.all(p.grad == 0) for p in model.parameters())

    def test_nan_gradient_named(self):
        model = tiny_model()
        model.awp_head.bias.grad = torch.full_like(model.awp_head.bias, float("nan"))
        with pytest.raises(NumericalError, match="awp_head.bias"):
            check_gradients(model)

    def test_matches_torch_adamw(self):
        torch.manual_seed(0)
        a = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
        b = a.detach().clone().requires_grad_(True)
        ours = AdamW([a], lr=1e-2, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.1)
        ref = torch.optim.AdamW([b], lr=1e-2, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.1)
        for step in range(25):
            g = torch.randn(6, 4, dtype=torch.float64)
            a.grad, b.grad = g.clone(), g.clone()
            ours.step()
            ref.step()
        assert_close(a.detach(), b.detach(), 1e-12)

    def test_zero_lr_is_identity(self):
        model = tiny_model(dtype=torch.float32)
        before = [p.detach().clone() for p in model.parameters()]
        opt = AdamW(model.parameters(), lr=0.0, weight_decay=0.01)
        for p in model.parameters():
            p.grad = torch.ones_like(p)
        opt.step()
        assert all(torch.equal(p, q) for p, q in zip(model.parameters(), before))

    def test_rejects_bad_hyperparameters(self):
        p = [torch.zeros(2, requires_grad=True)]
        with pytest.raises(ValueError):
            AdamW(p, lr=-1)
        with pytest.raises(ValueError):
            AdamW(p, betas=(1.0, 0.9))

    def test_warmup(self):
        assert warmup_constant(1, 1000, 5e-4) == pytest.approx(5e-5)
        assert warmup_constant(10, 1000, 5e-4) == 5e-4
        assert warmup_constant(500, 1000, 5e-4) == 5e-4
        assert warmup_constant(1, 50, 1.0) == 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = SummarizationModel(tiny_config(seed=3))
        save_checkpoint(tmp_path / "m.pt", model, step=7, vocab_fingerprint="abc", tag="full")
        payload = load_checkpoint(tmp_path / "m.pt")
        again = model_from_checkpoint(payload, "abc")
        assert payload["step"] == 7 and payload["tag"] == "full"
        for (n, p), q in zip(model.state_dict().items(), again.state_dict().values()):
            assert torch.equal(p, q), n

    def test_vocab_mismatch(self, tmp_path):
        model = SummarizationModel(tiny_config())
        save_checkpoint(tmp_path / "m.pt", model, vocab_fingerprint="abc")
        with pytest.raises(ValueError, match="vocabulary mismatch"):
            model_from_checkpoint(load_checkpoint(tmp_path / "m.pt"), "xyz")

    def test_rejects_foreign_file(self, tmp_path):
        torch.save({"x": 1}, tmp_path / "f.pt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "f.pt")

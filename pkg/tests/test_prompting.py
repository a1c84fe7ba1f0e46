"""Vision-guided prompts, auxiliary rescoring, and score ensembling."""

import numpy as np
import pytest
import torch

from ovrd.encoders import EncoderSpec, MockVisionLanguageEncoder, identity_color
from ovrd.prompting import (
    AuxObjectClassifier,
    EnsembleWeights,
    PromptTemplate,
    VisionPromptNet,
    aux_classify,
    build_prompt,
    conditional_tokens,
    ensemble,
)

TOKEN_DIM = 16
FEATURE_DIM = 32


def template(target_set="object", fraction=None, n=8):
    torch.manual_seed(0)
    return PromptTemplate(token_dim=TOKEN_DIM, n_continuous=n, n_conditional=n,
                          target_set=target_set,
                          class_token_position=fraction if fraction is not None else "end")


def prompt_net(seed=0):
    torch.manual_seed(seed)
    return VisionPromptNet(feature_dim=FEATURE_DIM, token_dim=TOKEN_DIM, n_tokens=8)


class TestConditionalTokens:
    def test_zero_embedding_zero_bias_gives_zero_tokens(self):
        net = prompt_net()
        for m in net.modules():
            if isinstance(m, torch.nn.Linear):
                torch.nn.init.zeros_(m.bias)
        toks = conditional_tokens(net, torch.zeros(FEATURE_DIM))
        assert toks.shape == (8, TOKEN_DIM)
        assert torch.allclose(toks, torch.zeros_like(toks))

    def test_distinct_embeddings_distinct_tokens(self):
        net = prompt_net()
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = torch.tensor(rng.normal(0, 1, FEATURE_DIM), dtype=torch.float32)
            b = torch.tensor(rng.normal(0, 1, FEATURE_DIM), dtype=torch.float32)
            ta = conditional_tokens(net, a)
            tb = conditional_tokens(net, b)
            assert not torch.allclose(ta, tb)

    def test_default_count_is_eight(self):
        toks = conditional_tokens(prompt_net(), torch.randn(FEATURE_DIM))
        assert toks.shape[0] == 8

    def test_gradient_reaches_net_and_embedding(self):
        net = prompt_net()
        emb = torch.randn(FEATURE_DIM, requires_grad=True)
        conditional_tokens(net, emb).sum().backward()
        assert emb.grad is not None and emb.grad.abs().sum() > 0
        grads = [p.grad for p in net.parameters()]
        assert all(g is not None for g in grads)


class TestBuildPrompt:
    def test_object_prompt_shape(self):
        tpl = template("object")
        zeta = torch.randn(8, TOKEN_DIM)
        seq = build_prompt(tpl, zeta, "cube")
        assert len(seq) == 17
        assert seq[-1] == "cube"
        for k in range(8):
            assert torch.equal(seq[2 * k], tpl.continuous_tokens[k])
            assert torch.equal(seq[2 * k + 1], zeta[k])

    def test_relation_prompt_insertion_index(self):
        tpl = template("relation", fraction=0.75)
        zeta = torch.randn(8, TOKEN_DIM)
        seq = build_prompt(tpl, zeta, "follows")
        assert len(seq) == 17
        assert seq[12] == "follows"
        rest = [t for t in seq if not isinstance(t, str)]
        assert len(rest) == 16

    def test_fraction_beyond_one_clamps_to_end(self):
        tpl = template("relation", fraction=2.0)
        seq = build_prompt(tpl, torch.randn(8, TOKEN_DIM), "above")
        assert seq[-1] == "above"

    def test_rebuild_is_identical(self):
        tpl = template("object")
        zeta = torch.randn(8, TOKEN_DIM)
        a = build_prompt(tpl, zeta, "disc")
        b = build_prompt(tpl, zeta, "disc")
        assert len(a) == len(b)
        for x, y in zip(a, b):
            if isinstance(x, str):
                assert x == y
            else:
                assert torch.equal(x, y)

    def test_empty_class_name_rejected(self):
        with pytest.raises(ValueError):
            build_prompt(template(), torch.randn(8, TOKEN_DIM), "")

    def test_mismatched_zeta_rejected(self):
        with pytest.raises(ValueError):
            build_prompt(template(), torch.randn(5, TOKEN_DIM), "cube")

    def test_unequal_token_counts_rejected(self):
        with pytest.raises(ValueError):
            PromptTemplate(token_dim=TOKEN_DIM, n_continuous=8, n_conditional=4)


class TestAuxClassify:
    def test_identical_anchors_uniform(self):
        e = torch.randn(FEATURE_DIM)
        anchors = torch.randn(1, FEATURE_DIM).repeat(5, 1)
        p = aux_classify(e, anchors, tau=0.01)
        assert torch.allclose(p, torch.full((5,), 0.2), atol=1e-6)

    def test_rows_sum_to_one(self):
        e = torch.randn(7, FEATURE_DIM)
        anchors = torch.randn(4, FEATURE_DIM)
        p = aux_classify(e, anchors, tau=0.05)
        assert torch.allclose(p.sum(dim=-1), torch.ones(7), atol=1e-6)

    def test_empty_category_set_rejected(self):
        with pytest.raises(ValueError):
            aux_classify(torch.randn(FEATURE_DIM), torch.zeros(0, FEATURE_DIM), tau=0.01)


class TestEnsemble:
    def setup_method(self):
        gen = torch.Generator().manual_seed(4)
        self.p = torch.rand(6, generator=gen)
        self.q = torch.rand(6, generator=gen)
        self.base = torch.tensor([True, True, True, False, False, True])

    def test_alpha_beta_zero_is_p(self):
        out = ensemble(self.p, self.q, EnsembleWeights(0.0, 0.0), self.base)
        assert torch.equal(out, self.p)

    def test_alpha_beta_one_is_q(self):
        out = ensemble(self.p, self.q, EnsembleWeights(1.0, 1.0), self.base)
        assert torch.equal(out, self.q)

    def test_split_mix_matches_manual(self):
        w = EnsembleWeights(0.3, 0.6)
        out = ensemble(self.p, self.q, w, self.base)
        manual = torch.where(self.base,
                             0.7 * self.p + 0.3 * self.q,
                             0.4 * self.p + 0.6 * self.q)
        assert torch.allclose(out, manual, atol=1e-7)

    def test_probability_mix_stays_in_unit_interval_and_sums(self):
        p = torch.softmax(torch.randn(6), dim=0)
        q = torch.softmax(torch.randn(6), dim=0)
        out = ensemble(p, q, EnsembleWeights(0.4, 0.4), self.base)
        assert (out >= 0).all() and (out <= 1).all()
        assert out.sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_argmax_stable_under_common_scaling(self):
        w = EnsembleWeights(0.3, 0.6)
        a = ensemble(self.p, self.q, w, self.base)
        b = ensemble(self.p * 3.7, self.q * 3.7, w, self.base)
        assert int(a.argmax()) == int(b.argmax())

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ensemble(self.p, self.q[:4], EnsembleWeights(0.3, 0.6), self.base)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            EnsembleWeights(1.2, 0.5)
        with pytest.raises(ValueError):
            EnsembleWeights(0.5, -0.1)


class TestAuxObjectClassifier:
    def test_rescore_prefers_matching_name(self):
        spec = EncoderSpec(feature_dim=FEATURE_DIM, patch_grid=(6, 6),
                           input_resolution=96, text_context_length=24,
                           token_dim=TOKEN_DIM)
        enc = MockVisionLanguageEncoder(spec)
        torch.manual_seed(1)
        clf = AuxObjectClassifier(enc, n_continuous=8, n_conditional=8)
        names = ["cube", "vane", "disc", "spool"]
        img = np.zeros((96, 96, 3), dtype=np.uint8)
        img[20:70, 20:70] = identity_color("disc")
        emb = enc.encode_crop(img, (18, 18, 72, 72))
        scores = clf.rescore(emb, names, tau=0.01)
        assert scores.shape == (4,)
        assert names[int(scores.argmax())] == "disc"

    def test_gradients_stop_at_encoder(self):
        spec = EncoderSpec(feature_dim=FEATURE_DIM, patch_grid=(6, 6),
                           input_resolution=96, text_context_length=24,
                           token_dim=TOKEN_DIM)
        enc = MockVisionLanguageEncoder(spec)
        clf = AuxObjectClassifier(enc, n_continuous=8, n_conditional=8)
        emb = torch.randn(FEATURE_DIM, requires_grad=True)
        # a single class probability, not the sum: softmax sums are constant
        clf.rescore(emb, ["cube", "vane"], tau=0.05)[0].backward()
        assert clf.template.continuous_tokens.grad is not None
        assert clf.template.continuous_tokens.grad.abs().sum() > 0
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for p in clf.prompt_net.parameters())
        assert emb.grad is not None
        for t in enc.fixed_tensors():
            assert not t.requires_grad

"""Network-level tests: encoders, selection, loss identities, gradients."""

import math

import numpy as np
import pytest

from pathsegkit.errors import (
    DimensionMismatch,
    IndivisibleDims,
    ShapeMismatch,
    UnknownToken,
    ZeroVector,
)
from pathsegkit.model import (
    ModelConfig,
    Vocabulary,
    decode_candidate_masks,
    encode_image,
    encode_text,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    loss_and_grads,
    project_embeddings,
    save_checkpoint,
    segmentation_loss,
    select_mask,
)
from pathsegkit.taxonomy import parse_label

LABEL = parse_label("breast-nuclei-apoptotic body")  # renders to a 6-token prompt


def small_setup(seed=0, d=16, patch=8, vocab_labels=None):
    cfg = ModelConfig(d=d, n_queries=4, heads=2, patch=patch, seed=seed)
    vocab = Vocabulary.from_labels(vocab_labels or [LABEL])
    params = init_params(cfg, len(vocab))
    return cfg, vocab, params


class TestEncodeImage:
    def test_shapes(self):
        cfg, vocab, params = small_setup(d=16, patch=8)
        img = np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)
        tokens, pixel_map = encode_image(img, params, cfg)
        assert tokens.shape == (64, 16)
        assert pixel_map.shape == (8, 8, 16)

    def test_zero_image_zero_bias_gives_zero_features(self):
        cfg, vocab, params = small_setup()
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        tokens, _ = encode_image(img, params, cfg)  # biases init to zero
        np.testing.assert_array_equal(tokens, 0.0)

    def test_deterministic_under_seed(self):
        cfg1, _, p1 = small_setup(seed=5)
        cfg2, _, p2 = small_setup(seed=5)
        img = np.random.default_rng(1).integers(0, 255, (32, 32, 3), dtype=np.uint8)
        np.testing.assert_array_equal(
            encode_image(img, p1, cfg1)[0], encode_image(img, p2, cfg2)[0]
        )

    def test_indivisible(self):
        cfg, _, params = small_setup(patch=8)
        with pytest.raises(IndivisibleDims):
            encode_image(np.zeros((30, 32, 3), dtype=np.uint8), params, cfg)

    def test_tokens_and_pixel_map_share_grid(self):
        cfg, _, params = small_setup()
        img = np.random.default_rng(2).integers(0, 255, (32, 32, 3), dtype=np.uint8)
        tokens, pixel_map = encode_image(img, params, cfg)
        np.testing.assert_array_equal(tokens.reshape(4, 4, 16), pixel_map)


class TestEncodeText:
    def test_six_token_prompt_shape(self):
        cfg, vocab, params = small_setup()
        ids = vocab.encode(LABEL.prompt())
        assert len(ids) == 6
        f_text = encode_text(ids, params, cfg)
        assert f_text.shape == (6, 16)

    def test_identical_prompts_identical_features(self):
        cfg, vocab, params = small_setup()
        ids = vocab.encode(LABEL.prompt())
        np.testing.assert_array_equal(
            encode_text(ids, params, cfg), encode_text(ids, params, cfg)
        )

    def test_global_embedding_is_last_row(self):
        cfg, vocab, params = small_setup()
        ids = vocab.encode(LABEL.prompt())
        f_text = encode_text(ids, params, cfg)
        expected = params["tok_emb"][ids[-1]] + params["pos_emb"][len(ids) - 1]
        np.testing.assert_array_equal(f_text[-1], expected)

    def test_unknown_token(self):
        _, vocab, _ = small_setup()
        with pytest.raises(UnknownToken):
            vocab.encode("shiny new words")


class TestProjectEmbeddings:
    def test_zero_input_zero_bias(self):
        cfg, _, params = small_setup()
        e_mask, e_cls = project_embeddings(np.zeros((4, 16)), params, cfg)
        np.testing.assert_array_equal(e_mask, 0.0)
        np.testing.assert_array_equal(e_cls, 0.0)

    def test_single_row(self):
        cfg, _, params = small_setup()
        e_mask, e_cls = project_embeddings(np.ones((1, 16)), params, cfg)
        assert e_mask.shape == (1, 16)
        assert e_cls.shape == (1, 16)

    def test_matches_oracle_mlp(self):
        cfg, _, params = small_setup()
        q = np.random.default_rng(3).normal(size=(4, 16))
        e_mask, e_cls = project_embeddings(q, params, cfg)
        h1 = np.maximum(q @ params["maskproj_w1"] + params["maskproj_b1"], 0)
        h2 = np.maximum(h1 @ params["maskproj_w2"] + params["maskproj_b2"], 0)
        np.testing.assert_allclose(
            e_mask, h2 @ params["maskproj_w3"] + params["maskproj_b3"], atol=1e-10
        )
        np.testing.assert_allclose(
            e_cls, q @ params["clsproj_w"] + params["clsproj_b"], atol=1e-10
        )


class TestDecodeCandidates:
    def test_unit_embedding_selects_channel(self):
        pixel_map = np.random.default_rng(4).normal(size=(4, 4, 8))
        e = np.zeros((1, 8))
        e[0, 3] = 1.0
        logits = decode_candidate_masks(e, pixel_map)
        np.testing.assert_array_equal(logits[0], pixel_map[:, :, 3])

    def test_zero_embedding_gives_half_probability(self):
        pixel_map = np.random.default_rng(5).normal(size=(4, 4, 8))
        logits = decode_candidate_masks(np.zeros((2, 8)), pixel_map)
        np.testing.assert_array_equal(logits, 0.0)
        np.testing.assert_allclose(1 / (1 + np.exp(-logits)), 0.5)

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(6)
        pixel_map = rng.normal(size=(3, 5, 8))
        e_mask = rng.normal(size=(4, 8))
        logits = decode_candidate_masks(e_mask, pixel_map)
        for n in range(4):
            for y in range(3):
                for x in range(5):
                    assert logits[n, y, x] == pytest.approx(
                        float(e_mask[n] @ pixel_map[y, x]), abs=1e-12
                    )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            decode_candidate_masks(np.zeros((2, 8)), np.zeros((4, 4, 6)))


class TestSelectMask:
    def test_parallel_beats_orthogonal(self):
        text = np.array([1.0, 0.0, 0.0])
        e_cls = np.array([[0.0, 1.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert select_mask(e_cls, text) == 1

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        e_cls = rng.normal(size=(5, 4))
        text = rng.normal(size=4)
        assert select_mask(e_cls, text) == select_mask(e_cls, 3.0 * text)
        assert select_mask(e_cls, text) == select_mask(e_cls * 2.5, text)

    def test_derived_two_candidates(self):
        e_cls = np.array([[1.0, 0.0], [0.6, 0.8]])
        text = np.array([0.0, 1.0])
        # cosines: 0 and 0.8
        assert select_mask(e_cls, text) == 1

    def test_tie_breaks_low_index(self):
        e_cls = np.array([[1.0, 0.0], [2.0, 0.0]])  # both cosine 1
        assert select_mask(e_cls, np.array([1.0, 0.0])) == 0

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            select_mask(np.zeros((2, 3)), np.ones(3))
        with pytest.raises(ZeroVector):
            select_mask(np.ones((2, 3)), np.zeros(3))


class TestSegmentationLoss:
    def _cfg(self, **kw):
        return ModelConfig(d=8, n_queries=4, heads=2, patch=8, **kw)

    def test_saturated_perfect_prediction(self):
        cfg = self._cfg()
        y = np.zeros((16, 16))
        y[4:12, 4:12] = 1.0
        logits = np.where(y > 0, 30.0, -30.0)
        assert segmentation_loss(y, logits, cfg) < 1e-3

    def test_empty_vs_empty_with_eps(self):
        cfg = self._cfg(eps=1.0)
        y = np.zeros((8, 8))
        logits = np.full((8, 8), -40.0)
        # BCE ~ 0 and the eps-smoothed overlap term is exactly eps/eps
        assert segmentation_loss(y, logits, cfg) < 1e-6

    def test_uniform_half_prediction(self):
        cfg = self._cfg(eps=1.0)
        y = np.zeros((32, 32))
        y[:16, :] = 1.0  # half foreground, area 512
        logits = np.zeros((32, 32))  # p = 0.5 everywhere
        bce_only = segmentation_loss(y, logits, self._cfg(lambda_dice=0.0))
        assert bce_only == pytest.approx(math.log(2), abs=1e-12)
        dice_only = segmentation_loss(y, logits, self._cfg(lambda_bce=0.0))
        a = 512.0
        assert dice_only == pytest.approx(1 - (a + 1.0) / (2 * a + 1.0), abs=1e-12)
        assert dice_only == pytest.approx(0.5, abs=1e-3)

    def test_non_negative_random(self):
        cfg = self._cfg()
        rng = np.random.default_rng(8)
        for _ in range(50):
            y = (rng.random((8, 8)) < 0.5).astype(float)
            logits = rng.normal(scale=3.0, size=(8, 8))
            assert segmentation_loss(y, logits, cfg) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            segmentation_loss(np.zeros((4, 4)), np.zeros((5, 5)), self._cfg())


class TestForward:
    def test_bitwise_deterministic(self):
        cfg, vocab, params = small_setup(seed=9)
        rng = np.random.default_rng(10)
        img = rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)
        ids = vocab.encode(LABEL.prompt())
        r1 = forward(img, ids, params, cfg)
        r2 = forward(img, ids, params, cfg)
        np.testing.assert_array_equal(r1.probabilities, r2.probabilities)
        np.testing.assert_array_equal(r1.candidates, r2.candidates)
        assert r1.selected == r2.selected

    def test_probabilities_open_interval_and_shapes(self):
        cfg, vocab, params = small_setup(seed=11)
        img = np.random.default_rng(12).integers(0, 255, (32, 32, 3), dtype=np.uint8)
        res = forward(img, vocab.encode(LABEL.prompt()), params, cfg)
        assert res.probabilities.shape == (32, 32)
        assert res.candidates.shape == (4, 4, 4)
        assert np.all(res.probabilities > 0.0)
        assert np.all(res.probabilities < 1.0)
        assert 0 <= res.selected < 4


class TestGradientCheck:
    def _data(self, seed=11):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)
        mask = (rng.random((32, 32)) < 0.4).astype(np.uint8)
        return img, mask

    def test_identity_activation_tight(self):
        # smooth configuration: every layer analytic, step-1e-4 FD agrees
        # to ~1e-5; step 1e-5 tightens to ~1e-7 (float roundoff territory)
        cfg = ModelConfig(d=8, n_queries=4, heads=2, patch=8, seed=3, activation="identity")
        vocab = Vocabulary.from_labels([LABEL])
        params = init_params(cfg, len(vocab))
        img, mask = self._data()
        ids = vocab.encode(LABEL.prompt())
        report = gradient_check(params, img, ids, mask, cfg, tolerance=1e-4, step=1e-5)
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_unused_parameter_rows_have_zero_gradient(self):
        extra = parse_label("colon-tissue-gland")
        cfg, vocab, params = small_setup(d=8, vocab_labels=[LABEL, extra])
        img, mask = self._data()
        ids = vocab.encode(LABEL.prompt())
        _, grads = loss_and_grads(img, ids, mask, params, cfg)
        used = set(ids)
        for row in range(len(vocab)):
            if row not in used:
                np.testing.assert_array_equal(grads["tok_emb"][row], 0.0)
        # positions beyond the prompt length are untouched
        np.testing.assert_array_equal(grads["pos_emb"][len(ids):], 0.0)

    def test_relu_subset_quick(self):
        cfg = ModelConfig(d=8, n_queries=4, heads=2, patch=8, seed=3)
        vocab = Vocabulary.from_labels([LABEL])
        params = init_params(cfg, len(vocab))
        prng = np.random.default_rng(54)
        for k in sorted(params):  # generic point, away from ReLU kinks
            params[k] = params[k] + prng.uniform(-0.2, 0.2, size=params[k].shape)
        img, mask = self._data()
        ids = vocab.encode(LABEL.prompt())
        report = gradient_check(
            params, img, ids, mask, cfg, tolerance=1e-4,
            tensors=["queries", "cross_wq", "self_wo", "ffn_w1", "maskproj_w2", "clsproj_w", "pos_emb"],
        )
        assert report.passed, report.per_tensor


def test_forward_composes_the_named_operations():
    """forward() equals the explicit op-by-op composition."""
    from pathsegkit.model import cross_attention, feed_forward, self_attention
    from pathsegkit.model.layers import upsample_bilinear
    from pathsegkit.model.network import _sigmoid, cosine_similarities

    cfg, vocab, params = small_setup(seed=21)
    img = np.random.default_rng(22).integers(0, 255, (32, 32, 3), dtype=np.uint8)
    ids = vocab.encode(LABEL.prompt())

    tokens, pixel_map = encode_image(img, params, cfg)
    f_text = encode_text(ids, params, cfg)
    q_img = cross_attention(params["queries"], tokens, params)
    f_joint = self_attention(q_img, f_text, params)
    q_sem = feed_forward(f_joint, params, cfg)[: cfg.n_queries]
    e_mask, e_cls = project_embeddings(q_sem, params, cfg)
    candidates = decode_candidate_masks(e_mask, pixel_map)
    j = select_mask(e_cls, f_text[-1])
    probs = _sigmoid(upsample_bilinear(candidates[j], (32, 32)))

    res = forward(img, ids, params, cfg)
    assert res.selected == j
    np.testing.assert_array_equal(res.candidates, candidates)
    np.testing.assert_array_equal(res.probabilities, probs)
    np.testing.assert_allclose(res.cosines, cosine_similarities(e_cls, f_text[-1]))


def test_checkpoint_roundtrip(tmp_path):
    cfg, vocab, params = small_setup(seed=13)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params, cfg, vocab)
    params2, cfg2, vocab2 = load_checkpoint(path)
    assert cfg2.to_dict() == cfg.to_dict()
    assert vocab2.tokens == vocab.tokens
    assert set(params2) == set(params)
    for k in params:
        np.testing.assert_array_equal(params2[k], params[k])

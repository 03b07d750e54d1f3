import numpy as np
import pytest

from useg.autograd import ParameterStore, Tensor, backward, constant, ops
from useg.backbone import ModelConfig, encode, init_backbone_params, init_vss_params, patch_embed, vss_block
from useg.errors import InvalidConfig, MissingText, ShapeMismatch
from useg.losses import dice_ce_loss
from useg.model import SegmentationModel
from useg.text import Vocabulary

CAPTIONS = ["small hypoattenuating nodule in the upper left", "large enhancing mass in the center"]


def tiny(**kw):
    base = dict(image_size=32, widths=(4, 8, 12, 16, 20), blocks=(1, 1, 1, 1), state_dim=2, text_dim=6,
                text_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(CAPTIONS)


@pytest.fixture(scope="module")
def default_backbone():
    cfg = ModelConfig(fusion="none")
    store = ParameterStore(np.float64)
    init_backbone_params(store, cfg, np.random.default_rng(0))
    return cfg, store


def test_stem_shape_and_zero_image(default_backbone):
    cfg, store = default_backbone
    enc = store.scope("enc")
    assert patch_embed(constant(np.random.default_rng(1).random((2, 1, 64, 64))), enc).shape == (2, 16, 32, 32)
    # conv of a zero image with zero bias is zero before normalisation
    raw = ops.conv2d(constant(np.zeros((1, 1, 64, 64))), enc["stem.w"], enc["stem.b"], stride=2, padding=1)
    np.testing.assert_array_equal(raw.data, 0.0)


def test_encoder_pyramid_shapes(default_backbone):
    cfg, store = default_backbone
    x = constant(np.random.default_rng(2).random((2, 1, 64, 64)))
    shapes = [p.shape for p in encode(x, store.scope(""), cfg)]
    assert shapes == [(2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8), (2, 128, 4, 4), (2, 256, 2, 2)]


def test_encoder_batch_independence_and_determinism():
    cfg = tiny(fusion="none")
    store = ParameterStore(np.float64)
    init_backbone_params(store, cfg, np.random.default_rng(3))
    x = np.random.default_rng(4).random((2, 1, 32, 32))
    both = encode(constant(x), store.scope(""), cfg)
    again = encode(constant(x), store.scope(""), cfg)
    for s in range(2):
        single = encode(constant(x[s : s + 1]), store.scope(""), cfg)
        for a, b in zip(both, single):
            np.testing.assert_allclose(a.data[s], b.data[0], rtol=0, atol=1e-12)
    for a, b in zip(both, again):
        np.testing.assert_array_equal(a.data, b.data)


def test_vss_block_identity_when_output_projections_are_zero():
    rng = np.random.default_rng(5)
    cfg = tiny(fusion="none")
    store = ParameterStore(np.float64)
    init_vss_params(store, "b", rng, 6, cfg)
    for name in ("out_proj.w", "out_proj.b", "mlp2.w", "mlp2.b"):
        store[f"b.{name}"].data[:] = 0.0
    x = rng.normal(size=(2, 6, 3, 5))
    np.testing.assert_array_equal(vss_block(constant(x), store.scope("b")).data, x)


@pytest.mark.parametrize("c,h,w", [(1, 1, 1), (3, 2, 5), (8, 4, 4)])
def test_vss_block_preserves_shape(c, h, w):
    rng = np.random.default_rng(c)
    store = ParameterStore(np.float64)
    init_vss_params(store, "b", rng, c, tiny(fusion="none"))
    assert vss_block(constant(rng.normal(size=(2, c, h, w))), store.scope("b")).shape == (2, c, h, w)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        ModelConfig(image_size=48, fusion="none")
    with pytest.raises(InvalidConfig):
        ModelConfig(widths=(16, 32, 64, 128), fusion="none")
    with pytest.raises(InvalidConfig):
        ModelConfig(fusion="stage_add", vocab_size=0)
    with pytest.raises(InvalidConfig):
        ModelConfig.from_dict({"fusion": "none", "depth": 3})
    cfg = tiny(fusion="none")
    assert ModelConfig.from_json(cfg.to_json()) == cfg


# --------------------------------------------------------------------------
# full model


def test_logit_shape_default_config(vocab):
    model = SegmentationModel(ModelConfig(vocab_size=len(vocab)), vocab)
    x = np.random.default_rng(6).random((1, 1, 64, 64))
    assert model.logits(x, CAPTIONS[:1]).shape == (1, 2, 64, 64)


@pytest.mark.parametrize("mode", ["stage_add", "tail"])
def test_zero_fusion_matches_image_only(vocab, mode):
    fused = SegmentationModel(tiny(fusion=mode, vocab_size=len(vocab)), vocab)
    plain = SegmentationModel(tiny(fusion="none"))
    x = np.random.default_rng(7).random((2, 1, 32, 32))
    np.testing.assert_array_equal(fused.logits(x, CAPTIONS).data, plain.logits(x).data)


def test_models_differing_only_in_fusion_share_backbone_weights(vocab):
    fused = SegmentationModel(tiny(fusion="stage_gate", vocab_size=len(vocab)), vocab)
    plain = SegmentationModel(tiny(fusion="none"))
    for name in plain.store.names():
        np.testing.assert_array_equal(fused.store[name].data, plain.store[name].data)


def test_text_embedding_receives_gradient(vocab):
    model = SegmentationModel(tiny(fusion="stage_add", vocab_size=len(vocab)), vocab, dtype=np.float64)
    rng = np.random.default_rng(8)
    for name, p in model.store.items():
        if name.startswith("fusion"):
            p.data = rng.normal(size=p.shape) * 0.1
    t = Tensor(model.embed_text(CAPTIONS).data, requires_grad=True)
    x = rng.random((2, 1, 32, 32))
    target = (rng.random((2, 32, 32)) < 0.3).astype(np.uint8)
    backward(dice_ce_loss(model.logits(x, text=t), target))
    assert np.abs(t.grad).min() > 0


def test_missing_captions_rejected(vocab):
    model = SegmentationModel(tiny(fusion="stage_add", vocab_size=len(vocab)), vocab)
    with pytest.raises(MissingText):
        model.logits(np.zeros((1, 1, 32, 32)))
    with pytest.raises(ShapeMismatch):
        SegmentationModel(tiny(fusion="none")).logits(np.zeros((1, 1, 64, 64)))


def test_zero_weights_segment_to_background():
    model = SegmentationModel(tiny(fusion="none"))
    for _, p in model.store.items():
        p.data[:] = 0.0
    prob, mask = model.segment(np.random.default_rng(9).random((2, 1, 32, 32)))
    np.testing.assert_array_equal(prob, 0.5)
    assert not mask.any()


def test_segment_ranges_and_determinism(vocab):
    model = SegmentationModel(tiny(fusion="stage_add", vocab_size=len(vocab)), vocab)
    x = np.random.default_rng(10).random((2, 1, 32, 32))
    prob, mask = model.segment(x, CAPTIONS)
    prob2, mask2 = model.segment(x, CAPTIONS)
    assert set(np.unique(mask)) <= {0, 1}
    assert prob.min() >= 0 and prob.max() <= 1
    np.testing.assert_array_equal(prob, prob2)
    np.testing.assert_array_equal(mask, mask2)


def test_save_load_round_trip(vocab, tmp_path):
    model = SegmentationModel(tiny(fusion="stage_add", vocab_size=len(vocab), seed=3), vocab)
    model.save(tmp_path / "ck", {"note": 1})
    loaded, meta = SegmentationModel.load(tmp_path / "ck")
    assert meta["note"] == 1 and loaded.config == model.config and loaded.vocab == vocab
    x = np.random.default_rng(11).random((1, 1, 32, 32))
    np.testing.assert_array_equal(loaded.logits(x, CAPTIONS[:1]).data, model.logits(x, CAPTIONS[:1]).data)

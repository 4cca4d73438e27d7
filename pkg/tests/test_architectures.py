import dataclasses

import numpy as np
import pytest

from seesawface import serialization
from seesawface import tensor as T
from seesawface.architectures import (
    MODELS,
    SpecError,
    build_model,
    format_spec,
    forward_embed,
    get_spec,
    parse_spec,
    propagate_shapes,
    scale_spec,
    table_rows,
    with_block_options,
)

# Input column of each architecture table, written as H x W x C like the tables.
NARROW_INPUTS = [(112, 112, 3), (56, 56, 64), (56, 56, 64), (28, 28, 64), (28, 28, 64),
                 (14, 14, 128), (14, 14, 128), (7, 7, 128), (7, 7, 128), (7, 7, 512), (1, 1, 512)]
WIDE_INPUTS = [(112, 112, 3), (56, 56, 96), (56, 56, 96), (28, 28, 96), (28, 28, 96),
                 (14, 14, 192), (14, 14, 192), (7, 7, 192), (7, 7, 192), (7, 7, 512), (1, 1, 512)]
CHAINS = {
    "seesawfacenet-shuffle": NARROW_INPUTS,
    "seesawfacenet-share": NARROW_INPUTS,
    "seesawfacenet-mobi": NARROW_INPUTS,
    "mobilefacenet": NARROW_INPUTS,
    "dw-seesawfacenet-v1": WIDE_INPUTS,
    "dw-seesawfacenet-v2": WIDE_INPUTS,
}


def input_chain(spec):
    return [(h, w, c) for c, h, w in (r.in_shape for r in table_rows(spec))]


def block_repeats(spec):
    return [l.repeat for l in spec.layers if l.kind == "block"]


@pytest.mark.parametrize("name", sorted(CHAINS))
def test_input_column(name):
    assert input_chain(get_spec(name)) == CHAINS[name]


@pytest.mark.parametrize("name", sorted(MODELS))
def test_final_output_is_embedding(name):
    rows = propagate_shapes(get_spec(name))
    assert rows[-1].out_shape == (512, 1, 1)
    assert [r.name for r in rows][:2] == ["stem", "stem_dw"]


def test_base_block_counts():
    spec = get_spec("seesawfacenet-shuffle")
    assert block_repeats(spec) == [1, 4, 1, 6, 1, 2]
    assert sum(block_repeats(spec)) == 15
    widths = [(l.block.in_channels, l.block.expansion_channels, l.block.out_channels, l.stride)
              for l in spec.layers if l.block]
    assert widths == [(64, 128, 64, 2), (64, 128, 64, 1), (64, 256, 128, 2),
                      (128, 256, 128, 1), (128, 512, 128, 2), (128, 256, 128, 1)]


def test_mobi_rblock_counts():
    spec = get_spec("seesawfacenet-mobi")
    assert [l.repeat for l in spec.layers if l.block and l.block.residual] == [2, 3, 6]
    last = [l for l in spec.layers if l.block][-1].block
    assert (last.expansion_channels, last.out_channels) == (256, 128)


def test_dw_repeats_and_skips():
    v1, v2 = get_spec("dw-seesawfacenet-v1"), get_spec("dw-seesawfacenet-v2")
    assert [l.repeat for l in v1.layers if l.block and l.block.residual] == [8, 12, 4]
    assert sum(l.block.skip_branch for l in v2.layers if l.block) == 3
    assert not any(l.block.skip_branch for l in v1.layers if l.block)
    assert all(l.block.variant == "seesaw_shuffle" for l in v1.layers if l.block)


def test_baseline_uses_prelu_without_se():
    spec = get_spec("mobilefacenet")
    blocks = [l.block for l in spec.layers if l.block]
    assert all(b.variant == "inverted_residual" and not b.use_se and b.activation == "prelu"
               for b in blocks)


def test_seesaw_blocks_use_se_and_swish():
    blocks = [l.block for l in get_spec("seesawfacenet-share").layers if l.block]
    assert all(b.use_se and b.activation == "swish" and b.variant == "seesaw_share" for b in blocks)


def test_unknown_model_lists_names():
    with pytest.raises(KeyError, match="dw-seesawfacenet-v2"):
        get_spec("resnet50")


def test_broken_chain_names_transition():
    spec = get_spec("seesawfacenet-shuffle")
    layers = list(spec.layers)
    b = layers[3].block
    layers[3] = dataclasses.replace(layers[3], block=dataclasses.replace(b, in_channels=32, out_channels=32))
    with pytest.raises(SpecError, match="layer 3"):
        build_model(dataclasses.replace(spec, layers=tuple(layers)))


@pytest.mark.parametrize("name", sorted(MODELS))
def test_text_round_trip(name):
    spec = get_spec(name)
    text = format_spec(spec)
    again = parse_spec(text)
    assert again == spec
    assert format_spec(again) == text


def test_text_round_trip_with_options():
    spec = with_block_options(get_spec("seesawfacenet-share"), split_ratio=0.375, use_se=False)
    assert parse_spec(format_spec(spec)) == spec


def test_parse_error_has_line():
    with pytest.raises(SpecError, match="line 2"):
        parse_spec("model x\nblock 64 nope 1 seesaw_shuffle 1\n")


@pytest.fixture(scope="module")
def shuffle_model():
    return build_model(get_spec("seesawfacenet-shuffle"), seed=7)


class TestBuiltModels:
    def test_forward_shape(self, shuffle_model):
        out = forward_embed(shuffle_model, np.zeros((1, 3, 112, 112), np.float32))
        assert out.shape == (1, 512)
        assert np.isfinite(out).all()

    def test_seed_determinism(self, shuffle_model):
        again = build_model(get_spec("seesawfacenet-shuffle"), seed=7)
        assert serialization.dumps(again.state_dict()) == serialization.dumps(shuffle_model.state_dict())
        other = build_model(get_spec("seesawfacenet-shuffle"), seed=8)
        assert serialization.dumps(other.state_dict()) != serialization.dumps(shuffle_model.state_dict())

    def test_batch_independence_and_repeatability(self, shuffle_model, rng):
        x = rng.uniform(-1, 1, (3, 3, 112, 112)).astype(np.float32)
        full = forward_embed(shuffle_model, x)
        perm = [2, 0, 1]
        np.testing.assert_array_equal(forward_embed(shuffle_model, x[perm]), full[perm])
        np.testing.assert_allclose(forward_embed(shuffle_model, x[1:2])[0], full[1], rtol=1e-5, atol=1e-6)
        np.testing.assert_array_equal(forward_embed(shuffle_model, x), full)

    def test_wrong_input_shape(self, shuffle_model):
        with pytest.raises(T.ShapeError, match="input"):
            forward_embed(shuffle_model, np.zeros((1, 3, 96, 96), np.float32))

    def test_bad_mode(self, shuffle_model):
        with pytest.raises(ValueError):
            forward_embed(shuffle_model, np.zeros((1, 3, 112, 112), np.float32), "eval")

    def test_init_scheme(self, shuffle_model):
        sd = shuffle_model.state_dict()
        assert (sd["stem.bn.gamma"] == 1).all() and (sd["stem.bn.beta"] == 0).all()
        w = sd["stem.conv.weight"]
        assert abs(w.std() - np.sqrt(2 / 27)) < 0.05 * np.sqrt(2 / 27)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_zero_and_unit_inputs_finite(name):
    model = build_model(get_spec(name), seed=0)
    x = np.stack([np.zeros((3, 112, 112)), np.ones((3, 112, 112))]).astype(np.float32)
    assert np.isfinite(forward_embed(model, x)).all()


def test_v2_with_zero_skip_equals_v1_bitwise(rng):
    v2 = build_model(get_spec("dw-seesawfacenet-v2"), seed=3)
    v1 = build_model(get_spec("dw-seesawfacenet-v1"), seed=99)
    sd2 = v2.state_dict()
    for name, arr in sd2.items():
        if ".skip." in name:
            arr[...] = 0
    v1.load_state_dict({k: v for k, v in sd2.items() if ".skip." not in k})
    x = rng.uniform(-1, 1, (2, 3, 112, 112)).astype(np.float32)
    np.testing.assert_array_equal(forward_embed(v2, x), forward_embed(v1, x))


def test_scale_spec_for_toy_model():
    spec = scale_spec(get_spec("seesawfacenet-shuffle"), 0.25, 28)
    assert spec.layers[0].out_channels == 16
    assert input_chain(spec)[-1] == (1, 1, 128)
    out = forward_embed(build_model(spec), np.zeros((2, 3, 28, 28), np.float32), "train")
    assert out.shape == (2, 512)

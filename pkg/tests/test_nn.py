import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resmoco import tensor as T
from resmoco.nn import (
    EncoderSpec,
    SpecMismatchError,
    backbone,
    batchnorm,
    build_encoder,
    clone_encoder,
    copy_parameters,
    encode,
)
from resmoco.tensor import Tensor

SMALL = EncoderSpec("smallconv", (4, 8), 16, 8, 16, True, (3, 8, 8))
MLP = EncoderSpec("mlp", (48, 64), 32, 16, 32, True, (3, 4, 4))


def param_bytes(enc):
    return b"".join(a.tobytes() for _, a in enc.state_items())


def test_same_seed_same_bytes():
    assert param_bytes(build_encoder(SMALL, 7)) == param_bytes(build_encoder(SMALL, 7))
    assert param_bytes(build_encoder(SMALL, 7)) != param_bytes(build_encoder(SMALL, 8))


def test_mlp_forward_shape(rng):
    enc = build_encoder(MLP, 0)
    h, z, p = encode(enc, rng.standard_normal((5, 3, 4, 4)), "train")
    assert h.shape == (5, 64) and z.shape == (5, 16) and p.shape == (5, 16)


def test_smallconv_pooled_feature(rng):
    enc = build_encoder(SMALL, 0)
    h = backbone(enc, Tensor(rng.standard_normal((3, 3, 8, 8))), "train")
    assert h.shape == (3, SMALL.feature_dim)


def test_default_head_dims(rng):
    spec = EncoderSpec("mlp", (8,), 32, 256, 32, True, (3, 2, 2))
    h, z, p = encode(build_encoder(spec, 0), rng.standard_normal((4, 3, 2, 2)))
    assert z.shape == (4, 256) and p.shape == (4, 256)


def test_invalid_specs():
    with pytest.raises(ValueError):
        EncoderSpec(backbone_kind="resnet")
    with pytest.raises(ValueError):
        EncoderSpec(backbone_widths=(0,))
    with pytest.raises(ValueError):
        EncoderSpec(projector_out=1)


def test_registry_flags_and_uniqueness():
    enc = build_encoder(SMALL, 0)
    names = [p.name for p in enc.parameters()]
    assert len(names) == len(set(names))
    assert enc.num_parameters() == sum(p.value.size for p in enc.parameters())
    for p in enc.parameters():
        is_bias_or_norm = p.name.endswith(".bias") or ".bn" in p.name
        assert p.exclude_from_adaptation == is_bias_or_norm
        assert p.grad.shape == p.value.shape


def test_he_uniform_bounds():
    enc = build_encoder(SMALL, 3)
    for p in enc.parameters():
        if p.name.endswith("weight") and not p.exclude_from_adaptation:
            fan_in = int(np.prod(p.value.shape[1:])) if p.value.ndim == 4 else p.value.shape[0]
            assert np.abs(p.value.data).max() <= np.sqrt(6.0 / fan_in)
        elif p.name.endswith(".bias"):
            assert not p.value.data.any()


def test_batchnorm_constant_channel_gives_shift():
    enc = build_encoder(MLP, 0)
    enc.w("backbone.bn0.bias").data[:] = 0.5
    x = Tensor(np.full((4, 48), 3.0))
    out = batchnorm(enc, "backbone.bn0", x, "train")
    np.testing.assert_allclose(out.data, 0.5)


def test_batchnorm_eval_identity(rng):
    enc = build_encoder(MLP, 0)
    x = Tensor(rng.standard_normal((4, 48)).astype(np.float32))
    out = batchnorm(enc, "backbone.bn0", x, "eval")
    np.testing.assert_allclose(out.data, x.data / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batchnorm_train_moments(rng):
    enc = build_encoder(SMALL, 0)
    x = Tensor(rng.normal(3.0, 2.0, (6, 4, 5, 5)), dtype=np.float64)
    out = batchnorm(enc, "backbone.bn0", x, "train").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_running_stats_update(rng):
    enc = build_encoder(MLP, 0)
    x = rng.normal(2.0, 3.0, (8, 48))
    batchnorm(enc, "backbone.bn0", Tensor(x), "train")
    np.testing.assert_allclose(enc.buffers["backbone.bn0.running_mean"], 0.1 * x.mean(0), rtol=1e-5)
    np.testing.assert_allclose(enc.buffers["backbone.bn0.running_var"], 0.9 + 0.1 * x.var(0, ddof=1), rtol=1e-5)


def test_batchnorm_degenerate_batch():
    enc = build_encoder(MLP, 0)
    with pytest.raises(ValueError):
        batchnorm(enc, "backbone.bn0", Tensor(np.ones((1, 48))), "train")


def test_encode_eval_rows_identical(rng):
    enc = build_encoder(SMALL, 0)
    x = np.repeat(rng.standard_normal((1, 3, 8, 8)), 3, axis=0)
    h, z, p = encode(enc, x, "eval")
    assert (p.data == p.data[0]).all() and (h.data == h.data[0]).all()


def test_no_predictor_p_is_z(rng):
    spec = EncoderSpec("smallconv", (4,), 8, 4, 8, False, (3, 8, 8))
    _, z, p = encode(build_encoder(spec, 0), rng.standard_normal((2, 3, 8, 8)))
    assert p is z


def test_encode_shape_mismatch(rng):
    with pytest.raises(T.ShapeError):
        encode(build_encoder(SMALL, 0), rng.standard_normal((2, 3, 9, 9)))


def test_eval_forward_is_pure(rng):
    enc = build_encoder(SMALL, 0)
    before = enc.checksum()
    x = rng.standard_normal((3, 3, 8, 8))
    a = encode(enc, x, "eval")[2].data.tobytes()
    b = encode(enc, x, "eval")[2].data.tobytes()
    assert a == b and enc.checksum() == before


def test_copy_parameters_contract(rng):
    src, dst = build_encoder(SMALL, 1), build_encoder(SMALL, 2)
    encode(src, rng.standard_normal((4, 3, 8, 8)), "train")
    copy_parameters(src, dst)
    assert param_bytes(src) == param_bytes(dst)
    src.w("backbone.conv0.weight").data += 1.0
    assert param_bytes(src) != param_bytes(dst)
    np.testing.assert_array_equal(src.buffers["backbone.bn0.running_var"], dst.buffers["backbone.bn0.running_var"])
    assert all(p.value.grad is None for p in dst.parameters())


def test_copy_rejects_other_spec():
    with pytest.raises(SpecMismatchError):
        copy_parameters(build_encoder(SMALL, 0), build_encoder(MLP, 0))


def test_clone_is_independent():
    src = build_encoder(SMALL, 4)
    dst = clone_encoder(src)
    assert src.checksum() == dst.checksum()
    dst.w("projector.fc0.weight").data[...] = 0
    assert src.checksum() != dst.checksum()


@given(st.integers(0, 1000))
def test_bias_grads_match_param_shapes(seed):
    enc = build_encoder(MLP, seed)
    x = np.random.default_rng(seed).standard_normal((3, 3, 4, 4))
    _, _, p = encode(enc, x)
    T.backward((p * p).sum())
    for prm in enc.parameters():
        assert prm.grad.shape == prm.value.shape

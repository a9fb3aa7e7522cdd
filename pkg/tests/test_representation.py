import numpy as np
import pytest
from scipy.stats import halfnorm

from protofed import rng as rngs
from protofed.diffcore import DimensionError, GradientTape, Tensor, backward, tsum
from protofed.representation import (
    AugmentPolicy,
    Encoder,
    EncoderConfig,
    LayoutError,
    ParamVector,
    augment,
    augment_pair,
    encode,
    flatten,
    forward,
    load_params,
    pack,
    save_params,
    unflatten,
)

CFG = EncoderConfig(6, (8, 8), 4, 2)


def make_encoder(seed=0, cfg=CFG):
    return Encoder.init(cfg, rngs.stream(seed, "test-init"))


def test_zero_final_layer_outputs_bias():
    enc = make_encoder()
    last = f"fc{len(CFG.hidden_dims)}"
    enc.params[f"{last}.w"] = np.zeros_like(enc.params[f"{last}.w"])
    enc.params[f"{last}.b"] = np.array([0.5, -1.0, 2.0, 3.0])
    x = np.random.default_rng(0).standard_normal((5, 6))
    np.testing.assert_array_equal(enc(x), np.tile(enc.params[f"{last}.b"], (5, 1)))


def test_encode_is_deterministic_and_finite():
    enc = make_encoder()
    x = np.random.default_rng(1).standard_normal((3, 6)) * 100
    a, b = encode(enc, x).numpy(), encode(enc, x).numpy()
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(a).all() and a.shape == (3, 4)


def test_encode_single_vector_and_dimension_error():
    enc = make_encoder()
    assert enc(np.ones(6)).shape == (4,)
    with pytest.raises(DimensionError):
        enc(np.ones(5))


@pytest.mark.parametrize("name", ["fc0.w", "gn1.g", "fc2.b"])
def test_weight_perturbation_matches_gradient(name):
    enc = make_encoder(3)
    x = np.random.default_rng(2).standard_normal((4, 6))
    probe = np.random.default_rng(3).standard_normal((4, 4))
    with GradientTape() as tape:
        leaves = {k: tape.watch(Tensor(v)) for k, v in enc.params.items()}
        out = tsum(forward(CFG, leaves, x) * probe)
    g = backward(tape, out)[leaves[name]]
    idx = (0,) * enc.params[name].ndim
    eps = 1e-6

    def f(delta):
        p = dict(enc.params)
        p[name] = p[name].copy()
        p[name][idx] += delta
        return float(np.sum(forward(CFG, p, x).numpy() * probe))

    assert (f(eps) - f(-eps)) / (2 * eps) == pytest.approx(g[idx], rel=1e-5, abs=1e-9)


def test_flatten_round_trip_and_layout():
    enc = make_encoder()
    pv = flatten(enc)
    again = flatten(unflatten(pv, CFG))
    assert again.values.tobytes() == pv.values.tobytes()
    assert make_encoder(1).flatten().layout == pv.layout
    assert len(pv) == sum(int(np.prod(s)) for _, s in CFG.layout())


def test_unflatten_layout_mismatch():
    pv = make_encoder().flatten()
    with pytest.raises(LayoutError):
        unflatten(pv, EncoderConfig(6, (8,), 4, 2))
    with pytest.raises(LayoutError):
        ParamVector(np.zeros(3), (("a", (2,)),))


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(4, (6,), 4, 4)
    with pytest.raises(ValueError):
        EncoderConfig(0, (8,), 4, 2)


def test_checkpoint_round_trip(tmp_path):
    pv = make_encoder().flatten()
    save_params(tmp_path / "enc.params", pv, {"config_hash": "abc"})
    back, meta = load_params(tmp_path / "enc.params")
    assert back.values.tobytes() == pv.values.tobytes()
    assert back.layout == pv.layout and meta == {"config_hash": "abc"}
    raw = (tmp_path / "enc.params").read_bytes()
    # Values are little-endian float64 at the end of the file.
    assert raw[-8:] == np.float64(pv.values[-1]).astype("<f8").tobytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a params file")
    with pytest.raises(LayoutError):
        load_params(tmp_path / "junk")
    pv = pack({"a": np.arange(3.0)})
    save_params(tmp_path / "t.params", pv)
    (tmp_path / "t.params").write_bytes((tmp_path / "t.params").read_bytes()[:-8])
    with pytest.raises(LayoutError):
        load_params(tmp_path / "t.params")


def test_checksum_depends_on_values_and_layout():
    a = pack({"w": np.array([1.0, 2.0])})
    assert a.checksum() == pack({"w": np.array([1.0, 2.0])}).checksum()
    assert a.checksum() != pack({"w": np.array([1.0, 2.5])}).checksum()
    assert a.checksum() != pack({"v": np.array([1.0, 2.0])}).checksum()


# -- augmentation -----------------------------------------------------------

def test_identity_policy_returns_sample():
    x = np.arange(5.0)
    pair = augment_pair(x, AugmentPolicy("identity"), np.random.default_rng(0))
    np.testing.assert_array_equal(pair.x, x)
    np.testing.assert_array_equal(pair.x_hat, x)


def test_zero_noise_policy_returns_sample():
    x = np.arange(5.0)
    pair = augment_pair(x, AugmentPolicy("noise", sigma=0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(pair.x, x)
    np.testing.assert_array_equal(pair.x_hat, x)


def test_noise_deviation_matches_half_normal_mean():
    sigma = 0.1
    x = np.zeros(100)
    gen = np.random.default_rng(0)
    devs = [np.abs(augment(x, AugmentPolicy("noise", sigma=sigma), gen) - x).mean() for _ in range(1000)]
    expected = halfnorm(scale=sigma).mean()  # sigma * sqrt(2/pi)
    m = float(np.mean(devs))
    assert 0.06 <= m <= 0.10
    assert m == pytest.approx(expected, rel=0.01)


def test_views_differ_and_dropout_rate():
    gen = np.random.default_rng(1)
    x = np.ones((200, 50))
    pair = augment_pair(x, AugmentPolicy("noise_dropout", sigma=0.0, drop_rate=0.1), gen)
    assert not np.array_equal(pair.x, pair.x_hat)
    assert (pair.x == 0).mean() == pytest.approx(0.1, abs=0.01)


def test_image_policy_keeps_shape_and_range():
    gen = np.random.default_rng(0)
    x = gen.random((3, 64))
    out = augment(x, AugmentPolicy("image", image_shape=(8, 8)), gen)
    assert out.shape == x.shape and out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(DimensionError):
        augment(np.zeros((1, 10)), AugmentPolicy("image", image_shape=(8, 8)), gen)


def test_unknown_policy():
    with pytest.raises(ValueError):
        AugmentPolicy("cutmix")
    with pytest.raises(ValueError):
        AugmentPolicy("image")


def test_named_streams_are_reproducible():
    x = np.ones((4, 3))
    a = augment(x, AugmentPolicy(), rngs.stream(5, "augment", 2, 7))
    b = augment(x, AugmentPolicy(), rngs.stream(5, "augment", 2, 7))
    c = augment(x, AugmentPolicy(), rngs.stream(5, "augment", 3, 7))
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()

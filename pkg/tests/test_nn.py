import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advcritic import autodiff as ad
from advcritic import nn


def _small_mlp(seed=0, k=4):
    return nn.build_classifier(nn.ClassifierSpec("mlp", (3, 3), k, (5, 6)), seed)


def test_mlp_parameter_count():
    # 784*1200+1200 + 2*(1200*1200+1200) + 1200*10+10, counted by hand
    spec = nn.ClassifierSpec("mlp", (28, 28), 10, (1200, 1200, 1200))
    assert spec.tag() == "mlp;in=28,28;hidden=1200,1200,1200;k=10"
    model = nn.build_classifier(spec, 0)
    assert model.params.count() == 3_836_410
    two = nn.build_classifier(nn.ClassifierSpec("mlp", (28, 28), 10, (1200, 1200)), 0)
    assert two.params.count() == 2_395_210


def test_lenet_shapes_and_count():
    model = nn.build_classifier(nn.ClassifierSpec("lenet5", (28, 28), 10, ()), 0)
    # 6*25+6 + 16*150+16 + 256*120+120 + 120*84+84 + 84*10+10
    assert model.params.count() == 44_426
    x = np.random.default_rng(0).uniform(0, 1, (5, 28, 28))
    assert model.logits(x).shape == (5, 10)


def test_logits_shape_and_seed_determinism():
    spec = nn.ClassifierSpec("mlp", (28, 28), 10, (16,))
    a, b = nn.build_classifier(spec, 3), nn.build_classifier(spec, 3)
    for (na, pa), (nb, pb) in zip(a.params.items(), b.params.items()):
        assert na == nb and pa.value.tobytes() == pb.value.tobytes()
    x = np.zeros((5, 784))
    assert a.logits(x).shape == (5, 10)


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.ClassifierSpec("resnet", (28, 28), 10)
    with pytest.raises(ValueError):
        nn.ClassifierSpec("mlp", (28, 28), 1)
    spec = nn.ClassifierSpec("mlp", (4, 2), 3, (7,))
    assert nn.ClassifierSpec.from_tag(spec.tag()) == spec
    cspec = nn.CriticSpec((4, 2), 3, (5, 5))
    assert nn.CriticSpec.from_tag(cspec.tag()) == cspec


def test_critic_scores_and_noise():
    critic = nn.build_critic(nn.CriticSpec((28, 28), 10, (32, 32)), 1)
    x = np.random.default_rng(0).uniform(0, 1, (5, 28, 28))
    s = critic.scores(x).value
    assert s.shape == (5, 10) and np.all((s > 0) & (s < 1))
    assert critic.logits(x).value.tobytes() == critic.logits(x).value.tobytes()
    rng = np.random.default_rng(0)
    t1 = critic.logits(x, training=True, rng=rng).value
    t2 = critic.logits(x, training=True, rng=rng).value
    assert not np.array_equal(t1, t2)
    labels = np.array([0, 3, 9, 1, 1])
    np.testing.assert_array_equal(
        critic.head_logit(x, labels).value, critic.logits(x).value[np.arange(5), labels]
    )


def test_nll_examples():
    onehot = np.log(np.array([[1.0, 1e-300, 1e-300]]))
    assert nn.nll_loss(ad.constant(onehot), np.array([0])).item() == 0.0
    uniform = np.full((1, 10), -np.log(10))
    assert nn.nll_loss(ad.constant(uniform), np.array([4])).item() == pytest.approx(
        2.302585092994046, abs=1e-15
    )
    lp = np.log(np.array([[0.2, 0.8], [0.6, 0.4]]))
    a, b = -np.log(0.8), -np.log(0.6)
    assert nn.nll_loss(ad.constant(lp), np.array([1, 0])).item() == pytest.approx(
        (a + b) / 2, rel=1e-15
    )
    with pytest.raises(ValueError):
        nn.nll_loss(ad.constant(lp), np.array([1, 2]))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_softmax_head_properties(seed):
    z = np.random.default_rng(seed).uniform(-30, 30, (4, 10))
    p = ad.softmax(ad.constant(z), axis=1).value
    lp = ad.log_softmax(ad.constant(z), axis=1).value
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    mask = p > 1e-300
    np.testing.assert_allclose(lp[mask], np.log(p[mask]), rtol=0, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_relu_and_leaky_relu_exact(seed):
    x = np.random.default_rng(seed).normal(size=20) * 3
    np.testing.assert_array_equal(ad.relu(ad.constant(x)).value, np.maximum(x, 0))
    leaky = ad.leaky_relu(ad.constant(x), 0.2).value
    np.testing.assert_array_equal(leaky[x >= 0], x[x >= 0])
    np.testing.assert_array_equal(leaky[x < 0], 0.2 * x[x < 0])


def test_checkpoint_round_trip(tmp_path):
    model = _small_mlp(seed=5)
    path = tmp_path / "m.ckpt"
    nn.save_params(model.params, path)
    loaded = nn.load_params(path, expected_tag=model.params.tag)
    assert list(loaded) == list(model.params)
    assert loaded.seed == 5 and loaded.k == 4
    for name in model.params:
        assert loaded[name].value.tobytes() == model.params[name].value.tobytes()
    again = nn.load_model(path)
    np.testing.assert_array_equal(again.logits(np.ones((2, 9))).value,
                                  model.logits(np.ones((2, 9))).value)


def test_checkpoint_header_layout(tmp_path):
    model = _small_mlp()
    path = tmp_path / "m.ckpt"
    nn.save_params(model.params, path)
    raw = open(path, "rb").read()
    assert raw[:8] == b"ADVCKPT\x00"
    version, tag_len = struct.unpack("<IH", raw[8:14])
    assert version == 1
    assert raw[14 : 14 + tag_len].decode() == model.params.tag


def test_checkpoint_errors(tmp_path):
    lenet = nn.build_classifier(nn.ClassifierSpec("lenet5", (28, 28), 10, ()), 0)
    path = tmp_path / "lenet.ckpt"
    nn.save_params(lenet.params, path)
    mlp_tag = nn.ClassifierSpec("mlp", (28, 28), 10).tag()
    with pytest.raises(nn.ArchitectureMismatchError):
        nn.load_params(path, expected_tag=mlp_tag)
    raw = open(path, "rb").read()
    for cut in (5, 40, len(raw) // 2, len(raw) - 1):
        bad = tmp_path / f"cut{cut}.ckpt"
        bad.write_bytes(raw[:cut])
        with pytest.raises(nn.CorruptCheckpointError):
            nn.load_params(bad)
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(nn.CorruptCheckpointError):
        nn.load_params(tmp_path / "flip.ckpt")


def test_adam_first_step_is_lr_times_sign():
    params = nn.ParamSet("t", 2, None)
    params.add("w", np.array([1.0, -2.0, 0.5]))
    opt = nn.Adam(params, lr=0.01)
    opt.step({"w": np.array([3.0, -0.1, 0.0])})
    # bias-corrected first Adam step is lr * g / (|g| + eps')
    np.testing.assert_allclose(params["w"].value, [0.99, -1.99, 0.5], rtol=0, atol=1e-9)
    assert os.environ.get("NEVER_SET") is None

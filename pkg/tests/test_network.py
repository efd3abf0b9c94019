import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from estn import Tensor, no_grad, precision, reference
from estn.config import model_config_from_dict, model_config_to_text, parse_kv_text
from estn.network import (ConfigError, ModelConfig, build_model, conv_flops, count_params, estimate_flops,
                          flop_breakdown, forward)
from estn.serialize import CorruptWeightsError, WeightShapeError, load_weights, read_sections, save_weights

TINY = dict(channels=6, blocks=1, scale=2, bsgm_tile=8)


def test_build_deterministic_and_registry_complete():
    a, b = build_model(ModelConfig(**TINY), seed=3), build_model(ModelConfig(**TINY), seed=3)
    sa, sb = a.state_dict(), b.state_dict()
    assert list(sa) == list(sb)
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert len(set(sa)) == len(sa) and count_params(a) == sum(v.size for v in sa.values())
    c = build_model(ModelConfig(**TINY), seed=4).state_dict()
    assert any(sa[k].tobytes() != c[k].tobytes() for k in sa)


@pytest.mark.parametrize("bad", [dict(blocks=0), dict(channels=7), dict(scale=0), dict(lrcab_variant="x"),
                                 dict(mssa_windows=((8, 8), (4, 4), (16, 16))), dict(bsgm_tile=6)])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        build_model(ModelConfig(**bad))


@given(st.integers(2, 11), st.integers(2, 11), st.sampled_from([1, 2, 3]))
@settings(max_examples=10)
def test_forward_shape(h, w, a):
    m = build_model(ModelConfig(**{**TINY, "scale": a}), seed=0)
    with no_grad():
        assert forward(m, Tensor(np.random.default_rng(h).random((3, h, w)))).shape == (3, a * h, a * w)


def test_forward_rejects_bad_input():
    m = build_model(ModelConfig(**TINY))
    with pytest.raises(ValueError):
        forward(m, Tensor(np.zeros((1, 8, 8))))
    with pytest.raises(ValueError):
        forward(m, Tensor(np.zeros((3, 1, 8))))


def test_zero_input_zero_bias_gives_zero():
    m = build_model(ModelConfig(**TINY), seed=1)
    for name, p in m.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = np.zeros_like(p.data)
    with no_grad():
        assert not np.any(forward(m, Tensor(np.zeros((3, 8, 8)))).data)


@pytest.mark.parametrize("share", [True, False])
def test_forward_matches_loop_oracle(share):
    with precision(np.float64):
        m = build_model(ModelConfig(**TINY, share_scores=share), seed=11)
        for p in m.parameters():
            p.data = p.data.astype(np.float64)
        x = np.random.default_rng(2).random((3, 8, 8))
        got = forward(m, Tensor(x)).data
    np.testing.assert_allclose(got, reference.network(m, x), rtol=1e-10, atol=1e-12)


def test_forward_deterministic():
    m = build_model(ModelConfig(**TINY), seed=1)
    x = Tensor(np.random.default_rng(0).random((3, 9, 7)))
    with no_grad():
        assert forward(m, x).data.tobytes() == forward(m, x).data.tobytes()


# --- parameter and FLOP accounting ---------------------------------------------

@pytest.mark.parametrize("a,reported", [(2, 863_000), (3, 871_000), (4, 881_000)])
def test_param_count_near_table(a, reported):
    n = count_params(build_model(ModelConfig(scale=a)))
    assert abs(n / reported - 1) <= 0.10


def test_param_hand_counts():
    c = 60
    m2, m4 = build_model(ModelConfig(scale=2)), build_model(ModelConfig(scale=4))
    sfem = m2.sfem.weight.size + m2.sfem.bias.size
    assert sfem == 3 * 60 * 9 + 60 == 1680
    um = lambda a: c * 3 * a * a * 9 + 3 * a * a  # noqa: E731
    assert count_params(m4) - count_params(m2) == um(4) - um(2)


def test_flops_near_table_and_formula():
    assert abs(estimate_flops(ModelConfig(scale=4)) / 75.1e9 - 1) <= 0.25
    c = 60
    assert conv_flops(c, c, 1, pixels=1, convention="2mac") == 2 * c * c
    assert conv_flops(c, c, 1, pixels=1) == c * c
    assert conv_flops(c, 2 * c, 3, pixels=200) == 2 * conv_flops(c, 2 * c, 3, pixels=100)
    small = flop_breakdown(ModelConfig(scale=4), (640, 720))
    big = flop_breakdown(ModelConfig(scale=4), (1280, 720))
    assert big["sfem"] == 2 * small["sfem"] and big["um"] == 2 * small["um"]
    assert estimate_flops(ModelConfig(), convention="2mac") == 2 * estimate_flops(ModelConfig())


def test_flop_toggles_reduce_work():
    base = flop_breakdown(ModelConfig())
    assert flop_breakdown(ModelConfig(share_scores=False))["estm.sw_mssa"] > base["estm.sw_mssa"]
    assert flop_breakdown(ModelConfig(bsgm_enabled=False))["estm.bsgm"] == 0


# --- serialization ---------------------------------------------------------------

def test_weights_roundtrip(tmp_path):
    m = build_model(ModelConfig(**TINY), seed=5)
    save_weights(m, tmp_path / "w.estn")
    back = load_weights(tmp_path / "w.estn")
    assert back.cfg == m.cfg
    for (n1, t1), (n2, t2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()


def test_truncated_and_bad_magic(tmp_path):
    m = build_model(ModelConfig(**TINY), seed=5)
    p = tmp_path / "w.estn"
    save_weights(m, p)
    data = p.read_bytes()
    p.write_bytes(data[:-7])
    with pytest.raises(CorruptWeightsError):
        load_weights(p)
    p.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CorruptWeightsError):
        read_sections(p)
    p.write_bytes(data + b"x")
    with pytest.raises(CorruptWeightsError):
        read_sections(p)


def test_cross_config_names_tensor(tmp_path):
    save_weights(build_model(ModelConfig(**{**TINY, "channels": 12})), tmp_path / "w.estn")
    with pytest.raises(WeightShapeError, match="sfem.weight"):
        load_weights(tmp_path / "w.estn", ModelConfig(**TINY))


def test_config_text_roundtrip():
    cfg = ModelConfig(channels=12, blocks=2, scale=3, share_scores=False, mssa_windows=((2, 2), (4, 4), (8, 8)))
    assert model_config_from_dict(parse_kv_text(model_config_to_text(cfg))) == cfg
    with pytest.raises(ConfigError):
        model_config_from_dict({"chanels": "6"})
    with pytest.raises(ConfigError):
        parse_kv_text("channels 6")
    assert parse_kv_text("# c\nchannels = 6  # inline\n\n") == {"channels": "6"}


def test_non_finite_payload_names_tensor(tmp_path):
    m = build_model(ModelConfig(**TINY), seed=5)
    m.um.bias.data[0] = np.nan
    save_weights(m, tmp_path / "w.estn")
    with pytest.raises(CorruptWeightsError, match="um.bias"):
        load_weights(tmp_path / "w.estn")

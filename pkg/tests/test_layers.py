import numpy as np
import pytest

from mudeep.errors import ConfigError
from mudeep.layers import (ALPHA_INIT, ConvSpec, Dropout, ParamRegistry, default_pad, init_parameters,
                           make_cfilter_block, make_fc_block)
from mudeep.tensor import Parameter, Tensor


def block_params(stack):
    return sum(p.size for p in stack.parameters())


def test_cfilter_parameter_count():
    reg = ParamRegistry()
    blk = make_cfilter_block(ConvSpec(48, 3, 3, 3), reg, "b")
    # weights 48*3*3*3 + conv bias 48 + BN gamma/beta 2*48
    assert block_params(blk) == 1296 + 48 + 96 == 1440


def test_default_padding_rule():
    assert default_pad(3) == 1 and default_pad(1) == 0
    s = ConvSpec(8, 1, 3, 4)
    assert (s.pad_h, s.pad_w) == (0, 1)
    s = ConvSpec(8, 3, 1, 4)
    assert (s.pad_h, s.pad_w) == (1, 0)


def test_tie_key_shares_parameters_and_output():
    reg = ParamRegistry()
    spec = ConvSpec(4, 3, 3, 2)
    a = make_cfilter_block(spec, reg, "t")
    b = make_cfilter_block(spec, reg, "t")
    init_parameters(reg, 0)
    assert all(p is q for p, q in zip(a.parameters(), b.parameters()))
    x = Tensor(np.random.default_rng(0).normal(size=(2, 2, 5, 5)))
    assert np.array_equal(a(x).data, b(x).data)


def test_tie_key_with_different_spec_rejected():
    reg = ParamRegistry()
    make_cfilter_block(ConvSpec(4, 3, 3, 2), reg, "t")
    with pytest.raises(ConfigError):
        make_cfilter_block(ConvSpec(5, 3, 3, 2), reg, "t")


def test_init_is_deterministic_and_follows_kinds():
    def build(seed):
        reg = ParamRegistry()
        make_cfilter_block(ConvSpec(6, 3, 3, 2), reg, "c")
        make_fc_block(10, 4, reg, "f")
        reg.parameter("fusion.alpha", (4, 6), kind="alpha")
        init_parameters(reg, seed)
        return reg

    r1, r2, r3 = build(7), build(7), build(8)
    for n in r1.params:
        assert np.array_equal(r1[n].data, r2[n].data)
    assert not np.array_equal(r1["c.conv.weight"].data, r3["c.conv.weight"].data)
    assert np.all(r1["c.conv.bias"].data == 0)
    assert np.all(r1["c.bn.gamma"].data == 1) and np.all(r1["c.bn.beta"].data == 0)
    assert np.all(r1["fusion.alpha"].data == ALPHA_INIT)


def test_he_init_std():
    reg = ParamRegistry()
    reg.parameter("w", (32, 96, 3, 3), kind="weight", fan_in=9 * 96)
    init_parameters(reg, 0)
    std = reg["w"].data.std()
    target = np.sqrt(2 / 864)
    assert reg["w"].size >= 10_000
    assert abs(std - target) / target < 0.05


def test_partial_reinit_leaves_others():
    reg = ParamRegistry()
    make_fc_block(5, 3, reg, "f")
    init_parameters(reg, 0)
    keep = reg["f.fc.bias"].data.copy()
    reg["f.fc.weight"].data += 1
    init_parameters(reg, 0, names=["f.fc.weight"])
    reg2 = ParamRegistry()
    make_fc_block(5, 3, reg2, "f")
    init_parameters(reg2, 0)
    assert np.array_equal(reg["f.fc.weight"].data, reg2["f.fc.weight"].data)
    assert np.array_equal(reg["f.fc.bias"].data, keep)


def test_batchnorm_buffers_shared_and_updated():
    reg = ParamRegistry()
    spec = ConvSpec(3, 1, 1, 2)
    a = make_cfilter_block(spec, reg, "t")
    b = make_cfilter_block(spec, reg, "t")
    init_parameters(reg, 0)
    x = Tensor(np.random.default_rng(1).normal(2.0, 1.0, size=(4, 2, 3, 3)))
    a(x, training=True)
    rm = reg.buffers["t.bn.running_mean"]
    assert np.any(rm != 0)
    # eval outputs agree since both stacks read the same statistics
    assert np.array_equal(a(x).data, b(x).data)


def test_dropout_layer_eval_identity_and_bounds():
    d = Dropout(0.3, seed=0)
    x = Tensor(np.ones((2, 5)))
    assert d(x, training=False) is x
    with pytest.raises(ConfigError):
        Dropout(1.0)


def test_lazy_parameter_shape_without_data():
    p = Parameter("w", (4096, 139776))
    assert not p.materialized and p.size == 4096 * 139776

import gc

import numpy as np
import pytest

from ereformer.grvit import GRViT, RecurrentState, feature_map, grvit_params, linear_attention
from ereformer.nn import ParameterStore
from ereformer.tensor import Tensor


def _elu1(x):
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0)))


def _unit(dim=8, tokens=16, heads=2, mode="update_gate", seed=0, noise=0.3):
    store = ParameterStore(seed)
    unit = GRViT(store, "g", dim, tokens, heads, transfer=mode)
    r = np.random.default_rng(seed + 100)
    for p in store:
        p.data = p.data + noise * r.standard_normal(p.shape)
    return unit


def test_feature_map_is_elu_plus_one(f64, rng):
    x = rng.standard_normal(50) * 3
    np.testing.assert_allclose(feature_map(Tensor(x)).data, _elu1(x), rtol=1e-14, atol=1e-15)


def test_single_token_closed_form(f64, rng):
    c, m = 6, 2
    q, k, v = (rng.standard_normal((1, 1, c)) for _ in range(3))
    out = linear_attention(Tensor(q), Tensor(k), Tensor(v), m).data.reshape(m, c // m)
    for i, sl in enumerate((slice(0, 3), slice(3, 6))):
        scalar = float(_elu1(q[0, 0, sl]) @ _elu1(k[0, 0, sl]))
        np.testing.assert_allclose(out[i], scalar * v[0, 0, sl], rtol=1e-14)


def test_right_association_matches_naive(f64, rng):
    b, n, c, m = 2, 32, 8, 2
    q, k, v = (rng.standard_normal((b, n, c)) for _ in range(3))
    out = linear_attention(Tensor(q), Tensor(k), Tensor(v), m).data
    d = c // m
    for h in range(m):
        sl = slice(h * d, (h + 1) * d)
        naive = (_elu1(q[..., sl]) @ _elu1(k[..., sl]).transpose(0, 2, 1)) @ v[..., sl]
        assert np.abs(out[..., sl] - naive).max() <= 1e-10


def test_linear_attention_rejects_indivisible_heads():
    x = Tensor(np.zeros((1, 2, 6)))
    with pytest.raises(ValueError):
        linear_attention(x, x, x, 4)
    with pytest.raises(ValueError):
        GRViT(ParameterStore(0), "g", 6, 4, 4)


def test_zero_state_reduces_to_feature_projections(f64, rng):
    unit = _unit()
    f = Tensor(rng.standard_normal((1, 16, 8)))
    h = unit.norm_h(unit.zero_state(1).h)
    assert not h.data.any()
    q, k, v = unit.qkv(f, h)
    assert np.array_equal(q.data, (f.data @ unit.w_qf.data))
    assert np.array_equal(k.data, (f.data @ unit.w_kf.data))
    assert np.array_equal(v.data, (f.data @ unit.w_vf.data))


def _features(rng, b=1, side=4, c=8):
    return Tensor(rng.standard_normal((b, side, side, c)))


def _nonzero_state(unit, rng):
    _, state = unit.step(_features(rng), unit.zero_state(1))
    return state


def test_forced_gate_zero_keeps_state(f64, rng):
    unit = _unit()
    state = _nonzero_state(unit, rng)
    _, new = unit.step(_features(rng), state, gate=Tensor(np.zeros((1, 16, 8))))
    assert np.array_equal(new.h.data, state.h.data)


def test_forced_gate_one_takes_attended(f64, rng):
    unit = _unit()
    state = _nonzero_state(unit, rng)
    f = _features(rng)
    _, new = unit.step(f, state, gate=Tensor(np.ones((1, 16, 8))))
    fl = Tensor(f.data.reshape(1, 16, 8) + unit.pos.data)
    a = unit.attention_gate(unit.norm_f(fl), unit.norm_h(state.h))
    assert np.array_equal(new.h.data, a.data)


def test_half_gate_convex_combination(f64):
    unit = _unit()
    h = Tensor(np.zeros((1, 16, 8)))
    a = Tensor(np.full((1, 16, 8), 2.0))
    out = unit.transfer_state(h, a, Tensor(np.full((1, 16, 8), 0.5)))
    assert np.array_equal(out.data, np.ones((1, 16, 8)))


def test_transfer_rules(f64, rng):
    h = Tensor(rng.standard_normal((1, 4, 8)))
    a = Tensor(rng.standard_normal((1, 4, 8)))
    assert np.array_equal(_unit(tokens=4, mode="attended").transfer_state(h, a, None).data, a.data)
    assert np.array_equal(_unit(tokens=4, mode="residual").transfer_state(h, a, None).data, h.data + a.data)


def test_gate_convexity(f64, rng):
    unit = _unit()
    state = _nonzero_state(unit, rng)
    for _ in range(3):
        f = _features(rng)
        fl = Tensor(f.data.reshape(1, 16, 8) + unit.pos.data)
        a = unit.attention_gate(unit.norm_f(fl), unit.norm_h(state.h)).data
        _, new = unit.step(f, state)
        lo, hi = np.minimum(state.h.data, a), np.maximum(state.h.data, a)
        assert (new.h.data >= lo).all() and (new.h.data <= hi).all()
        state = new


def test_single_bin_sequence_equals_step(f64, rng):
    unit = _unit()
    f = _features(rng)
    (seq,) = unit.run_sequence([f])
    one, _ = unit.step(f, unit.zero_state(1))
    assert np.array_equal(seq.data, one.data)


def test_first_bin_identical_across_transfer_modes(f64, rng):
    f = _features(rng)
    outs = [_unit(mode=m).run_sequence([f])[0].data for m in ("update_gate", "attended", "residual")]
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_transfer_modes_diverge_after_first_bin(f64, rng):
    fs = [_features(rng) for _ in range(2)]
    a = _unit(mode="update_gate").run_sequence(fs)[1].data
    b = _unit(mode="residual").run_sequence(fs)[1].data
    assert not np.allclose(a, b)


def test_live_state_count_is_independent_of_length(rng):
    unit = _unit(noise=0.1)
    peaks = []
    for t in (2, 8, 32):
        gc.collect()
        probe = []
        unit.run_sequence([_features(rng) for _ in range(t)], probe=probe)
        peaks.append(max(probe))
    assert peaks[0] == peaks[1] == peaks[2]
    assert peaks[0] <= 2


def test_live_count_tracks_instances():
    gc.collect()
    base = RecurrentState.live_count()
    states = [RecurrentState.zeros(1, 2, 2) for _ in range(3)]
    assert RecurrentState.live_count() == base + 3
    del states
    gc.collect()
    assert RecurrentState.live_count() == base


def test_detach_cuts_history(f64, rng):
    unit = _unit()
    state = _nonzero_state(unit, rng)
    d = state.detach()
    assert np.array_equal(d.h.data, state.h.data)
    assert not d.h.requires_grad


def test_state_shape_mismatch(rng):
    unit = _unit()
    with pytest.raises(ValueError):
        unit.step(_features(rng, side=2), unit.zero_state(1))
    with pytest.raises(ValueError):
        unit.run_sequence([])


def test_long_sequence_stays_finite(rng):
    unit = GRViT(ParameterStore(0), "g", 16, 64, 2)
    outs = unit.run_sequence([Tensor(rng.standard_normal((2, 8, 8, 16))) for _ in range(40)])
    assert all(np.isfinite(o.data).all() for o in outs)


def test_parameter_count():
    store = ParameterStore(0)
    GRViT(store, "g", 8, 16, 2)
    assert store.num_parameters() == grvit_params(8, 16, 4)

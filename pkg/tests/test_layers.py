import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedca import numerics as nx
from pedca.layers import Linear, MultiHeadSelfAttention, TransformerEncoder, TransformerLayer
from pedca.numerics import Tensor, finite_difference_gradient, relative_error


def test_linear_shapes_and_zero_bias():
    layer = Linear(np.random.default_rng(0), 3, 5)
    assert layer.weight.shape == (3, 5)
    assert np.array_equal(layer.bias.data, np.zeros(5))
    assert layer(Tensor(np.ones((2, 4, 3)))).shape == (2, 4, 5)


def test_named_parameters_are_stable_and_unique():
    enc = TransformerEncoder(np.random.default_rng(0), 8, 2, 2)
    names = list(enc.named_parameters())
    assert len(names) == len(set(names))
    assert names == list(TransformerEncoder(np.random.default_rng(1), 8, 2, 2).named_parameters())
    assert "layers.1.attention.query.weight" in names


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(np.random.default_rng(0), 6, 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
def test_attention_rows_are_distributions(b, n, heads, seed):
    rng = np.random.default_rng(seed)
    attn = MultiHeadSelfAttention(rng, 8, heads)
    x = Tensor(rng.normal(size=(b, n, 8)))
    attn(x, x)
    w = attn.last_attention
    assert w.shape == (b, heads, n, n)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_masked_keys_receive_no_weight_and_do_not_change_output():
    rng = np.random.default_rng(0)
    enc = TransformerEncoder(rng, 8, 2, 2)
    x = rng.normal(size=(1, 5, 8))
    mask = np.array([[True, True, True, False, False]])
    base = enc(Tensor(x), key_mask=mask).data
    assert np.all(enc.layers[-1].attention.last_attention[..., 3:] < 1e-12)
    x[:, 3:] = rng.normal(size=(1, 2, 8)) * 10
    moved = enc(Tensor(x), key_mask=mask).data
    assert np.allclose(base[:, :3], moved[:, :3], atol=1e-12)
    # identical to dropping the padded rows altogether
    short = enc(Tensor(x[:, :3])).data
    assert np.allclose(base[:, :3], short, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 3), st.booleans(), st.integers(0, 2**31 - 1))
def test_readout_only_matches_full_row_zero(n_layers, norm_first, seed):
    rng = np.random.default_rng(seed)
    enc = TransformerEncoder(rng, 8, n_layers, 2, norm_first_input=norm_first)
    x = Tensor(rng.normal(size=(2, 4, 8)))
    full = enc(x).data
    readout = enc(x, readout_only=True).data
    assert readout.shape == (2, 1, 8)
    assert np.allclose(readout[:, 0], full[:, 0], atol=1e-12)


def test_encoder_is_permutation_equivariant():
    rng = np.random.default_rng(4)
    enc = TransformerEncoder(rng, 8, 2, 2)
    x = rng.normal(size=(1, 5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    out = enc(Tensor(x)).data
    out_perm = enc(Tensor(x[:, perm])).data
    assert np.allclose(out[:, perm], out_perm, atol=1e-12)


def test_without_input_norm_first_layer_sees_raw_scale():
    rng = np.random.default_rng(0)
    layer = TransformerLayer(rng, 8, 1, norm_input=False)
    assert layer.norm_attention is None
    assert "norm_attention.gain" not in layer.named_parameters()
    x = rng.normal(size=(1, 3, 8))
    a = layer(Tensor(x)).data
    b = layer(Tensor(3.0 * x)).data
    assert not np.allclose(b, 3.0 * a)


def test_zero_residual_layer_starts_as_identity():
    x = np.random.default_rng(1).normal(size=(2, 3, 8))
    layer = TransformerLayer(np.random.default_rng(0), 8, 2, zero_residual=True)
    assert np.allclose(layer(Tensor(x)).data, x, atol=1e-15)


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    enc = TransformerEncoder(rng, 4, 2, 2, ff_mult=2)
    x = rng.normal(size=(2, 3, 4))
    mask = np.array([[True, True, False], [True, True, True]])
    w = rng.normal(size=(2, 1, 4))
    params = enc.parameters()

    def loss():
        return (enc(Tensor(x), key_mask=mask, readout_only=True) * w).sum()

    loss().backward()
    analytic = [p.grad for p in params]

    def f():
        with nx.no_grad():
            return loss().item()

    numeric = finite_difference_gradient(f, params)
    assert max(relative_error(a, g) for a, g in zip(analytic, numeric)) <= 1e-4

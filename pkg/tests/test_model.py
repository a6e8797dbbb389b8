import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracle
from spectralformer import checkpoint, model as M, tensor as T
from spectralformer.errors import ConfigError, DataError, DimensionError, ParseError
from spectralformer.model import ModelConfig
from spectralformer.tensor import Tensor
from spectralformer.training import cross_entropy
from spectralformer.verify import perturbed_params


def random_params(cfg, seed=0):
    return perturbed_params(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kwargs", [dict(n=2), dict(n=9, m=8), dict(d=10, heads=4),
                                    dict(caf=True, blocks=2), dict(blocks=0),
                                    dict(input_mode="patch", patch_side=4)])
def test_config_rejects_invalid(kwargs):
    base = dict(m=8, classes=3, d=8, heads=2, blocks=3)
    with pytest.raises(ConfigError):
        ModelConfig(**{**base, **kwargs})


# ---------------------------------------------------------------- grouping / embedding


def test_group_bands_n1_is_identity():
    np.testing.assert_array_equal(M.group_bands(np.array([[1.0, 2.0, 3.0]]), 1), [[1, 2, 3]])


def test_group_bands_replicate_padding():
    out = M.group_bands(np.array([[1.0, 2, 3, 4, 5]]), 3)
    np.testing.assert_array_equal(out.T, [[1, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 5], [4, 5, 5]])


def test_group_bands_constant_spectrum():
    out = M.group_bands(np.full((4, 7), 2.5), 5)
    assert out.shape == (20, 7) and np.all(out == 2.5)


def test_group_bands_matches_loop_oracle_patchwise():
    x = np.random.default_rng(1).normal(size=(9, 10))
    np.testing.assert_array_equal(M.group_bands(x, 5), oracle.grouped(x, 5))


@pytest.mark.parametrize("n", [2, 7])
def test_group_bands_errors(n):
    with pytest.raises(ConfigError):
        M.group_bands(np.ones((1, 5)), n)


def test_gse_identity_projection():
    xg = np.random.default_rng(0).normal(size=(3, 6))
    np.testing.assert_array_equal(M.gse_embed(xg, np.eye(3)).data, xg)


def test_gse_n1_equals_bandwise_embedding():
    rng = np.random.default_rng(2)
    w, x = rng.normal(size=(8, 1)), rng.normal(size=10)
    gse = M.gse_embed(M.group_bands(x[None, :], 1), w).data
    bandwise = w[:, 0][:, None] * x[None, :]  # A = w x
    assert np.array_equal(gse, bandwise)


def test_gse_matches_triple_loop():
    rng = np.random.default_rng(3)
    w, x = rng.normal(size=(8, 3)), rng.normal(size=(1, 10))
    xg = M.group_bands(x, 3)
    expected = np.array([[sum(w[i, k] * xg[k, j] for k in range(3)) for j in range(10)]
                         for i in range(8)])
    np.testing.assert_allclose(M.gse_embed(xg, w).data, expected, atol=1e-12)


def test_gse_shape_mismatch():
    with pytest.raises(DimensionError):
        M.gse_embed(np.ones((3, 5)), np.ones((4, 2)))


def test_positional_zero_encoding():
    a = np.random.default_rng(0).normal(size=(4, 3))
    out = M.add_positional_and_cls(a, np.zeros((4, 4)), np.zeros(4)).data
    np.testing.assert_array_equal(out[1:], a.T)
    np.testing.assert_array_equal(out[0], 0)


def test_positional_scalar_case():
    out = M.add_positional_and_cls(np.ones((1, 2)), np.array([[0.0], [1.0], [2.0]]), np.array([5.0]))
    np.testing.assert_array_equal(out.data[:, 0], [5, 2, 3])


def test_positional_eval_twice_identical_and_dropout_in_training():
    a = np.random.default_rng(0).normal(size=(4, 6))
    pos, cls = np.zeros((7, 4)), np.ones(4)
    one = M.add_positional_and_cls(a, pos, cls, 0.5, training=False).data
    two = M.add_positional_and_cls(a, pos, cls, 0.5, training=False).data
    assert np.array_equal(one, two)
    dropped = M.add_positional_and_cls(a, pos, cls, 0.5, True, T.make_rng(0)).data
    assert np.any(dropped == 0)


def test_positional_row_count_error():
    with pytest.raises(ConfigError):
        M.add_positional_and_cls(np.ones((2, 3)), np.zeros((3, 2)), np.zeros(2))


# ---------------------------------------------------------------- attention


def test_attention_single_token():
    v = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_allclose(M.attention(np.ones((1, 3)), np.ones((1, 3)), v).data, v)


def test_attention_equal_keys_average_values():
    q = np.array([[0.3, 1.0], [-2.0, 0.5]])
    k = np.array([[1.0, 2.0], [1.0, 2.0]])
    v = np.array([[1.0, 3.0], [5.0, -1.0]])
    np.testing.assert_allclose(M.attention(q, k, v).data, [[3.0, 1.0], [3.0, 1.0]], atol=1e-12)


def test_attention_matches_six_step_oracle():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(4, 3)) for _ in range(3))
    np.testing.assert_allclose(M.attention(q, k, v).data, oracle.self_attention(q, k, v), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 7))
def test_attention_rows_are_convex_combinations(seed, s):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(s, 3)) * 3 for _ in range(3))
    out = M.attention(q, k, v).data
    assert np.all(out >= v.min(axis=0) - 1e-12) and np.all(out <= v.max(axis=0) + 1e-12)


def block_params(d, seed):
    rng = np.random.default_rng(seed)
    return {f"attn.{w}": rng.normal(size=(d, d)) / np.sqrt(d) for w in ("wq", "wk", "wv", "wo")}


def as_tensors(p):
    return {k: Tensor(v) for k, v in p.items()}


def test_multi_head_one_head_is_plain_attention():
    z = np.random.default_rng(0).normal(size=(5, 4))
    p = block_params(4, 1)
    expected = M.attention(z @ p["attn.wq"], z @ p["attn.wk"], z @ p["attn.wv"]).data @ p["attn.wo"]
    np.testing.assert_allclose(M.multi_head(z, as_tensors(p), 1).data, expected, atol=1e-12)


def test_multi_head_concatenates_heads():
    z = np.random.default_rng(0).normal(size=(5, 4))
    p = block_params(4, 2)
    p["attn.wo"] = np.eye(4)
    out = M.multi_head(z, as_tensors(p), 2).data
    q, k, v = z @ p["attn.wq"], z @ p["attn.wk"], z @ p["attn.wv"]
    x1 = M.attention(q[:, :2], k[:, :2], v[:, :2]).data
    x2 = M.attention(q[:, 2:], k[:, 2:], v[:, 2:]).data
    np.testing.assert_allclose(out, np.hstack([x1, x2]), atol=1e-12)


def test_multi_head_matches_per_head_oracle_batched():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 6, 8))
    p = block_params(8, 6)
    out = M.multi_head(z, as_tensors(p), 4).data
    for b in range(3):
        np.testing.assert_allclose(out[b], oracle.multi_head(z[b], p, 4), atol=1e-12)


# ---------------------------------------------------------------- block / CAF / unfold


def tiny(**kw):
    base = dict(m=6, classes=3, n=3, d=8, blocks=3, heads=2, dropout_p=0.0, caf=True)
    return ModelConfig(**{**base, **kw})


def test_encoder_block_zero_weights_passes_through():
    cfg = tiny()
    params = {k: np.zeros(v) for k, v in M.param_shapes(cfg).items()}
    bp = {k: Tensor(v) for k, v in M.block_params(params, 1).items()}
    bp["ln1.gamma"] = bp["ln2.gamma"] = Tensor(np.ones(8))
    z = np.random.default_rng(0).normal(size=(7, 8))
    np.testing.assert_array_equal(M.encoder_block(z, bp, cfg).data, z)


@pytest.mark.parametrize("s", [1, 2, 9])
def test_encoder_block_preserves_shape(s):
    cfg = tiny()
    p = {k: Tensor(v) for k, v in M.block_params(random_params(cfg), 2).items()}
    assert M.encoder_block(np.ones((s, 8)), p, cfg).shape == (s, 8)


def test_encoder_block_gradients():
    cfg = tiny(blocks=1, caf=False)
    params = M.block_params(random_params(cfg), 1)
    z = np.random.default_rng(9).normal(size=(7, 8))
    target = np.random.default_rng(10).normal(size=(7, 8))
    res = T.grad_check(lambda tape, p: T.sum_all(T.mul(M.encoder_block(z, p, cfg), Tensor(target))),
                       params)
    assert res.max_error < 1e-4


def test_caf_fuse_cases():
    a, b = np.full((2, 3), 2.0), np.full((2, 3), 4.0)
    np.testing.assert_array_equal(M.caf_fuse(a, b, np.array([1.0, 0.0])).data, a)
    np.testing.assert_array_equal(M.caf_fuse(a, b, np.array([0.0, 1.0])).data, b)
    np.testing.assert_array_equal(M.caf_fuse(a, b, np.array([0.5, 0.5])).data, np.full((2, 3), 3.0))
    with pytest.raises(DimensionError):
        M.caf_fuse(a, np.ones((3, 3)), np.array([1.0, 0.0]))


def test_unfold_pixel_degeneracy():
    x = np.arange(5.0)
    np.testing.assert_array_equal(M.unfold_patch(x.reshape(5, 1, 1)), x[None, :])


def test_unfold_row_major():
    patch = np.zeros((2, 2, 2))
    patch[0] = [[1, 2], [3, 4]]
    np.testing.assert_array_equal(M.unfold_patch(patch)[:, 0], [1, 2, 3, 4])


def test_unfold_seven_by_seven_patch_shape():
    assert M.unfold_patch(np.zeros((200, 7, 7))).shape == (49, 200)


# ---------------------------------------------------------------- forward


def test_indian_pines_pixel_logits_length():
    cfg = ModelConfig(m=200, classes=16, n=3, d=64)
    params = M.init_params(cfg, T.make_rng(0))
    assert M.forward(params, cfg, np.zeros(200, dtype=np.float32)).shape == (16,)


def test_forward_band_count_mismatch():
    cfg = tiny()
    with pytest.raises(DataError):
        M.forward(random_params(cfg), cfg, np.zeros(7))


@pytest.mark.parametrize("seed", range(3))
def test_caf_identity_weights_match_caf_off_exactly(seed):
    on = tiny(blocks=5)
    off = tiny(blocks=5, caf=False)
    params = M.init_params(on, T.make_rng(seed), np.float64)
    x = np.random.default_rng(seed).normal(size=(4, 6))
    plain = {k: v for k, v in params.items() if not k.startswith("caf.")}
    assert np.array_equal(M.forward(params, on, x).data, M.forward(plain, off, x).data)


@pytest.mark.parametrize("mode,caf", [("pixel", True), ("pixel", False), ("patch", True)])
def test_forward_matches_straight_line_oracle(mode, caf):
    cfg = tiny(input_mode=mode, patch_side=3, caf=caf)
    params = random_params(cfg, 3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6)) if mode == "pixel" else rng.normal(size=(3, 6, 3, 3))
    out = M.forward(params, cfg, x).data
    for i in range(3):
        np.testing.assert_allclose(out[i], oracle.logits(params, cfg, x[i]), atol=1e-10)


def test_forward_single_and_batched_agree():
    cfg = tiny()
    params = random_params(cfg)
    x = np.random.default_rng(0).normal(size=(2, 6))
    batched = M.forward(params, cfg, x).data
    np.testing.assert_allclose(M.forward(params, cfg, x[1]).data, batched[1], atol=1e-12)


@pytest.mark.parametrize("readout,pos", [("mean", "learned"), ("cls", "fixed")])
def test_readout_and_position_variants(readout, pos):
    cfg = tiny(readout=readout, pos=pos)
    params = random_params(cfg)
    assert ("pos.table" in params) == (pos == "learned")
    x = np.random.default_rng(0).normal(size=(2, 6))
    y = np.array([1, 2])
    res = T.grad_check(lambda tape, p: cross_entropy(M.forward(p, cfg, x), y), params,
                       max_coords=200)
    assert res.max_error < 1e-4


def test_permutation_equivariance_without_positions():
    cfg = tiny(blocks=1, caf=False)
    p = random_params(cfg)
    bp = {k: Tensor(v) for k, v in M.block_params(p, 1).items()}
    tokens = np.random.default_rng(1).normal(size=(6, 8))
    perm = np.random.default_rng(2).permutation(6)
    out = M.encoder_block(tokens, bp, cfg).data
    np.testing.assert_allclose(M.encoder_block(tokens[perm], bp, cfg).data, out[perm], atol=1e-12)


def test_attention_flops_scale_quadratically_in_bands():
    def flops(m):
        z = np.ones((m + 1, 4))
        with T.count_flops() as fc:
            M.attention(z, z, z)
        return fc.matmul

    ratio = flops(400) / flops(200)
    assert 3.9 < ratio < 4.05


def test_init_params_deterministic_and_caf_identity():
    cfg = tiny(blocks=4)
    a, b = M.init_params(cfg, T.make_rng(7)), M.init_params(cfg, T.make_rng(7))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert all(np.array_equal(a[k], [1.0, 0.0]) for k in a if k.startswith("caf."))
    assert np.all(a["blocks.1.ln1.gamma"] == 1) and np.all(a["blocks.1.mlp.b1"] == 0)


def test_init_glorot_statistics():
    cfg = ModelConfig(m=8, classes=2, n=1, d=64, input_mode="patch", patch_side=41, blocks=1, caf=False)
    w = M.init_params(cfg, T.make_rng(0), np.float64)["gse.weight"]
    assert w.size > 1e5
    limit = np.sqrt(6.0 / sum(w.shape))
    assert np.abs(w).max() <= limit
    sigma = limit / np.sqrt(3.0) / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * sigma
    assert abs(w.std() - limit / np.sqrt(3.0)) < 0.01 * limit


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny(input_mode="patch", patch_side=3, readout="mean", dropout_p=0.25)
    params = M.init_params(cfg, T.make_rng(1))
    path = tmp_path / "m.sfck"
    checkpoint.save(path, params, cfg)
    loaded, cfg2 = checkpoint.load(path)
    assert cfg2 == cfg
    assert list(loaded) == list(params)
    assert all(np.array_equal(loaded[k], params[k]) for k in params)
    raw = path.read_bytes()
    assert raw[:4] == b"SFCK" and int.from_bytes(raw[4:6], "little") == 1


def test_checkpoint_errors(tmp_path):
    cfg = tiny()
    raw = checkpoint.dumps(M.init_params(cfg, T.make_rng(1)), cfg)
    with pytest.raises(ParseError, match="magic"):
        checkpoint.loads(b"XXXX" + raw[4:])
    with pytest.raises(ParseError, match="byte offset"):
        checkpoint.loads(raw[:-10])
    with pytest.raises(ParseError):
        checkpoint.load(tmp_path / "missing.sfck")

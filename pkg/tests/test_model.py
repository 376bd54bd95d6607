import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msgl.autograd import RngStream, Tensor, check_parameter_gradients
from msgl.autograd import functional as F
from msgl.errors import ConfigurationError, DimensionError, PersistenceError
from msgl.model import (
    VARIANTS, ModelConfig, bam_gate, bam_modulate, classify, count_params, embed_sequence,
    encoder_forward, init_params, load_checkpoint, msa_branches, multi_scale_attention,
    param_shapes, predict, predict_proba, save_checkpoint,
)

SMALL = ModelConfig(T=8, D=5, C=3, d_model=16, d_ff=32, heads=4, bam_hidden=8)


def small(variant="full", seed=0):
    cfg = SMALL.with_variant(variant)
    return cfg, init_params(cfg, RngStream(seed))


# ---------------------------------------------------------------- numpy oracle

def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_mha(x, p, heads, causal=False):
    L, d = x.shape
    dh = d // heads
    q, k, v = (x @ p[f"w{n}"] + p[f"b{n}"] for n in "qkv")
    out = np.zeros((L, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if causal:
            s = np.where(np.tril(np.ones((L, L), bool)), s, -np.inf)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, sl] = (e / e.sum(axis=1, keepdims=True)) @ v[:, sl]
    return out @ p["wo"] + p["bo"]


def np_group(arrays, prefix):
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}


def np_encoder(a, cfg, U):
    for i in range(cfg.layers):
        p = f"encoder.{i}"
        U1 = np_layer_norm(U + np_mha(U, np_group(a, f"{p}.attn"), cfg.heads),
                           a[f"{p}.norm1.gamma"], a[f"{p}.norm1.beta"])
        h = np.maximum(U1 @ a[f"{p}.ffn.fc1.weight"] + a[f"{p}.ffn.fc1.bias"], 0.0)
        U = np_layer_norm(U1 + h @ a[f"{p}.ffn.fc2.weight"] + a[f"{p}.ffn.fc2.bias"],
                          a[f"{p}.norm2.gamma"], a[f"{p}.norm2.beta"])
    return U


def np_plain_transformer(a, cfg, X):
    """Global-token transformer classifier: embedding, encoder stack, head on row 0."""
    Z = np.concatenate([a["global_token"], X @ a["embed.weight"] + a["embed.bias"]]) + a["pos_enc"]
    V = np_encoder(a, cfg, Z)
    return V[0] @ a["head.weight"] + a["head.bias"]


# ---------------------------------------------------------------- config & layout

def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(T=1)
    with pytest.raises(ConfigurationError):
        ModelConfig(dropout_p=1.0)
    with pytest.raises(ConfigurationError):
        SMALL.with_variant("huge")
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"T": 5, "colour": "red"})


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_variant_flags_and_tensor_presence(variant):
    cfg, params = small(variant)
    bam, msa = VARIANTS[variant]
    assert (cfg.enable_bam, cfg.enable_msa) == (bam, msa) and cfg.variant == variant
    assert any(n.startswith("bam.") for n in params) == bam
    assert any(n.startswith("msa.") for n in params) == msa
    assert len(set(params.names())) == len(params)


def test_full_size_parameter_counts():
    full = ModelConfig(T=35, D=28, C=4)
    assert count_params(full) == 269_060
    # positional row (64) + BAM first-layer columns (64 * 64) per frame, times 15 frames
    assert count_params(ModelConfig(T=50, D=28, C=4)) - count_params(full) == 62_400
    assert count_params(full) - count_params(ModelConfig(T=20, D=28, C=4)) == 62_400


def test_bam_tensor_bookkeeping():
    cfg = ModelConfig(T=35, D=28, C=4)
    T, d, h = cfg.T, cfg.d_model, cfg.bam_hidden
    assert count_params(cfg) - count_params(cfg.with_variant("msa")) == T * d * h + h + h * d + d


def test_count_params_agrees_with_initialised_tensors():
    cfg, params = small()
    assert count_params(params) == count_params(cfg)


# ---------------------------------------------------------------- initialisation

def test_init_distributions():
    cfg, params = small()
    for name, shape, kind in param_shapes(cfg):
        data = params[name].data
        assert data.shape == shape
        if kind == "zeros":
            assert (data == 0).all(), name
        elif kind == "ones":
            assert (data == 1).all(), name
        elif kind == "xavier":
            assert np.abs(data).max() <= np.sqrt(6.0 / sum(shape)), name
    bound = np.sqrt(6.0 / (cfg.D + cfg.d_model))
    assert np.abs(params["embed.weight"].data).max() <= bound


def test_init_is_deterministic():
    a = small(seed=5)[1].snapshot()
    b = small(seed=5)[1].snapshot()
    c = small(seed=6)[1].snapshot()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


# ---------------------------------------------------------------- forward pieces

def test_embedding_matches_concat_add_oracle(rng):
    cfg, params = small()
    X = rng.normal(size=(cfg.T, cfg.D))
    a = params.snapshot()
    ref = np.concatenate([a["global_token"], X @ a["embed.weight"] + a["embed.bias"]]) + a["pos_enc"]
    Z = embed_sequence(params, cfg, X).data
    assert Z.shape == (cfg.T + 1, cfg.d_model)
    np.testing.assert_allclose(Z, ref, rtol=1e-12, atol=1e-12)


def test_embedding_of_zero_input_is_token_and_positions():
    cfg, params = small()
    params["embed.weight"].data = np.zeros_like(params["embed.weight"].data)
    Z = embed_sequence(params, cfg, np.zeros((cfg.T, cfg.D))).data
    a = params.snapshot()
    np.testing.assert_array_equal(Z, np.concatenate([a["global_token"], np.zeros((cfg.T, cfg.d_model))]) + a["pos_enc"])


def test_full_size_embedding_shape(rng):
    cfg = ModelConfig(T=35, D=12, C=5).with_variant("base")
    Z = embed_sequence(init_params(cfg, RngStream(0)), cfg, rng.normal(size=(35, 12)))
    assert Z.shape == (36, 64)


def test_wrong_input_shape():
    cfg, params = small()
    with pytest.raises(DimensionError):
        classify(params, cfg, np.zeros((cfg.T + 1, cfg.D)))


def test_bam_zero_weights_halve_every_token(rng):
    cfg, params = small()
    for n in ("bam.fc1.weight", "bam.fc2.weight"):
        params[n].data = np.zeros_like(params[n].data)
    Z = Tensor(rng.normal(size=(cfg.T + 1, cfg.d_model)))
    np.testing.assert_array_equal(bam_modulate(params, cfg, Z).data, 0.5 * Z.data)


def test_bam_matches_flatten_oracle(rng):
    cfg, params = small()
    a = params.snapshot()
    Z = rng.normal(size=(cfg.T + 1, cfg.d_model))
    v = Z[1:].reshape(-1)
    m = 1.0 / (1.0 + np.exp(-(np.maximum(v @ a["bam.fc1.weight"] + a["bam.fc1.bias"], 0)
                              @ a["bam.fc2.weight"] + a["bam.fc2.bias"])))
    out = bam_modulate(params, cfg, Tensor(Z)).data
    np.testing.assert_allclose(out, Z * m, rtol=1e-12, atol=1e-12)
    g = bam_gate(params, cfg, Tensor(Z)).data
    assert ((g > 0) & (g < 1)).all()


def test_bam_gate_ignores_global_token_row(rng):
    cfg, params = small()
    Z = rng.normal(size=(cfg.T + 1, cfg.d_model))
    Z2 = Z.copy()
    Z2[0] = rng.normal(size=cfg.d_model) * 100.0
    np.testing.assert_array_equal(bam_gate(params, cfg, Tensor(Z)).data, bam_gate(params, cfg, Tensor(Z2)).data)


def test_short_branch_spans_half_window():
    cfg = ModelConfig(T=35, D=4, C=2)
    params = init_params(cfg, RngStream(0))
    b = msa_branches(params, cfg, Tensor(np.random.default_rng(0).normal(size=(36, 64))))
    assert b["short"].shape == (17, 64) and b["medium"].shape == (35, 64) and b["global"].shape == (36, 64)


def test_msa_matches_branch_oracle(rng):
    cfg, params = small("msa")
    a = params.snapshot()
    Z = rng.normal(size=(cfg.T + 1, cfg.d_model))
    s = cfg.T // 2
    short = np_mha(Z[1:s + 1], np_group(a, "msa.short"), cfg.heads, causal=True)
    medium = np_mha(Z[1:], np_group(a, "msa.medium"), cfg.heads, causal=True)
    glob = np_mha(Z, np_group(a, "msa.global"), cfg.heads)
    local = np.zeros_like(Z)
    local[1:] = medium
    local[1:s + 1] = (short + medium[:s]) / 2
    ref = np_layer_norm(Z + local + glob, a["msa.norm.gamma"], a["msa.norm.beta"])
    np.testing.assert_allclose(multi_scale_attention(params, cfg, Tensor(Z)).data, ref, rtol=1e-10, atol=1e-12)


def test_identical_local_branches_make_averaging_idempotent(rng):
    cfg, params = small("msa")
    for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        params[f"msa.short.{k}"].data = params[f"msa.medium.{k}"].data.copy()
    b = msa_branches(params, cfg, Tensor(rng.normal(size=(cfg.T + 1, cfg.d_model))))
    s = cfg.T // 2
    np.testing.assert_array_equal(b["short"].data, b["medium"].data[:s])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, SMALL.T - 1))
def test_causal_branches_ignore_later_frames(seed, t):
    cfg, params = small("msa", seed=seed % 7)
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(cfg.T + 1, cfg.d_model))
    Z2 = Z.copy()
    Z2[t + 2:] = rng.normal(size=Z2[t + 2:].shape)  # frame rows after frame t (row 0 is the token)
    a, b = msa_branches(params, cfg, Tensor(Z)), msa_branches(params, cfg, Tensor(Z2))
    np.testing.assert_array_equal(a["medium"].data[: t + 1], b["medium"].data[: t + 1])
    k = min(t + 1, cfg.T // 2)
    np.testing.assert_array_equal(a["short"].data[:k], b["short"].data[:k])


def test_encoder_with_zero_sublayers_is_stacked_layer_norms(rng):
    cfg, params = small("base")
    for n in params.names():
        if n.startswith("encoder.") and (".attn." in n or ".ffn." in n):
            params[n].data = np.zeros_like(params[n].data)
    U = rng.normal(size=(cfg.T + 1, cfg.d_model))
    ref = U
    for i in range(cfg.layers):
        ref = np_layer_norm(np_layer_norm(ref, 1.0, 0.0), 1.0, 0.0)
    np.testing.assert_allclose(encoder_forward(params, cfg, Tensor(U)).data, ref, rtol=1e-10, atol=1e-12)


def test_encoder_matches_layer_by_layer_oracle(rng):
    cfg, params = small("base")
    U = rng.normal(size=(cfg.T + 1, cfg.d_model))
    ref = np_encoder(params.snapshot(), cfg, U)
    np.testing.assert_allclose(encoder_forward(params, cfg, Tensor(U)).data, ref, rtol=1e-10, atol=1e-12)


def test_base_variant_is_a_plain_global_token_transformer(rng):
    cfg, params = small("base", seed=3)
    a = params.snapshot()
    for _ in range(3):
        X = rng.normal(size=(cfg.T, cfg.D))
        np.testing.assert_allclose(classify(params, cfg, X).data, np_plain_transformer(a, cfg, X),
                                   rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- classification

@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_logits_shape_finite_and_batched(variant, rng):
    cfg, params = small(variant)
    X = rng.normal(size=(4, cfg.T, cfg.D))
    logits = classify(params, cfg, X).data
    assert logits.shape == (4, cfg.C) and np.isfinite(logits).all()
    single = classify(params, cfg, X[2]).data
    assert single.shape == (cfg.C,)
    np.testing.assert_allclose(single, logits[2], rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(F.softmax(Tensor(logits)).data.sum(axis=-1), 1.0, atol=1e-12)


def test_eval_mode_is_deterministic_and_training_mode_is_not(rng):
    cfg, params = small()
    X = rng.normal(size=(3, cfg.T, cfg.D))
    np.testing.assert_array_equal(classify(params, cfg, X).data, classify(params, cfg, X).data)
    r = RngStream(1)
    assert not np.array_equal(classify(params, cfg, X, True, r).data, classify(params, cfg, X, True, r).data)
    np.testing.assert_array_equal(classify(params, cfg, X, True, RngStream(2)).data,
                                  classify(params, cfg, X, True, RngStream(2)).data)


def test_argmax_ties_go_to_lowest_index():
    assert predict(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])).tolist() == [1, 0]


def test_predict_proba_rows_sum_to_one(rng):
    cfg, params = small()
    p = predict_proba(params, cfg, rng.normal(size=(7, cfg.T, cfg.D)), batch_size=3)
    assert p.shape == (7, cfg.C)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("variant", ["base", "full"])
def test_model_gradients_pass_gradcheck(variant):
    cfg = ModelConfig(T=6, D=4, C=3, d_model=8, d_ff=16, heads=2, bam_hidden=4).with_variant(variant)
    params = init_params(cfg, RngStream(11))
    X = np.random.default_rng(11).normal(size=(2, cfg.T, cfg.D))
    y = np.array([0, 2])

    def loss():
        return -F.log_softmax(classify(params, cfg, X))[..., np.arange(2), y].sum(axis=-1)

    errors = check_parameter_gradients(loss, params.as_dict(), lanes=32)
    assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    cfg, params = small("bam", seed=4)
    save_checkpoint(tmp_path / "m.ckpt", params, cfg)
    back, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg and back.names() == params.names()
    for n in params:
        np.testing.assert_array_equal(back[n].data, params[n].data)
    X = rng.normal(size=(2, cfg.T, cfg.D))
    np.testing.assert_array_equal(classify(back, cfg, X).data, classify(params, cfg, X).data)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    cfg, params = small()
    save_checkpoint(tmp_path / "a.ckpt", params, cfg)
    save_checkpoint(tmp_path / "b.ckpt", small()[1], cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_corrupted_checkpoints(tmp_path):
    cfg, params = small()
    save_checkpoint(tmp_path / "m.ckpt", params, cfg)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    (tmp_path / "junk.ckpt").write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
    for name in ("trunc.ckpt", "junk.ckpt", "missing.ckpt"):
        with pytest.raises(PersistenceError):
            load_checkpoint(tmp_path / name)


def test_restore_rejects_foreign_snapshot():
    _, params = small()
    snap = params.snapshot()
    snap.pop("head.bias")
    with pytest.raises(KeyError):
        params.restore(snap)

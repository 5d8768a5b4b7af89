import numpy as np
import pytest

from fewshot_slu.encoder import (
    MEAN_POOL,
    AdamState,
    EmbeddingProvider,
    EncoderConfig,
    EncoderError,
    EncoderOutput,
    adam_step,
    backprop,
    backprop_batch,
    encode,
    encode_batch,
    init_params,
    load_embeddings,
    save_embeddings,
    sgd_step,
)

from oracles import max_rel_error


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_embeddings_dim(tmp_path):
    p = load_embeddings(write(tmp_path / "e.txt", "a 1 2 3\nb 4 5 6\n"))
    assert p.dim == 3 and len(p) == 2
    assert np.array_equal(p.lookup("b"), [4, 5, 6])


def test_load_embeddings_mixed_dim_names_line(tmp_path):
    with pytest.raises(EncoderError, match=":2:"):
        load_embeddings(write(tmp_path / "e.txt", "a 1 2 3\nb 4 5 6 7\n"))
    with pytest.raises(EncoderError, match=":1:"):
        load_embeddings(write(tmp_path / "e.txt", "a 1 x 3\n"))


def test_load_embeddings_duplicate_keeps_first(tmp_path):
    p = load_embeddings(write(tmp_path / "e.txt", "a 1 1\na 2 2\n"))
    assert len(p) == 1 and np.array_equal(p.lookup("a"), [1, 1])


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = EmbeddingProvider(["x", "y"], rng.normal(size=(2, 5)))
    save_embeddings(p, tmp_path / "e.txt")
    assert load_embeddings(tmp_path / "e.txt").checksum() == p.checksum()


def test_oov_policies():
    zero = EmbeddingProvider(["a"], [[1.0, 2.0, 3.0]], oov_policy="zero")
    assert np.array_equal(zero.lookup("zzz"), np.zeros(3))
    hashed = EmbeddingProvider(["a"], [[1.0, 2.0, 3.0]])
    u, v = hashed.lookup("zzz"), hashed.lookup("yyy")
    assert np.array_equal(u, EmbeddingProvider(["b"], [[0.0, 0, 0]]).lookup("zzz"))
    assert not np.array_equal(u, v)


def test_provider_is_read_only():
    p = EmbeddingProvider(["a"], [[1.0, 2.0]])
    with pytest.raises(ValueError):
        p.matrix[0, 0] = 5.0
    with pytest.raises(ValueError):
        p.lookup("a")[0] = 5.0


def test_init_params_shapes_and_determinism():
    p = EmbeddingProvider(["a"], [[0.0] * 4])
    assert init_params(0, EncoderConfig.mean_pool(4), p).tensors == {}
    cfg = EncoderConfig(4, 5, window=3)
    a, b = init_params(7, cfg, p), init_params(7, cfg, p)
    assert a["context.W"].shape == (12, 5) and a["context.b"].shape == (5,)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    with pytest.raises(EncoderError):
        init_params(0, EncoderConfig(3, 5), p)
    with pytest.raises(EncoderError):
        EncoderConfig(4, 5, window=2)


def test_mean_pool_encoding():
    p = EmbeddingProvider(["x", "y"], [[1.0, 0.0], [0.0, 1.0]])
    params = init_params(0, EncoderConfig.mean_pool(2), p)
    out, _ = encode(params, ["x", "y"])
    assert np.allclose(out.utterance_vec, [0.5, 0.5])
    single, _ = encode(params, ["y"])
    assert np.array_equal(single.utterance_vec, single.token_vecs[0])


def test_windowed_single_token_and_batch_consistency():
    rng = np.random.default_rng(1)
    p = EmbeddingProvider(list("abcde"), rng.normal(size=(5, 3)))
    params = init_params(2, EncoderConfig(3, 4), p)
    out, _ = encode(params, ["c"])
    assert np.allclose(out.utterance_vec, out.token_vecs[0])
    seqs = [list("abc"), list("de"), list("a")]
    enc, _ = encode_batch(params, seqs)
    for i, s in enumerate(seqs):
        solo, _ = encode(params, s)
        assert np.allclose(enc.output(i).token_vecs, solo.token_vecs, atol=1e-15)
        assert np.allclose(enc.output(i).utterance_vec, solo.utterance_vec, atol=1e-15)


def test_windowed_uses_neighbours():
    p = EmbeddingProvider(list("abc"), np.eye(3))
    params = init_params(0, EncoderConfig(3, 3, window=3), p)
    left, _ = encode(params, ["a", "b"])
    right, _ = encode(params, ["c", "b"])
    assert not np.allclose(left.token_vecs[1], right.token_vecs[1])


def test_backprop_zero_and_mean_pool():
    rng = np.random.default_rng(0)
    p = EmbeddingProvider(list("ab"), rng.normal(size=(2, 3)))
    params = init_params(0, EncoderConfig(3, 4), p)
    out, tape = encode(params, ["a", "b"])
    g = backprop(tape, EncoderOutput(np.zeros(4), np.zeros((2, 4))))
    assert all(not v.any() for v in g.values())
    mp = init_params(0, EncoderConfig.mean_pool(3), p)
    _, tape = encode(mp, ["a", "b"])
    assert backprop(tape, EncoderOutput(np.ones(3), np.ones((2, 3)))) == {}
    with pytest.raises(EncoderError):
        backprop_batch(tape, np.ones((1, 5)), np.ones((2, 3)))


@pytest.mark.parametrize("window", [1, 3, 5])
def test_backprop_matches_finite_differences(window):
    rng = np.random.default_rng(window)
    p = EmbeddingProvider(list("abcdef"), rng.normal(size=(6, 3)))
    params = init_params(window, EncoderConfig(3, 4, window=window), p)
    seqs = [list("abc"), list("fe"), list("d"), list("abcdef")]
    n_tok = sum(map(len, seqs))
    dU = rng.normal(size=(len(seqs), 4))
    dT = rng.normal(size=(n_tok, 4))

    def scalar(ps):
        enc, _ = encode_batch(ps, seqs)
        return float(np.sum(dU * enc.utterance_vecs) + np.sum(dT * enc.token_vecs))

    _, tape = encode_batch(params, seqs)
    grads = backprop_batch(tape, dU, dT)
    assert max_rel_error(scalar, grads, params, ["context.W", "context.b"]) < 1e-4


def test_sgd_step():
    p = EmbeddingProvider(["a"], [[0.0]])
    params = init_params(0, EncoderConfig(1, 1, window=1), p).with_tensors({"context.b": np.array([1.0])})
    g = {"context.b": np.array([2.0])}
    assert sgd_step(params, g, 0.1)["context.b"][0] == pytest.approx(0.8)
    assert np.array_equal(sgd_step(params, g, 0.0)["context.W"], params["context.W"])
    with pytest.raises(EncoderError):
        sgd_step(params, {"context.b": np.array([np.nan])}, 0.1)


def test_adam_first_step_by_hand():
    p = EmbeddingProvider(["a"], [[0.0]])
    params = init_params(0, EncoderConfig(1, 1, window=1), p).with_tensors({"context.b": np.array([1.0])})
    g, lr = 0.5, 0.01
    state, out = adam_step(AdamState(), params, {"context.b": np.array([g])}, lr)
    # m = 0.1 g, v = 0.001 g^2; bias corrections give m_hat = g, v_hat = g^2
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert out["context.b"][0] == pytest.approx(expected, abs=1e-15)
    assert abs(out["context.b"][0] - 1.0) == pytest.approx(lr, rel=1e-6)
    assert state.step == 1
    _, same = adam_step(AdamState(), params, {"context.b": np.array([g])}, 0.0)
    assert np.array_equal(same["context.b"], params["context.b"])


def test_mean_pool_config_validation():
    with pytest.raises(EncoderError):
        EncoderConfig(3, 4, MEAN_POOL)

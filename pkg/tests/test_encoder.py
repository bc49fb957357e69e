import numpy as np
import pytest

from conftest import reference_encode
from geoprompt.embedcore import l2_normalize
from geoprompt.encoder import (
    EmbeddingStore,
    HardToken,
    SoftToken,
    ToyTextEncoder,
    encode_text,
    encode_text_vjp,
    load_embedding_store,
    save_embedding_store,
)
from geoprompt.errors import (
    BadTokenIdError,
    DuplicateIdError,
    EmptyListError,
    NearZeroNormError,
    ParseError,
)


def identity_encoder(d, vocab_rows=None):
    rows = np.zeros((1, d)) if vocab_rows is None else vocab_rows
    return ToyTextEncoder(embedding=rows, projection=np.eye(d), bias=np.zeros(d))


class TestEncodeText:
    def test_single_soft_token_reduces_to_normalize(self):
        enc = identity_encoder(2)
        out = encode_text(enc, [SoftToken(np.array([3.0, 4.0]))])
        np.testing.assert_allclose(out, [0.6, 0.8])

    def test_duplicate_soft_tokens_match_single(self):
        enc = identity_encoder(3)
        v = np.array([1.0, 2.0, -1.0])
        single = encode_text(enc, [SoftToken(v)])
        double = encode_text(enc, [SoftToken(v), SoftToken(v)])
        np.testing.assert_allclose(double, single, atol=1e-15)

    def test_matches_reference_oracle(self, rng):
        enc = ToyTextEncoder.random(12, d_in=5, d_out=4, rng=rng.derive(10))
        gen = rng.derive(11).generator
        for _ in range(25):
            n_hard = int(gen.integers(1, 4))
            n_soft = int(gen.integers(0, 3))
            rows = [HardToken(int(gen.integers(0, 12))) for _ in range(n_hard)]
            rows += [SoftToken(gen.normal(size=5)) for _ in range(n_soft)]
            resolved = [enc.embedding[r.id] if isinstance(r, HardToken) else r.vector
                        for r in rows]
            np.testing.assert_allclose(encode_text(enc, rows),
                                       reference_encode(enc, resolved),
                                       atol=1e-12)

    def test_output_unit_norm(self, rng):
        enc = ToyTextEncoder.random(6, d_in=4, d_out=4, rng=rng.derive(12))
        gen = rng.derive(13).generator
        for _ in range(50):
            rows = [HardToken(int(gen.integers(0, 6))) for _ in range(3)]
            out = encode_text(enc, rows)
            assert abs(np.linalg.norm(out) - 1.0) <= 1e-9

    def test_order_invariance(self, rng):
        enc = ToyTextEncoder.random(8, d_in=4, d_out=3, rng=rng.derive(14))
        rows = [HardToken(1), HardToken(5), SoftToken(np.array([1.0, 0, 0, 2.0]))]
        np.testing.assert_allclose(encode_text(enc, rows),
                                   encode_text(enc, rows[::-1]), atol=1e-15)

    def test_repeating_full_row_set_changes_nothing(self, rng):
        enc = ToyTextEncoder.random(8, d_in=4, d_out=3, rng=rng.derive(15))
        rows = [HardToken(2), HardToken(3)]
        np.testing.assert_allclose(encode_text(enc, rows * 4),
                                   encode_text(enc, rows), atol=1e-12)

    def test_bad_token_id(self):
        enc = identity_encoder(2)
        with pytest.raises(BadTokenIdError):
            encode_text(enc, [HardToken(99)])

    def test_empty_rows(self):
        enc = identity_encoder(2)
        with pytest.raises(EmptyListError):
            encode_text(enc, [])

    def test_zero_collapse(self):
        enc = identity_encoder(2)
        with pytest.raises(NearZeroNormError):
            encode_text(enc, [SoftToken(np.zeros(2))])


class TestEncodeTextVjp:
    def test_orthogonal_upstream_scales_by_inverse_norm(self):
        enc = identity_encoder(2)
        z = np.array([3.0, 4.0])
        upstream = np.array([-0.8, 0.6])  # orthogonal to z
        (grad,) = encode_text_vjp(enc, [SoftToken(z)], upstream)
        np.testing.assert_allclose(grad, upstream / 5.0, atol=1e-15)

    def test_parallel_upstream_is_annihilated(self):
        enc = identity_encoder(2)
        z = np.array([3.0, 4.0])
        out = encode_text(enc, [SoftToken(z)])
        (grad,) = encode_text_vjp(enc, [SoftToken(z)], 2.5 * out)
        assert abs(float(grad @ out)) <= 1e-10

    def test_matches_finite_differences(self, rng):
        # 100 random (encoder, rows, upstream) trials against central
        # differences with step 1e-6.
        gen = rng.derive(20).generator
        for trial in range(100):
            enc = ToyTextEncoder.random(7, d_in=4, d_out=3,
                                        rng=rng.derive(1000 + trial))
            n_soft = int(gen.integers(1, 3))
            softs = [gen.normal(size=4) for _ in range(n_soft)]
            hard = [HardToken(int(gen.integers(0, 7)))]
            upstream = gen.normal(size=3)

            def loss(vectors):
                rows = [SoftToken(v) for v in vectors] + hard
                return float(upstream @ encode_text(enc, rows))

            rows = [SoftToken(v) for v in softs] + hard
            grads = encode_text_vjp(enc, rows, upstream)
            step = 1e-6
            for si in range(n_soft):
                for j in range(4):
                    bumped_up = [v.copy() for v in softs]
                    bumped_dn = [v.copy() for v in softs]
                    bumped_up[si][j] += step
                    bumped_dn[si][j] -= step
                    fd = (loss(bumped_up) - loss(bumped_dn)) / (2 * step)
                    scale = max(abs(fd), abs(float(grads[si][j])), 1e-8)
                    assert abs(fd - float(grads[si][j])) / scale <= 1e-5

    def test_hard_only_rows_get_no_gradients(self):
        enc = identity_encoder(2, vocab_rows=np.array([[1.0, 0.0]]))
        grads = encode_text_vjp(enc, [HardToken(0)], np.array([0.0, 1.0]))
        assert grads == []


class TestEmbeddingStore:
    def test_load_normalizes(self, tmp_path):
        path = tmp_path / "store.tsv"
        path.write_text("dim=2\na\t1.0\t0.0\nb\t0.0\t2.0\n")
        store = load_embedding_store(path)
        assert len(store) == 2
        assert store.dim == 2
        np.testing.assert_allclose(store.get("b"), [0.0, 1.0])

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "store.tsv"
        path.write_text("# comment\ndim=2\n\na\t1.0\t0.0\n# another\n")
        assert len(load_embedding_store(path)) == 1

    def test_wrong_field_count_reports_line(self, tmp_path):
        path = tmp_path / "store.tsv"
        path.write_text("dim=2\na\t1.0\t0.0\nb\t1.0\t0.0\t5.0\n")
        with pytest.raises(ParseError) as err:
            load_embedding_store(path)
        assert err.value.line == 3

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "store.tsv"
        path.write_text("dim=2\na\t1.0\t0.0\na\t0.0\t1.0\n")
        with pytest.raises(DuplicateIdError):
            load_embedding_store(path)

    def test_non_numeric_value(self, tmp_path):
        path = tmp_path / "store.tsv"
        path.write_text("dim=2\na\t1.0\toops\n")
        with pytest.raises(ParseError) as err:
            load_embedding_store(path)
        assert err.value.line == 2

    def test_round_trip(self, tmp_path, rng):
        gen = rng.derive(30).generator
        vectors = {f"id{i}": l2_normalize(gen.normal(size=4)) for i in range(5)}
        path = tmp_path / "store.tsv"
        save_embedding_store(vectors, path)
        store = load_embedding_store(path)
        for k, v in vectors.items():
            np.testing.assert_allclose(store.get(k), v, atol=1e-15)

    def test_matrix_ordering(self):
        store = EmbeddingStore(dim=2)
        store.add("x", [1.0, 0.0])
        store.add("y", [0.0, 1.0])
        np.testing.assert_allclose(store.matrix(["y", "x"]),
                                   [[0.0, 1.0], [1.0, 0.0]])

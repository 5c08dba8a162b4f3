import numpy as np
import pytest

from pointmoe import tensorcore as tc
from pointmoe.errors import (ConfigError, FormatError, InputError,
                             NormalizationError, SupervisionError)
from pointmoe.langhead import (ClassEmbeddingTable, LabelSpace, class_logits,
                               default_table, load_embeddings,
                               masked_cross_entropy, predict, save_embeddings)


def small_table():
    t = ClassEmbeddingTable(dim=2)
    t.add("wall", np.array([1.0, 0.0]))
    t.add("floor", np.array([0.0, 1.0]))
    return t


class TestEmbeddingIO:
    def test_load_two_rows(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("dim=4\nwall\t1 0 0 0\nfloor\t0 2 0 0\n")
        table = load_embeddings(p)
        assert set(table.entries) == {"wall", "floor"}
        for v in table.entries.values():
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    def test_name_with_spaces(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("dim=2\nshower curtain\t3 4\n")
        table = load_embeddings(p)
        assert np.allclose(table.entries["shower curtain"], [0.6, 0.8])

    def test_zero_vector_rejected(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("dim=2\nwall\t0 0\n")
        with pytest.raises(NormalizationError):
            load_embeddings(p)

    def test_dim_mismatch_rejected(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("dim=3\nwall\t1 0 0\nfloor\t1 0\n")
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_duplicate_rejected(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("dim=2\nwall\t1 0\nwall\t0 1\n")
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_missing_header(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("wall\t1 0\n")
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_roundtrip(self, tmp_path):
        table = default_table(dim=16, seed=3)
        p = tmp_path / "emb.txt"
        save_embeddings(table, p)
        back = load_embeddings(p)
        assert list(back.entries) == list(table.entries)
        for name in table.entries:
            assert np.max(np.abs(back.entries[name] - table.entries[name])) < 1e-9


class TestDefaultTable:
    def test_similarity_structure(self):
        table = default_table(dim=32, seed=7)
        cos = table.entries["ground"] @ table.entries["floor"]
        assert abs(cos - 0.7) < 1e-9
        cos = table.entries["box_c"] @ table.entries["box_a"]
        assert abs(cos - 0.7) < 1e-9
        for v in table.entries.values():
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    def test_deterministic(self):
        a, b = default_table(seed=7), default_table(seed=7)
        for name in a.entries:
            assert np.array_equal(a.entries[name], b.entries[name])


class TestClassLogits:
    SPACE = LabelSpace("toy", ("wall", "floor"))

    def test_exact_match_hits_scale(self):
        table = small_table()
        feats = tc.tensor([[1.0, 0.0]])
        logits = class_logits(feats, self.SPACE, table, scale=10.0)
        assert abs(logits.data[0, 0] - 10.0) < 1e-12
        assert np.all(np.abs(logits.data) <= 10.0 + 1e-12)

    def test_orthogonal_feature_gives_zeros(self):
        table = ClassEmbeddingTable(dim=3)
        table.add("wall", np.array([1.0, 0.0, 0.0]))
        table.add("floor", np.array([0.0, 1.0, 0.0]))
        logits = class_logits(tc.tensor([[0.0, 0.0, 2.0]]),
                              LabelSpace("toy", ("wall", "floor")), table)
        assert np.allclose(logits.data, 0.0, atol=1e-12)

    def test_axis_aligned_example(self):
        logits = class_logits(tc.tensor([[1.0, 0.0]]), self.SPACE, small_table(), 10.0)
        assert np.allclose(logits.data, [[10.0, 0.0]], atol=1e-12)

    def test_bounds_random(self):
        rng = np.random.default_rng(0)
        table = default_table(dim=8, seed=1)
        space = LabelSpace("toy", ("wall", "floor", "ceiling"))
        logits = class_logits(tc.tensor(rng.normal(size=(50, 8))), space, table, 5.0)
        assert np.all(np.abs(logits.data) <= 5.0 + 1e-12)

    def test_missing_class(self):
        with pytest.raises(ConfigError):
            class_logits(tc.tensor([[1.0, 0.0]]),
                         LabelSpace("toy", ("wall", "sofa")), small_table())

    def test_shared_class_logit_identical_across_spaces(self):
        table = default_table(dim=16, seed=2)
        rng = np.random.default_rng(3)
        feats = tc.tensor(rng.normal(size=(4, 16)))
        a = class_logits(feats, LabelSpace("a", ("wall", "floor")), table)
        b = class_logits(feats, LabelSpace("b", ("ground", "wall")), table)
        assert np.array_equal(a.data[:, 0], b.data[:, 1])


class TestMaskedCrossEntropy:
    def test_confident_correct_is_near_zero(self):
        loss = masked_cross_entropy(tc.tensor([[100.0, 0.0]]), np.array([0]))
        assert loss.item() < 1e-10

    def test_uniform_is_log_k(self):
        loss = masked_cross_entropy(tc.tensor([[0.0] * 4] * 3), np.array([1, 2, 0]))
        assert abs(loss.item() - np.log(4.0)) < 1e-12

    def test_ignored_tokens_do_not_contribute(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(2, 3))
        both = masked_cross_entropy(tc.tensor(z), np.array([0, -1]))
        only = masked_cross_entropy(tc.tensor(z[:1]), np.array([0]))
        assert abs(both.item() - only.item()) < 1e-12

    def test_all_ignored_errors(self):
        with pytest.raises(SupervisionError):
            masked_cross_entropy(tc.tensor([[0.0, 1.0]]), np.array([-1]))

    def test_out_of_range_labels(self):
        with pytest.raises(InputError):
            masked_cross_entropy(tc.tensor([[0.0, 1.0]]), np.array([2]))

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        w = tc.tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = tc.tensor(rng.normal(size=(6, 4)))
        labels = np.array([0, 1, 2, -1, 1, 0])
        report = tc.check_gradients(
            lambda: masked_cross_entropy(tc.matmul(x, w), labels), [("w", w)])
        assert report.passed, str(report)


class TestPredict:
    def test_exact_embedding_recovers_class(self):
        table = small_table()
        space = LabelSpace("toy", ("wall", "floor"))
        out = predict(np.array([[0.0, 3.0]]), space, table)
        assert out.tolist() == [1]

    def test_tie_breaks_to_lower_index(self):
        table = small_table()
        space = LabelSpace("toy", ("wall", "floor"))
        out = predict(np.array([[1.0, 1.0]]), space, table)
        assert out.tolist() == [0]

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(6)
        table = default_table(dim=8, seed=9)
        space = LabelSpace("toy", ("wall", "floor", "ceiling", "box_a"))
        feats = rng.normal(size=(30, 8))
        out = predict(feats, space, table)
        for t in range(30):
            best, best_cos = 0, -np.inf
            f = feats[t] / np.linalg.norm(feats[t])
            for c, name in enumerate(space.class_names):
                cos = f @ table.entries[name]
                if cos > best_cos:
                    best, best_cos = c, cos
            assert out[t] == best

    def test_invariant_to_feature_and_scale_rescaling(self):
        rng = np.random.default_rng(7)
        table = default_table(dim=8, seed=9)
        space = LabelSpace("toy", ("wall", "floor", "ceiling"))
        feats = rng.normal(size=(20, 8))
        base = predict(feats, space, table, scale=10.0)
        assert np.array_equal(base, predict(feats * 137.0, space, table, scale=10.0))
        assert np.array_equal(base, predict(feats, space, table, scale=0.5))

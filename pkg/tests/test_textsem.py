import sys

import numpy as np
import pytest

from snapkit.autoprompt import SegmentationResult
from snapkit.textsem import (DEFAULT_TEMPLATE, HashEmbeddingProvider,
                             JsonLineProviderAdapter, TextVocabulary,
                             VocabularyError, assemble_panoptic, build_vocabulary,
                             classify_masks, open_vocab_query)


def result_with(embeddings, masks=None, scores=None):
    m = len(embeddings)
    n = 8
    return SegmentationResult(
        masks=masks if masks is not None else [np.zeros(n, bool) for _ in range(m)],
        scores=scores if scores is not None else [0.5] * m,
        clip_embeddings=[np.asarray(e) for e in embeddings],
    )


class TestProvider:
    def test_deterministic(self):
        p = HashEmbeddingProvider()
        a = p.embed(["chair", "table"])
        b = p.embed(["chair", "table"])
        assert np.array_equal(a, b)

    def test_unit_norm_and_dimension(self):
        p = HashEmbeddingProvider(dimension=16)
        emb = p.embed(["x"])
        assert emb.shape == (1, 16)
        assert abs(np.linalg.norm(emb[0]) - 1.0) < 1e-12

    def test_distinct_strings_nearly_orthogonal(self):
        p = HashEmbeddingProvider()
        names = [f"class-{i}" for i in range(50)]
        emb = p.embed(names)
        sims = emb @ emb.T
        off_diag = sims[~np.eye(50, dtype=bool)]
        assert np.abs(off_diag).max() < 0.99


class TestVocabulary:
    def test_build(self):
        vocab = build_vocabulary(HashEmbeddingProvider(), ["wall", "chair"])
        assert vocab.embeddings.shape == (2, 32)
        assert np.allclose(np.linalg.norm(vocab.embeddings, axis=1), 1.0)
        assert vocab.template == DEFAULT_TEMPLATE

    def test_same_names_same_vocab(self):
        a = build_vocabulary(HashEmbeddingProvider(), ["a", "b"])
        b = build_vocabulary(HashEmbeddingProvider(), ["a", "b"])
        assert np.array_equal(a.embeddings, b.embeddings)

    def test_template_matters(self):
        a = build_vocabulary(HashEmbeddingProvider(), ["a"], "a photo of a {class_name}")
        b = build_vocabulary(HashEmbeddingProvider(), ["a"], "a picture of a {class_name}")
        assert not np.allclose(a.embeddings, b.embeddings)

    def test_duplicate_names_rejected(self):
        with pytest.raises(VocabularyError):
            build_vocabulary(HashEmbeddingProvider(), ["a", "a"])

    def test_template_slot_required(self):
        with pytest.raises(VocabularyError):
            build_vocabulary(HashEmbeddingProvider(), ["a"], "no slot here")


class TestClassify:
    def test_vocab_row_maps_to_itself(self):
        vocab = build_vocabulary(HashEmbeddingProvider(), [f"c{i}" for i in range(5)])
        ids, probs = classify_masks(vocab.embeddings[3:4], vocab)
        assert ids[0] == 3
        assert probs.shape == (1, 5)

    def test_orthogonal_gives_uniform(self):
        emb = np.zeros((1, 4))
        emb[0, 3] = 1.0
        vocab_rows = np.eye(4)[:3]
        vocab = TextVocabulary(["a", "b", "c"], vocab_rows)
        ids, probs = classify_masks(emb, vocab)
        assert np.allclose(probs, 1.0 / 3.0)
        assert ids[0] == 0  # tie broken by lower class index

    def test_argmax_invariant_to_temperature(self):
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(6, 8))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        rows = rng.normal(size=(4, 8))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        vocab = TextVocabulary(list("abcd"), rows)
        a, _ = classify_masks(emb, vocab, temperature=0.07)
        b, _ = classify_masks(emb, vocab, temperature=3.0)
        assert np.array_equal(a, b)

    def test_unnormalized_rejected(self):
        vocab = build_vocabulary(HashEmbeddingProvider(), ["a"])
        with pytest.raises(VocabularyError):
            classify_masks(vocab.embeddings * 2, vocab)


class TestOpenVocabQuery:
    def test_exact_match_ranked_first(self):
        provider = HashEmbeddingProvider()
        q = provider.embed(["sofa"])[0]
        rng = np.random.default_rng(1)
        others = rng.normal(size=(3, 32))
        others /= np.linalg.norm(others, axis=1, keepdims=True)
        res = result_with([others[0], q, others[1], others[2]])
        ranked = open_vocab_query(res, "sofa", provider, tau_sim=-1.0)
        assert ranked[0][0] == 1
        assert abs(ranked[0][1] - 1.0) < 1e-9

    def test_unreachable_threshold_empty(self):
        provider = HashEmbeddingProvider()
        res = result_with(provider.embed(["a", "b"]))
        assert open_vocab_query(res, "a", provider, tau_sim=1.01) == []

    def test_matches_sort_oracle(self):
        provider = HashEmbeddingProvider()
        rng = np.random.default_rng(2)
        emb = rng.normal(size=(10, 32))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        res = result_with(list(emb))
        ranked = open_vocab_query(res, "query", provider, tau_sim=-2.0)
        q = provider.embed(["query"])[0]
        sims = emb @ q
        expected = sorted(range(10), key=lambda i: (-sims[i], i))
        assert [i for i, _ in ranked] == expected
        assert all(abs(s - sims[i]) < 1e-12 for i, s in ranked)

    def test_empty_result(self):
        provider = HashEmbeddingProvider()
        res = SegmentationResult(masks=[], scores=[], clip_embeddings=[])
        assert open_vocab_query(res, "x", provider) == []


class TestAssemblePanoptic:
    def test_disjoint_direct_assignment(self):
        masks = [np.array([1, 1, 0, 0], bool), np.array([0, 0, 1, 0], bool)]
        res = result_with([np.ones(2)] * 2, masks=masks, scores=[0.9, 0.8])
        inst, cls = assemble_panoptic(res, [5, 7], 4)
        assert inst.tolist() == [0, 0, 1, -1]
        assert cls.tolist() == [5, 5, 7, -1]

    def test_overlap_resolved_by_score(self):
        masks = [np.array([1, 1, 1, 0], bool), np.array([0, 1, 1, 1], bool)]
        res = result_with([np.ones(2)] * 2, masks=masks, scores=[0.7, 0.9])
        inst, cls = assemble_panoptic(res, [0, 1], 4)
        assert inst.tolist() == [0, 1, 1, 1]

    def test_score_tie_lower_index(self):
        masks = [np.array([1, 1], bool), np.array([1, 1], bool)]
        res = result_with([np.ones(2)] * 2, masks=masks, scores=[0.5, 0.5])
        inst, _ = assemble_panoptic(res, [0, 0], 2)
        assert inst.tolist() == [0, 0]

    def test_partition_property(self):
        rng = np.random.default_rng(3)
        masks = [rng.uniform(size=30) > 0.5 for _ in range(6)]
        res = result_with([np.ones(2)] * 6, masks=masks,
                          scores=rng.uniform(size=6).tolist())
        inst, cls = assemble_panoptic(res, list(range(6)), 30)
        assert len(np.unique(inst[inst >= 0])) <= 6
        covered = np.zeros(30, bool)
        for m in masks:
            covered |= m
        assert np.array_equal(inst >= 0, covered)


class TestJsonLineAdapter:
    def test_round_trip_subprocess(self):
        child = (
            "import sys, json, hashlib\n"
            "for line in sys.stdin:\n"
            "    req = json.loads(line)\n"
            "    out = []\n"
            "    for t in req['texts']:\n"
            "        h = hashlib.sha256(t.encode()).digest()\n"
            "        v = [b / 255.0 for b in h[:4]]\n"
            "        out.append(v)\n"
            "    print(json.dumps({'embeddings': out}), flush=True)\n"
        )
        with JsonLineProviderAdapter([sys.executable, "-c", child], dimension=4) as p:
            a = p.embed(["hello", "world"])
            b = p.embed(["hello", "world"])
        assert a.shape == (2, 4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a[0], a[1])

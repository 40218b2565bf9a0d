import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import aggregate_brute_force, batch_loss_brute_force, nt_xent_closed_form
from wsnet.dataset import AugmentationConfig, CorpusSpec, build_corpus
from wsnet.recognizer import collate
from wsnet.style_encoder import (
    EncoderConfig,
    EncoderTrainConfig,
    StyleEncoder,
    aggregate,
    aggregate_index,
    batch_loss,
    encode,
    encode_images,
    extract_table,
    extract_writer_embedding,
    nt_xent_pair,
    sample_writer_batch,
    train_encoder,
)

TINY = EncoderConfig(conv_channels=[4, 4, 8, 8], attention_blocks=1, attention_heads=2, attention_width=16, ed=8,
                     height=16)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestNTXent:
    def test_aligned_positive_one_orthogonal_negative(self):
        q = np.array([1.0, 0.0])
        loss = float(nt_xent_pair(q, q, [np.array([0.0, 1.0])], 0.15))
        expected = -math.log(math.exp(1 / 0.15) / (1 + math.exp(1 / 0.15)))
        assert loss == pytest.approx(expected, rel=1e-9)
        assert loss == pytest.approx(1.272e-3, rel=1e-3)

    @pytest.mark.parametrize("n", [1, 4, 30])
    def test_uniform_logits(self, n):
        q = np.array([1.0, 0.0])
        p = np.array([0.6, 0.8])
        assert float(nt_xent_pair(q, p, [p] * n)) == pytest.approx(math.log(n + 1), rel=1e-9)

    def test_decreases_with_positive_similarity(self):
        rng = np.random.default_rng(0)
        q = np.array([1.0, 0.0, 0.0])
        negs = unit_rows(rng, 5, 3)
        angles = np.linspace(np.pi, 0, 20)
        losses = [float(nt_xent_pair(q, np.array([np.cos(a), np.sin(a), 0]), negs)) for a in angles]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_matches_closed_form(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = unit_rows(rng, 6, 8)
            got = float(nt_xent_pair(v[0], v[1], v[2:], 0.15))
            assert got == pytest.approx(nt_xent_closed_form(v[0], v[1], v[2:], 0.15), rel=1e-6)

    def test_no_negatives_is_zero(self):
        v = unit_rows(np.random.default_rng(2), 2, 4)
        assert float(batch_loss(torch.tensor(v), [3, 3])) == pytest.approx(0.0, abs=1e-12)

    def test_lower_temperature_widens_gap(self):
        q = np.array([1.0, 0.0])
        p = np.array([np.cos(0.3), np.sin(0.3)])
        # a hard negative sits closer to the anchor than the positive does
        hard = [np.array([np.cos(0.1), np.sin(0.1)])] * 4
        easy = [np.array([np.cos(2.5), np.sin(2.5)])] * 4
        gaps = [float(nt_xent_pair(q, p, hard, t) - nt_xent_pair(q, p, easy, t)) for t in (0.5, 0.15, 0.05)]
        assert gaps[0] < gaps[1] < gaps[2]


class TestBatchLoss:
    def test_three_sample_enumeration(self):
        v = unit_rows(np.random.default_rng(0), 3, 4)
        expected = 0.5 * (nt_xent_closed_form(v[0], v[1], [v[2]], 0.15)
                          + nt_xent_closed_form(v[1], v[0], [v[2]], 0.15))
        assert float(batch_loss(torch.tensor(v), [0, 0, 1])) == pytest.approx(expected, rel=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(labels=st.lists(st.integers(0, 3), min_size=2, max_size=12), seed=st.integers(0, 10_000))
    def test_matches_pair_enumeration(self, labels, seed):
        if len(set(labels)) == len(labels):
            labels = labels + [labels[0]]
        v = unit_rows(np.random.default_rng(seed), len(labels), 6)
        got = float(batch_loss(torch.tensor(v), labels))
        assert got == pytest.approx(batch_loss_brute_force(v, labels, 0.15), rel=1e-6)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        v = unit_rows(rng, 9, 5)
        labels = np.array([0, 0, 1, 1, 1, 2, 2, 0, 3])
        perm = rng.permutation(9)
        a = batch_loss(torch.tensor(v), labels)
        b = batch_loss(torch.tensor(v[perm]), labels[perm])
        assert float(a) == pytest.approx(float(b), rel=1e-12)

    def test_no_positive_pair(self):
        with pytest.raises(ValueError):
            batch_loss(torch.eye(3, dtype=torch.float64), [0, 1, 2])


class TestAggregate:
    def test_hand_example(self):
        sim = np.array([[1, 0.9, 0.1], [0.9, 1, 0.2], [0.1, 0.2, 1]])
        assert aggregate_index(sim) == 0

    @pytest.mark.parametrize("k", [2, 3, 6])
    def test_all_equal_picks_first(self, k):
        sim = np.full((k, k), 0.3)
        np.fill_diagonal(sim, 1.0)
        assert aggregate_index(sim) == 0

    def test_needs_two(self):
        with pytest.raises(ValueError):
            aggregate_index(np.ones((1, 1)))

    def test_random_matrices_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            k = int(rng.integers(2, 9))
            # coarse grid values make ties and exactly-average entries common
            s = rng.integers(-2, 3, size=(k, k)) / 2
            sim = np.triu(s, 1) + np.triu(s, 1).T + np.eye(k)
            assert aggregate_index(sim) == aggregate_brute_force(sim.tolist())

    def test_selects_an_input(self):
        v = unit_rows(np.random.default_rng(1), 7, 5)
        out = aggregate(v)
        assert any(np.array_equal(out, row) for row in v)

    def test_permutation_equivariant_without_ties(self):
        rng = np.random.default_rng(2)
        v = unit_rows(rng, 8, 4)
        perm = rng.permutation(8)
        assert perm[aggregate_index(v[perm] @ v[perm].T)] == aggregate_index(v @ v.T)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(CorpusSpec(n_writers=4, lines_per_writer=[6, 6, 6, 3], height=16), 0)


class TestEncoder:
    def test_unit_norm_and_dimension(self, corpus):
        enc = StyleEncoder(TINY).eval()
        short = encode(enc, corpus.samples[0].image[:, :20])
        long = encode(enc, np.tile(corpus.samples[0].image, (1, 8)))
        assert short.shape == long.shape == (8,)
        assert np.linalg.norm(short) == pytest.approx(1.0, abs=1e-6)
        assert np.linalg.norm(long) == pytest.approx(1.0, abs=1e-6)

    def test_deterministic(self, corpus):
        enc = StyleEncoder(TINY)
        img = corpus.samples[1].image
        assert np.array_equal(encode(enc, img), encode(enc, img))

    def test_padding_invariance(self, corpus):
        enc = StyleEncoder(TINY).eval()
        imgs = [corpus.samples[0].image, corpus.samples[2].image]
        with torch.no_grad():
            both = enc(*collate(imgs))
            alone = enc(*collate(imgs[:1]))
        torch.testing.assert_close(both[0], alone[0], atol=1e-5, rtol=1e-5)

    def test_extract_uses_min_k(self, corpus):
        enc = StyleEncoder(TINY)
        imgs = [s.image for s in corpus.samples[:5]]
        e = extract_writer_embedding(enc, imgs, k=32)
        assert any(np.allclose(e, row) for row in encode_images(enc, imgs))

    def test_extract_table(self, corpus):
        enc = StyleEncoder(TINY)
        ids = {w: corpus.lines_of(w) for w in range(4)}
        table = extract_table(enc, corpus.samples, ids, 5, k=4)
        assert table.shape == (5, 8)
        np.testing.assert_allclose(np.linalg.norm(table, axis=1), 1.0, atol=1e-5)

    def test_sampler_contract(self):
        ids = {w: list(range(10 * w, 10 * w + 10)) for w in range(12)}
        ids[12] = [500]
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch = sample_writer_batch(ids, 36, 6, rng)
            owners = [i // 10 for i in batch]
            assert 500 not in batch
            assert len(set(owners)) == 6
            assert all(owners.count(w) >= 2 for w in set(owners))
            assert 36 <= len(batch) < 36 + 6

    def test_loss_decreases(self, corpus):
        ids = {w: corpus.lines_of(w) for w in range(4)}
        cfg = EncoderTrainConfig(iterations=60, batch_size=12, writers_per_batch=4, lr=1e-3)
        _, losses = train_encoder(corpus.samples, ids, TINY, cfg, AugmentationConfig.identity(), seed=0)
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

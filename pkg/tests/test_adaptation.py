import numpy as np
import pytest
import torch

from wsnet.adaptation import (
    AdaptationResult,
    AdaptationRun,
    AdaptationSettings,
    cer_reduction,
    finetune_baseline,
    kfold,
    lines_cer,
    make_runs,
    optimize_embedding,
    run_adaptation_suite,
    select_embedding,
    shuffle_sensitivity,
    summarize,
    writer_means,
)
from wsnet.dataset import AugmentationConfig, CorpusSpec, build_corpus
from wsnet.recognizer import NetConfig, build_network
from wsnet.wsb import init_embeddings

TINY = NetConfig(conv_block_channels=[4, 4, 8, 8], rnn_hidden=8, height=16)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(CorpusSpec(n_writers=3, lines_per_writer=[12, 12, 12], text_min=3, text_max=5, height=16), 0)


@pytest.fixture
def nets():
    table = init_embeddings(6, 16, seed=0)
    return build_network(TINY, "baseline", seed=0), build_network(TINY, "single_adain", table, seed=1)


class TestCERReduction:
    @pytest.mark.parametrize("a,b,expected", [(0.05, 0.10, -0.5), (0.1, 0.1, 0.0), (0.2, 0.1, 1.0)])
    def test_values(self, a, b, expected):
        assert cer_reduction(a, b) == pytest.approx(expected)

    def test_zero_baseline(self):
        with pytest.raises(ZeroDivisionError):
            cer_reduction(0.1, 0.0)

    def test_sign(self):
        rng = np.random.default_rng(0)
        for a, b in rng.uniform(0.01, 1, size=(100, 2)):
            assert (cer_reduction(a, b) < 0) == (a < b)


class TestRuns:
    def test_nested_and_disjoint(self):
        for run in make_runs(3, 600, runs=5, seed=1):
            sizes = sorted(run.clusters)
            assert sizes == [16, 32, 64, 128, 256]
            assert all(set(run.clusters[a]) < set(run.clusters[b]) for a, b in zip(sizes, sizes[1:]))
            assert len(run.test_ids) == 256
            assert not set(run.test_ids) & set(run.clusters[256])

    def test_runs_differ(self):
        a, b = make_runs(0, 600, runs=2)
        assert a.clusters[16] != b.clusters[16]

    def test_too_few_lines(self):
        with pytest.raises(ValueError):
            make_runs(0, 300, runs=1)

    def test_validation(self):
        with pytest.raises(ValueError):
            AdaptationRun(0, 0, {2: [0, 1], 4: [0, 2, 3, 4]}, [9])
        with pytest.raises(ValueError):
            AdaptationRun(0, 0, {2: [0, 1], 4: [0, 1, 2, 3]}, [3])


class TestSelect:
    def test_one_candidate_per_group(self, corpus, nets):
        _, net = nets
        rng = np.random.default_rng(0)
        centres = rng.normal(size=(50, 16)) * 10
        table = np.repeat(centres, 3, axis=0) + rng.normal(size=(150, 16)) * 0.01
        e, info = select_embedding(net, table, corpus.samples[:4], k_clusters=50, seed=0)
        groups = {c // 3 for c in info["candidates"]}
        assert len(info["candidates"]) == 50 and len(groups) == 50
        assert info["cer"] == min(info["cers"])
        assert np.array_equal(e, table[info["chosen"]].astype(np.float32))

    def test_deterministic_and_small_table(self, corpus, nets):
        _, net = nets
        table = net.table.weight.detach().numpy()
        a, ia = select_embedding(net, table, corpus.samples[:4], k_clusters=50, seed=3)
        b, ib = select_embedding(net, table, corpus.samples[:4], k_clusters=50, seed=3)
        assert np.array_equal(a, b) and ia == ib
        assert len(ia["candidates"]) == 6

    def test_empty(self, nets):
        with pytest.raises(ValueError):
            select_embedding(nets[1], np.zeros((3, 16)), [])


class TestOptimize:
    def test_zero_iterations_returns_mean(self, corpus, nets):
        _, net = nets
        table = net.table.weight.detach().numpy()
        e, info = optimize_embedding(net, table, corpus.samples[:4], iterations=0)
        np.testing.assert_array_equal(e, table.mean(0))
        assert info["evaluations"] == 0

    def test_descends_and_leaves_network_alone(self, corpus, nets):
        _, net = nets
        table = net.table.weight.detach().numpy().copy()
        before = {k: v.clone() for k, v in net.state_dict().items()}
        e, info = optimize_embedding(net, table, corpus.samples[:6], iterations=10,
                                     augmentation=AugmentationConfig(), seed=0)
        assert info["best_loss"] <= info["initial_loss"]
        assert not info["flagged"] or np.all(np.isfinite(e))
        after = net.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert all(p.requires_grad for p in net.parameters())
        assert e.shape == (16,)

    def test_deterministic(self, corpus, nets):
        _, net = nets
        table = net.table.weight.detach().numpy()
        a, _ = optimize_embedding(net, table, corpus.samples[:4], iterations=5, seed=2)
        b, _ = optimize_embedding(net, table, corpus.samples[:4], iterations=5, seed=2)
        assert np.array_equal(a, b)


class TestFinetune:
    def test_folds_partition(self):
        folds = kfold(18, 4, seed=0)
        flat = sorted(i for f in folds for i in f)
        assert flat == list(range(18))
        with pytest.raises(ValueError):
            kfold(3, 4)

    def test_zero_grid_is_identity(self, corpus, nets):
        base, _ = nets
        model, info = finetune_baseline(base, corpus.samples[:8], grid=(0,))
        assert info["chosen"] == 0
        for a, b in zip(base.state_dict().values(), model.state_dict().values()):
            assert torch.equal(a, b)

    def test_cv_choice_and_determinism(self, corpus, nets):
        base, _ = nets
        lines = corpus.samples[:8]
        m1, i1 = finetune_baseline(base, lines, grid=(0, 2, 4), batch_size=4, lr=1e-3, seed=5)
        m2, i2 = finetune_baseline(base, lines, grid=(0, 2, 4), batch_size=4, lr=1e-3, seed=5)
        assert i1 == i2
        assert i1["validation_cer"][i1["chosen"]] == min(i1["validation_cer"].values())
        assert i1["validation_cer"][i1["chosen"]] <= i1["validation_cer"][0]
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)


class TestSuite:
    def test_row_count_and_aggregates(self, corpus, nets, caplog):
        base, net = nets
        writers = {w: [corpus.samples[i] for i in corpus.lines_of(w)] for w in range(3)}
        writers[9] = writers[0][:4]  # too few lines, skipped
        settings = AdaptationSettings(runs_per_writer=2, cluster_sizes=(4, 8), test_size=4,
                                      methods=("select", "optimize", "finetune"), k_clusters=3,
                                      lbfgs_iterations=2, finetune_grid=(0, 1), finetune_batch_size=2)
        table = net.table.weight.detach().numpy()
        results = run_adaptation_suite(writers, base, net, table, settings)
        assert len(results) == 3 * 2 * 3 * 2
        assert "skipping writer 9" in caplog.text
        means = writer_means(results)
        for row in means:
            vals = [r.reduction for r in results if (r.writer, r.method, r.cluster_size)
                    == (row["writer"], row["method"], row["cluster_size"])]
            assert row["mean_reduction"] == pytest.approx(np.mean(vals))
        summary = summarize(results)
        assert len(summary) == 3 * 2
        assert all(r["min"] <= r["median"] <= r["max"] for r in summary)

    def test_result_row(self):
        r = AdaptationResult(1, 0, "optimize", "single_adain", 16, 0.05, 0.1)
        assert r.row()["reduction"] == pytest.approx(-0.5)


class TestShuffle:
    def test_baseline_ratio_one(self, corpus, nets):
        base, _ = nets
        out = shuffle_sensitivity(base, corpus.samples, list(range(10)), seed=0)
        assert out["ratio"] == 1.0

    def test_identity_permutation(self, corpus, nets):
        _, net = nets
        out = shuffle_sensitivity(net, corpus.samples, list(range(10)), permutation=list(range(10)))
        assert out["ratio"] == 1.0

    def test_lines_cer_embedding_matches_wsi(self, corpus, nets):
        _, net = nets
        lines = [s for s in corpus.samples if s.wsi == 2][:3]
        by_row = lines_cer(net, lines, net.table.weight[2].detach().numpy())
        assert by_row == lines_cer(net, lines, wsi=[2, 2, 2])

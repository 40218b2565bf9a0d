import itertools
import math

import numpy as np
import pytest
import torch

from oracles import ctc_brute_force, levenshtein_table
from wsnet.recognizer import (
    CTCAlignmentError,
    NetConfig,
    adain_layers,
    build_network,
    cer,
    collate,
    corpus_cer,
    ctc_loss,
    decode_images,
    greedy_decode,
    load_checkpoint,
    output_length,
    save_checkpoint,
)
from wsnet.wsb import init_embeddings

TINY = NetConfig(conv_block_channels=[4, 4, 8, 8], rnn_hidden=8, height=16)


def random_images(rng, widths, height=16):
    return [rng.integers(0, 256, size=(height, w), dtype=np.uint8) for w in widths]


class TestBuildNetwork:
    def test_site_counts(self):
        table = init_embeddings(5, 16, seed=0)
        assert len(adain_layers(build_network(TINY, "baseline"))) == 0
        single = build_network(TINY, "single_adain", table)
        assert len(adain_layers(single)) == 1
        assert len(single.norms) == 5
        assert single.adain_sites == (3,)
        table = init_embeddings(5, 16, seed=0)
        every = build_network(TINY, "all_adain", table)
        layers = adain_layers(every)
        assert len(layers) == 5
        assert len({id(m.weight_gamma) for m in layers}) == 5
        assert all(every.table is table for _ in layers)

    def test_adain_needs_table(self):
        with pytest.raises(ValueError):
            build_network(TINY, "single_adain")

    def test_paper_defaults(self):
        cfg = NetConfig()
        assert cfg.conv_block_channels == [64, 128, 256, 512]
        assert cfg.rnn_branch_scales == [1.0, 0.5, 0.25]
        assert cfg.rnn_hidden == 256
        assert cfg.norm_layer_count == 5


class TestForward:
    @pytest.mark.parametrize("width,frames", [(128, 32), (130, 33), (1, 1), (5, 2)])
    def test_output_length(self, width, frames):
        net = build_network(TINY, "baseline", seed=0)
        x, w = collate(random_images(np.random.default_rng(0), [width]))
        logits, lengths = net(x, w)
        assert output_length(width) == frames
        assert int(lengths[0]) == frames
        assert logits.shape == (1, frames, 31)

    def test_baseline_ignores_wsi(self):
        net = build_network(TINY, "baseline", seed=0).eval()
        x, w = collate(random_images(np.random.default_rng(1), [40, 52]))
        a, _ = net(x, w, torch.tensor([0, 1]))
        b, _ = net(x, w, torch.tensor([7, 3]))
        assert torch.equal(a, b)

    def test_conditioned_requires_wsi(self):
        net = build_network(TINY, "single_adain", init_embeddings(3, 16, seed=0))
        x, w = collate(random_images(np.random.default_rng(1), [40]))
        with pytest.raises(ValueError):
            net(x, w)
        with pytest.raises(IndexError):
            net(x, w, torch.tensor([3]))

    def test_length_independent_of_content_and_wsi(self):
        net = build_network(TINY, "single_adain", init_embeddings(3, 16, seed=0)).eval()
        rng = np.random.default_rng(2)
        for wsi in range(3):
            x, w = collate(random_images(rng, [37]))
            _, lengths = net(x, w, torch.tensor([wsi]))
            assert int(lengths[0]) == 10

    def test_padding_does_not_change_output(self):
        net = build_network(TINY, "single_adain", init_embeddings(3, 16, seed=0), seed=0).eval()
        imgs = random_images(np.random.default_rng(3), [23, 61])
        x, w = collate(imgs)
        with torch.no_grad():
            both, lengths = net(x, w, torch.tensor([1, 2]))
            alone, _ = net(*collate(imgs[:1]), torch.tensor([1]))
        torch.testing.assert_close(both[0, : int(lengths[0])], alone[0], atol=1e-5, rtol=1e-5)


class TestCTC:
    def test_single_frame(self):
        # charset {a}: logits uniform over {blank, a}
        loss = ctc_loss(torch.zeros(1, 2, dtype=torch.float64), [1])
        assert float(loss) == pytest.approx(-math.log(0.5), rel=1e-12)

    def test_repeat_needs_separator(self):
        with pytest.raises(CTCAlignmentError):
            ctc_loss(torch.zeros(2, 2), [1, 1])

    def test_matches_path_enumeration_sample(self):
        rng = np.random.default_rng(0)
        for t, c, target in [(3, 3, [1, 2]), (4, 2, [1, 1]), (5, 4, [3, 1, 3]), (2, 2, [])]:
            logits = rng.normal(size=(t, c))
            got = float(ctc_loss(torch.tensor(logits), target))
            assert got == pytest.approx(ctc_brute_force(logits, target), rel=1e-6)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = torch.tensor(rng.normal(size=(5, 3)), requires_grad=True)
        target = [1, 2, 2]
        ctc_loss(logits, target).sum().backward()
        h = 1e-4
        num = np.zeros((5, 3))
        base = logits.detach().numpy()
        for i, j in itertools.product(range(5), range(3)):
            up, down = base.copy(), base.copy()
            up[i, j] += h
            down[i, j] -= h
            num[i, j] = (float(ctc_loss(torch.tensor(up), target)) - float(ctc_loss(torch.tensor(down), target))) / (2 * h)
        np.testing.assert_allclose(logits.grad.numpy(), num, rtol=1e-3, atol=1e-7)


class TestDecode:
    @pytest.mark.parametrize("path,expected", [([0, 1, 1, 0, 2], "ab"), ([0, 0, 0], ""), ([1, 0, 1], "aa"),
                                               ([1, 1, 1], "a")])
    def test_collapse(self, path, expected):
        assert greedy_decode(np.array(path), charset="ab") == expected

    def test_from_scores(self):
        scores = np.eye(3)[[0, 1, 1, 0, 2]]
        assert greedy_decode(scores, charset="ab") == "ab"


class TestCER:
    @pytest.mark.parametrize("hyp,ref,expected", [("abc", "abc", 0.0), ("ab", "abc", 1 / 3), ("", "abc", 1.0),
                                                  ("xbcd", "abc", 2 / 3)])
    def test_values(self, hyp, ref, expected):
        assert cer(hyp, ref) == pytest.approx(expected)

    def test_matches_table(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = "".join(rng.choice(list("abc"), size=rng.integers(0, 7)))
            b = "".join(rng.choice(list("abc"), size=rng.integers(1, 7)))
            assert cer(a, b) == pytest.approx(levenshtein_table(a, b) / len(b))
            assert (cer(a, b) == 0) == (a == b)

    def test_corpus_aggregate(self):
        assert corpus_cer([("ab", "abc"), ("x", "")]) == pytest.approx(2 / 3)
        with pytest.raises(ValueError):
            cer("a", "")


def test_checkpoint_roundtrip(tmp_path):
    table = init_embeddings(4, 16, seed=0)
    net = build_network(TINY, "single_adain", table, seed=0).eval()
    save_checkpoint(tmp_path / "ck.pt", net, meta={"k": 1})
    loaded, payload = load_checkpoint(tmp_path / "ck.pt")
    assert payload["meta"] == {"k": 1} and payload["ed"] == 16
    imgs = random_images(np.random.default_rng(0), [30])
    assert decode_images(net, imgs, [2]) == decode_images(loaded, imgs, [2])
    x, w = collate(imgs)
    with torch.no_grad():
        torch.testing.assert_close(net(x, w, torch.tensor([2]))[0], loaded(x, w, torch.tensor([2]))[0])

import hashlib
import shutil
from pathlib import Path

import pytest
import yaml

from wsnet.cli import main
from wsnet.config import ConfigError, load_config

TINY = {
    "mode": "single_adain",
    "ed": 16,
    "init_mode": "pretrained",
    "seeds": [0],
    "dataset": {"corpus": {"n_writers": 4, "lines_min": 6, "lines_max": 30, "text_min": 3, "text_max": 5,
                           "height": 16},
                "adaptation_writers": 2, "adaptation_lines": 12},
    "net": {"conv_block_channels": [4, 4, 8, 8], "rnn_hidden": 8, "height": 16},
    "plan": {"recipe": "pretrained", "scale": 0.00002, "batch_size": 4},
    "encoder": {"model": {"conv_channels": [4, 4, 8, 8], "attention_blocks": 1, "attention_heads": 2,
                          "attention_width": 16, "ed": 16, "height": 16},
                "train": {"iterations": 5, "batch_size": 8, "writers_per_batch": 4}, "k": 4},
    "adaptation": {"runs_per_writer": 1, "cluster_sizes": [2, 4], "test_size": 4, "k_clusters": 3,
                   "lbfgs_iterations": 2, "finetune_grid": [0, 1], "finetune_batch_size": 2},
    "adaptation_baseline": "base",
}
BASELINE = ["--set", "mode=baseline", "--set", "name=base", "--set", "init_mode=normal",
            "--set", "plan.recipe=normal"]


def write_config(directory: Path, **changes) -> Path:
    data = {**TINY, "output_dir": str(directory / "out"), **changes}
    path = directory / "exp.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def digest(directory: Path) -> dict[str, str]:
    return {str(p.relative_to(directory)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def run(*argv):
    return main([str(a) for a in argv])


def error_line(capsys) -> str:
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert run("generate", "-c", cfg) == 0
    assert run("train-encoder", "-c", cfg) == 0
    assert run("extract-embeddings", "-c", cfg) == 0
    assert run("train", "-c", cfg) == 0
    assert run("train", "-c", cfg, *BASELINE) == 0
    assert run("evaluate", "-c", cfg) == 0
    assert run("evaluate", "-c", cfg, *BASELINE) == 0
    return root, cfg


class TestConfig:
    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("net: {colour: red}\n")
        with pytest.raises(ConfigError, match="colour"):
            load_config(path)

    def test_overrides_typed(self):
        cfg = load_config(None, ["plan.scale=0.5", "seeds=[1, 2]", "augmentation.patch_mask.enabled=false"])
        assert cfg.plan.scale == 0.5 and cfg.seeds == [1, 2] and cfg.augmentation.patch_mask.enabled is False

    def test_encoder_ed_must_match(self):
        with pytest.raises(ConfigError):
            load_config(None, ["ed=64"])

    def test_hash_tracks_sections(self):
        a, b = load_config(None), load_config(None, ["plan.scale=0.5"])
        assert a.hashes()["dataset"] == b.hashes()["dataset"]
        assert a.hashes()["model"] != b.hashes()["model"]


class TestGenerate:
    def test_idempotent_and_creates_dirs(self, tmp_path):
        cfg = write_config(tmp_path, output_dir=str(tmp_path / "a" / "b"))
        assert run("generate", "-c", cfg) == 0
        first = digest(tmp_path / "a")
        assert run("generate", "-c", cfg) == 0
        assert digest(tmp_path / "a") == first
        assert (tmp_path / "a" / "b" / "data" / "partition.tsv").exists()

    def test_invalid_charset(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run("generate", "-c", cfg, "--set", "dataset.corpus.charset=abc!") != 0
        assert error_line(capsys).startswith("error[charset_error]")

    def test_config_error_is_one_line(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run("generate", "-c", cfg, "--set", "dataset.bogus=1") != 0
        assert error_line(capsys).startswith("error[config_error]")


class TestCompatibility:
    def test_evaluate_refuses_changed_plan(self, pipeline, capsys):
        _, cfg = pipeline
        assert run("evaluate", "-c", cfg, "--set", "plan.scale=0.00003") != 0
        assert error_line(capsys).startswith("error[hash_mismatch]")

    def test_train_refuses_table_of_other_ed(self, pipeline, capsys):
        root, cfg = pipeline
        other = root / "out" / "encoder" / "ed32"
        other.mkdir(parents=True, exist_ok=True)
        shutil.copy(root / "out" / "encoder" / "ed16" / "table.bin", other / "table.bin")
        code = run("train", "-c", cfg, "--set", "ed=32", "--set", "encoder.model.ed=32", "--set", "name=ed32")
        assert code != 0
        assert error_line(capsys).startswith("error[ed_mismatch]")
        assert not (root / "out" / "runs" / "ed32" / "seed_0").exists()

    def test_missing_artifact(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run("train", "-c", cfg) != 0
        assert error_line(capsys).startswith("error[missing_artifact]")


class TestEvaluateAndAdapt:
    def test_eval_reports(self, pipeline):
        root, _ = pipeline
        for name in ("single_adain_ed16_pretrained", "base"):
            lines = (root / "out" / "runs" / name / "eval_report.tsv").read_text().splitlines()
            assert lines[0].split("\t")[:3] == ["run", "mode", "ed"]
            assert any("\ttst\tall\t" in line for line in lines)
            decode = (root / "out" / "runs" / name / "seed_0" / "decode.tsv").read_text().splitlines()
            assert decode[0].startswith("id\tsplit\twsi\thypothesis")

    def test_adapt_requested_clusters_only(self, pipeline):
        root, cfg = pipeline
        assert run("adapt", "-c", cfg, "--method", "optimize", "--clusters", "4") == 0
        rows = (root / "out" / "runs" / "single_adain_ed16_pretrained" / "adaptation" / "adaptation.tsv")
        rows = rows.read_text().splitlines()
        assert rows[0].split("\t") == ["writer", "run", "method", "setup", "cluster_size", "A", "B", "reduction"]
        assert len(rows) == 1 + 2
        assert all(r.split("\t")[2] == "optimize" and r.split("\t")[4] == "4" for r in rows[1:])


class TestReport:
    def test_tables_and_plots(self, pipeline, tmp_path, capsys):
        root, _ = pipeline
        (tmp_path / "empty").mkdir()
        runs = [root / "out" / "runs" / "single_adain_ed16_pretrained", root / "out" / "runs" / "base",
                tmp_path / "empty"]
        assert run("report", *runs, "--out", tmp_path / "r1") == 0
        assert "empty" in capsys.readouterr().err
        sweep = (tmp_path / "r1" / "ed_sweep.csv").read_text().splitlines()
        assert len(sweep) == 3
        for name in ("ed_sweep.png", "cluster_cer.png"):
            assert (tmp_path / "r1" / name).stat().st_size > 0
        assert run("report", *runs, "--out", tmp_path / "r2") == 0
        assert digest(tmp_path / "r1") == digest(tmp_path / "r2")

    def test_nothing_to_report(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert run("report", tmp_path / "empty", "--out", tmp_path / "r") != 0
        assert "missing_artifact" in capsys.readouterr().err.strip().splitlines()[-1]

"""Command-line entry point: generate, train-encoder, extract-embeddings, train, evaluate, adapt, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .adaptation import METHODS, run_adaptation_suite, summarize, writer_means
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .dataset import (
    CLUSTER_LABELS,
    CharsetError,
    CorpusSpec,
    build_corpus,
    load_corpus,
    load_partition,
    partition,
    save_partition,
    write_corpus,
)
from .glyphs import charset_hash
from .recognizer import build_network, corpus_cer, decode_images, load_checkpoint, save_checkpoint
from .recognizer import cer as line_cer
from .style_encoder import EncoderConfig, StyleEncoder, extract_table, separation, train_encoder
from .training import TrainingDiverged, scale_count, train
from .wsb import init_embeddings, load_table, save_table

log = logging.getLogger("wsnet")


class CommandError(Exception):
    """Failure with a machine-parsable category, reported as a single line."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# paths and manifests ----------------------------------------------------------------

def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def encoder_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "encoder" / f"ed{cfg.ed}"


def run_dir(cfg: ExperimentConfig, name: str | None = None) -> Path:
    return Path(cfg.output_dir) / "runs" / (name or cfg.run_name)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def read_json(path: Path) -> dict:
    if not path.exists():
        raise CommandError("missing_artifact", f"{path} does not exist; run the upstream command first")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_run_manifest(directory: Path, command: str, cfg: ExperimentConfig, overrides, extra=None) -> None:
    write_json(directory / "run_manifest.json", {
        "command": command,
        "config_hash": cfg.hashes()["config"],
        "hashes": cfg.hashes(),
        "seeds": cfg.seeds,
        "overrides": list(overrides),
        "config": cfg.to_dict(),
        **(extra or {}),
    })


def write_tsv(path: Path, rows: list[dict], columns: list[str] | None = None, delimiter: str = "\t") -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, columns, delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_tsv(path: Path, delimiter: str = "\t") -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f, delimiter=delimiter))


def expect(kind: str, found, wanted, what: str) -> None:
    if found != wanted:
        raise CommandError(kind, f"{what}: artifact has {found}, config expects {wanted}")


# artifact loading with compatibility checks --------------------------------------------

def load_data(cfg: ExperimentConfig, adaptation: bool = False):
    info = read_json(data_dir(cfg) / "dataset.json")
    expect("hash_mismatch", info["dataset_hash"], cfg.hashes()["dataset"], "dataset hash")
    expect("charset_mismatch", info["charset_hash"], charset_hash(cfg.dataset.corpus.charset), "charset hash")
    if adaptation:
        return load_corpus(data_dir(cfg) / "adapt.tsv", cfg.dataset.corpus.charset), info
    manifest = load_corpus(data_dir(cfg) / "corpus.tsv", cfg.dataset.corpus.charset)
    return manifest, load_partition(data_dir(cfg) / "partition.tsv"), info


def load_net(path: Path, cfg: ExperimentConfig, check_model_hash: bool = True):
    if not path.exists():
        raise CommandError("missing_artifact", f"{path} does not exist; run `wsnet train` first")
    net, payload = load_checkpoint(path)
    meta = payload["meta"]
    expect("charset_mismatch", payload["charset_hash"], charset_hash(cfg.dataset.corpus.charset), "charset hash")
    expect("hash_mismatch", meta.get("hashes", {}).get("dataset"), cfg.hashes()["dataset"], f"{path} dataset hash")
    if check_model_hash:
        expect("hash_mismatch", meta.get("hashes", {}).get("model"), cfg.hashes()["model"], f"{path} model hash")
        if net.mode != "baseline":
            expect("ed_mismatch", payload["ed"], cfg.ed, f"{path} embedding dimension")
    return net, payload


def ids_by_writer(samples, ids) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for i in ids:
        out.setdefault(samples[i].wsi, []).append(int(i))
    return out


# commands --------------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, args) -> None:
    out = data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.dataset.corpus
    manifest = build_corpus(spec, cfg.dataset.seed)
    write_corpus(manifest, out, "corpus.tsv")
    part = partition(manifest, cfg.dataset.tst_global_fraction, cfg.dataset.seed)
    save_partition(part, out / "partition.tsv")
    counts = {}
    for lab in CLUSTER_LABELS:
        writers = sorted(w for w, c in part.writer_cluster.items() if c == lab)
        counts[lab] = {"writers": len(writers), "trn": len(part.trn[lab]), "tst_c": len(part.tst_c[lab])}

    n_adapt = cfg.dataset.adaptation_writers
    if n_adapt:
        adapt_spec = CorpusSpec(**{**asdict(spec), "n_writers": n_adapt, "lines_per_writer":
                                   [cfg.dataset.adaptation_lines] * n_adapt})
        adapt = build_corpus(adapt_spec, cfg.dataset.seed + 1_000_003)
        # unseen writers get WSIs past the end of the training table
        for s in adapt.samples:
            s.wsi += spec.n_writers
        write_corpus(adapt, out, "adapt.tsv")
    write_json(out / "dataset.json", {
        "dataset_hash": cfg.hashes()["dataset"],
        "charset_hash": charset_hash(spec.charset),
        "n_writers": spec.n_writers,
        "n_lines": len(manifest),
        "tst_global": len(part.tst_global),
        "clusters": counts,
        "adaptation_writers": list(range(spec.n_writers, spec.n_writers + n_adapt)),
    })
    print(f"wrote {len(manifest)} lines of {spec.n_writers} writers to {out}")


def cmd_train_encoder(cfg: ExperimentConfig, args) -> None:
    manifest, part, _ = load_data(cfg)
    out = encoder_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    sec = cfg.encoder
    train_cfg = type(sec.train)(**{**asdict(sec.train), "iterations": scale_count(sec.train.iterations, sec.scale)})
    by_writer = ids_by_writer(manifest.samples, part.trn_all)
    encoder, losses = train_encoder(manifest.samples, by_writer, sec.model, train_cfg, cfg.augmentation, sec.seed)
    torch.save({"model": asdict(sec.model), "state_dict": encoder.state_dict(), "hashes": cfg.hashes()},
               out / "encoder.pt")
    with open(out / "encoder_log.jsonl", "w", encoding="utf-8") as f:
        for i, v in enumerate(losses):
            f.write(json.dumps({"iter": i + 1, "loss": v}) + "\n")
    extra = {}
    if (data_dir(cfg) / "adapt.tsv").exists():
        adapt, _ = load_data(cfg, adaptation=True)
        same, cross = separation(encoder, adapt.samples, ids_by_writer(adapt.samples, range(len(adapt))),
                                 seed=sec.seed)
        extra = {"heldout_same_writer_cosine": same, "heldout_cross_writer_cosine": cross,
                 "separation": same - cross}
        print(f"held-out cosine: same-writer {same:.3f}, cross-writer {cross:.3f}")
    write_run_manifest(out, "train-encoder", cfg, args.set, {"iterations": train_cfg.iterations, **extra})


def load_encoder(cfg: ExperimentConfig) -> tuple[StyleEncoder, str]:
    path = encoder_dir(cfg) / "encoder.pt"
    if not path.exists():
        raise CommandError("missing_artifact", f"{path} does not exist; run `wsnet train-encoder` first")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    expect("hash_mismatch", payload["hashes"]["encoder"], cfg.hashes()["encoder"], "encoder hash")
    encoder = StyleEncoder(EncoderConfig(**payload["model"]))
    encoder.load_state_dict(payload["state_dict"])
    encoder.eval()
    with open(path, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()[:16]
    return encoder, digest


def cmd_extract_embeddings(cfg: ExperimentConfig, args) -> None:
    manifest, part, _ = load_data(cfg)
    encoder, digest = load_encoder(cfg)
    expect("ed_mismatch", encoder.cfg.ed, cfg.ed, "encoder embedding dimension")
    rows = extract_table(encoder, manifest.samples, ids_by_writer(manifest.samples, part.trn_all),
                         manifest.n_writers, cfg.encoder.k, cfg.encoder.seed)
    path = encoder_dir(cfg) / "table.bin"
    save_table(path, rows, "pretrained", charset_hash(cfg.dataset.corpus.charset),
               {"encoder_hash": cfg.hashes()["encoder"], "dataset_hash": cfg.hashes()["dataset"]})
    write_json(encoder_dir(cfg) / "table.json", {"k": cfg.encoder.k, "seed": cfg.encoder.seed,
                                                  "encoder_checkpoint": digest, "rows": int(rows.shape[0])})
    print(f"wrote {rows.shape[0]} x {rows.shape[1]} embedding table to {path}")


def initial_table(cfg: ExperimentConfig, n_writers: int, seed: int):
    if cfg.mode == "baseline":
        return None
    if cfg.init_mode == "normal":
        return init_embeddings(n_writers, cfg.ed, "normal", seed=seed)
    path = encoder_dir(cfg) / "table.bin"
    if not path.exists():
        raise CommandError("missing_artifact", f"{path} does not exist; run `wsnet extract-embeddings` first")
    rows, header = load_table(path)
    expect("ed_mismatch", header["ed"], cfg.ed, "embedding table dimension")
    expect("charset_mismatch", header["charset_hash"], charset_hash(cfg.dataset.corpus.charset), "table charset")
    expect("hash_mismatch", header.get("encoder_hash"), cfg.hashes()["encoder"], "embedding table encoder hash")
    expect("hash_mismatch", header["n"], n_writers, "embedding table rows")
    return init_embeddings(n_writers, cfg.ed, "pretrained", rows)


def cmd_train(cfg: ExperimentConfig, args) -> None:
    manifest, part, _ = load_data(cfg)
    plan = cfg.plan.build()
    # fail on incompatible artifacts before any training starts
    for seed in cfg.seeds:
        initial_table(cfg, manifest.n_writers, seed)
    root = run_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.yaml")
    for seed in cfg.seeds:
        out = root / f"seed_{seed}"
        table = initial_table(cfg, manifest.n_writers, seed)
        net = build_network(cfg.net, cfg.mode, table, cfg.dataset.corpus.charset, seed=seed)
        res = train(net, manifest.samples, part.trn_all, plan, cfg.augmentation, seed, cfg.dataset.corpus.charset,
                    cfg.plan.adam, part.tst_global, out / "train_log.jsonl", out / "checkpoints")
        meta = {"hashes": cfg.hashes(), "seed": seed, "iterations": plan.total, "run": cfg.run_name}
        save_checkpoint(out / "final.pt", net, cfg.dataset.corpus.charset, meta)
        write_run_manifest(out, "train", cfg, args.set, {"seed": seed, "plan": plan.to_dict(),
                                                         "final_loss": res.losses[-1]})
        print(f"{cfg.run_name} seed {seed}: {plan.total} iterations, final loss {res.losses[-1]:.4f}")


def evaluate_run(cfg: ExperimentConfig, manifest, part, seed: int) -> list[dict]:
    out = run_dir(cfg) / f"seed_{seed}"
    net, _ = load_net(out / "final.pt", cfg)
    charset = cfg.dataset.corpus.charset
    samples = manifest.samples
    decode_ids = part.tst_global + part.tst_c_all
    hyps = decode_images(net, [samples[i].image for i in decode_ids],
                         [samples[i].wsi for i in decode_ids] if net.conditioned else None, charset=charset)
    hyp_of = dict(zip(decode_ids, hyps))
    write_tsv(out / "decode.tsv", [
        {"id": i, "split": "tst" if k < len(part.tst_global) else "tst_c", "wsi": samples[i].wsi,
         "hypothesis": hyp_of[i], "reference": samples[i].transcript,
         "cer": f"{line_cer(hyp_of[i], samples[i].transcript):.6f}"}
        for k, i in enumerate(decode_ids)])

    def group(ids):
        return corpus_cer((hyp_of[i], samples[i].transcript) for i in ids)

    common = {"run": cfg.run_name, "mode": cfg.mode, "ed": cfg.ed if cfg.mode != "baseline" else 0,
              "init_mode": cfg.init_mode if cfg.mode != "baseline" else "none", "seed": seed,
              "config_hash": cfg.hashes()["config"]}
    rows = [{**common, "split": "tst", "cluster": "all", "lines": len(part.tst_global),
             "cer": group(part.tst_global)}]
    for lab in CLUSTER_LABELS:
        for split, ids in (("tst", part.tst_of_cluster(lab)), ("tst_c", part.tst_c[lab])):
            if ids:
                rows.append({**common, "split": split, "cluster": lab, "lines": len(ids), "cer": group(ids)})
    write_json(out / "eval_report.json", {"rows": rows})
    return rows


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    manifest, part, _ = load_data(cfg)
    rows = []
    for seed in cfg.seeds:
        rows.extend(evaluate_run(cfg, manifest, part, seed))
    write_tsv(run_dir(cfg) / "eval_report.tsv", rows)
    for r in rows:
        if r["split"] == "tst" and r["cluster"] == "all":
            print(f"{r['run']} seed {r['seed']}: TST CER {r['cer']:.4f}")


def cmd_adapt(cfg: ExperimentConfig, args) -> None:
    settings = cfg.adaptation
    methods = tuple(m for spec in (args.method or []) for m in spec.split(",")) or settings.methods
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise CommandError("usage_error", f"unknown methods {bad}; choose from {METHODS}")
    if args.clusters:
        sizes = tuple(int(c) for c in args.clusters.split(","))
        settings = type(settings)(**{**asdict(settings), "cluster_sizes": sizes})
    settings = type(settings)(**{**asdict(settings), "methods": methods})
    seed = cfg.seeds[0]
    adapt, _ = load_data(cfg, adaptation=True)
    writers: dict[int, list] = {}
    for s in adapt.samples:
        writers.setdefault(s.wsi, []).append(s)

    conditioned = table = encoder = None
    if any(m != "finetune" for m in methods):
        if cfg.mode == "baseline":
            raise CommandError("config_error", "embedding methods need a conditioned mode")
        conditioned, _ = load_net(run_dir(cfg) / f"seed_{seed}" / "final.pt", cfg)
        table = conditioned.table.weight.detach().numpy().copy()
    if "encode" in methods:
        encoder, _ = load_encoder(cfg)
    if not cfg.adaptation_baseline:
        raise CommandError("config_error", "adaptation_baseline must name the baseline run")
    baseline, payload = load_net(run_dir(cfg, cfg.adaptation_baseline) / f"seed_{seed}" / "final.pt", cfg,
                                 check_model_hash=False)
    if baseline.mode != "baseline":
        raise CommandError("config_error", f"run {cfg.adaptation_baseline!r} is not a baseline")

    results = run_adaptation_suite(writers, baseline, conditioned, table, settings, cfg.mode, cfg.augmentation,
                                   encoder, cfg.dataset.corpus.charset)
    out = run_dir(cfg) / "adaptation"
    write_tsv(out / "adaptation.tsv", [r.row() for r in results],
              ["writer", "run", "method", "setup", "cluster_size", "A", "B", "reduction"])
    write_tsv(out / "writer_means.tsv", writer_means(results))
    summary = summarize(results)
    write_tsv(out / "adaptation_summary.tsv", summary)
    write_run_manifest(out, "adapt", cfg, args.set, {"seed": seed, "methods": list(methods),
                                                      "cluster_sizes": list(settings.cluster_sizes)})
    for r in summary:
        print(f"{r['method']:>9} {r['cluster_size']:>4} lines: median reduction {r['median']:+.3f}")


def collect_reports(run_dirs: list[Path]) -> tuple[list[dict], list[dict], list[str]]:
    evals, adapts, missing = [], [], []
    for d in run_dirs:
        if not d.is_dir():
            missing.append(str(d))
            continue
        found = False
        for path in sorted(d.rglob("eval_report.tsv")):
            evals.extend(read_tsv(path))
            found = True
        for path in sorted(d.rglob("writer_means.tsv")):
            adapts.extend(read_tsv(path))
            found = True
        if not found:
            log.warning("%s holds no completed reports; skipped", d)
            missing.append(str(d))
    return evals, adapts, missing


def cmd_report(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evals, adapts, missing = collect_reports([Path(p) for p in args.runs])
    if missing:
        print(f"missing or empty runs: {', '.join(missing)}", file=sys.stderr)
    if not evals and not adapts:
        raise CommandError("missing_artifact", "no completed runs to report")
    if evals:
        # seed-averaged TST CER per (mode, init mode, ED)
        groups: dict[tuple, list[float]] = {}
        for r in evals:
            if r["split"] == "tst" and r["cluster"] == "all":
                groups.setdefault((r["mode"], r["init_mode"], int(r["ed"])), []).append(float(r["cer"]))
        sweep = [{"mode": m, "init_mode": i, "ed": e, "seeds": len(v), "cer": float(np.mean(v)),
                  "cer_std": float(np.std(v))} for (m, i, e), v in sorted(groups.items())]
        write_tsv(out / "ed_sweep.csv", sweep, delimiter=",")
        plotting.plot_ed_sweep(out / "ed_sweep.csv", out / "ed_sweep.png")
        clusters: dict[tuple, list[float]] = {}
        for r in evals:
            if r["cluster"] != "all":
                clusters.setdefault((r["run"], r["split"], int(r["cluster"])), []).append(float(r["cer"]))
        rows = [{"run": run, "split": s, "cluster": c, "seeds": len(v), "cer": float(np.mean(v))}
                for (run, s, c), v in sorted(clusters.items())]
        write_tsv(out / "cluster_cer.csv", rows, ["run", "split", "cluster", "seeds", "cer"], delimiter=",")
        plotting.plot_cluster_cer(out / "cluster_cer.csv", out / "cluster_cer.png")
    if adapts:
        write_tsv(out / "adaptation_writers.csv", adapts, delimiter=",")
        plotting.plot_adaptation_boxes(out / "adaptation_writers.csv", out / "adaptation_box.png")
    print(f"report written to {out}")


# argument parsing -----------------------------------------------------------------------

COMMANDS = {
    "generate": cmd_generate,
    "train-encoder": cmd_train_encoder,
    "extract-embeddings": cmd_extract_embeddings,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "adapt": cmd_adapt,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="experiment YAML file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. plan.scale=0.01 (repeatable)")
        if name == "adapt":
            p.add_argument("--method", action="append", help=f"comma-separated subset of {','.join(METHODS)}")
            p.add_argument("--clusters", help="comma-separated adaptation set sizes, e.g. 16,256")
    p = sub.add_parser("report")
    p.add_argument("runs", nargs="+", help="run directories (searched recursively for reports)")
    p.add_argument("--out", required=True, help="directory for CSV tables and plots")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "report":
            cmd_report(args)
        else:
            cfg = load_config(args.config, args.set)
            COMMANDS[args.command](cfg, args)
    except CommandError as err:
        return fail(err.category, str(err))
    except ConfigError as err:
        return fail("config_error", str(err))
    except CharsetError as err:
        return fail("charset_error", str(err))
    except TrainingDiverged as err:
        return fail("training_diverged", str(err))
    except (OSError, ValueError) as err:
        return fail("runtime_error", f"{type(err).__name__}: {err}")
    return 0


def fail(category: str, message: str) -> int:
    print(f"error[{category}]: {' '.join(message.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())

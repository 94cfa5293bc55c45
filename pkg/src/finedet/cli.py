"""Command-line entry point: ``finedet {encode,gen,train,eval,demo}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import io
import json
import os
import sys
from importlib import resources

import numpy as np

from finedet.config import RunConfig, load_config
from finedet.correlation import CorrelationMatrix
from finedet.errors import FinedetError, NumericalError, ValidationError
from finedet.harness import synth
from finedet.harness.train import (ABLATIONS, BASELINE, Checkpoint, TrainingDiverged, evaluate,
                                   train)
from finedet.taxonomy import (build_semantic_correlation, parse_partition, parse_taxonomy,
                              serialize_partition, serialize_taxonomy)
from finedet.visual_corr import (ClassEmbeddingTable, ThresholdRule, hard_assign, kmeans_superclasses,
                                 soft_assign)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2
ENCODE_TOL = 1e-6
METRIC_KEYS = ("coarse_map50", "coarse_map50_95", "fine_map50", "fine_map50_95", "fine_corloc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def fixture_text(name: str) -> str:
    return resources.files("finedet.fixtures").joinpath(name).read_text(encoding="utf-8")


def _read(path) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None


def _write(path, text) -> str:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _taxonomy(cfg: RunConfig):
    """Taxonomy and partition from the config paths, or the bundled toy pair."""
    if bool(cfg.paths.taxonomy) != bool(cfg.paths.partition):
        raise ValidationError("[paths] taxonomy and partition must be given together")
    if cfg.paths.taxonomy:
        graph = parse_taxonomy(_read(cfg.paths.taxonomy))
        return graph, parse_partition(_read(cfg.paths.partition), graph)
    graph = parse_taxonomy(fixture_text("toy.taxonomy"))
    return graph, parse_partition(fixture_text("toy.partition"), graph)


def _stamp(doc: dict, args) -> dict:
    if not args.no_timestamp:
        doc["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return doc


def _print_table(header, rows, out=None):
    w = csv.writer(out or sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


# --- encode ---------------------------------------------------------------------

def encode_correlation(cfg: RunConfig) -> tuple[CorrelationMatrix, CorrelationMatrix | None]:
    """The configured correlation, plus the coarse-to-super-class map when k-means is on."""
    graph, part = _taxonomy(cfg)
    kind = cfg.train.correlation
    if kind == "semantic":
        return build_semantic_correlation(graph, part), None
    text = _read(cfg.paths.embeddings) if cfg.paths.embeddings else fixture_text("toy.embeddings")
    emb = ClassEmbeddingTable.from_text(text)
    coarse, fine = emb.select(part.coarse), emb.select(part.fine)
    if cfg.superclasses:
        model = kmeans_superclasses(coarse, cfg.superclasses, cfg.train.seed, fine, cfg.train.beta)
        if kind == "visual-soft":
            return model.fine_assignment, model.coarse_assignment
        centroids = ClassEmbeddingTable(model.coarse_assignment.row_ids, model.centroids)
        rule = ThresholdRule(cfg.train.theta_factor, cfg.train.nearest)
        return hard_assign(centroids, fine, rule), model.coarse_assignment
    if kind == "visual-hard":
        return hard_assign(coarse, fine, ThresholdRule(cfg.train.theta_factor, cfg.train.nearest)), None
    return soft_assign(coarse, fine, cfg.train.beta), None


def cmd_encode(cfg: RunConfig, args) -> int:
    corr, groups = encode_correlation(cfg)
    sums = corr.column_sums()
    _print_table(["fine_class", "column_sum"], [(c, f"{s:.12f}") for c, s in zip(corr.col_ids, sums)])
    if corr.kind == "visual-soft":
        err = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
        print(f"max_column_deviation\t{err:.3e}")
        if err > ENCODE_TOL:
            raise NumericalError(f"soft correlation columns deviate from 1 by {err:.3g}")
    os.makedirs(cfg.out, exist_ok=True)
    path = _write(os.path.join(cfg.out, "correlation.txt"), corr.to_text())
    print(f"wrote\t{path}")
    if groups is not None:
        print(f"wrote\t{_write(os.path.join(cfg.out, 'superclasses.txt'), groups.to_text())}")
    return EXIT_OK


# --- gen ------------------------------------------------------------------------

def _generate(cfg: RunConfig) -> synth.SyntheticDataset:
    graph = part = None
    if cfg.paths.taxonomy or cfg.paths.partition:
        graph, part = _taxonomy(cfg)
    return synth.generate_dataset(cfg.generator, cfg.train.seed, graph, part)


def _dataset(cfg: RunConfig) -> synth.SyntheticDataset:
    if cfg.paths.dataset:
        return synth.load_dataset(cfg.paths.dataset)
    return _generate(cfg)


def cmd_gen(cfg: RunConfig, args) -> int:
    ds = _generate(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    _print_table(["level", "classes", "train_scenes", "test_scenes"], ds.statistics())
    path = os.path.join(cfg.out, "dataset.fgds")
    synth.save_dataset(ds, path)
    _write(os.path.join(cfg.out, "taxonomy.txt"), serialize_taxonomy(ds.graph))
    _write(os.path.join(cfg.out, "partition.txt"), serialize_partition(ds.partition))
    _write(os.path.join(cfg.out, "embeddings.txt"), ds.embeddings.to_text())
    print(f"wrote\t{path}")
    return EXIT_OK


# --- train / eval ---------------------------------------------------------------

def write_metrics(out_dir, runs: dict, cfg: RunConfig, args, command: str) -> tuple[str, str]:
    """metrics.json (full reports, comparison table, config echo) and metrics.csv."""
    comparison = [{"ablation": name, **{k: rep[k] for k in METRIC_KEYS}} for name, rep in runs.items()]
    doc = _stamp({"command": command, "config": cfg.to_text(), "runs": runs,
                  "comparison": comparison}, args)
    jpath = _write(os.path.join(out_dir, "metrics.json"), json.dumps(doc, indent=1, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ablation", "metric", "value"])
    for row in comparison:
        for k in METRIC_KEYS:
            w.writerow([row["ablation"], k, repr(float(row[k]))])
    cpath = _write(os.path.join(out_dir, "metrics.csv"), buf.getvalue())
    return jpath, cpath


def _figures(out_dir, runs: dict) -> list[str]:
    from finedet import plotting

    paths = []
    traces = {k: r["loss_trace"] for k, r in runs.items() if r["loss_trace"]}
    if traces:
        paths.append(plotting.plot_loss_traces(traces, os.path.join(out_dir, "loss_traces.png")))
    paths.append(plotting.plot_ablation(runs, os.path.join(out_dir, "ablation.png")))
    for name, rep in runs.items():
        if rep["fine_ap"]:
            paths.append(plotting.plot_per_class_ap(rep["fine_ap"], os.path.join(out_dir, f"fine_ap_{name}.png"),
                                                    f"{name}: fine AP@0.5"))
    return paths


def _print_comparison(runs: dict):
    _print_table(["ablation", *METRIC_KEYS],
                 [(name, *(f"{100 * rep[k]:.2f}" for k in METRIC_KEYS)) for name, rep in runs.items()])


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    names = [BASELINE, *ABLATIONS] if args.ablation == "all" else [cfg.train.ablation]
    runs = {}
    for name in names:
        tcfg = dataclasses.replace(cfg.train, ablation=name)
        print(f"# training {name}", file=sys.stderr)
        try:
            result = train(tcfg, ds, progress=lambda e, m: print(
                f"#   epoch {e}: total {m['total']:.5f}", file=sys.stderr))
        except TrainingDiverged as exc:
            path = os.path.join(cfg.out, f"checkpoint_{name}.lastgood.json")
            exc.last_good.save(path)
            print(f"# last good checkpoint written to {path}", file=sys.stderr)
            raise
        result.checkpoint.save(os.path.join(cfg.out, f"checkpoint_{name}.json"))
        runs[name] = result.report.as_dict()
    _print_comparison(runs)
    for p in write_metrics(cfg.out, runs, cfg, args, "train") + tuple(_figures(cfg.out, runs)):
        print(f"wrote\t{p}")
    return EXIT_OK


def check_compatible(ckpt: Checkpoint, ds: synth.SyntheticDataset) -> None:
    if tuple(ds.partition.coarse) != tuple(ckpt.coarse_ids) or tuple(ds.partition.fine) != tuple(ckpt.fine_ids):
        raise ValidationError("checkpoint classes do not match the dataset partition")
    if ds.config.dim != ckpt.params.dim:
        raise ValidationError(f"checkpoint dimension {ckpt.params.dim} does not match dataset dimension {ds.config.dim}")


def cmd_eval(cfg: RunConfig, args) -> int:
    if not cfg.paths.checkpoint:
        raise ValidationError("eval needs [paths] checkpoint")
    try:
        ckpt = Checkpoint.load(cfg.paths.checkpoint)
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint: {exc.strerror}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed checkpoint: {exc}") from None
    ds = _dataset(cfg)
    check_compatible(ckpt, ds)
    ecfg = dataclasses.replace(ckpt.config, sigma=cfg.train.sigma, score_floor=cfg.train.score_floor,
                               max_dets=cfg.train.max_dets, all_points=cfg.train.all_points)
    rep = evaluate(ckpt.params, ckpt.correlation, ds.splits["test"], ecfg, ckpt.coarse_ids, ckpt.fine_ids)
    runs = {rep.ablation: rep.as_dict()}
    os.makedirs(cfg.out, exist_ok=True)
    _print_comparison(runs)
    for p in write_metrics(cfg.out, runs, cfg, args, "eval") + tuple(_figures(cfg.out, runs)):
        print(f"wrote\t{p}")
    return EXIT_OK


# --- demo -----------------------------------------------------------------------

def demo_checks():
    """(name, passed, detail) for every bundled fixture."""
    from finedet.attention import class_softmax, coarse_to_fine_attention, proposal_normalize, rerank
    from finedet.harness.boxes import Detection, soft_nms
    from finedet.harness.metrics import corloc, evaluate_map

    graph = parse_taxonomy(fixture_text("toy.taxonomy"))
    part = parse_partition(fixture_text("toy.partition"), graph)
    sem = build_semantic_correlation(graph, part).values
    yield "semantic toy encoding", np.array_equal(sem, [[1, 1, 0], [0, 0, 1]]), sem.tolist()

    emb = ClassEmbeddingTable.from_text(fixture_text("toy.embeddings"))
    soft = soft_assign(emb.select(part.coarse), emb.select(part.fine))
    err = float(np.max(np.abs(soft.column_sums() - 1)))
    yield "visual-soft column sums", err <= 1e-9, f"max deviation {err:.1e}"
    hard = hard_assign(emb.select(part.coarse), emb.select(part.fine)).values
    yield "visual-hard toy assignment", np.array_equal(hard, sem), hard.tolist()

    fx = json.loads(fixture_text("attention.json"))
    shat = class_softmax(fx["coarse_logits"])
    af = proposal_normalize(shat)
    aw = coarse_to_fine_attention(af, np.array(fx["correlation"], dtype=float))
    rr = rerank(fx["fine_scores"], aw)
    exp = fx["expected"]
    err = max(float(np.max(np.abs(a - np.array(exp[k])))) for k, a in
              (("class_softmax", shat), ("proposal_normalize", af), ("fine_attention", aw), ("reranked", rr)))
    yield "attention pipeline", err <= 1e-12, f"max error {err:.1e}"

    out = soft_nms([Detection((0, 0, 10, 10), "a", 0.9), Detection((0, 0, 10, 10), "a", 0.8)], 0.55)
    want = 0.8 * np.exp(-1 / 0.55)
    got = out[1].score if len(out) == 2 else float("nan")
    yield "soft-NMS identical boxes", abs(got - want) <= 1e-12, f"{got:.6f} vs {want:.6f}"

    fx = json.loads(fixture_text("map.json"))
    dets = [[Detection(tuple(b), lab, s) for b, lab, s in img] for img in fx["dets"]]
    gts = [[(tuple(b), lab) for b, lab in img] for img in fx["gts"]]
    res = evaluate_map(dets, gts, (0.5,))
    err = max(abs(res.per_class[0.5][k] - v) for k, v in fx["expected_ap"].items())
    yield "mAP fixture", err <= 1e-9, f"APs {res.per_class[0.5]}"

    fx = json.loads(fixture_text("corloc.json"))
    gts = [[(tuple(b), lab) for b, lab in img] for img in fx["gts"]]
    got = corloc({(i, lab): tuple(b) for i, lab, b in fx["top_boxes"]}, gts)
    yield "CorLoc fixture", got == fx["expected"], f"{got}"


def cmd_demo(cfg: RunConfig, args) -> int:
    ok = True
    for name, passed, detail in demo_checks():
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'}\t{name}\t{detail}")
    return EXIT_OK if ok else EXIT_VALIDATION


COMMANDS = {"encode": cmd_encode, "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "demo": cmd_demo}
HELP = {
    "encode": "build the coarse-to-fine correlation matrix and print column sums",
    "gen": "generate a synthetic dataset and print its statistics",
    "train": "train one ablation (or all) and write checkpoints, metrics and figures",
    "eval": "evaluate a checkpoint on a dataset's test split",
    "demo": "check the bundled fixtures and print PASS/FAIL per check",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--ablation", choices=(BASELINE, *ABLATIONS, "all"), help="override [run] ablation")
    common.add_argument("--out", metavar="DIR", help="override [run] out")
    common.add_argument("--no-timestamp", action="store_true", help="omit the timestamp from outputs")
    parser = _Parser(prog="finedet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.ablation and args.ablation != "all":
        cfg.train.ablation = args.ablation
    if args.out:
        cfg.out = args.out
    cfg.validate(check_paths=True)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FinedetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

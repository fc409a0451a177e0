"""Command-line entry point: ``printguard <command> [options]``.

Exit codes: 0 success, 2 argument error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import IntrusionPlan, ScenarioScript, run_intrusion
from .attacks import AttackKind, AttackSpec, apply_attack, load_attack_spec
from .config import PRESETS, ConfigError, load_config
from .detectors import (ATTACK, BENIGN, AttentionAutoencoder, CentroidModel, calibrate_threshold,
                        classify, cluster_score, fit_kmeans, pca_project, reconstruction_error,
                        train_autoencoder)
from .embedding import CorruptionPolicy, HashedEncoder, ProjectionHead, project, train_projection
from .experiment import (BENIGN_TRAIN, StageError, generate_windows, render_report, run_experiment)
from .features import FeatureMatrix, FeatureSchema, fit_schema, read_telemetry, serialize_matrix
from .gcode import parse_program, serialize_program
from .metrics import auroc, confusion, metrics
from .optim import TrainConfig, TrainingDiverged
from .server import PrintServer
from .telemetry import FEATURES, LogStream, SimConfig, SimulationError, execute, window_logs

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("printguard")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    base = PRESETS[getattr(args, "preset", None) or "desk"]
    cfg = load_config(args.config, base)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = _config(args)
    return TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed)


def _read_lines(path: str) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def _encoder(args) -> HashedEncoder:
    cfg = _config(args)
    return HashedEncoder(cfg.encoder_seed, resolutions=cfg.resolutions)


def _embed(args, sentences: list[str]) -> np.ndarray:
    head = ProjectionHead.load(args.head)
    return project(head, _encoder(args).encode_batch(sentences))


# -- commands ----------------------------------------------------------------------------------

def cmd_gen(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    labels = [args.label] if args.label else [BENIGN_TRAIN, "benign_val", *cfg.attacks]
    counts = {BENIGN_TRAIN: cfg.n_train, "benign_val": cfg.n_val}
    manifest = {}
    for label in labels:
        attack = label if label in cfg.attacks else None
        n = args.count or counts.get(label, cfg.n_attack)
        ws = generate_windows(label, n, cfg, attack=attack)
        path = out / f"{label}.csv"
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps({"label": label, "seed": cfg.seed, "window": cfg.window,
                                        "config_digest": cfg.digest()}, sort_keys=True) + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FEATURES)
            for row in ws.values:
                writer.writerow([repr(float(v)) for v in row])
        manifest[label] = {"windows": len(ws), "prints": ws.prints, "digests": ws.digests}
        print(f"{label}: {len(ws)} windows from {ws.prints} prints -> {path}")
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def cmd_attack(args) -> None:
    prog = parse_program(Path(args.input).read_text(encoding="utf-8"))
    if args.spec:
        spec = load_attack_spec(args.spec)
    else:
        if not args.kind:
            raise CliError("attack needs --kind or --spec", EXIT_ARGS)
        overrides = {}
        if args.factor is not None:
            overrides["factor"] = args.factor
        if args.scale is not None:
            overrides["scale"] = tuple(args.scale)
        if args.z_range is not None:
            overrides["z_range"] = tuple(args.z_range)
        spec = AttackSpec.default(AttackKind(args.kind), seed=args.seed or 0, **overrides)
    mutated, audit = apply_attack(prog, spec)
    out = _out_dir(args)
    stem = Path(args.input).stem
    (out / f"{stem}.{spec.kind.value}.gcode").write_text(serialize_program(mutated), encoding="utf-8")
    (out / f"{stem}.{spec.kind.value}.audit.json").write_text(audit.to_json() + "\n")
    print(f"{spec.kind.value}: {audit.change_count} changes, extrusion delta {audit.extrusion_delta:.5f} mm")


def cmd_intrude(args) -> None:
    scenario_path = Path(args.scenario)
    script = ScenarioScript.from_dict(json.loads(scenario_path.read_text()), scenario_path.parent)
    plan = IntrusionPlan.from_dict(json.loads(Path(args.plan).read_text()))
    server = PrintServer()
    transcript = run_intrusion(server, plan, script)
    out = _out_dir(args)
    (out / "transcript.jsonl").write_text(transcript.to_jsonl())
    for digest in {transcript.outcome.get("original_digest"), transcript.outcome.get("mutated_digest")} - {None}:
        (out / f"{digest[:16]}.gcode").write_bytes(server.blobs[digest])
    print(json.dumps(transcript.outcome, sort_keys=True))


def cmd_simulate(args) -> None:
    prog = parse_program(Path(args.input).read_text(encoding="utf-8"))
    stream = execute(prog, SimConfig(), seed=args.seed or 0, context={"source": Path(args.input).name})
    out = _out_dir(args)
    stem = Path(args.input).stem
    if args.window > 1:
        windows = window_logs(stream, args.window)
        stream = LogStream(windows, np.full(len(windows), float(args.window)),
                           {**stream.manifest, "window": args.window})
    text = stream.to_csv() if args.format == "csv" else stream.to_jsonl()
    path = out / f"{stem}.{args.format}"
    path.write_text(text)
    print(f"{len(stream)} records -> {path}")


def cmd_features(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    matrices, labels = [], []
    for path in args.inputs:
        m, manifest = read_telemetry(path)
        matrices.append(m)
        labels.extend([manifest.get("label", Path(path).stem)] * m.n_rows)
    names = matrices[0].names
    values = np.vstack([m.columns(names).values for m in matrices])
    matrix = FeatureMatrix(names, values)
    if args.schema:
        schema = FeatureSchema.from_json(Path(args.schema).read_text())
    else:
        schema = fit_schema(matrix, cfg.variance_threshold, cfg.correlation_threshold, cfg.precision)
        (out / "schema.json").write_text(schema.to_json() + "\n")
    records = serialize_matrix(matrix, schema, labels)
    (out / "sentences.txt").write_text("".join(r.text + "\n" for r in records))
    (out / "labels.txt").write_text("".join(f"{r.label}\n" for r in records))
    print(f"{len(records)} sentences over {len(schema.names)} features: {', '.join(schema.names)}")


def cmd_train_head(args) -> None:
    cfg = _config(args)
    sentences = _read_lines(args.sentences)
    policy = CorruptionPolicy(cfg.key_swaps, cfg.value_rate, cfg.jitter)
    head, history = train_projection(sentences, _encoder(args), _train_config(args), policy)
    out = _out_dir(args)
    head.save(out / "head.pgt", {"config_digest": cfg.digest()})
    (out / "head_loss.json").write_text(json.dumps(history.to_dict()) + "\n")
    print(f"projection head: loss {history.epoch_loss[0]:.6g} -> {history.epoch_loss[-1]:.6g}"
          if history.epoch_loss else "projection head: no epochs run")


def cmd_train_ae(args) -> None:
    Z = _embed(args, _read_lines(args.sentences))
    ae, history = train_autoencoder(Z, _train_config(args))
    out = _out_dir(args)
    ae.save(out / "autoencoder.pgt")
    (out / "ae_loss.json").write_text(json.dumps(history.to_dict()) + "\n")
    print(f"autoencoder: loss {history.epoch_loss[0]:.6g} -> {history.epoch_loss[-1]:.6g}"
          if history.epoch_loss else "autoencoder: no epochs run")


def cmd_fit_kmeans(args) -> None:
    cfg = _config(args)
    Z = _embed(args, _read_lines(args.sentences))
    model = fit_kmeans(Z, args.k or cfg.k, cfg.seed)
    out = _out_dir(args)
    model.save(out / "kmeans.pgt")
    print(f"k-means: k={model.k} inertia {model.inertia:.6g} after {model.n_iter} iterations")


def cmd_score(args) -> None:
    cfg = _config(args)
    sentences = _read_lines(args.sentences)
    labels = _read_lines(args.labels) if args.labels else [""] * len(sentences)
    if len(labels) != len(sentences):
        raise CliError("labels file length differs from sentences file")
    Z = _embed(args, sentences)
    ae = AttentionAutoencoder.load(args.ae)
    scores = reconstruction_error(ae, Z)
    cl = cluster_score(CentroidModel.load(args.kmeans), Z) if args.kmeans else np.full(len(Z), np.nan)
    pcs = pca_project(Z, cfg.pca_dims).coords if len(Z) >= 2 else np.zeros((len(Z), cfg.pca_dims))
    out = _out_dir(args)
    path = out / "scores.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "score", "label", "cluster_score"] + [f"pc{i + 1}" for i in range(cfg.pca_dims)])
        for i in range(len(Z)):
            writer.writerow([i, f"{scores[i]:.10g}", labels[i], f"{cl[i]:.10g}"] + [f"{v:.10g}" for v in pcs[i]])
    print(f"{len(Z)} scores -> {path}")


def _binary(label: str) -> str:
    return BENIGN if label.startswith("benign") else ATTACK


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    with open(args.scores, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{args.scores} holds no scores")
    scores = np.array([float(r["score"]) for r in rows])
    labels = [_binary(r["label"]) for r in rows]
    if args.tau is not None:
        tau = args.tau
        threshold = None
    else:
        calib = [s for s, r in zip(scores, rows) if r["label"] == args.calibration_label]
        threshold = calibrate_threshold(np.array(calib), cfg.percentile)
        tau = threshold.tau
    preds = classify(scores, tau)
    cm = confusion(labels, preds)
    m = metrics(cm)
    report = {"tau": tau, "confusion": cm.to_dict(), "metrics": m.to_dict(),
              "threshold": threshold.to_dict() if threshold else None}
    if {BENIGN, ATTACK} <= set(labels):
        report["auroc"] = auroc(scores, labels)
    out = _out_dir(args)
    (out / "evaluation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))


def cmd_report(args) -> None:
    cfg = _config(args)
    art = run_experiment(cfg, args.out)
    print(render_report(art.report), end="")


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--preset", choices=sorted(PRESETS), default=None, help="base configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="printguard", description=__doc__.splitlines()[0],
                                     parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate labelled telemetry windows")
    p.add_argument("--label", help="one dataset label (default: all)")
    p.add_argument("--count", type=int, help="windows to generate per label")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("attack", parents=[common], help="mutate a G-code file")
    p.add_argument("input")
    p.add_argument("--kind", choices=[k.value for k in AttackKind if k is not AttackKind.EXFILTRATION])
    p.add_argument("--spec", help="attack spec JSON")
    p.add_argument("--factor", type=float)
    p.add_argument("--scale", type=float, nargs=3, metavar=("SX", "SY", "SZ"))
    p.add_argument("--z-range", type=float, nargs=2, metavar=("ZLO", "ZHI"))
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("intrude", parents=[common], help="run an intrusion scenario")
    p.add_argument("--scenario", required=True, help="scenario script JSON")
    p.add_argument("--plan", required=True, help="intrusion plan JSON")
    p.set_defaults(func=cmd_intrude)

    p = sub.add_parser("simulate", parents=[common], help="telemetry from a G-code program")
    p.add_argument("input")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--window", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("features", parents=[common], help="filter features and serialize sentences")
    p.add_argument("inputs", nargs="+", help="telemetry CSV/JSONL files")
    p.add_argument("--schema", help="reuse a fitted schema instead of fitting one")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-head", parents=[common], help="contrastive projection-head training")
    p.add_argument("sentences")
    p.set_defaults(func=cmd_train_head)

    for name, func, extra in (("train-ae", cmd_train_ae, ()), ("fit-kmeans", cmd_fit_kmeans, ("k",))):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("sentences")
        p.add_argument("--head", required=True)
        if extra:
            p.add_argument("--k", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("score", parents=[common], help="anomaly scores and PCA coordinates")
    p.add_argument("sentences")
    p.add_argument("--labels")
    p.add_argument("--head", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--kmeans")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", parents=[common], help="threshold, confusion and metrics from scores")
    p.add_argument("scores")
    p.add_argument("--tau", type=float, help="fixed threshold instead of calibration")
    p.add_argument("--calibration-label", default="benign_val")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="run the full experiment")
    p.set_defaults(func=cmd_report)
    return parser


NUMERIC_ERRORS = (TrainingDiverged, SimulationError, FloatingPointError)
DATA_ERRORS = (OSError, ValueError, KeyError, ConfigError)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NUMERIC_ERRORS):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (StageError, *NUMERIC_ERRORS, *DATA_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

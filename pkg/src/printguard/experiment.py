"""End-to-end orchestration: datasets, feature schema, models, scores and report."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackKind, AttackSpec, apply_attack
from .config import ExperimentConfig
from .detectors import (ATTACK, BENIGN, AttentionAutoencoder, CentroidModel, ThresholdModel,
                        calibrate_threshold, classify, cluster_score, fit_kmeans, pca_project,
                        reconstruction_error, train_autoencoder)
from .embedding import (CorruptionPolicy, HashedEncoder, ProjectionHead, corrupted_pairs,
                        project, train_projection)
from .features import FeatureMatrix, FeatureSchema, fit_schema, serialize_matrix
from .metrics import auroc, confusion, metrics
from .optim import TrainConfig
from .parts import PartProfile, generate_part
from .telemetry import FEATURES, WAIT_COMMANDS, LogStream, execute, window_logs

log = logging.getLogger(__name__)

BENIGN_TRAIN, BENIGN_VAL = "benign_train", "benign_val"


class StageError(RuntimeError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


def shard_seed(master: int, label: str, index: int) -> int:
    digest = hashlib.sha256(f"{master}:{label}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def window_digest(row: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(row, dtype="<f8").tobytes()).hexdigest()[:20]


@dataclass
class WindowSet:
    label: str
    values: np.ndarray
    digests: list[str]
    prints: int

    def __len__(self) -> int:
        return len(self.values)


def sample_profile(config: ExperimentConfig, rng: np.random.Generator) -> PartProfile:
    return PartProfile(
        width=round(float(rng.uniform(config.min_size, config.max_size)), 2),
        depth=round(float(rng.uniform(config.min_size, config.max_size)), 2),
        layers=int(rng.integers(config.min_layers, config.max_layers + 1)),
    )


def attack_spec(kind: str, profile: PartProfile, seed: int, config: ExperimentConfig) -> AttackSpec:
    if kind == AttackKind.CAVITY_INSERTION.value:
        lo_frac, hi_frac = config.cavity_band
        lo = profile.first_layer_z + math.floor(lo_frac * profile.layers) * profile.layer_height
        hi = profile.first_layer_z + math.ceil(hi_frac * profile.layers) * profile.layer_height
        return AttackSpec.default(kind, seed=seed, z_range=(round(lo, 4) - 1e-6, round(hi, 4) - 1e-6))
    return AttackSpec.default(kind, seed=seed)


def attacked_windows(stream: LogStream, touched: list[int], window: int, n_windows: int) -> np.ndarray:
    """Mask of windows whose time span overlaps execution of a tampered line."""
    span = window * stream.manifest.get("sample_period", 1.0)
    mask = np.zeros(n_windows, dtype=bool)
    starts, durations = stream.line_start, stream.durations
    for i in touched:
        if i >= len(starts) or not np.isfinite(starts[i]):
            continue
        a, b = starts[i], starts[i] + max(durations[i], 0.0)
        lo = int(a // span)
        hi = int(math.ceil(b / span)) - 1 if b > a else lo
        mask[max(lo, 0):min(hi, n_windows - 1) + 1] = True
    return mask


def printing_starts(prog, stream: LogStream) -> float:
    """Time at which the line after the last heater wait begins."""
    waits = [i for i, line in enumerate(prog.lines) if line.command in WAIT_COMMANDS]
    if not waits or waits[-1] + 1 >= len(prog):
        return 0.0
    return float(stream.line_start[waits[-1] + 1])


def generate_windows(label: str, count: int, config: ExperimentConfig, attack: str | None = None) -> WindowSet:
    """Simulate prints from the part family until ``count`` windows are collected."""
    rows: list[np.ndarray] = []
    collected = 0
    prints = 0
    while collected < count:
        seed = shard_seed(config.seed, label, prints)
        rng = np.random.default_rng(seed)
        profile = sample_profile(config, rng)
        prog = generate_part(profile)
        touched = None
        if attack is not None:
            prog, audit = apply_attack(prog, attack_spec(attack, profile, seed, config))
            touched = audit.touched
        stream = execute(prog, seed=seed, context={"label": label, "print": prints, "sample_period": 1.0})
        windows = window_logs(stream, config.window)
        keep = np.ones(len(windows), dtype=bool)
        if config.skip_warmup:
            keep &= np.arange(len(windows)) * config.window >= printing_starts(prog, stream)
        if touched is not None:
            keep &= attacked_windows(stream, touched, config.window, len(windows))
        windows = windows[keep]
        rows.append(windows)
        collected += len(windows)
        prints += 1
    values = np.vstack(rows)[:count]
    return WindowSet(label, values, [window_digest(r) for r in values], prints)


@dataclass
class Artifacts:
    config: ExperimentConfig
    schema: FeatureSchema
    encoder: HashedEncoder
    head: ProjectionHead
    ae: AttentionAutoencoder
    kmeans: CentroidModel
    threshold: ThresholdModel
    sets: dict[str, WindowSet]
    embeddings: dict[str, np.ndarray]
    ae_scores: dict[str, np.ndarray]
    cluster_scores: dict[str, np.ndarray]
    head_loss: list[float]
    ae_loss: list[float]
    report: dict
    timings: dict[str, float] = field(default_factory=dict)


@contextmanager
def _stage(name: str, timings: dict[str, float]):
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = round(time.perf_counter() - t0, 3)


def _round(value: float) -> float:
    return float(f"{value:.12g}")


def run_experiment(config: ExperimentConfig, out: str | Path | None = None) -> Artifacts:
    """Generate data, fit the pipeline on benign training windows and score validation."""
    timings: dict[str, float] = {}
    with _stage("generate", timings):
        sets = {BENIGN_TRAIN: generate_windows(BENIGN_TRAIN, config.n_train, config),
                BENIGN_VAL: generate_windows(BENIGN_VAL, config.n_val, config)}
        for kind in config.attacks:
            sets[kind] = generate_windows(kind, config.n_attack, config, attack=kind)
    with _stage("hygiene", timings):
        train_digests = set(sets[BENIGN_TRAIN].digests)
        leaked = [k for k in config.attacks if train_digests.intersection(sets[k].digests)]
        if leaked:
            raise ValueError(f"attack windows of {leaked} appear in the training manifest")
    with _stage("features", timings):
        train_matrix = FeatureMatrix(FEATURES, sets[BENIGN_TRAIN].values)
        schema = fit_schema(train_matrix, config.variance_threshold, config.correlation_threshold,
                            config.precision)
        sentences = {name: [r.text for r in serialize_matrix(FeatureMatrix(FEATURES, ws.values), schema)]
                     for name, ws in sets.items()}
    train_cfg = TrainConfig(lr=config.lr, batch_size=config.batch_size, epochs=config.epochs, seed=config.seed)
    encoder = HashedEncoder(config.encoder_seed, resolutions=config.resolutions)
    policy = CorruptionPolicy(config.key_swaps, config.value_rate, config.jitter)
    with _stage("encode", timings):
        H_train, H_corrupt = corrupted_pairs(sentences[BENIGN_TRAIN], encoder, config.seed, policy)
        encoded = {name: (H_train if name == BENIGN_TRAIN else encoder.encode_batch(s))
                   for name, s in sentences.items()}
    with _stage("train_head", timings):
        head, head_hist = train_projection(sentences[BENIGN_TRAIN], encoder, train_cfg, policy,
                                           pairs=(H_train, H_corrupt))
        embeddings = {name: project(head, H) for name, H in encoded.items()}
    with _stage("train_ae", timings):
        ae, ae_hist = train_autoencoder(embeddings[BENIGN_TRAIN], train_cfg)
        ae_scores = {name: reconstruction_error(ae, Z) for name, Z in embeddings.items()}
    with _stage("kmeans", timings):
        kmeans = fit_kmeans(embeddings[BENIGN_TRAIN], config.k, config.seed)
        cl_scores = {name: cluster_score(kmeans, Z) for name, Z in embeddings.items()}
    with _stage("evaluate", timings):
        threshold = calibrate_threshold(ae_scores[BENIGN_VAL], config.percentile)
        report = build_report(config, sets, schema, threshold, ae_scores, cl_scores, head_hist.epoch_loss,
                              ae_hist.epoch_loss, head_hist.warnings)
    artifacts = Artifacts(config, schema, encoder, head, ae, kmeans, threshold, sets, embeddings,
                          ae_scores, cl_scores, head_hist.epoch_loss, ae_hist.epoch_loss, report, timings)
    if out is not None:
        with _stage("write", timings):
            write_artifacts(artifacts, Path(out))
    return artifacts


def validation_labels(config: ExperimentConfig, sets: dict[str, WindowSet]) -> tuple[list[str], list[str]]:
    """Per-window (class name, binary label) for the validation pool."""
    names, labels = [], []
    for name in (BENIGN_VAL, *config.attacks):
        names.extend([name] * len(sets[name]))
        labels.extend([BENIGN if name == BENIGN_VAL else ATTACK] * len(sets[name]))
    return names, labels


def build_report(config: ExperimentConfig, sets: dict[str, WindowSet], schema: FeatureSchema,
                 threshold: ThresholdModel, ae_scores: dict[str, np.ndarray],
                 cl_scores: dict[str, np.ndarray], head_loss: list[float], ae_loss: list[float],
                 warnings: list[str]) -> dict:
    names, labels = validation_labels(config, sets)
    pool = [BENIGN_VAL, *config.attacks]
    ae_all = np.concatenate([ae_scores[n] for n in pool])
    cl_all = np.concatenate([cl_scores[n] for n in pool])
    preds = classify(ae_all, threshold.tau)
    cm = confusion(labels, preds)
    m = metrics(cm)
    per_class = {}
    for kind in config.attacks:
        y = [BENIGN] * len(sets[BENIGN_VAL]) + [ATTACK] * len(sets[kind])
        ae_k = np.concatenate([ae_scores[BENIGN_VAL], ae_scores[kind]])
        cl_k = np.concatenate([cl_scores[BENIGN_VAL], cl_scores[kind]])
        per_class[kind] = {
            "ae_auroc": _round(auroc(ae_k, y)),
            "cluster_auroc": _round(auroc(cl_k, y)),
            "detection_rate": _round(float(np.mean(ae_scores[kind] > threshold.tau))),
            "windows": len(sets[kind]),
        }
    manifest = {name: {"windows": len(ws), "prints": ws.prints,
                       "digest": hashlib.sha256("".join(ws.digests).encode()).hexdigest()[:16]}
                for name, ws in sets.items()}
    report = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "schema": list(schema.names),
        "dataset": manifest,
        "threshold": {k: _round(v) if isinstance(v, float) else v for k, v in threshold.to_dict().items()},
        "confusion": cm.to_dict(),
        "metrics": json.loads(json.dumps(m.to_dict()), parse_float=lambda s: _round(float(s))),
        "ae_auroc": _round(auroc(ae_all, labels)),
        "cluster_auroc": _round(auroc(cl_all, labels)),
        "per_class": per_class,
        "benign_flag_rate": _round(float(np.mean(ae_scores[BENIGN_VAL] > threshold.tau))),
        "head_loss": [_round(v) for v in head_loss],
        "ae_loss": [_round(v) for v in ae_loss],
        "warnings": list(warnings),
    }
    if config.reference_counts:
        report["reference_counts"] = dict(zip([BENIGN_TRAIN, BENIGN_VAL, *config.attacks],
                                          config.reference_counts))
    return report


def render_report(report: dict) -> str:
    """Human-readable summary of a detection report."""
    m = report["metrics"]
    lines = [
        f"config {report['config_digest']}  threshold tau={report['threshold']['tau']:.6g} "
        f"(p{report['threshold']['percentile']:g} of {report['threshold']['count']} benign)",
        f"accuracy {m['accuracy']:.4f}  macro F1 {m['macro_f1']:.4f}  weighted F1 {m['weighted_f1']:.4f}",
        f"AUROC autoencoder {report['ae_auroc']:.4f}  cluster {report['cluster_auroc']:.4f}",
        f"benign flag rate {report['benign_flag_rate']:.4f}",
    ]
    for name, cls in m["per_class"].items():
        lines.append(f"  {name:<8} precision {cls['precision']:.4f} recall {cls['recall']:.4f} "
                     f"F1 {cls['f1']:.4f} support {cls['support']}")
    lines.append("per attack class:")
    for kind, row in report["per_class"].items():
        lines.append(f"  {kind:<20} AE AUROC {row['ae_auroc']:.4f}  cluster AUROC "
                     f"{row['cluster_auroc']:.4f}  detected {row['detection_rate']:.4f}")
    for w in report.get("warnings", []):
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


def write_scores_csv(path: Path, art: Artifacts) -> None:
    cfg = art.config
    names, labels = validation_labels(cfg, art.sets)
    pool = [BENIGN_VAL, *cfg.attacks]
    Z = np.vstack([art.embeddings[n] for n in pool])
    pca = pca_project(Z, cfg.pca_dims)
    ae_all = np.concatenate([art.ae_scores[n] for n in pool])
    cl_all = np.concatenate([art.cluster_scores[n] for n in pool])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "score", "label", "class", "cluster_score"]
                        + [f"pc{i + 1}" for i in range(cfg.pca_dims)])
        for i in range(len(Z)):
            writer.writerow([i, f"{ae_all[i]:.10g}", labels[i], names[i], f"{cl_all[i]:.10g}"]
                            + [f"{v:.10g}" for v in pca.coords[i]])


def write_artifacts(art: Artifacts, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(art.report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(render_report(art.report))
    (out / "schema.json").write_text(art.schema.to_json() + "\n")
    (out / "timings.json").write_text(json.dumps(art.timings, indent=2, sort_keys=True) + "\n")
    manifest = {name: ws.digests for name, ws in art.sets.items()}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    art.head.save(out / "head.pgt", {"config_digest": art.config.digest()})
    art.ae.save(out / "autoencoder.pgt")
    art.kmeans.save(out / "kmeans.pgt")
    write_scores_csv(out / "scores.csv", art)

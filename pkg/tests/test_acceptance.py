"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import pytest

import gradcheck
from oracles import (oracle_auroc, oracle_durations, oracle_extents, oracle_extrusion, oracle_line_at,
                     oracle_min_distance, oracle_percentile)
from printguard.adversary import Strategy
from printguard.attacks import inject_noise, insert_cavity, scale_dimensions, scale_extrusion
from printguard.config import DESK_SCALE, SMOKE_SCALE
from printguard.detectors import ATTACK, BENIGN, CentroidModel, cluster_score, percentile
from printguard.experiment import BENIGN_VAL, run_experiment
from printguard.gcode import (bounding_box, build_layer_index, interpret, parse_program, serialize_program,
                              total_extrusion)
from printguard.metrics import ConfusionMatrix, auroc, metrics
from printguard.parts import PartProfile, generate_part
from scenarios import part_bytes, run, seeded_case
from test_detectors import ae_gradcheck
from test_embedding import head_gradcheck


@pytest.fixture
def verdict(capsys):
    """Yield a recorder; on exit print one line and fail on any missed check or budget."""
    notes: list[str] = []
    failures: list[str] = []

    @contextmanager
    def run_criterion(number: int, title: str, budget: float):
        t0 = time.perf_counter()
        yield notes, failures
        elapsed = time.perf_counter() - t0
        if elapsed >= budget:
            failures.append(f"runtime {elapsed:.1f}s over {budget:g}s budget")
        status = "FAIL" if failures else "PASS"
        detail = "; ".join(failures or notes)
        with capsys.disabled():
            print(f"\ncriterion {number} [{status}] {title} ({elapsed:.1f}s) {detail}")
        assert not failures, detail

    return run_criterion


def test_criterion_1_attack_laws(verdict):
    with verdict(1, "attack-transform laws", 5.0) as (notes, failures):
        part = generate_part(PartProfile(layers=25))
        assert len(build_layer_index(part)) == 25
        base = total_extrusion(part)

        under, _ = scale_extrusion(part, 0.72)
        ratio = total_extrusion(under) / base
        if abs(ratio - 0.72) > 1e-9:
            failures.append(f"extrusion ratio {ratio!r}")

        idx = build_layer_index(part)
        lo, hi = idx[8].z, idx[15].z
        cavity, _ = insert_cavity(part, lo, hi)
        for layer in idx:
            got = total_extrusion(cavity, (layer.z, layer.z))
            want = 0.0 if lo <= layer.z <= hi else total_extrusion(part, (layer.z, layer.z))
            if got != want:
                failures.append(f"cavity layer z={layer.z} has {got!r}, expected {want!r}")

        shrunk, _ = scale_dimensions(part, (0.98, 0.98, 1.0))
        before, after = bounding_box(part).extents, bounding_box(shrunk).extents
        for axis in (0, 1):
            if abs(after[axis] - 0.98 * before[axis]) > 1e-9:
                failures.append(f"axis {axis} extent {after[axis]!r} vs {0.98 * before[axis]!r}")
        if after[2] != before[2]:
            failures.append("z extent changed")

        noisy, audit = inject_noise(part, 10, 0.3, seed=42)
        if abs(total_extrusion(noisy) - base) > 1e-9:
            failures.append("noise changed total extrusion")
        end_a, end_b = interpret(noisy)[-1].position, interpret(part)[-1].position
        if max(abs(a - b) for a, b in zip(end_a, end_b)) > 1e-9:
            failures.append("noise moved the final position")
        notes.append(f"ratio {ratio:.12f}, noise inserted {len(audit.inserted)} lines")


def test_criterion_2_intrusion_determinism(verdict):
    with verdict(2, "intrusion protocol determinism", 30.0) as (notes, failures):
        data = part_bytes()
        durations = oracle_durations(data.decode())
        total = sum(durations)
        spliced = 0
        for strategy in Strategy:
            for seed in range(50):
                plan, scr = seeded_case(strategy, seed, data)
                first = run(plan, scr)[1]
                second = run(plan, scr)[1]
                if first.to_jsonl() != second.to_jsonl():
                    failures.append(f"{strategy.value} seed {seed} transcripts differ")
                if strategy is Strategy.EXECUTION_PHASE:
                    want = oracle_line_at(durations, plan.trigger_delay) if plan.trigger_delay < total else None
                    got = first.outcome["splice_index"]
                    if got != want:
                        failures.append(f"seed {seed} splice {got} vs oracle {want}")
                    spliced += got is not None
        notes.append(f"150 scenarios byte-identical, {spliced}/50 splices match the prefix-sum oracle")


def test_criterion_3_gradient_checks(verdict):
    with verdict(3, "gradient checks", 60.0) as (notes, failures):
        worst = 0.0
        for seed in range(5):
            head_errors = head_gradcheck(seed)
            ae_errors, grads = ae_gradcheck(seed)
            for name, err in {**{f"head.{k}": v for k, v in head_errors.items()},
                              **{f"ae.{k}": v for k, v in ae_errors.items()}}.items():
                worst = max(worst, err)
                if err >= gradcheck.REL_TOL:
                    failures.append(f"seed {seed} {name} rel err {err:.2e}")
            if grads["W_Q"].any() or grads["W_K"].any():
                failures.append(f"seed {seed}: nonzero W_Q/W_K gradient")
        notes.append(f"5 seeds, worst relative error {worst:.2e}, dW_Q = dW_K = 0")


def test_criterion_4_threshold_contract(verdict):
    with verdict(4, "threshold contract", 10.0) as (notes, failures):
        cfg = SMOKE_SCALE.with_overrides(n_train=1000, n_val=5000, n_attack=1, attacks=("under_extrusion",))
        art = run_experiment(cfg)
        rate = art.report["benign_flag_rate"]
        n = len(art.ae_scores[BENIGN_VAL])
        if n != 5000:
            failures.append(f"{n} validation windows")
        if abs(rate - 0.05) > 0.01:
            failures.append(f"flag rate {rate:.4f}")
        # informational: calibrate on one half, flag the other
        errors = art.ae_scores[BENIGN_VAL]
        held_out = float(np.mean(errors[n // 2:] > percentile(errors[:n // 2], cfg.percentile)))
        notes.append(f"tau {art.threshold.tau:.4g}, benign flag rate {rate:.4f} at N={n} "
                     f"(split-half held-out rate {held_out:.4f})")


def test_criterion_5_desk_scale_separation(verdict):
    with verdict(5, "end-to-end desk-scale separation", 600.0) as (notes, failures):
        cfg = DESK_SCALE
        assert (cfg.n_train, cfg.n_val, cfg.n_attack, cfg.epochs, cfg.lr, cfg.batch_size) == \
            (20_000, 5_000, 1_000, 25, 1e-4, 64)
        rep = run_experiment(cfg).report
        if rep["ae_auroc"] < 0.90:
            failures.append(f"pooled AE AUROC {rep['ae_auroc']:.4f} < 0.90")
        for kind, row in rep["per_class"].items():
            if row["ae_auroc"] < 0.85:
                failures.append(f"{kind} AE AUROC {row['ae_auroc']:.4f} < 0.85")
        if rep["cluster_auroc"] < 0.85:
            failures.append(f"pooled cluster AUROC {rep['cluster_auroc']:.4f} < 0.85")
        per = ", ".join(f"{k} {v['ae_auroc']:.3f}" for k, v in rep["per_class"].items())
        notes.append(f"pooled AE {rep['ae_auroc']:.4f}, cluster {rep['cluster_auroc']:.4f}; {per}")


def test_criterion_6_metric_arithmetic(verdict):
    with verdict(6, "metric-arithmetic fidelity", 1.0) as (notes, failures):
        # 94.99% of 20,000 benign and 96.14% of 10,000 attack windows
        cm = ConfusionMatrix(tp=9614, fn=386, fp=1002, tn=18998)
        m = metrics(cm)
        got = (round(m.per_class[BENIGN].recall, 4), round(m.per_class[ATTACK].recall, 4))
        if got != (0.9499, 0.9614):
            failures.append(f"recalls {got}")
        notes.append(f"benign recall {got[0]}, attack recall {got[1]}, accuracy {m.accuracy:.4f}")


def random_program(rng: np.random.Generator) -> str:
    lines = ["G90", "M83" if rng.random() < 0.5 else "M82", "G92 E0"]
    e = 0.0
    z = 0.0
    for _ in range(int(rng.integers(5, 40))):
        if rng.random() < 0.2:
            z = round(z + float(rng.choice([0.1, 0.2, 0.3])), 3)
            lines.append(f"G1 Z{z} F600")
        de = round(float(rng.uniform(0.0, 0.5)), 4)
        x, y = (round(float(v), 3) for v in rng.uniform(-40, 40, 2))
        if lines[1] == "M83":
            lines.append(f"G1 X{x} Y{y} E{de}")
        else:
            e = round(e + de, 4)
            lines.append(f"G1 X{x} Y{y} E{e}")
    return "\n".join(lines) + "\n"


def test_criterion_7_oracle_equivalence(verdict):
    with verdict(7, "oracle equivalence suite", 60.0) as (notes, failures):
        rng = np.random.default_rng(2024)
        instances = 100
        for i in range(instances):
            text = random_program(rng)
            prog = parse_program(text)
            if abs(total_extrusion(prog) - oracle_extrusion(text)) > 1e-9:
                failures.append(f"total_extrusion instance {i}")
            if oracle_extrusion(text) > 0:
                lo, hi = oracle_extents(text)
                box = bounding_box(prog)
                if max(abs(a - b) for a, b in zip(box.min + box.max, lo + hi)) > 1e-12:
                    failures.append(f"bounding_box instance {i}")

            k, d = int(rng.integers(1, 9)), int(rng.integers(2, 129))
            model = CentroidModel(rng.normal(size=(k, d)))
            Z = rng.normal(size=(20, d))
            got = cluster_score(model, Z)
            want = [oracle_min_distance(model.centroids.tolist(), z) for z in Z.tolist()]
            if np.max(np.abs(got - want)) > 1e-12:
                failures.append(f"cluster_score instance {i}")

            n = int(rng.integers(4, 200))
            scores = np.round(rng.normal(size=n), int(rng.integers(1, 4)))  # rounding forces ties
            labels = [ATTACK if v else BENIGN for v in rng.random(n) < 0.4]
            labels[0], labels[1] = ATTACK, BENIGN
            if abs(auroc(scores, labels) - oracle_auroc(scores.tolist(), [y == ATTACK for y in labels])) > 1e-12:
                failures.append(f"auroc instance {i}")

            q = float(rng.uniform(0, 100))
            values = rng.exponential(size=n).tolist()
            if abs(percentile(np.array(values), q) - oracle_percentile(values, q)) > 1e-12:
                failures.append(f"percentile instance {i}")
        notes.append(f"{instances} seeded instances per operation agree")

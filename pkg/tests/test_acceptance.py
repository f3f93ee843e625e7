"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (5, 6, 7) run the desk-scale regime stored in
configs/acceptance.cfg through the CLI entry points.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from metast import cli
from metast.checks import META_H, check_meta
from metast.data import SynthSpec, generate_synthetic, kshot_sample
from metast.oracles import acquisition_worked_example, span_oracle_agreement
from metast.selftrain import TrainConfig, run_metast
from test_selftrain import classic_self_training

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "acceptance.cfg"


def report(capsys, n, ok, text):
    with capsys.disabled():
        print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} criterion {n}: {text}")


def acceptance_spec(out, **overrides) -> cli.ExperimentSpec:
    args = cli.build_parser().parse_args(["sweep", "--axis", "mode", "--config", str(CONFIG), "--out", str(out)])
    spec = cli.build_spec(args)
    return replace(spec, train=replace(spec.train, **overrides))


def test_1_gradcheck(capsys, tmp_path):
    t0 = time.perf_counter()
    code = cli.cmd_gradcheck(100, 0, tmp_path)
    dt = time.perf_counter() - t0
    lines = (tmp_path / "gradcheck.txt").read_text().strip().splitlines()
    ok = code == 0 and dt < 30 and len(lines) == 3
    report(capsys, 1, ok, f"gradcheck exit {code}, {dt:.1f}s (< 30s); " + "; ".join(lines))
    assert ok


def test_2_meta_gradient_oracle(capsys):
    res = check_meta(instances=100, seed=2, max_params=300)
    ok = res.passed and res.seconds < 60 and META_H == 1e-3
    report(capsys, 2, ok, f"{res.line()} with h={META_H}")
    assert ok


def test_3_acquisition_arithmetic(capsys):
    w, uniform = acquisition_worked_example()
    ok = w[0] == 2 / 3 and w[1] == 1 / 3 and bool(np.all(uniform == uniform[0]))
    report(capsys, 3, ok, f"weights {w.tolist()} for decays {{0.2, 0}}; all-zero decays -> {uniform.tolist()}")
    assert ok


def test_4_reduction_equivalence(capsys):
    ds = generate_synthetic(SynthSpec(n_sentences=200, seed=0))
    split = kshot_sample(ds.subset(range(160)), 10, 0, ds.subset(range(160, 200)))
    cfg = TrainConfig(reweight_mode="none", acquisition_mode="random", pseudo_label_type="hard",
                      outer_rounds=2, T=100, seed=7)
    seen = []
    rec = run_metast(cfg, split, on_step=lambda r, t, p: seen.append(p))
    final, traj = classic_self_training(cfg, split)
    same = len(seen) == len(traj) and all(a.identical(b) for a, b in zip(seen, traj))
    ok = same and rec.final_params.identical(final)
    report(capsys, 4, ok, f"{len(seen)} student checkpoints bit-identical to classic self-training: {same}")
    assert ok


def test_5_noise_suppression(capsys, tmp_path):
    t0 = time.perf_counter()
    results = {}
    for mode in ("meta", "none"):
        spec = acceptance_spec(tmp_path / mode, reweight_mode=mode)
        records, _ = cli.run_seeds(spec)
        results[mode] = records
    dt = time.perf_counter() - t0
    meta = results["meta"]
    corrupt = [r.rounds[-1]["mean_weight_corrupt"] for r in meta]
    clean = [r.rounds[-1]["mean_weight_clean"] for r in meta]
    wins = sum(c < k for c, k in zip(corrupt, clean))
    f_meta = np.median([r.final_f1 for r in meta])
    f_none = np.median([r.final_f1 for r in results["none"]])
    gap = 100 * (f_meta - f_none)
    n_unlab = [r.experiment["n_unlabeled"] for r in meta]
    ok = wins >= 4 and gap >= 2 and dt < 600
    report(capsys, 5, ok,
           f"(a) corrupt < clean mean weight in {wins}/5 seeds "
           f"(corrupt {np.round(corrupt, 3).tolist()} vs clean {np.round(clean, 3).tolist()}); "
           f"(b) median F1 meta {100 * f_meta:.2f} vs none {100 * f_none:.2f}, gap {gap:+.2f} (>= 2); "
           f"unlabeled pool {min(n_unlab)}-{max(n_unlab)} sentences; {dt:.0f}s (< 600s)")
    assert ok


def test_6_kshot_monotone(capsys, tmp_path):
    t0 = time.perf_counter()
    spec = acceptance_spec(tmp_path, pseudo_noise=0.0)
    rows = cli.cmd_sweep(spec, "K")
    dt = time.perf_counter() - t0
    medians = [r[5] for r in rows]
    ok = all(a <= b for a, b in zip(medians, medians[1:])) and dt < 900
    report(capsys, 6, ok, "median F1 over 5 seeds " + ", ".join(
        f"K={r[1]}: {100 * r[5]:.2f}" for r in rows) + f"; {dt:.0f}s (< 900s)")
    assert ok


def test_7_ablation_ordering(capsys, tmp_path):
    rows = {r[1]: r for r in cli.cmd_sweep(acceptance_spec(tmp_path), "mode")}
    med = {m: rows[m][5] for m in rows}
    ok = med["meta"] >= med["none"] and med["easy"] >= med["difficult"]
    table = (tmp_path / "sweep_mode.txt").read_text()
    report(capsys, 7, ok, "median F1 " + ", ".join(f"{m} {100 * v:.2f}" for m, v in med.items())
           + "\n" + table)
    assert ok


def test_8_span_oracle(capsys):
    bad = span_oracle_agreement(1000, seed=0)
    report(capsys, 8, bad == 0, f"phrase_f1 vs brute-force span sets: {bad} mismatches in 1000 pairs")
    assert bad == 0


def test_9_determinism(capsys, tmp_path):
    argv = ["--data", "synth:small", "--seeds", "2", "--T", "60", "--outer-rounds", "2",
            "--pseudo-noise", "0.3", "--dump-weights-step", "10", "--dump-acquisition", "true"]
    for d in ("a", "b"):
        assert cli.main(["run", *argv, "--out", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "timing.json")
    diff = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    ok = not diff and any(n.startswith("record_") for n in names)
    report(capsys, 9, ok, f"{len(names)} output files compared, differing: {diff or 'none'}")
    assert ok

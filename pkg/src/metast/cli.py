"""Command-line experiment runner: ``metast run|sweep|gradcheck|oracle``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .data import (Dataset, SynthSpec, generate_synthetic, kshot_sample, read_conll,
                   subsample_unlabeled)
from .reweight import DIAGNOSTIC_HEADER, MODES, ConfigError
from .acquisition import ACQUISITION_HEADER
from .selftrain import RunRecord, TrainConfig, run_metast

log = logging.getLogger("metast")

OUT_ENV = "METAST_OUT"

# name -> (generator spec, number of trailing sentences held out as test)
PRESETS = {
    "tiny": (SynthSpec(n_slot_types=2, vocab_size=60, n_sentences=160, length_range=(4, 10),
                       slot_word_disjointness=1.0, cue_rate=0.5, slot_lexicon_size=8), 40),
    "small": (SynthSpec(n_slot_types=2, vocab_size=200, n_sentences=720, length_range=(6, 14),
                        slot_word_disjointness=0.8, cue_rate=0.5, slot_lexicon_size=20), 200),
    "wide": (SynthSpec(n_slot_types=4, vocab_size=400, n_sentences=1400, length_range=(6, 16),
                       slot_word_disjointness=0.8, cue_rate=0.5, slot_lexicon_size=20), 400),
}

SWEEP_DEFAULTS = {
    "mode": list(MODES),
    "K": [5, 10, 20],
    "S": [1, 3, 5],
    "unlabeled_fraction": [0.05, 0.25, 0.75],
}


@dataclass
class ExperimentSpec:
    command: str = "run"
    data: str = "synth:small"
    train: TrainConfig = field(default_factory=TrainConfig)
    n_seeds: int = 1
    unlabeled_fraction: float = 1.0
    out: str = ""
    jobs: int = 1

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        kind, _, rest = self.data.partition(":")
        if kind == "synth":
            if rest not in PRESETS:
                raise ConfigError(f"unknown synthetic preset {rest!r}; choose from {sorted(PRESETS)}")
        elif kind == "conll":
            for p in rest.split(","):
                if not Path(p).is_file():
                    raise ConfigError(f"CoNLL file not found: {p}")
        else:
            raise ConfigError(f"--data must be synth:<preset> or conll:<train>[,<test>], got {self.data!r}")


# ------------------------------------------------------------------ config

def parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "y", "on"):
        return True
    if v in ("0", "false", "no", "n", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def coerce(name: str, value: str, types: dict):
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    t = types[name]
    try:
        return parse_bool(value) if t is bool else t(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {value!r}") from e


# keys accepted in config files besides TrainConfig fields
EXTRA_KEYS = {"data": str, "n_seeds": int, "unlabeled_fraction": float}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            out[key.strip()] = value.strip()
    return out


def config_text(exp: ExperimentSpec) -> str:
    lines = [f"data = {exp.data}", f"n_seeds = {exp.n_seeds}", f"unlabeled_fraction = {exp.unlabeled_fraction!r}"]
    lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in asdict(exp.train).items()]
    return "\n".join(lines) + "\n"


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Merge defaults < config file < command-line flags."""
    types = {**TrainConfig.field_types(), **EXTRA_KEYS}
    values: dict = {}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            values[k] = coerce(k, v, types)
    for name in types:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = coerce(name, v, types) if isinstance(v, str) else v
    train = TrainConfig(**{k: v for k, v in values.items() if k not in EXTRA_KEYS}).validate()
    command = args.command
    out = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), command)
    return ExperimentSpec(command=command, data=values.get("data", "synth:small"), train=train,
                          n_seeds=values.get("n_seeds", 1),
                          unlabeled_fraction=values.get("unlabeled_fraction", 1.0),
                          out=out, jobs=getattr(args, "jobs", 1))


# -------------------------------------------------------------------- data

def load_data(source: str, seed: int = 0) -> tuple[Dataset, Dataset]:
    """(train, test). Synthetic presets draw a fresh corpus per seed; CoNLL files are fixed."""
    kind, _, rest = source.partition(":")
    if kind == "synth":
        spec, n_test = PRESETS[rest]
        ds = generate_synthetic(replace(spec, seed=seed))
        n = len(ds)
        return ds.subset(range(n - n_test)), ds.subset(range(n - n_test, n))
    paths = rest.split(",")
    train = read_conll(paths[0])
    if len(paths) > 1:
        return train, read_conll(paths[1], train.scheme)
    cut = int(round(0.8 * len(train)))
    return train.subset(range(cut)), train.subset(range(cut, len(train)))


def run_one(exp: ExperimentSpec, seed: int) -> RunRecord:
    train, test = load_data(exp.data, seed)
    split = kshot_sample(train, exp.train.K, seed, test)
    if exp.unlabeled_fraction < 1:
        split = subsample_unlabeled(split, exp.unlabeled_fraction, seed)
    cfg = replace(exp.train, seed=seed)
    rec = run_metast(cfg, split)
    rec.experiment = {"data": exp.data, "unlabeled_fraction": exp.unlabeled_fraction,
                      "n_labeled": len(split.labeled), "n_unlabeled": len(split.unlabeled),
                      "n_test": len(split.test), "warnings": split.warnings}
    return rec


def _timed(exp: ExperimentSpec, seed: int):
    t0 = time.perf_counter()
    rec = run_one(exp, seed)
    return seed, rec, time.perf_counter() - t0


def run_seeds(exp: ExperimentSpec) -> tuple[list[RunRecord], dict[int, float]]:
    seeds = [exp.train.seed + i for i in range(exp.n_seeds)]
    if exp.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(exp.jobs) as pool:
            results = list(pool.map(_timed, [exp] * len(seeds), seeds))
    else:
        results = [_timed(exp, s) for s in seeds]
    results.sort(key=lambda r: r[0])
    return [r[1] for r in results], {r[0]: r[2] for r in results}


# ----------------------------------------------------------------- output

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def render_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def summarize(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {"n": int(v.size), "mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "median": float(np.median(v))}


AGG_HEADER = ["metric", "n", "mean", "std", "median", "per_seed"]


def aggregate_rows(records: list[RunRecord]) -> list[list]:
    metrics = {
        "final_f1": [r.final_f1 for r in records],
        "teacher_f1_last_round": [r.rounds[-1]["teacher"]["f1"] for r in records],
        "initial_f1": [r.initial_f1 for r in records],
    }
    rows = []
    for name, vals in metrics.items():
        s = summarize(vals)
        rows.append([name, s["n"], s["mean"], s["std"], s["median"], " ".join(repr(float(x)) for x in vals)])
    return rows


def pm(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def write_run_outputs(out: Path, records: list[RunRecord], timings: dict[int, float], exp: ExperimentSpec):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(exp), encoding="utf-8")
    for rec in records:
        seed = rec.config["seed"]
        if "weights" in rec.tables:
            name = f"weights_seed{seed}.csv"
            write_csv(out / name, ["round"] + DIAGNOSTIC_HEADER, rec.tables["weights"])
            rec.dumps["weights"] = name
        if "acquisition" in rec.tables:
            name = f"acquisition_seed{seed}.csv"
            write_csv(out / name, ["round"] + ACQUISITION_HEADER, rec.tables["acquisition"])
            rec.dumps["acquisition"] = name
        (out / f"record_seed{seed}.json").write_text(rec.to_json(), encoding="utf-8")
    rows = aggregate_rows(records)
    write_csv(out / "aggregate.csv", AGG_HEADER, rows)
    text = render_table(["metric", "n", "F1 (mean ± std)", "median"],
                        [[r[0], r[1], pm(r[2], r[3]), f"{100 * r[4]:.2f}"] for r in rows])
    (out / "aggregate.txt").write_text(text, encoding="utf-8")
    # wall-clock lives outside the records so those stay byte-reproducible
    (out / "timing.json").write_text(json.dumps({str(k): v for k, v in timings.items()}, indent=1) + "\n")
    return rows, text


def cmd_run(exp: ExperimentSpec) -> int:
    records, timings = run_seeds(exp)
    _, text = write_run_outputs(Path(exp.out), records, timings, exp)
    print(text, end="")
    return 0


def axis_override(exp: ExperimentSpec, axis: str, value) -> ExperimentSpec:
    if axis == "mode":
        return replace(exp, train=replace(exp.train, reweight_mode=str(value)))
    if axis == "K":
        return replace(exp, train=replace(exp.train, K=int(value)))
    if axis == "S":
        return replace(exp, train=replace(exp.train, S=int(value)))
    if axis == "unlabeled_fraction":
        return replace(exp, unlabeled_fraction=float(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_DEFAULTS)}")


SWEEP_HEADER = ["axis", "value", "n", "mean_f1", "std_f1", "median_f1", "per_seed_f1"]


def cmd_sweep(exp: ExperimentSpec, axis: str, values=None) -> list[list]:
    if axis not in SWEEP_DEFAULTS:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_DEFAULTS)}")
    values = list(values) if values else SWEEP_DEFAULTS[axis]
    out = Path(exp.out)
    rows = []
    for v in values:
        cell = axis_override(exp, axis, v)
        cell = replace(cell, out=str(out / f"{axis}={v}"))
        cell.train.validate()
        records, timings = run_seeds(cell)
        write_run_outputs(Path(cell.out), records, timings, cell)
        f1s = [r.final_f1 for r in records]
        s = summarize(f1s)
        rows.append([axis, v, s["n"], s["mean"], s["std"], s["median"], " ".join(repr(float(x)) for x in f1s)])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"sweep_{axis}.csv", SWEEP_HEADER, rows)
    text = render_table([axis, "n", "F1 (mean ± std)", "median"],
                        [[r[1], r[2], pm(r[3], r[4]), f"{100 * r[5]:.2f}"] for r in rows])
    (out / f"sweep_{axis}.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return rows


def cmd_gradcheck(instances: int = 100, seed: int = 0, out=None) -> int:
    from .checks import gradcheck
    results = gradcheck(instances, seed)
    for r in results:
        print(r.line())
    # the saved report leaves out wall-clock so a seeded rerun is identical
    report = "".join(r.line(timing=False) + "\n" for r in results)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "gradcheck.txt").write_text(report, encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


def cmd_oracle(instances: int = 200, seed: int = 0) -> int:
    """Independent oracles: meta-gradient finite differences, brute-force span F1, weight arithmetic."""
    from .checks import check_meta
    from .oracles import acquisition_worked_example, span_oracle_agreement
    lines, ok = [], True
    meta = check_meta(instances, seed)
    lines.append(meta.line())
    ok &= meta.passed
    n_bad = span_oracle_agreement(1000, seed)
    lines.append(f"{'PASS' if n_bad == 0 else 'FAIL'} phrase_f1 vs brute-force span sets: "
                 f"{n_bad} mismatches in 1000 sentence pairs")
    ok &= n_bad == 0
    w, uniform = acquisition_worked_example()
    good = abs(w[0] - 2 / 3) <= 4e-16 and abs(w[1] - 1 / 3) <= 4e-16 and np.all(uniform == uniform[0])
    lines.append(f"{'PASS' if good else 'FAIL'} acquisition weights {w.tolist()} (expect [2/3, 1/3]); "
                 f"degenerate case uniform={bool(np.all(uniform == uniform[0]))}")
    ok &= bool(good)
    print("\n".join(lines))
    return 0 if ok else 1


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_args(p):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--data", help="synth:<preset> or conll:<train>[,<test>]")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        p.add_argument("--seeds", dest="n_seeds", help="number of seeds, starting at --seed")
        p.add_argument("--unlabeled-fraction", dest="unlabeled_fraction")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for seeds")
        for f in fields(TrainConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar=type(f.default).__name__.upper())

    experiment_args(sub.add_parser("run", help="run the full procedure for each seed"))
    sweep = sub.add_parser("sweep", help="compare settings along one axis")
    experiment_args(sweep)
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_DEFAULTS))
    sweep.add_argument("--values", help="comma-separated axis values (default depends on axis)")
    for name in ("gradcheck", "oracle"):
        p = sub.add_parser(name, help="finite-difference gradient checks" if name == "gradcheck"
                           else "independent oracle checks")
        p.add_argument("--instances", type=int, default=100 if name == "gradcheck" else 200)
        p.add_argument("--seed", type=int, default=0)
        if name == "gradcheck":
            p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernel backend: %s", _kernels.BACKEND)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.instances, args.seed, args.out)
        if args.command == "oracle":
            return cmd_oracle(args.instances, args.seed)
        exp = build_spec(args)
        if args.command == "run":
            return cmd_run(exp)
        values = args.values.split(",") if args.values else None
        cmd_sweep(exp, args.axis, values)
        return 0
    except (ConfigError, OSError) as e:
        print(f"metast: error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, ValueError) as e:
        rec = getattr(e, "record", None)
        if rec is not None and getattr(args, "out", None):
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "aborted_record.json").write_text(rec.to_json(), encoding="utf-8")
        print(f"metast: run failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner.

    smope run CONFIG [--seed N] [--out DIR] [--mode MODE]
    smope report RUN_DIR

Exit status: 0 on success, 1 for a bad config or command line, 2 when the run
itself fails (partial outputs and a failure record are left in the run dir).
The config schema is documented in ``configs/README.md``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import re
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .continual import (ABLATION_LADDER, HyperParams, StreamSpec, ablation_stage, faa_caa,
                        generate_task_stream, mean_usage_entropy, run_stream)
from .model import DENSE, ModelConfig
from .routing import usage_entropy, usage_rows
from .theory import RateConfig, rate_experiment, write_rate_csv, write_rate_summary

MODES = ("continual", "ablation", "noise-sweep", "rate")

EXPERIMENT_KEYS = {"mode": str, "seeds": "ints", "out": str, "workers": int}
SWEEP_KEYS = {"epsilons": "floats"}
MODEL_KEYS = ("depth", "heads", "embed_dim", "prompt_layers", "prompt_length", "select_k", "mlp_ratio",
              "score_mode")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str
    seeds: list
    out: Path
    model: ModelConfig
    stream: StreamSpec
    hyper: HyperParams
    epsilons: list = field(default_factory=lambda: [0.0, 0.4, 1.0])
    rate: RateConfig = field(default_factory=RateConfig)
    workers: int = 1
    source: Path = None


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _line_index(text):
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    index, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", stripped)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip().lower()), no)
    return index


def _convert(raw, kind, default=None):
    raw = raw.strip()
    if kind == "ints":
        return [int(v) for v in raw.replace(",", " ").split()]
    if kind == "floats":
        return [float(v) for v in raw.replace(",", " ").split()]
    if kind is bool or isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int or (isinstance(default, int) and not isinstance(default, bool)):
        return int(raw)
    if kind is float or isinstance(default, float):
        return float(raw)
    return raw


def load_config(path, overrides=None) -> ExperimentConfig:
    """Parse and fully validate an experiment config; raises ``ConfigError`` with a line anchor."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        msg = str(exc).replace("\n", " ")
        lineno = getattr(exc, "lineno", None)
        if lineno is None and getattr(exc, "errors", None):
            lineno = exc.errors[0][0]
            msg = f"cannot parse line {exc.errors[0][1].strip()!r}"
        raise ConfigError(f"{path}:{lineno}: {msg}" if lineno else f"{path}: {msg}") from None
    lines = _line_index(text)

    def fail(section, key, msg):
        no = lines.get((section, key)) or lines.get((section, None))
        where = f"{path}:{no}" if no else str(path)
        raise ConfigError(f"{where}: [{section}] {msg}")

    schema = {
        "experiment": EXPERIMENT_KEYS,
        "model": {k: None for k in MODEL_KEYS},
        "stream": {f.name: None for f in fields(StreamSpec) if f.name not in ("tokens", "raw_dim")},
        "train": {f.name: None for f in fields(HyperParams)},
        "sweep": SWEEP_KEYS,
        "rate": {f.name: None for f in fields(RateConfig)},
    }
    schema["stream"].update({"tokens": None, "raw_dim": None})
    for section in parser.sections():
        if section not in schema:
            fail(section, None, f"unknown section; expected one of {', '.join(schema)}")
        for key in parser[section]:
            if key not in schema[section]:
                fail(section, key, f"unknown key {key!r}")

    def values(section, defaults):
        out = {}
        if not parser.has_section(section):
            return out
        for key, raw in parser[section].items():
            try:
                if section == "model" and key == "select_k" and raw.strip().lower() == "dense":
                    out[key] = DENSE
                elif section == "rate" and key == "n_grid":
                    out[key] = tuple(_convert(raw, "ints"))
                else:
                    kind = schema[section][key]
                    out[key] = _convert(raw, kind, defaults.get(key))
            except ValueError as exc:
                fail(section, key, f"bad value for {key!r}: {exc}")
        return out

    exp = values("experiment", {})
    mode = (overrides or {}).get("mode") or exp.get("mode", "continual")
    if mode not in MODES:
        fail("experiment", "mode", f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    seeds = exp.get("seeds", [0])
    if (overrides or {}).get("seed") is not None:
        seeds = [int(overrides["seed"])]
    if not seeds:
        fail("experiment", "seeds", "at least one seed is required")
    out = (overrides or {}).get("out") or exp.get("out")
    if out is None:
        out = Path("runs") / path.stem
    workers = exp.get("workers", 1)
    if workers < 1:
        fail("experiment", "workers", "workers must be positive")

    def build(section, ctor, defaults, extra=None):
        kw = {**values(section, defaults), **(extra or {})}
        try:
            obj = ctor(**kw)
            if hasattr(obj, "validate"):
                obj.validate()
            return obj
        except (TypeError, ValueError) as exc:
            key = next((k for k in kw if k in str(exc)), None)
            fail(section, key, str(exc))

    stream = build("stream", StreamSpec, asdict(StreamSpec()))
    model = build("model", ModelConfig, asdict(ModelConfig()),
                  {"tokens": stream.tokens + 1, "raw_dim": stream.raw_dim})
    hyper = build("train", HyperParams, asdict(HyperParams()))
    rate = build("rate", RateConfig, asdict(RateConfig()))
    epsilons = values("sweep", {}).get("epsilons", [0.0, 0.4, 1.0])
    for eps in epsilons:
        if not 0.0 <= eps <= 1.0:
            fail("sweep", "epsilons", f"epsilon {eps} outside [0, 1]")
    return ExperimentConfig(mode, list(seeds), Path(out), model, stream, hyper, list(epsilons), rate,
                            workers, path)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _variants(cfg: ExperimentConfig):
    if cfg.mode == "continual":
        return [("SMoPE", cfg.model, cfg.hyper)]
    if cfg.mode == "ablation":
        return [(name,) + ablation_stage(name, cfg.model, cfg.hyper) for name, _, _ in ABLATION_LADDER]
    if cfg.mode == "noise-sweep":
        return [(f"eps={eps:g}", cfg.model, HyperParams(**{**asdict(cfg.hyper), "epsilon": eps}))
                for eps in cfg.epsilons]
    raise ValueError(cfg.mode)


def slug(name):
    return re.sub(r"[^A-Za-z0-9.=]+", "_", name).strip("_").lower() or "variant"


def _run_job(job):
    """One (variant, seed) stream run; returns metric records and usage rows."""
    variant, model_cfg, hyper, spec, seed = job
    stream = generate_task_stream(spec, seed)
    records = []

    def on_task(state, task, row, tlog):
        entropy = [[usage_entropy(f) if f.sum() > 0 else None for f in blk.frequency] for blk in state.prompts]
        records.append({
            "event": "task", "variant": variant, "seed": seed, "task": task.index,
            "A_t": float(np.mean(row)), "row": [float(v) for v in row],
            "losses": {"sparse": tlog.losses, "dense": tlog.dense_losses, "tap": tlog.tap_losses},
            "entropy": entropy,
        })

    state, rows, _ = run_stream(model_cfg, stream, hyper, seed, on_task=on_task)
    faa, caa = faa_caa(rows)
    records.append({"event": "final", "variant": variant, "seed": seed, "FAA": faa, "CAA": caa,
                    "mean_entropy": mean_usage_entropy(state)})
    return records, rows, list(usage_rows(state.prompts))


def _finite_mean(values):
    vals = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _append_jsonl(path, records):
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _run_streams(cfg: ExperimentConfig, out: Path):
    variants = _variants(cfg)
    jobs = [(name, m, h, cfg.stream, seed) for name, m, h in variants for seed in cfg.seeds]
    metrics = out / "metrics.jsonl"
    acc_rows, usage, finals = [], {}, []
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(max_workers=cfg.workers)
        results = pool.map(_run_job, jobs)
    else:
        pool, results = None, map(_run_job, jobs)
    try:
        for job, (records, rows, urows) in zip(jobs, results):
            name, seed = job[0], job[4]
            _append_jsonl(metrics, records)
            finals.append(records[-1])
            for t, row in enumerate(rows):
                for i, a in enumerate(row):
                    acc_rows.append([name, seed, t, i, repr(float(a))])
            usage.setdefault(name, []).extend([seed, *u] for u in urows)
            print(f"{name:<28} seed {seed}: FAA={records[-1]['FAA']:.4f} CAA={records[-1]['CAA']:.4f}", flush=True)
    finally:
        if pool is not None:
            pool.shutdown()

    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "trained_upto", "task", "accuracy"])
        w.writerows(acc_rows)
    for name, rows in usage.items():
        target = out / "usage.csv" if len(variants) == 1 else out / slug(name) / "usage.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "layer", "head", "expert", "frequency"])
            w.writerows([s, l, h, e, repr(f)] for s, l, h, e, f in rows)

    summary = {"mode": cfg.mode, "seeds": cfg.seeds, "variants": []}
    for name, _, _ in variants:
        fs = [r for r in finals if r["variant"] == name]
        summary["variants"].append({
            "variant": name,
            "FAA_median": float(np.median([r["FAA"] for r in fs])),
            "CAA_median": float(np.median([r["CAA"] for r in fs])),
            "entropy_mean": _finite_mean([r["mean_entropy"] for r in fs]),
        })
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{'variant':<28} {'FAA':>7} {'CAA':>7} {'entropy':>8}")
    for v in summary["variants"]:
        print(f"{v['variant']:<28} {v['FAA_median']:7.4f} {v['CAA_median']:7.4f} {v['entropy_mean']:8.4f}")


def _run_rate(cfg: ExperimentConfig, out: Path):
    metrics = out / "metrics.jsonl"
    result = rate_experiment(cfg.rate, on_record=lambda r: _append_jsonl(metrics, [{"event": "fit", **r}]))
    write_rate_csv(out / "rate.csv", result.records)
    write_rate_summary(out / "summary.json", result)
    _append_jsonl(metrics, [{"event": "final", "mode": "rate", **result.summary()}])
    for n, v in result.medians.items():
        print(f"n={n:>7}  median Voronoi loss {v:.5f}")
    print("slope: degenerate" if result.degenerate else f"slope: {result.slope:.4f}")


def run(config_path, seed=None, out=None, mode=None):
    """Run one experiment; returns the process exit status."""
    try:
        cfg = load_config(config_path, {"seed": seed, "out": out, "mode": mode})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "metrics.jsonl").unlink(missing_ok=True)
        shutil.copyfile(cfg.source, cfg.out / "config.ini")
    except OSError as exc:
        print(f"config error: output directory {cfg.out} is not writable ({exc})", file=sys.stderr)
        return 1
    try:
        if cfg.mode == "rate":
            _run_rate(cfg, cfg.out)
        else:
            _run_streams(cfg, cfg.out)
    except Exception as exc:  # any runtime failure is recorded, not raised
        _append_jsonl(cfg.out / "metrics.jsonl", [{
            "event": "failure", "mode": cfg.mode, "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
        }])
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

REPORT_FILES = ("report.txt", "table.tsv", "accuracy_matrix.tsv", "usage_heatmap.tsv", "sweep.tsv", "rate.tsv")


class ReportError(FileNotFoundError):
    pass


def _fmt(x):
    return "nan" if x is None or not np.isfinite(x) else f"{x:.6f}"


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_tsv(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(str(v) for v in r) + "\n")


def emit_report(run_dir):
    """Aggregate a finished run into ``report.txt`` plus plot-ready TSV files; returns the text."""
    run_dir = Path(run_dir)
    missing = [n for n in ("metrics.jsonl", "summary.json") if not (run_dir / n).is_file()]
    if missing:
        raise ReportError(f"{run_dir}: missing expected files: {', '.join(missing)}")
    records = _read_jsonl(run_dir / "metrics.jsonl")
    summary = json.loads((run_dir / "summary.json").read_text())
    mode = summary.get("mode", "rate" if "slope" in summary else None)
    need = ["rate.csv"] if mode == "rate" else ["accuracy.csv"]
    missing = [n for n in need if not (run_dir / n).is_file()]
    if missing:
        raise ReportError(f"{run_dir}: missing expected files: {', '.join(missing)}")
    for name in REPORT_FILES:
        (run_dir / name).unlink(missing_ok=True)
    if mode == "rate":
        text = _report_rate(run_dir, summary)
    else:
        text = _report_streams(run_dir, records, mode)
    (run_dir / "report.txt").write_text(text)
    return text


def _report_rate(run_dir, summary):
    with open(run_dir / "rate.csv") as fh:
        rows = list(csv.DictReader(fh))
    by_n = {}
    for r in rows:
        v = float(r["voronoi_loss"])
        if np.isfinite(v):
            by_n.setdefault(int(r["n"]), []).append(v)
    out = []
    for n in sorted(by_n):
        q25, med, q75 = np.percentile(by_n[n], [25, 50, 75])
        out.append([n, len(by_n[n]), _fmt(med), _fmt(q25), _fmt(q75)])
    _write_tsv(run_dir / "rate.tsv", ["n", "fits", "median", "q25", "q75"], out)
    lines = ["estimation rate", f"{'n':>8} {'fits':>5} {'median':>10} {'q25':>10} {'q75':>10}"]
    lines += [f"{r[0]:>8} {r[1]:>5} {r[2]:>10} {r[3]:>10} {r[4]:>10}" for r in out]
    slope = summary.get("slope")
    lines.append("log-log slope: " + ("degenerate" if slope is None else f"{slope:.4f}"))
    lines.append(f"failed fits: {summary.get('failures', 0)}")
    return "\n".join(lines) + "\n"


def _variant_order(names, mode):
    ladder = [n for n, _, _ in ABLATION_LADDER]
    if mode == "ablation":
        return [n for n in ladder if n in names] + sorted(n for n in names if n not in ladder)
    if mode == "noise-sweep":
        return sorted(names, key=lambda n: float(n.split("=", 1)[1]) if n.startswith("eps=") else np.inf)
    return sorted(names)


def _report_streams(run_dir, records, mode):
    finals = [r for r in records if r.get("event") == "final"]
    names = _variant_order({r["variant"] for r in finals}, mode)
    table = []
    for name in names:
        fs = sorted((r for r in finals if r["variant"] == name), key=lambda r: r["seed"])
        faa = [r["FAA"] for r in fs]
        caa = [r["CAA"] for r in fs]
        ent = [r["mean_entropy"] for r in fs if r["mean_entropy"] is not None and np.isfinite(r["mean_entropy"])]
        table.append([name, len(fs), _fmt(np.median(faa)), _fmt(np.std(faa)), _fmt(np.median(caa)),
                      _fmt(np.std(caa)), _fmt(np.mean(ent)) if ent else "nan"])
    _write_tsv(run_dir / "table.tsv", ["variant", "seeds", "FAA_median", "FAA_std", "CAA_median", "CAA_std",
                                       "entropy_mean"], table)

    with open(run_dir / "accuracy.csv") as fh:
        acc = list(csv.DictReader(fh))
    cells = {}
    for r in acc:
        cells.setdefault((r["variant"], int(r["trained_upto"]), int(r["task"])), []).append(float(r["accuracy"]))
    rank = {n: i for i, n in enumerate(names)}
    keys = sorted(cells, key=lambda k: (rank.get(k[0], len(rank)), k[0], k[1], k[2]))
    _write_tsv(run_dir / "accuracy_matrix.tsv", ["variant", "trained_upto", "task", "accuracy_mean"],
               [[k[0], k[1], k[2], _fmt(np.mean(cells[k]))] for k in keys])

    heat = []
    for name in names:
        path = run_dir / "usage.csv" if (run_dir / "usage.csv").is_file() else run_dir / slug(name) / "usage.csv"
        if not path.is_file():
            continue
        with open(path) as fh:
            freq = {}
            for r in csv.DictReader(fh):
                freq.setdefault((int(r["layer"]), int(r["head"]), int(r["expert"])), []).append(float(r["frequency"]))
        heat += [[name, *k, _fmt(np.mean(v))] for k, v in sorted(freq.items())]
    _write_tsv(run_dir / "usage_heatmap.tsv", ["variant", "layer", "head", "expert", "frequency_mean"], heat)

    if mode == "noise-sweep":
        _write_tsv(run_dir / "sweep.tsv", ["epsilon", "FAA_median", "CAA_median", "entropy_mean"],
                   [[r[0].split("=", 1)[1], r[2], r[4], r[6]] for r in table])

    width = max([len("variant")] + [len(r[0]) for r in table])
    lines = [f"mode: {mode}", f"{'variant':<{width}} {'seeds':>5} {'FAA':>9} {'CAA':>9} {'entropy':>9}"]
    lines += [f"{r[0]:<{width}} {r[1]:>5} {r[2]:>9} {r[4]:>9} {r[6]:>9}" for r in table]
    failures = [r for r in records if r.get("event") == "failure"]
    if failures:
        lines.append(f"failures recorded: {len(failures)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def main(argv=None):
    parser = _Parser(prog="smope", description="sparse prompt-expert continual learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from an INI config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="run this single seed instead of the config's list")
    p_run.add_argument("--out", default=None, help="output directory (overrides [experiment] out)")
    p_run.add_argument("--mode", default=None, choices=MODES)
    p_rep = sub.add_parser("report", help="aggregate a finished run directory")
    p_rep.add_argument("run_dir")
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.command == "run":
        return run(args.config, seed=args.seed, out=args.out, mode=args.mode)
    try:
        print(emit_report(args.run_dir), end="")
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``cradle {synth,qc,train,generate,evaluate,ablate}``.

Each invocation writes into a fresh run directory under ``--out`` (or
``$CRADLE_OUT_ROOT``, or ``./runs``) named by command, UTC timestamp and
seed.  ``run_manifest.json`` is written when the run starts and finalized,
with output digests, when it ends.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, benchmark
from .data import (
    CONTROL_NAME,
    DataError,
    ExpressionMatrix,
    PerturbationSet,
    Split,
    load_dataset,
    read_gene_flags,
    split_ood_combinations,
    split_random,
    write_counts,
    write_dataset,
    write_gene_flags,
    write_perturbations,
)
from .estimator import CradleVAE
from .evaluation import EvalError, evaluate
from .model import ModelConfig
from .numerics.checkpoint import CheckpointError
from .numerics.nn import NonFiniteGradient
from .qc import DEFAULT_SIDES, QcConfig, QualityControl
from .synth import SynthConfig, synth_generate, write_truth
from .train import NumericalError, TrainConfig

log = logging.getLogger("cradle")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.bin"
MANIFEST = "run_manifest.json"


class ConfigError(ValueError):
    pass


def _model_defaults():
    skip = {"n_genes", "n_treatments"}
    return {f.name: f.default for f in fields(ModelConfig) if f.name not in skip}


SCHEMA = {
    "synth": asdict(SynthConfig()),
    "qc": {"n_mads": 3.0, "mad_scale": 1.4826, "threshold_pool": "all", **DEFAULT_SIDES},
    "model": _model_defaults(),
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "qc_n_mads"},
    "split": {"kind": "ood", "fractions": (0.75, 0.05, 0.2), "ood_fraction": 0.25, "val_fraction": 0.1},
    "eval": {"n_generated": 512, "jaccard_k": 50, "top_n": 20, "truth": "data", "n_mads": (3.0, 4.0, 5.0)},
    "generate": {"n": 100, "artifact_flag": 0, "library_size": 0.0},
}

PRESETS = {
    "benchmark": {
        "model": {**benchmark.MODEL},
        "train": {k: v for k, v in benchmark.TRAIN.items()},
        "split": {"kind": "random", "fractions": benchmark.SPLIT_FRACTIONS},
        "qc": {"n_mads": benchmark.QC_N_MADS},
        "eval": {"n_generated": benchmark.N_GENERATED, "jaccard_k": benchmark.JACCARD_K, "truth": "synthetic"},
    },
}


def _coerce(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(x) for x in raw.replace(",", " ").split())
        if isinstance(default, list):
            return json.loads(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: cannot parse as {type(default).__name__}") from exc


def load_config(path=None):
    """Defaults, overlaid with a preset name or an ini file.  Unknown sections or keys are errors."""
    cfg = {s: dict(v) for s, v in SCHEMA.items()}
    if path is None:
        return cfg
    if path in PRESETS and not Path(path).exists():
        for section, values in PRESETS[path].items():
            cfg[section].update(values)
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            cfg[section][key] = _coerce(section, key, raw, SCHEMA[section][key])
    return cfg


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


_ACTIVE_RUNS = []


class RunDir:
    """One output directory per invocation, with a manifest written at start and finalized at the end."""

    def __init__(self, root, command, seed, name=None, argv=None, config=None, inputs=()):
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        self.path = Path(root) / (name or f"{command}-{stamp}-s{seed}")
        manifest = self.path / MANIFEST
        if manifest.exists():
            status = json.loads(manifest.read_text()).get("status")
            if status == "finalized":
                raise ConfigError(f"refusing to overwrite finalized run {self.path}")
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "tool_version": __version__,
            "argv": list(argv or []),
            "seed": seed,
            "config": _jsonable(config or {}),
            "inputs": {str(p): sha256_file(p) for p in inputs},
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": {},
            "content_hash": None,
        }
        self._write()
        _ACTIVE_RUNS.append(self)

    def __truediv__(self, name):
        return self.path / name

    def _write(self):
        tmp = self.path / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, allow_nan=True) + "\n")
        os.replace(tmp, self.path / MANIFEST)

    def finalize(self, status="finalized", extra=None):
        outputs = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name not in (MANIFEST, MANIFEST + ".tmp"):
                outputs[str(p.relative_to(self.path))] = sha256_file(p)
        h = hashlib.sha256()
        for name, digest in outputs.items():
            h.update(f"{digest}  {name}\n".encode())
        self.manifest.update(outputs=outputs, content_hash=h.hexdigest(), finished=_now(), status=status)
        if extra:
            self.manifest.update(_jsonable(extra))
        self._write()


def _out_root(args):
    return args.out or os.environ.get("CRADLE_OUT_ROOT") or "runs"


def _data_inputs(directory):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"data directory not found: {d}")
    return [p for p in sorted(d.iterdir()) if p.suffix in (".csv", ".mtx", ".json") and p.is_file()]


def _qc_config(section, n_mads=None):
    sides = {k: section[k] for k in DEFAULT_SIDES}
    try:
        return QcConfig(section["n_mads"] if n_mads is None else n_mads, section["mad_scale"], sides,
                        section["threshold_pool"])
    except ValueError as exc:
        raise ConfigError(f"[qc] {exc}") from exc


def _quality_control(qcfg):
    return QualityControl(qcfg.n_mads, qcfg.mad_scale, dict(qcfg.sides), qcfg.threshold_pool)


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["synth"]["seed"] = args.seed
    if getattr(args, "variant", None):
        cfg["model"]["variant"] = args.variant
    if getattr(args, "alpha", None) is not None:
        cfg["train"]["alpha"] = args.alpha
    if getattr(args, "precision", None):
        cfg["train"]["precision"] = args.precision
    if getattr(args, "n_mads", None) is not None and not isinstance(args.n_mads, list):
        cfg["qc"]["n_mads"] = args.n_mads
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    return cfg


def _estimator(cfg, variant=None, seed=None):
    m, t = cfg["model"], cfg["train"]
    try:
        ModelConfig(1, 2, **{**m, **({"variant": variant} if variant else {})})
        TrainConfig(**{**t})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    train_kw = {k: v for k, v in t.items() if k != "seed"}
    return CradleVAE(**{**m, **({"variant": variant} if variant else {})}, **train_kw,
                     random_state=t["seed"] if seed is None else seed)


def _make_split(cfg, dataset, seed):
    s = cfg["split"]
    if s["kind"] == "random":
        try:
            return split_random(dataset.n_cells, s["fractions"], seed)
        except ValueError as exc:
            raise ConfigError(f"[split] {exc}") from exc
    if s["kind"] == "ood":
        return split_ood_combinations(dataset.perturbations, s["ood_fraction"], seed, s["val_fraction"])
    raise ConfigError(f"[split] kind must be 'random' or 'ood', got {s['kind']!r}")


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg):
    try:
        scfg = SynthConfig(**cfg["synth"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[synth] {exc}") from exc
    run = RunDir(_out_root(args), "synth", scfg.seed, args.run_name, args.argv, {"synth": asdict(scfg)})
    dataset, truth = synth_generate(scfg)
    write_dataset(dataset, run.path)
    write_truth(truth, run / "truth.json")
    run.finalize(extra={"n_cells": dataset.n_cells})
    print(run.path)
    return run


def cmd_qc(args, cfg):
    qcfg = _qc_config(cfg["qc"])
    inputs = _data_inputs(args.data)
    run = RunDir(_out_root(args), "qc", args.seed or 0, args.run_name, args.argv, {"qc": asdict(qcfg)}, inputs)
    dataset = load_dataset(args.data)
    qc = _quality_control(qcfg).fit(dataset.expression, doublets=dataset.doublets)
    report = qc.report(dataset.expression, dataset.doublets)
    report.to_csv(run / "qc_report.csv", dataset.expression.cell_ids)
    rate = float(np.mean(report.artifact_labels == 0))
    run.finalize(extra={"qc_pass_rate": rate, "n_cells": report.n_cells})
    print(run.path)
    return run


def _load_train_run(run_dir):
    run_dir = Path(run_dir)
    if not (run_dir / CHECKPOINT).exists():
        raise DataError(f"no checkpoint in {run_dir}")
    try:
        model = CradleVAE.load(run_dir / CHECKPOINT)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    meta = json.loads((run_dir / "treatments.json").read_text())
    return model, meta


def cmd_train(args, cfg):
    qcfg = _qc_config(cfg["qc"])
    inputs = _data_inputs(args.data)
    seed = cfg["train"]["seed"]
    model = _estimator(cfg)
    run = RunDir(_out_root(args), "train", seed, args.run_name, args.argv,
                 {k: cfg[k] for k in ("model", "train", "split", "qc")}, inputs)
    dataset = load_dataset(args.data)
    resume = None
    if args.resume:
        split = Split.load(Path(args.resume) / "split.json")
        resume = Path(args.resume) / CHECKPOINT
    else:
        split = _make_split(cfg, dataset, seed)
    split.save(run / "split.json")
    train, val = dataset.subset(split.train_indices), dataset.subset(split.val_indices)
    qc = _quality_control(qcfg).fit(train.expression, doublets=train.doublets)
    report = qc.report(train.expression, train.doublets)
    report.to_csv(run / "qc_report.csv", train.expression.cell_ids)
    labels = report.artifact_labels
    validation = None
    if val.n_cells:
        validation = (val.expression.counts, val.perturbations.assignments,
                      qc.predict(val.expression, val.doublets, allow_empty=True))
    model.fit(train.expression.counts, train.perturbations.assignments, labels, validation,
              checkpoint_path=run / CHECKPOINT, resume=resume)
    model.history_.to_csv(run / "history.csv")
    (run / "treatments.json").write_text(json.dumps({"treatment_names": dataset.perturbations.treatment_names}))
    write_gene_flags(dataset.expression, run / "genes.csv")
    model.export_latents(run / "latents.csv", train.expression.counts, train.perturbations.assignments,
                         labels, train.expression.cell_ids, train.perturbations.labels())
    h = model.history_
    run.finalize(extra={"epochs": len(h), "final_j1": h.records[-1]["j1"] if len(h) else None,
                        "resumed_from": str(args.resume) if args.resume else None})
    print(run.path)
    return run


def cmd_generate(args, cfg):
    g = cfg["generate"]
    n = args.n if args.n is not None else g["n"]
    flag = args.artifact_flag if args.artifact_flag is not None else g["artifact_flag"]
    if flag not in (0, 1):
        raise ConfigError("artifact flag must be 0 or 1")
    seed = args.seed if args.seed is not None else 0
    model, meta = _load_train_run(args.run)
    names = meta["treatment_names"]
    treatments = args.treatment or [CONTROL_NAME]
    try:
        rows = PerturbationSet.from_labels([t for t in treatments for _ in range(n)], names)
    except DataError as exc:
        raise DataError(f"unknown treatment: {exc}") from exc
    run = RunDir(_out_root(args), "generate", seed, args.run_name, args.argv,
                 {"generate": {"n": n, "artifact_flag": flag, "treatments": treatments,
                               "library_size": args.library_size or g["library_size"] or None}},
                 [Path(args.run) / CHECKPOINT])
    lib = args.library_size or g["library_size"] or None
    counts = model.generate(rows.assignments, flag, lib, rng=np.random.default_rng([seed, 0x6E]))
    table = read_gene_flags(Path(args.run) / "genes.csv")
    flags = np.array(list(table.values()), dtype=bool).reshape(len(table), 3)
    expr = ExpressionMatrix(counts.astype(np.int64), list(table), [f"gen{i:06d}" for i in range(len(counts))],
                            flags[:, 0], flags[:, 1], flags[:, 2])
    write_counts(expr, run / "counts.csv")
    write_gene_flags(expr, run / "genes.csv")
    write_perturbations(rows, expr.cell_ids, run / "perts.csv")
    run.finalize(extra={"n_generated": len(counts)})
    print(run.path)
    return run


def cmd_evaluate(args, cfg):
    e = cfg["eval"]
    n_mads = tuple(args.n_mads) if args.n_mads else tuple(e["n_mads"])
    seed = args.seed if args.seed is not None else 0
    model, _ = _load_train_run(args.run)
    inputs = _data_inputs(args.data) + [Path(args.run) / CHECKPOINT]
    run = RunDir(_out_root(args), "evaluate", seed, args.run_name, args.argv,
                 {"eval": {**e, "n_mads": n_mads}, "qc": cfg["qc"]}, inputs)
    dataset = load_dataset(args.data)
    split = Split.load(Path(args.run) / "split.json")
    truth = None
    if e["truth"] == "synthetic":
        path = Path(args.data) / "truth.json"
        if not path.exists():
            raise DataError(f"[eval] truth = synthetic needs {path}")
        truth = {k: np.asarray(v) for k, v in json.loads(path.read_text())["ate"].items()}
    elif e["truth"] != "data":
        raise ConfigError("[eval] truth must be 'data' or 'synthetic'")
    try:
        report = evaluate(model.generator(), dataset, split, e["n_generated"], n_mads, e["jaccard_k"],
                          e["top_n"], truth_ate=truth, seed=seed, qc_config=_qc_config(cfg["qc"]))
    except EvalError as exc:
        raise DataError(str(exc)) from exc
    report.write_json(run / "eval_report.json")
    report.write_summary_csv(run / "eval_summary.csv")
    expr = dataset.expression.with_counts(report.generated, [f"gen{i:06d}" for i in range(len(report.generated))])
    write_counts(expr, run / "generated_counts.csv")
    run.finalize(extra={"mean": report.means, "qcpr": {str(k): v for k, v in report.qcpr.items()}})
    print(run.path)
    return run


def cmd_ablate(args, cfg):
    """Train and evaluate each variant on the same split; one row per (variant, seed)."""
    qcfg = _qc_config(cfg["qc"])
    e = cfg["eval"]
    seeds = args.seeds or [cfg["train"]["seed"]]
    variants = args.variants or ["full", "no_cf", "no_causal"]
    inputs = _data_inputs(args.data)
    run = RunDir(_out_root(args), "ablate", seeds[0], args.run_name, args.argv,
                 {k: cfg[k] for k in ("model", "train", "split", "qc", "eval")}, inputs)
    dataset = load_dataset(args.data)
    truth = None
    if e["truth"] == "synthetic":
        truth = {k: np.asarray(v) for k, v in json.loads((Path(args.data) / "truth.json").read_text())["ate"].items()}
    rows = []
    for seed in seeds:
        split = _make_split(cfg, dataset, seed)
        train = dataset.subset(split.train_indices)
        qc = _quality_control(qcfg).fit(train.expression, doublets=train.doublets)
        labels = qc.predict(train.expression, train.doublets)
        for variant in variants:
            model = _estimator(cfg, variant, seed)
            model.fit(train.expression.counts, train.perturbations.assignments, labels)
            rep = evaluate(model.generator(), dataset, split, e["n_generated"], tuple(e["n_mads"]),
                           e["jaccard_k"], e["top_n"], truth_ate=truth, seed=seed, qc_config=qcfg)
            rows.append({"variant": variant, "seed": seed, **rep.means,
                         **{f"qcpr_{k:g}": v for k, v in rep.qcpr.items()}})
            log.info("ablate seed=%d variant=%s %s", seed, variant, rows[-1])
    cols = list(rows[0])
    with open(run / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    run.finalize()
    print(run.path)
    return run


# -- entry point ----------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="ini file or preset name (benchmark)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output root (default $CRADLE_OUT_ROOT or ./runs)")
    common.add_argument("--run-name", help="explicit run directory name")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--variant", choices=("full", "no_cf", "no_causal"))
    model_flags.add_argument("--alpha", type=float)
    model_flags.add_argument("--precision", choices=("f32", "f64"))
    model_flags.add_argument("--epochs", type=int)

    p = argparse.ArgumentParser(prog="cradle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic dataset and its ground truth")

    q = sub.add_parser("qc", parents=[common], help="label cells with the six QC criteria")
    q.add_argument("data")
    q.add_argument("--n-mads", type=float, choices=(3.0, 4.0, 5.0))

    t = sub.add_parser("train", parents=[common, model_flags], help="fit the model on a dataset")
    t.add_argument("data")
    t.add_argument("--n-mads", type=float, choices=(3.0, 4.0, 5.0))
    t.add_argument("--resume", help="previous train run directory to continue")

    g = sub.add_parser("generate", parents=[common], help="sample cells from a trained run")
    g.add_argument("run")
    g.add_argument("--treatment", action="append", help="treatment label, repeatable (default control)")
    g.add_argument("--n", type=int)
    g.add_argument("--artifact-flag", type=int, choices=(0, 1))
    g.add_argument("--library-size", type=float)

    e = sub.add_parser("evaluate", parents=[common], help="score a trained run against held-out cells")
    e.add_argument("run")
    e.add_argument("data")
    e.add_argument("--n-mads", type=float, nargs="+", choices=(3.0, 4.0, 5.0))

    a = sub.add_parser("ablate", parents=[common, model_flags], help="compare model variants")
    a.add_argument("data")
    a.add_argument("--n-mads", type=float, choices=(3.0, 4.0, 5.0))
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--variants", nargs="+", choices=("full", "no_cf", "no_causal"))
    return p


COMMANDS = {
    "synth": cmd_synth,
    "qc": cmd_qc,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _ACTIVE_RUNS.clear()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail("config error", exc, EXIT_CONFIG)
    except (DataError, FileNotFoundError, CheckpointError) as exc:
        return _fail("data error", exc, EXIT_DATA)
    except (NumericalError, NonFiniteGradient, FloatingPointError) as exc:
        return _fail("numerical failure", exc, EXIT_NUMERIC)
    return EXIT_OK


def _fail(kind, exc, code):
    print(f"{kind}: {exc}", file=sys.stderr)
    for run in _ACTIVE_RUNS:
        if run.manifest["status"] == "running":
            run.finalize("failed", {"error": f"{kind}: {exc}", "exit_code": code})
    return code


if __name__ == "__main__":
    sys.exit(main())

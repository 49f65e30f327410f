"""``hdcam`` command line: synth, params, train, eval, ablate.

Exit codes: 0 ok, 1 I/O, 2 config validation, 3 data/protocol,
4 checkpoint mismatch. ``HDCAM_LOG`` sets the log level.
"""
from __future__ import annotations

import os

# each job is single-threaded; must run before numpy loads BLAS
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    DB2_CHANNELS,
    DB2_FS,
    discover_subjects,
    load_recording,
    segment_windows,
    split_by_repetition,
    subject_path,
    synth_generate,
    write_recording,
)
from .errors import CheckpointError, ConfigError, HdcamError, ProtocolError, UsageError
from .model import (
    PUBLISHED_PARAMS,
    HdcamModel,
    ModelConfig,
    ablation_config,
    build_ablation_grid,
    count_parameters,
    format_report,
    named_variant,
    reconcile,
    table5_grid,
    validate_config,
)
from .model.params import format_reconciliation
from .sigproc import preprocess
from .train import Metrics, ProtocolSpec, SubjectRun, TrainConfig, aggregate, evaluate, run_protocol

log = logging.getLogger("hdcam")

EPOCHS_NOTE = "final-epoch reporting, no early stopping, per-subject models"


# run specification ---------------------------------------------------------

@dataclass
class RunSpec:
    variant: str | None = "Small"
    model: dict | None = None
    window_ms: int = 300
    stride_ms: float = 50.0
    eval_stride_ms: float = 100.0
    test_reps: list[int] = field(default_factory=lambda: [2, 5])
    include_rest: bool = False
    subjects: list[int] | None = None
    data_dir: str = "data"
    output_dir: str = "runs"
    train: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise HdcamError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        if "stage_channels" in raw:  # a bare model config
            raw = {"model": raw, "variant": None}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        tunknown = sorted(set(raw.get("train", {})) - {f.name for f in dataclasses.fields(TrainConfig)})
        if tunknown:
            raise ConfigError(f"{path}: unknown train keys {tunknown}")
        return cls(**raw)

    def model_config(self) -> ModelConfig:
        if self.model is not None:
            cfg = ModelConfig.from_dict({"window_ms": self.window_ms, **self.model})
        elif self.variant:
            cfg = named_variant(self.variant)
        else:
            raise ConfigError("config names neither a variant nor an explicit model")
        cfg = cfg.replace(window_ms=self.window_ms)
        if self.include_rest and cfg.num_classes == 17:
            cfg = cfg.replace(num_classes=18)
        problems = validate_config(cfg)
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def protocol(self) -> ProtocolSpec:
        return ProtocolSpec(window_ms=self.window_ms, stride_ms=self.stride_ms,
                            eval_stride_ms=self.eval_stride_ms, test_reps=tuple(self.test_reps),
                            include_rest=self.include_rest)

    def effective(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model_config().to_dict()
        d["train"] = dataclasses.asdict(self.train_config())
        return d


def config_hash(effective: dict) -> str:
    d = {k: v for k, v in effective.items() if k not in ("output_dir", "data_dir")}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def resolve_runspec(args) -> RunSpec:
    spec = RunSpec.from_file(args.config) if getattr(args, "config", None) else RunSpec()
    if getattr(args, "variant", None):
        spec.variant, spec.model = args.variant, None
    for attr, key in (("window_ms", "window_ms"), ("stride_ms", "stride_ms"),
                      ("data_dir", "data_dir"), ("out_dir", "output_dir")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(spec, key, v)
    if getattr(args, "test_reps", None):
        spec.test_reps = parse_int_list(args.test_reps)
    if getattr(args, "subjects_list", None):
        spec.subjects = parse_int_list(args.subjects_list)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    spec.train = {**spec.train, **overrides}
    return spec


def parse_int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# helpers ---------------------------------------------------------------------

def published_target(cfg: ModelConfig) -> tuple[str, int] | None:
    """The published count for a config that structurally matches a published row."""
    def key(c: ModelConfig):
        return dataclasses.replace(c, name=None, window_ms=300)

    for name, n in PUBLISHED_PARAMS.items():
        if key(named_variant(name)) == key(cfg):
            return name, n
    for row in table5_grid():
        if key(row.config) == key(cfg):
            return f"table5 ID {row.id}", row.published_params
    return None


def subject_loaders(spec: RunSpec) -> list:
    data_dir = Path(spec.data_dir)
    ids = spec.subjects if spec.subjects is not None else discover_subjects(data_dir)
    loaders = []
    missing = []
    for sid in ids:
        p = subject_path(data_dir, sid)
        if p.exists():
            loaders.append(_Loader(p))
        else:
            missing.append(sid)
    if missing:
        log.warning("missing subject files, skipped: %s", missing)
    if not loaders:
        raise ProtocolError(f"no subject recordings found under {data_dir}")
    return loaders


class _Loader:
    """Picklable deferred load so worker processes read their own file."""

    def __init__(self, path: Path):
        self.path = path

    def __call__(self):
        return load_recording(self.path)


def table2(columns: list[tuple[str, Metrics]], window_ms: int) -> str:
    """Accuracy and STD per variant, one column each, in the published table layout."""
    w = 12
    lines = [f"{'W=' + str(window_ms) + ' ms':<16}" + "".join(f"{n:>{w}}" for n, _ in columns)]
    lines.append(f"{'Accuracy (%)':<16}" + "".join(f"{100 * m.mean_accuracy:>{w}.2f}" for _, m in columns))
    lines.append(f"{'STD (%)':<16}" + "".join(f"{100 * m.std_accuracy:>{w}.1f}" for _, m in columns))
    return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def results_document(spec: RunSpec, metrics: Metrics, runs: list[SubjectRun], param_count: int,
                     runtime: float) -> dict:
    eff = spec.effective()
    return _jsonable({
        "config": eff,
        "config_hash": config_hash(eff),
        "ledger_toggles": eff["model"]["toggles"],
        "reporting": EPOCHS_NOTE,
        "per_subject_accuracy": metrics.per_subject_accuracy,
        "mean": metrics.mean_accuracy,
        "std": metrics.std_accuracy,
        "std_kind": "population",
        "param_count": param_count,
        "per_subject": {r.subject_id: {"n_train": r.n_train, "n_test": r.n_test,
                                       "clip_rate": r.clip_rate, "final_loss": r.loss_curve[-1] if r.loss_curve else None}
                        for r in runs},
        "confusion": metrics.confusion,
        "runtime_seconds": runtime,
    })


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.subjects < 1:
        raise UsageError("--subjects must be at least 1")
    out = Path(args.out_dir or args.data_dir or "data")
    for i in range(1, args.subjects + 1):
        rec = synth_generate(args.classes, args.channels, DB2_FS, args.reps, args.seed,
                             subject_id=i, move_s=args.move_s, rest_s=args.rest_s)
        path = write_recording(rec, subject_path(out, i))
        print(f"wrote {path} ({rec.n_samples} samples x {rec.n_channels} channels)")
    return 0


def cmd_params(args) -> int:
    if args.reconcile:
        print(format_reconciliation(reconcile()))
        return 0
    if args.ablation_id is not None:
        try:
            cfg = ablation_config(args.ablation_id, args.variant or "Small").config
        except KeyError:
            raise UsageError(f"no ablation ID {args.ablation_id}; valid IDs are 1-8") from None
    elif args.config:
        cfg = RunSpec.from_file(args.config).model_config()
    else:
        cfg = named_variant(args.variant or "Small")
    report = count_parameters(HdcamModel(cfg, init="zeros"))
    target = published_target(cfg)
    print(f"config: {cfg.name or 'custom'}  channels={list(cfg.stage_channels)} "
          f"HDConv={list(cfg.hdconv_counts)} MHSAtten={list(cfg.mhsatten_counts)}")
    if target:
        print(f"published row: {target[0]}")
    print(format_report(report, cfg, target[1] if target else None))
    return 0


def _save_runs(spec: RunSpec, cfg: ModelConfig, runs: list[SubjectRun], out: Path) -> None:
    proto = dataclasses.asdict(spec.protocol())
    for r in runs:
        model = HdcamModel(cfg, init="zeros")
        model.load_state_dict(r.state)
        save_checkpoint(out / "checkpoints" / f"subject_{r.subject_id:02d}.hdck", model, {
            "subject_id": r.subject_id,
            "seed": r.seed,
            "protocol": _jsonable(proto),
            "scales": r.scales.tolist(),
            "test_accuracy": r.accuracy,
        })


def cmd_train(args) -> int:
    spec = resolve_runspec(args)
    cfg = spec.model_config()
    tcfg = spec.train_config()
    loaders = subject_loaders(spec)
    t0 = time.perf_counter()
    metrics, runs = run_protocol(cfg, loaders, spec.protocol(), tcfg, jobs=args.jobs)
    runtime = time.perf_counter() - t0
    out = Path(spec.output_dir)
    n_params = count_parameters(HdcamModel(cfg, init="zeros")).total
    _save_runs(spec, cfg, runs, out)
    _write_json(out / "results.json", results_document(spec, metrics, runs, n_params, runtime))
    table = table2([(cfg.name or "custom", metrics)], spec.window_ms)
    table += f"\n\nepochs={tcfg.epochs}, {EPOCHS_NOTE}; STD is population STD over subjects\n"
    (out / "table.txt").write_text(table)
    print(table)
    return 0


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    proto = ProtocolSpec(**{**header["protocol"], "test_reps": tuple(header["protocol"]["test_reps"])})
    fs = DB2_FS
    expected_L = model.expected_length(fs)
    if args.window_ms is not None and args.window_ms != proto.window_ms:
        actual = int(round(args.window_ms * fs / 1000))
        raise CheckpointError(f"checkpoint expects L={expected_L} samples ({proto.window_ms} ms), "
                              f"requested window gives L={actual} ({args.window_ms} ms)")
    sid = args.subject if args.subject is not None else header["subject_id"]
    rec = load_recording(subject_path(args.data_dir, sid))
    if rec.n_channels != model.config.input_channels:
        raise CheckpointError(f"checkpoint expects {model.config.input_channels} channels, "
                              f"recording has {rec.n_channels}")
    actual_L = int(round(proto.window_ms * rec.fs / 1000))
    if actual_L != expected_L:
        raise CheckpointError(f"checkpoint expects L={expected_L} samples, data at {rec.fs:g} Hz gives L={actual_L}")
    pre = preprocess(rec, test_reps=proto.test_reps, scales=np.asarray(header["scales"]),
                     fc=proto.fc, mu=proto.mu, zero_phase=proto.zero_phase)
    n_cls = model.config.num_classes - (1 if proto.include_rest else 0)
    ws = segment_windows(pre.recording, proto.window_ms, proto.eval_stride_ms,
                         num_classes=n_cls, include_rest=proto.include_rest)
    _, test = split_by_repetition(ws, proto.test_reps)
    ev = evaluate(model, test)
    print(f"subject {sid}: accuracy {100 * ev.accuracy:.2f}% on {ev.n} test windows")
    print("per-class recall (%): " + " ".join(f"{100 * r:.1f}" for r in ev.per_class_recall))
    print("confusion (rows true, columns predicted):")
    for row in ev.confusion:
        print(" ".join(f"{v:4d}" for v in row))
    if args.json:
        _write_json(Path(args.json), {"subject_id": sid, "accuracy": ev.accuracy, "n": ev.n,
                                      "confusion": ev.confusion.tolist()})
    return 0


def _ablate_row(job):
    row, spec_dict, params_only = job
    spec = RunSpec(**spec_dict)
    cfg = row.config.replace(window_ms=spec.window_ms)
    n = count_parameters(HdcamModel(cfg, init="zeros")).total
    if params_only:
        return row, n, None
    metrics, _ = run_protocol(cfg, subject_loaders(spec), spec.protocol(), spec.train_config())
    return row, n, metrics


def cmd_ablate(args) -> int:
    spec = resolve_runspec(args)
    spec.model_config()  # validates shared settings
    rows = build_ablation_grid(args.grid)
    if args.grid == "table5" and args.variant and args.variant != "Small":
        rows = table5_grid(args.variant)
    jobs = [(r, dataclasses.asdict(spec), args.params_only) for r in rows]
    if args.jobs > 1 and not args.params_only:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_row, jobs))
    else:
        results = [_ablate_row(j) for j in jobs]
    lines = [f"{'ID':<16}{'configuration':<44}{'params':>9}{'published':>11}{'acc (%)':>9}{'STD (%)':>9}"]
    doc_rows = []
    for row, n, m in results:
        pub = f"{row.published_params:,}" if row.published_params else "-"
        acc = f"{100 * m.mean_accuracy:.2f}" if m else "-"
        std = f"{100 * m.std_accuracy:.1f}" if m else "-"
        lines.append(f"{row.id:<16}{row.label:<44}{n:>9,}{pub:>11}{acc:>9}{std:>9}")
        doc_rows.append({"id": row.id, "label": row.label, "params": n, "published_params": row.published_params,
                         "config": row.config.to_dict(),
                         "metrics": m.to_dict() if m else None})
    table = "\n".join(lines)
    print(table)
    out = Path(spec.output_dir)
    eff = spec.effective()
    _write_json(out / f"ablate_{args.grid}.json",
                _jsonable({"grid": args.grid, "config": eff, "config_hash": config_hash(eff),
                           "rows": doc_rows}))
    (out / f"ablate_{args.grid}.txt").write_text(table + "\n")
    return 0


# argument parsing ------------------------------------------------------------

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run specification")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--window-ms", dest="window_ms", type=int)
    p.add_argument("--stride-ms", dest="stride_ms", type=float)
    p.add_argument("--variant")
    p.add_argument("--test-reps", dest="test_reps", help="comma-separated, default 2,5")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hdcam", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic DB2-shaped recordings")
    _shared(p)
    p.add_argument("--subjects", type=int, default=1)
    p.add_argument("--classes", type=int, default=17)
    p.add_argument("--channels", type=int, default=DB2_CHANNELS)
    p.add_argument("--reps", type=int, default=6)
    p.add_argument("--move-s", dest="move_s", type=float, default=5.0)
    p.add_argument("--rest-s", dest="rest_s", type=float, default=3.0)
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("params", help="parameter counts per layer and stage")
    _shared(p)
    p.add_argument("--ablation-id", dest="ablation_id", type=int)
    p.add_argument("--reconcile", action="store_true", help="rank ledger toggle combinations")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="per-subject train/evaluate protocol")
    _shared(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--subjects", dest="subjects_list", help="comma-separated subject ids")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject", type=int)
    p.add_argument("--json", help="also write metrics to this JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("grid", choices=["table4", "table5", "table6"])
    _shared(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--subjects", dest="subjects_list")
    p.add_argument("--params-only", action="store_true", help="count parameters, skip training")
    p.set_defaults(func=cmd_ablate)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("HDCAM_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "eval" and args.data_dir is None:
        args.data_dir = "data"
    try:
        return args.func(args)
    except HdcamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

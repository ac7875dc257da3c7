"""Command-line entry point: ``beamtrack <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into the output
directory (``--out``, or ``$BEAMTRACK_OUT``, default ``runs/<command>``).
Exit codes: 0 success, 2 configuration error, 3 data-integrity or leakage
error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .codebook import CodebookConfig
from .dataset import (VIWI_CUTS_TRAIN, VIWI_CUTS_VAL, ClusterConfig, IntegrityError,
                      LeakageError, ParseError, cluster_by_std, ingest_viwi_csv, snap_cuts,
                      split_leakage_free, split_manifest, write_feature_store, write_viwi_csv)
from .metrics import REPORT_HEADER, ScoreReport, ScoringConfig, render_csv, render_text, report_rows
from .nn import TrainConfig
from .pipeline import (DEFAULT_PLAN, CheckpointError, ExperimentPlan, PipelineConfig,
                       TrainedPredictor, baseline_reports, config_hash, evaluate,
                       memory_sweep_table, run_cluster_experiment, run_memory_sweep,
                       train_predictor)
from .scene import ConfigError, SceneConfig, simulate_dataset

logger = logging.getLogger("beamtrack")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4


# -- config handling --------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(cfg))
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path, defaults: dict, overrides: list[str]) -> dict:
    base = dict(defaults)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        base = _merge(base, loaded)
    return apply_overrides(base, overrides)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def scene_config(d: dict) -> SceneConfig:
    try:
        return SceneConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"invalid scene config: {exc}") from None


def pipeline_config(d: dict) -> PipelineConfig:
    try:
        d = dict(d)
        if isinstance(d.get("codebook"), dict):
            d["codebook"] = CodebookConfig(**d["codebook"])
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig(**d["train"])
        if isinstance(d.get("scoring"), dict):
            d["scoring"] = ScoringConfig(**d["scoring"])
        return PipelineConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"invalid pipeline config: {exc}") from None


# -- run bookkeeping --------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_hash: str
    seed: int | None
    out_dir: str
    version: str = __version__
    status: str = "running"
    timings: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def write(self) -> None:
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


class Run:
    """Creates the output directory and keeps the manifest current."""

    def __init__(self, args, config: dict | None = None, seed: int | None = None):
        self.out = Path(args.out or os.environ.get("BEAMTRACK_OUT") or Path("runs") / args.command)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, getattr(args, "config", None),
                                    config_hash(config or {}), seed, str(self.out))
        self._t0 = time.perf_counter()
        self.manifest.timings["started_unix"] = round(time.time(), 3)
        self.manifest.write()

    def path(self, name: str) -> Path:
        self.manifest.outputs.append(name)
        return self.out / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def write_json(self, name: str, payload) -> None:
        self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        self.manifest.status = "ok"
        self.manifest.timings["elapsed_s"] = round(time.perf_counter() - self._t0, 3)
        self.manifest.outputs = sorted(set(self.manifest.outputs))
        self.manifest.write()


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    return int(os.environ.get("BEAMTRACK_WORKERS", "1"))


def _feature_dir(csv_path, explicit):
    if explicit:
        return Path(explicit)
    guess = Path(csv_path).parent / "features"
    return guess if guess.is_dir() else None


def _load(csv_path, features=None, name=None):
    if not Path(csv_path).exists():
        raise ConfigError(f"no such file: {csv_path}")
    return ingest_viwi_csv(csv_path, _feature_dir(csv_path, features), name=name)


def _write_reports(run: Run, stem: str, named: dict[str, ScoreReport]) -> str:
    rows = report_rows(named)
    text = render_text(REPORT_HEADER, rows)
    run.write_text(f"{stem}.txt", text)
    run.write_text(f"{stem}.csv", render_csv(REPORT_HEADER, rows))
    run.write_json(f"{stem}.json", {k: r.to_dict() for k, r in named.items()})
    return text


# -- commands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    d = load_config(args.config, SceneConfig().to_dict(), args.set)
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = scene_config(d)
    run = Run(args, cfg.to_dict(), cfg.seed)
    run.write_json("scene_config.json", cfg.to_dict())
    data = simulate_dataset(cfg, args.episodes, args.first_episode, name=args.name)
    write_viwi_csv(data, run.path("instances.csv"))
    write_feature_store(data, run.path("features"))
    print(f"{len(data)} instances, {len(data.image_ids)} images -> {run.out}")
    run.finish()
    return EXIT_OK


def cmd_ingest(args) -> int:
    run = Run(args, {"csv": str(args.csv)})
    d = _load(args.csv, args.features)
    summary = {"records": len(d), "images": len(d.image_ids), "tau": d.tau, "m": d.m,
               "feature_dims": list(d.feature_dims) if d.feature_dims else None}
    run.write_json("ingest.json", summary)
    print(json.dumps(summary, sort_keys=True))
    run.finish()
    return EXIT_OK


def cmd_split(args) -> int:
    d_t = _load(args.train_csv, args.features, "d_t")
    d_v = _load(args.val_csv, args.val_features or args.features, "d_v")
    if args.snap:
        cut_t, cut_v = snap_cuts(d_t, args.snap), snap_cuts(d_v, args.snap)
    else:
        cut_t, cut_v = tuple(args.cut_train), tuple(args.cut_val)
    run = Run(args, {"cut_train": list(cut_t), "cut_val": list(cut_v)})
    split = split_leakage_free(d_t, d_v, cut_t, cut_v)
    report = {"cut_train": list(cut_t), "cut_val": list(cut_v), "disjoint": True, "splits": {}}
    for name, part in zip(("D_t", "D_v1", "D_v2"), split):
        report["splits"][name] = {"records": len(part), "images": len(part.image_ids)}
        write_viwi_csv(part, run.path(f"{name}.csv"))
        if part.feature_maps is not None and args.write_features:
            write_feature_store(part, run.path(f"{name}_features"))
    run.write_json("split_report.json", report)
    run.write_json("split_manifest.json", split_manifest(len(d_t), len(d_v), cut_t, cut_v))
    for name, s in report["splits"].items():
        print(f"{name}: {s['records']} records, {s['images']} images")
    run.finish()
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = ClusterConfig(tuple(args.thresholds))
    run = Run(args, {"thresholds": list(cfg.thresholds)})
    d = _load(args.csv, args.features)
    parts = cluster_by_std(d, cfg)
    counts = {}
    for name, part in zip("ABC", parts):
        counts[name] = len(part)
        write_viwi_csv(part, run.path(f"cluster_{name}.csv"))
    run.write_json("clusters.json", {"thresholds": list(cfg.thresholds), "counts": counts})
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    run.finish()
    return EXIT_OK


def cmd_baselines(args) -> int:
    scoring = ScoringConfig(args.sigma)
    run = Run(args, {"sigma": args.sigma, "seed": args.seed or 0}, args.seed or 0)
    val = _load(args.val, args.features)
    train = _load(args.train, args.features) if args.train else val
    reports = baseline_reports(train, val, args.num_beams, scoring, args.seed or 0)
    print(_write_reports(run, "baselines", reports), end="")
    run.finish()
    return EXIT_OK


def cmd_train(args) -> int:
    d = load_config(args.config, PipelineConfig().to_dict(), args.set)
    if args.seed is not None:
        d.setdefault("train", {})["seed"] = args.seed
    cfg = pipeline_config(d)
    run = Run(args, cfg.to_dict(), cfg.train.seed)
    run.write_json("pipeline_config.json", cfg.to_dict())
    train = _load(args.train, args.features, "train")
    ckpt = run.path("checkpoint.json")
    model = train_predictor(train, cfg, checkpoint_path=ckpt, resume=args.resume,
                            stop_after=args.stop_after)
    run.write_text("losses.csv", render_csv(["epoch", "loss"],
                                            [[i + 1, v] for i, v in enumerate(model.losses)]))
    print(f"trained {model.epochs_done}/{cfg.num_epochs} epochs; checkpoint {ckpt}")
    if args.val:
        report = evaluate(model, _load(args.val, args.val_features or args.features, "val"))
        print(_write_reports(run, "eval", {"model": report}), end="")
    run.finish()
    return EXIT_OK


def cmd_eval(args) -> int:
    model = TrainedPredictor.load(args.checkpoint)
    run = Run(args, model.config.to_dict(), model.config.train.seed)
    val = _load(args.val, args.features, "val")
    scoring = ScoringConfig(args.sigma) if args.sigma else None
    report = evaluate(model, val, scoring)
    print(_write_reports(run, "eval", {"model": report}), end="")
    run.finish()
    return EXIT_OK


def cmd_experiment(args) -> int:
    d = load_config(args.config, PipelineConfig().to_dict(), args.set)
    if args.seed is not None:
        d.setdefault("train", {})["seed"] = args.seed
    cfg = pipeline_config(d)
    plan = DEFAULT_PLAN
    if args.plan:
        try:
            plan = ExperimentPlan.from_dict(json.loads(Path(args.plan).read_text()))
        except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid plan {args.plan}: {exc}") from None
    run = Run(args, {"pipeline": cfg.to_dict(), "plan": plan.to_dict(), "kind": args.kind},
              cfg.train.seed)
    run.write_json("pipeline_config.json", cfg.to_dict())
    train = _load(args.train, args.features, "train")
    val = _load(args.val, args.val_features or args.features, "val")
    if args.kind == "cluster":
        run.write_json("plan.json", plan.to_dict())
        res = run_cluster_experiment(train, val, plan, cfg,
                                     ClusterConfig(tuple(args.thresholds)), _workers(args))
        text = res.render_text()
        run.write_text("cluster_experiment.txt", text)
        run.write_text("cluster_experiment.csv", res.render_csv())
        run.write_json("cluster_experiment.json", res.to_dict())
    else:
        results = run_memory_sweep(train, val, cfg, tuple(args.taus), _workers(args))
        header, rows = memory_sweep_table(results)
        text = render_text(header, rows)
        run.write_text("memory_sweep.txt", text)
        run.write_text("memory_sweep.csv", render_csv(header, rows))
        run.write_json("memory_sweep.json", {str(t): r.to_dict() for t, r in results})
    print(text, end="")
    run.finish()
    return EXIT_OK


def cmd_report(args) -> int:
    """Render ScoreReport JSON files (name -> report) as one table."""
    named: dict[str, ScoreReport] = {}
    for p in args.reports:
        try:
            payload = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {p}: {exc}") from None
        if "score_5" in payload:
            payload = {Path(p).stem: payload}
        for k, v in payload.items():
            named[k if len(args.reports) == 1 else f"{Path(p).stem}/{k}"] = ScoreReport.from_dict(v)
    rows = report_rows(named)
    text = render_text(REPORT_HEADER, rows)
    if args.out or os.environ.get("BEAMTRACK_OUT"):
        run = Run(args, {"reports": [str(p) for p in args.reports]})
        run.write_text("report.txt", text)
        run.write_text("report.csv", render_csv(REPORT_HEADER, rows))
        run.finish()
    print(text, end="")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beamtrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False):
        sp.add_argument("--out", help="output directory (env BEAMTRACK_OUT)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted config override, e.g. train.hidden_dim=64")
            sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("simulate", help="simulate a scenario and export instances"), True)
    sp.add_argument("--episodes", type=int, default=1)
    sp.add_argument("--first-episode", type=int, default=0)
    sp.add_argument("--name", default="sim")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("ingest", help="parse and validate an instance CSV"))
    sp.add_argument("csv")
    sp.add_argument("--features")
    sp.set_defaults(func=cmd_ingest)

    sp = common(sub.add_parser("split", help="leakage-free three-way split"))
    sp.add_argument("train_csv")
    sp.add_argument("val_csv")
    sp.add_argument("--features")
    sp.add_argument("--val-features")
    sp.add_argument("--cut-train", type=int, nargs=2, default=list(VIWI_CUTS_TRAIN))
    sp.add_argument("--cut-val", type=int, nargs=2, default=list(VIWI_CUTS_VAL))
    sp.add_argument("--snap", type=float, nargs=2, metavar=("LO", "HI"),
                    help="derive cuts from row fractions, snapped to leak-free positions")
    sp.add_argument("--write-features", action="store_true")
    sp.set_defaults(func=cmd_split)

    sp = common(sub.add_parser("cluster", help="std-based three-way clustering"))
    sp.add_argument("csv")
    sp.add_argument("--features")
    sp.add_argument("--thresholds", type=float, nargs=2, default=[0.0, 2.0])
    sp.set_defaults(func=cmd_cluster)

    sp = common(sub.add_parser("baselines", help="score the non-neural baselines"))
    sp.add_argument("val")
    sp.add_argument("--train", help="set used to fit the statistical baseline (default: val)")
    sp.add_argument("--features")
    sp.add_argument("--sigma", type=float, default=5.0)
    sp.add_argument("--num-beams", type=int, default=128)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_baselines)

    sp = common(sub.add_parser("train", help="train a predictor"), True)
    sp.add_argument("train")
    sp.add_argument("--val", help="optional validation CSV to score after training")
    sp.add_argument("--features")
    sp.add_argument("--val-features")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, help="stop after this many epochs")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="score a checkpoint on a dataset"))
    sp.add_argument("checkpoint")
    sp.add_argument("val")
    sp.add_argument("--features")
    sp.add_argument("--sigma", type=float)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("experiment", help="cluster experiment or memory sweep"), True)
    sp.add_argument("train")
    sp.add_argument("val")
    sp.add_argument("--kind", choices=("cluster", "memory"), default="cluster")
    sp.add_argument("--plan", help="experiment plan JSON (default: the 8-row table)")
    sp.add_argument("--features")
    sp.add_argument("--val-features")
    sp.add_argument("--thresholds", type=float, nargs=2, default=[0.0, 2.0])
    sp.add_argument("--taus", type=int, nargs="+", default=[4, 6, 8])
    sp.add_argument("--workers", type=int, help="parallel trainings (env BEAMTRACK_WORKERS)")
    sp.set_defaults(func=cmd_experiment)

    sp = common(sub.add_parser("report", help="render score-report JSON files as a table"))
    sp.add_argument("reports", nargs="+")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LeakageError, IntegrityError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``modewatch <command> ...``.

Exit codes: 0 success, 2 unreadable or malformed input, 3 numeric failure
(degenerate fit, domain error), 4 invalid configuration, 5 internal error.

Flags that mirror config keys only fill in what the config leaves out; when
both are given and disagree, the config value is used and a warning is
printed.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .detectors import GlobalCusum, ModeAwareCusum
from .dynamics import ModeSequenceSpec
from .errors import ConfigError, ModewatchError
from .fileio import (
    RunManifest,
    load_json,
    read_error_stream,
    read_model,
    read_trajectories,
    write_csv,
    write_error_stream,
    write_json,
    write_metrics,
    write_model,
    write_trace,
)
from .harness import (
    SCHEMA_VERSION,
    BenchmarkConfig,
    Scenario,
    _model,
    config_digest,
    detector_config_from_dict,
    run_benchmark,
    simulate_stream,
)
from .metrics import Metric, aggregate_scenes
from .mixture import Transform, fit_em
from .rng import SEED_ENV_VAR, default_seed

log = logging.getLogger("modewatch")


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def merge_flags(section: dict, flags: dict) -> dict:
    """Fill ``section`` from non-None ``flags``; the section wins on conflict."""
    out = dict(section)
    for key, value in flags.items():
        if value is None:
            continue
        if key in out and out[key] != value:
            _warn(f"--{key.replace('_', '-')}={value!r} ignored, config sets {key}={out[key]!r}")
            continue
        out[key] = value
    return out


def bundled_configs() -> list[str]:
    root = resources.files("modewatch.configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config(name_or_path: str) -> dict:
    """Load a config file, or a bundled config by name (e.g. ``markov-default``)."""
    path = Path(name_or_path)
    if path.exists() or path.suffix == ".json" or os.sep in name_or_path:
        return load_json(path)
    res = resources.files("modewatch.configs") / f"{name_or_path}.json"
    if not res.is_file():
        raise ConfigError("config", f"no file or bundled config named {name_or_path!r} (bundled: {', '.join(bundled_configs())})")
    with resources.as_file(res) as p:
        return load_json(p)


# -- commands ----------------------------------------------------------------


def cmd_fit(args) -> int:
    stream = read_error_stream(args.input, column=args.column)
    model, report = fit_em(
        stream.epsilon, k=args.k, seed=args.seed, transform=Transform(args.transform)
    )
    write_model(args.output, model, report)
    weights = ", ".join(f"{w:.4f}" for w in model.weights)
    print(f"fitted {model.k} components (weights {weights}) in {report.iterations} iterations")
    return 0


def cmd_metrics(args) -> int:
    scenes = read_trajectories(args.input)
    Metric(args.metric)
    records = aggregate_scenes(scenes, how=args.aggregate)
    write_metrics(args.output, records)
    print(f"wrote {len(records)} rows to {args.output}")
    return 0


def _detector_doc(doc: dict) -> tuple[dict, object, object]:
    """Split a config into its detector block and the scenario's models."""
    if not isinstance(doc, dict):
        raise ConfigError("config", "expected an object")
    pre = post = None
    block = doc
    if "detector" in doc:
        block = doc["detector"]
        sc = doc.get("scenario") or {}
        if "pre_change" in sc:
            pre = _model(sc["pre_change"], "pre_change")
        if sc.get("post_change") is not None:
            post = _model(sc["post_change"], "post_change", pre.transform.value if pre else None)
    if not isinstance(block, dict):
        raise ConfigError("detector", "expected an object")
    return block, pre, post


def cmd_detect(args) -> int:
    block, pre, post = _detector_doc(resolve_config(args.config))
    block = merge_flags(block, {"threshold": args.threshold, "window": args.window, "lambda": args.lam})
    cfg = detector_config_from_dict(block, pre, post)
    stream = read_error_stream(args.input, column=args.column)
    k = cfg.k
    rows = []
    tau = None
    if args.mode == "mode-aware":
        det = ModeAwareCusum(cfg)
        for eps in stream.epsilon.tolist():
            out = det.step(eps)
            st = det.state
            rows.append([out.t, eps, out.estimated_mode, out.llr, *st.W, *st.theta, out.alarmed])
            if out.alarmed:
                tau = out.t
                break
    else:
        det = GlobalCusum.from_config(cfg)
        pad = [None] * (k - 1)
        for eps in stream.epsilon.tolist():
            out = det.step(eps)
            rows.append([out.t, eps, None, out.llr, out.statistic, *pad, out.threshold, *pad, out.alarmed])
            if out.alarmed:
                tau = out.t
                break
    if args.trace:
        write_trace(args.trace, rows, k)
    if tau is None:
        print("no alarm")
    else:
        # report the time label of the input row, which is tau when t runs 1..n
        print(f"alarm at t={int(stream.t[tau - 1])}")
    return 0


def cmd_generate(args) -> int:
    doc = resolve_config(args.spec)
    if not isinstance(doc, dict):
        raise ConfigError("spec", "expected an object")
    sc = doc.get("scenario", doc)
    dyn_doc = sc.get("dynamics", sc if "variant" in sc else None)
    if dyn_doc is None:
        raise ConfigError("dynamics", "missing")
    spec = ModeSequenceSpec.from_dict(dyn_doc)
    if args.model:
        pre = read_model(args.model)
    elif "pre_change" in sc:
        pre = _model(sc["pre_change"], "pre_change")
    else:
        raise ConfigError("pre_change", "missing; pass --model or include it in the spec file")
    post = pre
    if args.gamma is not None:
        if sc.get("post_change") is None:
            raise ConfigError("post_change", "required when --gamma is given")
        post = _model(sc["post_change"], "post_change", pre.transform.value)
    scenario = Scenario(spec, pre, post, args.gamma, args.length)
    seed = args.seed if args.seed is not None else default_seed()
    eps, modes = simulate_stream(scenario, seed)
    write_error_stream(args.output, eps, modes)
    print(f"wrote {args.length} rows to {args.output}")
    return 0


def cmd_benchmark(args) -> int:
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    doc = resolve_config(args.config)
    if isinstance(doc, dict) and isinstance(doc.get("evaluation"), dict):
        seed = args.seed
        if seed is None and "master_seed" not in doc["evaluation"]:
            seed = default_seed()
        doc = {**doc, "evaluation": merge_flags(doc["evaluation"], {"master_seed": seed})}
    cfg = BenchmarkConfig.from_dict(doc)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    if workers < 1:
        raise ConfigError("workers", f"must be >= 1, got {workers}")
    report, tables = run_benchmark(cfg, workers=workers)

    out = Path(args.output)
    paths = [
        write_json(out / "report.json", report.to_dict()),
        write_csv(
            out / "sweep.csv",
            ("detector", "threshold_scale", "far", "mean_delay", "stderr", "censored_frac"),
            ([r["detector"], r["threshold_scale"], r["far"], r["mean_delay"], r["stderr"], r["censored_frac"]] for r in tables["sweep"]),
        ),
        write_csv(
            out / "roc.csv",
            ("detector", "fpr", "tpr", "precision", "recall"),
            ([r["detector"], r["fpr"], r["tpr"], r["precision"], r["recall"]] for r in tables["roc"]),
        ),
        write_json(out / "config.json", cfg.document),
    ]
    finished = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    manifest = RunManifest(
        config_digest=cfg.digest(),
        tool_version=__version__,
        schema_version=SCHEMA_VERSION,
        master_seed=cfg.master_seed,
        started_at=started,
        finished_at=finished,
        outputs=[p.name for p in paths],
        workers=workers,
    )
    write_json(out / "manifest.json", manifest.to_dict())
    _print_summary(report)
    return 0


def _print_summary(report) -> None:
    d = report.to_dict()
    print(f"benchmark {d['name']}  digest {d['config_digest'][:12]}")
    for name, det in d["detectors"].items():
        parts = [name]
        for key in ("far", "mean_delay", "wadd", "auroc", "aupr"):
            v = det.get(key)
            if v is not None:
                parts.append(f"{key}={v:.4g}")
        print("  " + "  ".join(parts))
    for c in d["comparison"].get("delay", []):
        if c.get("headline"):
            print(
                f"  headline delay reduction {100 * c['reduction']:.1f}%  "
                f"(one-sided p={c['p_value']:.3g}, FAR ratio {c['far_ratio']:.3f})"
            )
    for note in d["notes"]:
        print(f"  note: {note}")


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="modewatch",
        description="Mode-aware CUSUM change detection on prediction-error streams.",
        epilog=f"The default seed comes from ${SEED_ENV_VAR} when set.",
    )
    p.add_argument(
        "--version",
        action="version",
        version=f"modewatch {__version__} (config schema {SCHEMA_VERSION})",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a Gaussian mixture to an error stream")
    f.add_argument("input")
    f.add_argument("-k", type=int, default=2)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--transform", choices=[t.value for t in Transform], default="log")
    f.add_argument("--column", default="epsilon", help="error column to read (default: epsilon)")
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("metrics", help="trajectory CSV to per-scene ADE/FDE/RMSE rows")
    m.add_argument("input")
    m.add_argument("--metric", choices=[x.value for x in Metric], default="ade")
    m.add_argument("--aggregate", choices=["mean", "max"], default="mean")
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_metrics)

    d = sub.add_parser("detect", help="run a detector over an error stream")
    d.add_argument("input")
    d.add_argument("--config", required=True, help="detector or benchmark config (path or bundled name)")
    d.add_argument("--mode", choices=["mode-aware", "global"], default="mode-aware")
    d.add_argument("--column", default="epsilon")
    d.add_argument("--trace", help="write per-step trace CSV here")
    d.add_argument("--threshold", type=float)
    d.add_argument("--window", type=int)
    d.add_argument("--lambda", dest="lam", type=float)
    d.set_defaults(func=cmd_detect)

    g = sub.add_parser("generate", help="simulate an error stream with latent modes")
    g.add_argument("--spec", required=True, help="scenario or dynamics document (path or bundled name)")
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--model", help="pre-change model JSON, overrides the spec's")
    g.add_argument("--gamma", type=int, help="inject the post-change law from this time on")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("benchmark", help="run the Monte Carlo benchmark")
    b.add_argument("config", help="config path or bundled name (" + ", ".join(bundled_configs()) + ")")
    b.add_argument("-o", "--output", required=True)
    b.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count)")
    b.add_argument("--seed", type=int, default=None, help="master seed if the config has none")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", None) is None and args.command == "fit":
        args.seed = default_seed()
    try:
        return args.func(args)
    except ModewatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # malformed environment seed and similar
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())

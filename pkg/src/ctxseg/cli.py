"""``ctxseg`` command line: data generation, training, reports, experiments, segmentation.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines,
``#`` comments) and ``--set key=value``; explicit flags override the file.
Each run writes a manifest ``<output>.run.json`` next to its output before
the long computation starts, so the output directory itself stays
byte-identical across repeated runs. Exit status: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# key -> (type, default); the union of every subcommand's tunables
CONFIG_KEYS = {
    "seed": (int, 0),
    "slides": (int, 28),
    "size": (int, 2048),
    "stride": (int, 88),
    "min_purity": (float, 0.75),
    "hires": (bool, False),
    "width": (float, 1.0),
    "scale_order": (str, ""),
    "learning_rate": (float, 2e-4),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps_adam": (float, 1e-8),
    "batch_size": (int, 64),
    "eval_batch_size": (int, 128),
    "max_epochs": (int, 100),
    "patience": (int, 10),
    "min_delta": (float, 1e-5),
    "seeds": (tuple, (1, 2, 3)),
    "fractions": (tuple, (0.56, 0.14, 0.30)),
    "split_seed": (int, 0),
    "augment": (bool, True),
    "max_groups": (int, 0),
    "jobs": (int, 1),
}


class UsageError(Exception):
    """Bad flags or configuration (exit status 2)."""


# ------------------------------------------------------------------ config


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        if not value:
            raise UsageError(f"{source}:{lineno}: key {key!r} has no value")
        out[key] = value
    return out


def _convert(key: str, value):
    kind, default = CONFIG_KEYS[key]
    if not isinstance(value, str):
        return value
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is tuple:
            cast = type(default[0])
            return tuple(cast(p) for p in value.replace(",", " ").split())
        return kind(value)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None


def resolve_config(args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge defaults < config file < --set < explicit flags; returns (typed, raw strings)."""
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        raw.update(parse_config_text(path.read_text(), str(path)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"--set: unknown key {key!r}")
        raw[key] = value
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v if isinstance(v, str) else _flag_text(v)
    typed = {k: _convert(k, raw[k]) if k in raw else d for k, (_, d) in CONFIG_KEYS.items()}
    return typed, raw


def _flag_text(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def train_config(cfg: dict):
    from .training import TrainConfig

    try:
        return TrainConfig.from_mapping(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- manifest


def _manifest_path(output: Path) -> Path:
    return output.parent / f"{output.name}.run.json"


def write_manifest(args, cfg: dict, raw: dict, output: Path, artifacts=None, extra=None) -> Path:
    """Snapshot of the resolved run; rewritten at the end with artifacts and finish time."""
    path = _manifest_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    prev = json.loads(path.read_text()) if artifacts is not None and path.exists() else {}
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg["seed"],
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "config_source": raw,
        "output": str(output),
        "started_at": prev.get("started_at", datetime.now(timezone.utc).isoformat()),
    }
    if extra:
        manifest.update(extra)
    if artifacts is not None:
        manifest["artifacts"] = [str(a) for a in artifacts]
        manifest["finished_at"] = datetime.now(timezone.utc).isoformat()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------- commands


def _load_dataset(path):
    from .data.ingest import IngestionError, ingest, load_patchset

    try:
        manifest = ingest(path)
    except IngestionError as exc:
        raise RuntimeError(str(exc)) from exc
    if not len(manifest):
        raise RuntimeError(f"dataset {path} contains no patch groups")
    return load_patchset(manifest)


def _fingerprint(ps) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ps.labels).tobytes())
    h.update("\n".join(map(str, ps.slide_ids.tolist())).encode())
    h.update(np.ascontiguousarray(ps.centers).tobytes())
    return h.hexdigest()[:16]


def _subsample(ps, max_groups: int, seed: int):
    """Deterministic reduced patch budget (0 keeps everything)."""
    if not max_groups or max_groups >= len(ps):
        return ps
    from .core.rng import stream

    idx = np.sort(stream(seed, "split", 1).choice(len(ps), size=max_groups, replace=False))
    return ps.subset(idx)


def cmd_gen_data(args, cfg, raw) -> int:
    from .data.ingest import write_dataset
    from .data.patches import extract_patchset
    from .data.synthetic import CLASS_NAMES, generate_slide

    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise OSError(f"output {out} exists and is not a directory")
    write_manifest(args, cfg, raw, out)
    sets = []
    for i in range(cfg["slides"]):
        slide = generate_slide(cfg["seed"], i, cfg["size"])
        sets.append(extract_patchset([slide], cfg["stride"], cfg["min_purity"], hires=cfg["hires"]))
    from .data.patches import PatchSet

    ps = PatchSet.concat(sets)
    labels = write_dataset(ps, out, include_hires=cfg["hires"])
    counts = np.bincount(ps.labels, minlength=len(CLASS_NAMES))
    print(f"wrote {len(ps)} patch groups from {cfg['slides']} slides to {out}")
    for name, n in zip(CLASS_NAMES, counts):
        print(f"  {name:8s} {n:6d} ({n / max(1, len(ps)):.1%})")
    write_manifest(args, cfg, raw, out, [labels], {"groups": int(len(ps)), "class_counts": counts.tolist()})
    return EXIT_OK


def _arch(args, cfg):
    from .zoo import ARCH_IDS, arch_spec

    if args.arch not in ARCH_IDS:
        raise UsageError(f"unknown architecture {args.arch!r}; choose from {', '.join(ARCH_IDS)}")
    try:
        return arch_spec(args.arch, width=cfg["width"], scale_order=cfg["scale_order"] or None)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _splits(ps, tc):
    from .core.rng import stream
    from .training import split_by_slide

    return split_by_slide(ps, tc.fractions, stream(tc.split_seed, "split"))


def cmd_train(args, cfg, raw) -> int:
    from .evaluation import run_counts
    from .training import train_triplicate

    spec = _arch(args, cfg)
    tc = train_config(cfg)
    out = Path(args.out)
    write_manifest(args, cfg, raw, out, extra={"arch": spec.to_json()})
    ps = _subsample(_load_dataset(args.data), cfg["max_groups"], cfg["seed"])
    splits = _splits(ps, tc)
    runs = train_triplicate(spec, splits, tc, out)
    counts = run_counts(runs.models, splits[2], tc.eval_batch_size)
    summary = {
        "arch": spec.id,
        "params": runs.models[0].n_params,
        "dataset": _fingerprint(splits[2]),
        "class_names": list(ps.class_names),
        "test_counts": [c.to_json() for c in counts],
    }
    (out / "test_counts.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    from .metrics import f1_from_runs

    f1 = f1_from_runs(counts)
    print(f"{spec.id}: test F1 " + " ".join(f"{n}={v:.3f}" for n, v in zip(ps.class_names, f1)))
    write_manifest(args, cfg, raw, out, runs.paths + [str(out / "test_counts.json")], {"arch": spec.to_json()})
    return EXIT_OK


def _load_runs(dirs):
    from .evaluation import AggregationError
    from .metrics import ConfusionCounts

    runs, params, names, fps = {}, {}, None, set()
    for d in dirs:
        path = Path(d) / "test_counts.json"
        if not path.exists():
            raise AggregationError(f"{d} has no test_counts.json (not a train output directory)")
        info = json.loads(path.read_text())
        runs[info["arch"]] = [ConfusionCounts.from_json(c) for c in info["test_counts"]]
        params[info["arch"]] = info["params"]
        fps.add(info["dataset"])
        if names is not None and names != info["class_names"]:
            raise AggregationError("runs use different class tables")
        names = info["class_names"]
    if len(fps) > 1:
        raise AggregationError(f"runs were evaluated on different datasets ({', '.join(sorted(fps))})")
    return runs, params, names


def cmd_report(args, cfg, raw) -> int:
    from .evaluation import MetricsTable, parse_csv, rank_table, report_csv, report_markdown

    out = Path(args.out)
    write_manifest(args, cfg, raw, out)
    if args.from_csv:
        table, _ = parse_csv(Path(args.from_csv).read_text())
    elif args.runs:
        runs, params, names = _load_runs(args.runs)
        table = MetricsTable.from_runs(args.dataset, runs, names)
        table.params = params
    else:
        raise UsageError("report needs --runs DIR... or --from-csv FILE")
    if args.times:
        table.times = {k: float(v) for k, v in json.loads(Path(args.times).read_text()).items()}
    if not table.params:
        from .zoo import arch_spec, build

        table.params = {m: build(arch_spec(m), seed=None).n_params for m in table.methods if _known(m)}
    ranks = rank_table(table)
    out.write_text(report_markdown(table, ranks))
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    csv_path.write_text(report_csv(table, ranks))
    for ds, sums in ranks.sums.items():
        print(f"rank-sum ({ds}): " + ", ".join(f"{m}={s}" for m, s in zip(table.methods, sums)))
    print("total rank-sum: " + ", ".join(f"{m}={s}" for m, s in zip(table.methods, ranks.total)))
    write_manifest(args, cfg, raw, out, [out, csv_path])
    return EXIT_OK


def _known(m: str) -> bool:
    from .zoo import ARCH_IDS

    return m in ARCH_IDS


def cmd_verify(args, cfg, raw) -> int:
    from .verify import SUITES

    checks = SUITES[args.suite]()
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _load_models(run_dir):
    from .zoo import load

    d = Path(run_dir)
    ckpts = sorted(d.glob("*.cseg"))
    if not ckpts:
        raise RuntimeError(f"no checkpoints in {d}")
    return [load(p) for p in ckpts]


def cmd_noise_exp(args, cfg, raw) -> int:
    from .evaluation import noise_experiment

    out = Path(args.out)
    write_manifest(args, cfg, raw, out)
    ps = _subsample(_load_dataset(args.data), cfg["max_groups"], cfg["seed"])
    test = _splits(ps, train_config(cfg))[2]
    runsets = {"E": _load_models(args.runs_e), "G": _load_models(args.runs_g)}
    res = noise_experiment(runsets, test, seed=cfg["seed"], batch_size=cfg["eval_batch_size"])
    out.write_text(res.to_csv())
    for p in res.levels:
        print(f"p={p:g}: mean |dF1%| E={res.mean_abs('E', p):.2f} G={res.mean_abs('G', p):.2f}")
    write_manifest(args, cfg, raw, out, [out])
    return EXIT_OK


def cmd_order_exp(args, cfg, raw) -> int:
    from .evaluation import order_experiment

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(args, cfg, raw, out)
    tc = train_config(cfg)
    ps = _subsample(_load_dataset(args.data), cfg["max_groups"], cfg["seed"])
    res = order_experiment(_splits(ps, tc), tc, width=cfg["width"], out_dir=out)
    (out / "orders.csv").write_text(res.to_csv())
    for o in res.orders:
        print(f"{o:14s} " + " ".join(f"{v:.3f}" for v in res.f1[o]))
    print("spread        " + " ".join(f"{v:.3f}" for v in res.spread()))
    write_manifest(args, cfg, raw, out, [out / "orders.csv"])
    return EXIT_OK


def cmd_segment(args, cfg, raw) -> int:
    from .data.synthetic import generate_slide
    from .wsi import segment_slide, write_outputs
    from .zoo import load

    out = Path(args.out)
    write_manifest(args, cfg, raw, out)
    model = load(args.checkpoint)
    slide = generate_slide(cfg["seed"], args.slide_index, cfg["size"])
    raster = segment_slide(model, slide, args.stride, batch_size=cfg["eval_batch_size"])
    write_outputs(raster, out, scale=args.scale)
    valid = raster.grid[raster.grid >= 0]
    print(f"segmented {slide.slide_id}: {raster.grid.shape[0]}x{raster.grid.shape[1]} cells, {valid.size} classified")
    write_manifest(args, cfg, raw, out, [out, out.with_suffix(".csv")])
    return EXIT_OK


def cmd_time(args, cfg, raw) -> int:
    from .evaluation import populated_model, time_models
    from .zoo import load

    out = Path(args.out)
    write_manifest(args, cfg, raw, out)
    models = {}
    for p in args.checkpoints or []:
        m = load(p)
        models[m.spec.id] = m
    for a in args.archs or []:
        models[a] = populated_model(a, cfg["width"], cfg["seed"])
    if not models:
        raise UsageError("time needs --checkpoints or --archs")
    from .data.patches import extract_patchset
    from .data.synthetic import generate_slide

    need_hires = any("hires" in m.spec.scales for m in models.values())
    slide = generate_slide(cfg["seed"], 0, max(1024, cfg["size"] if cfg["size"] <= 2048 else 2048))
    test = extract_patchset([slide], cfg["stride"], 0.0, hires=need_hires)
    test = test.subset(np.arange(min(len(test), args.groups)))
    times = time_models(models, test, batch_size=cfg["batch_size"])
    out.write_text(json.dumps(times, indent=2, sort_keys=True) + "\n")
    for k, v in times.items():
        print(f"{k:8s} {v:8.2f} s for {len(test)} groups")
    write_manifest(args, cfg, raw, out, [out])
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--jobs", type=int, help="worker cap (computation is single-threaded)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxseg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"ctxseg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic slides and write a patch dataset")
    _add_common(p)
    p.add_argument("--slides", type=int)
    p.add_argument("--size", type=int, help="slide side in base pixels")
    p.add_argument("--stride", type=int, help="patch-centre grid stride in base pixels")
    p.add_argument("--min-purity", dest="min_purity", type=float)
    p.add_argument("--hires", action="store_const", const=True, help="also write 512x512 patches")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one architecture with the three-seed protocol")
    _add_common(p)
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=float, help="channel/unit width multiplier")
    p.add_argument("--scale-order", dest="scale_order")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--max-groups", dest="max_groups", type=int, help="reduced patch budget (0 = all)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("report", help="F1 / rank-sum table from run directories or a CSV")
    _add_common(p)
    p.add_argument("--runs", nargs="+", help="train output directories")
    p.add_argument("--from-csv", dest="from_csv", help="method,class,f1[,rank] CSV")
    p.add_argument("--dataset", default="Synthetic", help="dataset label for --runs tables")
    p.add_argument("--times", help="JSON of per-method seconds (from the time command)")
    p.add_argument("--csv", help="CSV output path (default: next to --out)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("verify", help="run a self-check suite")
    _add_common(p)
    p.add_argument("--suite", required=True, choices=("grad", "params", "oracle"))
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("noise-exp", help="noise resilience of trained E and G runs")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--runs-e", dest="runs_e", required=True)
    p.add_argument("--runs-g", dest="runs_g", required=True)
    p.add_argument("--max-groups", dest="max_groups", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_noise_exp)

    p = sub.add_parser("order-exp", help="train G under the four scale orders")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--width", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--max-groups", dest="max_groups", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_order_exp)

    p = sub.add_parser("segment", help="tile a synthetic slide with a trained model")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide-index", dest="slide_index", type=int, default=0)
    p.add_argument("--size", type=int)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--scale", type=int, default=4, help="pixels per raster cell in the PNG")
    p.add_argument("--out", required=True, help="PNG path; the CSV sidecar is written next to it")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("time", help="inference wall-clock per model")
    _add_common(p)
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--archs", nargs="+")
    p.add_argument("--width", type=float)
    p.add_argument("--groups", type=int, default=64, help="number of test groups")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_time)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg, raw = resolve_config(args)
        t0 = time.perf_counter()
        code = args.fn(args, cfg, raw)
        print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        return code
    except UsageError as exc:
        print(f"ctxseg {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"ctxseg {args.command}: error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

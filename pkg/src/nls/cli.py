"""Command-line front end: corrupt / train / eval / probe / report.

Settings resolve as flags > config file > built-in defaults. Every run
validates its full configuration and inputs before creating any output, then
finishes by writing a manifest recording the resolved settings and a sha256
for each artifact it produced.
"""

import argparse
import configparser
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .corruption import (FACTOR_IDS, FAMILIES, AugmentationPolicy,
                         augment_batch, family_of_factor,
                         policy_from_families, write_sidecar)
from .data import Dataset, data_root, load_mnist, subset, write_idx
from .evaluate import SuiteSpec, compare_report, corruption_suite, from_csv, to_csv
from .probe import ProbeConfig, append_report, probe_factor, read_report_records
from .report import render_accuracy_figure, render_dep_degree_figure
from .rng import child_rng
from .synth import make_synthetic
from .trainer import (TrainConfig, bundle_from_checkpoint, default_policy,
                      load_checkpoint, train)

# keeps the synthetic validation stream disjoint from the training stream
_VAL_SEED_OFFSET = 100003

# key -> (kind, default); kinds: int, float, str, bool, list
CORRUPT_KEYS = {
    "source": ("str", "synthetic"),
    "split": ("str", "test"),
    "count": ("int", 2000),
    "families": ("list", FAMILIES),
    "fraction": ("float", 1.0),
    "seed": ("int", 0),
}
TRAIN_KEYS = {
    "mode": ("str", "gnt-nls"),
    "arch": ("str", "mnist-small"),
    "epochs": ("int", 3),
    "batch_size": ("int", 128),
    "lr": ("float", 0.05),
    "momentum": ("float", 0.9),
    "weight_decay": ("float", 1e-4),
    "lambda_warmup_epochs": ("int", 1),
    "lambda_value": ("float", 0.05),
    "grl_alpha": ("float", 0.5),
    "decay_on_plateau": ("bool", False),
    "seed": ("int", 0),
    "source": ("str", "synthetic"),
    "subset": ("int", 10000),
    "val_size": ("int", 2000),
    "fraction": ("float", 0.5),
    "families": ("list", ()),
}
EVAL_KEYS = {
    "source": ("str", "synthetic"),
    "count": ("int", 2000),
    "seed": ("int", 0),
    "families": ("list", FAMILIES),
}
PROBE_KEYS = {
    "factor": ("str", "gaussian_noise_std"),
    "count": ("int", 2000),
    "seed": ("int", 0),
    "source": ("str", "synthetic"),
    "shuffle_labels": ("bool", False),
    "label": ("str", ""),
}
REPORT_KEYS = {
    "baseline": ("str", "baseline"),
}


# ---------------------------------------------------------------------------
# config file handling


def parse_value(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "list":
            return tuple(item.strip() for item in raw.split(",") if item.strip())
        return raw
    except ValueError:
        raise ValueError(
            f"config key {key!r}: cannot parse {raw!r} as {kind}") from None


def format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "list":
        return ", ".join(value)
    return str(value)


def read_config_file(path, section: str) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not parser.read(path):
        raise OSError(f"cannot read config file {path}")
    if not parser.has_section(section):
        return {}
    return dict(parser[section])


def resolve(args: argparse.Namespace, keys: dict, section: str) -> dict:
    """flags > config file > defaults; rejects unknown config keys."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = read_config_file(args.config, section)
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise ValueError(
                f"unknown keys in config section [{section}]: {sorted(unknown)}")
    resolved = {}
    for key, (kind, default) in keys.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = tuple(flag) if kind == "list" else flag
        elif key in file_cfg:
            resolved[key] = parse_value(kind, file_cfg[key], key)
        else:
            resolved[key] = default
    return resolved


def config_to_ini(resolved: dict, keys: dict, section: str) -> str:
    """Resolved settings in the exact schema `resolve` reads back."""
    lines = [f"[{section}]"]
    for key in keys:
        lines.append(f"{key} = {format_value(keys[key][0], resolved[key])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# manifests


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_hash(subcommand: str, resolved: dict, inputs: dict) -> str:
    blob = json.dumps({"subcommand": subcommand, "config": resolved,
                       "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:8]


def write_manifest(path, subcommand: str, resolved: dict, seed: int,
                   inputs: dict, outputs: dict) -> None:
    """outputs: name -> file path (hashed here) or name -> precomputed dict."""
    path = Path(path)
    out = {}
    for name, target in outputs.items():
        if isinstance(target, dict):
            out[name] = target
        else:
            target = Path(target)
            rel = target.name if target.parent == path.parent else str(target)
            out[name] = {"path": rel, "sha256": _sha256(target)}
    manifest = {"subcommand": subcommand, "config": resolved, "seed": seed,
                "inputs": {k: (list(v) if isinstance(v, (list, tuple))
                               else str(v)) for k, v in inputs.items()},
                "outputs": out}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# data sourcing


def _root(args) -> Path:
    return Path(args.data_dir) if getattr(args, "data_dir", None) else data_root()


def _base_dataset(source: str, count: int, seed: int, root: Path,
                  split: str = "test") -> Dataset:
    if source == "synthetic":
        if count < 1:
            raise ValueError("synthetic source needs count >= 1")
        return make_synthetic(count, seed)
    if source == "mnist":
        ds = load_mnist(root / "mnist", split)
        if count and count < len(ds):
            ds = subset(ds, count, seed)
        return ds
    raise ValueError(f"unknown source {source!r}; expected synthetic or mnist")


def _corrupted_copy(base: Dataset, family: str, seed: int) -> Dataset:
    """Every sample corrupted once by `family`, grid class drawn uniformly."""
    batch = augment_batch(base.images.data, base.task_labels,
                          policy_from_families([family], 1.0),
                          child_rng(seed, "eval-suite", family))
    return Dataset(batch.images, base.task_labels,
                   nuisance=dict(batch.nuisance), provenance=family)


# ---------------------------------------------------------------------------
# subcommands


def cmd_corrupt(args) -> int:
    resolved = resolve(args, CORRUPT_KEYS, "corrupt")
    if not resolved["families"]:
        raise ValueError("corrupt needs at least one family")
    policy = policy_from_families(resolved["families"], resolved["fraction"])
    base = _base_dataset(resolved["source"], resolved["count"],
                         resolved["seed"], _root(args), resolved["split"])
    batch = augment_batch(base.images.data, base.task_labels, policy,
                          child_rng(resolved["seed"], "corrupt"))
    records = sorted((idx, FACTOR_IDS[family_of_factor(factor)], cls)
                     for factor, pairs in batch.nuisance.items()
                     for idx, cls in pairs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images.idx", batch.images.data)
    write_idx(out / "labels.idx", base.task_labels)
    write_sidecar(out / "nuisance.sidecar", records)
    write_manifest(out / "manifest.json", "corrupt", resolved, resolved["seed"],
                   {"data_root": _root(args)},
                   {"images": out / "images.idx", "labels": out / "labels.idx",
                    "sidecar": out / "nuisance.sidecar"})
    print(f"wrote {len(base)} images ({len(records)} corrupted) to {out}")
    return 0


def _train_policy(resolved: dict) -> AugmentationPolicy:
    if resolved["families"]:
        return policy_from_families(resolved["families"], resolved["fraction"])
    if resolved["fraction"] != 0.5 and resolved["mode"] != "baseline":
        return AugmentationPolicy(resolved["fraction"],
                                  default_policy(resolved["mode"]).ops)
    return None


def cmd_train(args) -> int:
    resolved = resolve(args, TRAIN_KEYS, "train")
    cfg = TrainConfig(
        mode=resolved["mode"], epochs=resolved["epochs"],
        batch_size=resolved["batch_size"], lr=resolved["lr"],
        momentum=resolved["momentum"], weight_decay=resolved["weight_decay"],
        lambda_warmup_epochs=resolved["lambda_warmup_epochs"],
        lambda_value=resolved["lambda_value"], grl_alpha=resolved["grl_alpha"],
        seed=resolved["seed"], arch=resolved["arch"],
        decay_on_plateau=resolved["decay_on_plateau"],
        policy=_train_policy(resolved))
    root = _root(args)
    if resolved["source"] == "synthetic":
        if resolved["subset"] < 1:
            raise ValueError("synthetic source needs subset >= 1")
        train_ds = make_synthetic(resolved["subset"], cfg.seed)
        val_ds = make_synthetic(resolved["val_size"],
                                cfg.seed + _VAL_SEED_OFFSET)
    else:
        train_ds = _base_dataset(resolved["source"], resolved["subset"],
                                 cfg.seed, root, "train")
        val_ds = _base_dataset(resolved["source"], resolved["val_size"],
                               cfg.seed, root, "test")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"
    result = train(cfg, train_ds, val_ds, checkpoint_path=ckpt_path,
                   resume_from=args.resume)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for row in result.metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    inputs = {"data_root": root}
    if args.config:
        inputs["config_file"] = args.config
    if args.resume:
        inputs["resume"] = args.resume
    write_manifest(out / "manifest.json", "train", resolved, cfg.seed, inputs,
                   {"checkpoint": ckpt_path, "metrics": metrics_path})
    final = result.metrics[-1]["val_acc"] if result.metrics else float("nan")
    print(f"trained {cfg.mode} seed {cfg.seed}: val_acc {final:.4f} "
          f"-> {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    resolved = resolve(args, EVAL_KEYS, "eval")
    if not args.checkpoint:
        raise ValueError("eval needs at least one --checkpoint")
    base = _base_dataset(resolved["source"], resolved["count"],
                         resolved["seed"], _root(args))
    suites_data = [(family, _corrupted_copy(base, family, resolved["seed"]))
                   for family in resolved["families"]]

    results = []
    for ck_path in args.checkpoint:
        ck = load_checkpoint(ck_path)
        cfg = TrainConfig.from_dict(ck.config)
        bundle = bundle_from_checkpoint(ck)
        seen = ({op.family for op in cfg.policy.ops}
                if cfg.policy.corrupt_fraction > 0 else set())
        specs = [SuiteSpec("clean", base, None)]
        specs += [SuiteSpec(f, d, f in seen) for f, d in suites_data]
        chash = hashlib.sha256(
            json.dumps(ck.config, sort_keys=True).encode()).hexdigest()[:8]
        results.append(corruption_suite(bundle, specs, model_id=cfg.mode,
                                        seed=cfg.seed, config_hash=chash))

    csv_text = to_csv(results)
    h = run_hash("eval", resolved,
                 {"checkpoints": sorted(str(p) for p in args.checkpoint)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"results-{h}.csv"
    csv_path.write_text(csv_text, encoding="utf-8")
    write_manifest(out / f"manifest-{h}.json", "eval", resolved,
                   resolved["seed"],
                   {"checkpoints": [str(p) for p in args.checkpoint],
                    "data_root": _root(args)},
                   {"results": csv_path})
    print(f"evaluated {len(results)} checkpoint(s) -> {csv_path}")
    return 0


def cmd_probe(args) -> int:
    resolved = resolve(args, PROBE_KEYS, "probe")
    factor = resolved["factor"]
    family = family_of_factor(factor)
    ck = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(ck.config)
    bundle = bundle_from_checkpoint(ck)
    base = _base_dataset(resolved["source"], resolved["count"],
                         resolved["seed"], _root(args))
    ds = _corrupted_copy(base, family, resolved["seed"])
    pairs = ds.nuisance[factor]
    if resolved["shuffle_labels"]:
        classes = np.array([c for _, c in pairs])
        perm = child_rng(resolved["seed"], "probe", "control").permutation(
            len(classes))
        pairs = [(i, int(c)) for (i, _), c in zip(pairs, classes[perm])]
        ds = Dataset(ds.images, ds.task_labels, {factor: pairs},
                     provenance=ds.provenance)
    report = probe_factor(bundle, ds, factor,
                          ProbeConfig(seed=resolved["seed"]))
    label = resolved["label"] or f"{cfg.mode}-s{cfg.seed}"
    if resolved["shuffle_labels"]:
        label += "-shuffled"

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports_path = out / "dependency_reports.jsonl"
    append_report(report, reports_path, label=label)
    h = run_hash("probe", resolved, {"checkpoint": str(args.checkpoint)})
    record_hash = hashlib.sha256(
        reports_path.read_text(encoding="utf-8").splitlines()[-1].encode()
    ).hexdigest()
    write_manifest(out / f"manifest-{h}.json", "probe", resolved,
                   resolved["seed"],
                   {"checkpoint": str(args.checkpoint),
                    "data_root": _root(args)},
                   {"report": {"path": reports_path.name, "appended": True,
                               "sha256": record_hash}})
    print(f"{label}: dep_degree {report.dep_degree:.4f} "
          f"(precision {report.precision:.4f}, chance {report.chance:.4f}) "
          f"-> {reports_path}")
    return 0


def cmd_report(args) -> int:
    resolved = resolve(args, REPORT_KEYS, "report")
    if not args.csv:
        raise ValueError("report needs at least one --csv")
    results = []
    for path in args.csv:
        results.extend(from_csv(Path(path).read_text(encoding="utf-8")))
    table = compare_report(results, baseline_id=resolved["baseline"])
    records = (read_report_records(args.probes) if args.probes else None)

    inputs = {"csv": sorted(str(p) for p in args.csv)}
    if args.probes:
        inputs["probes"] = str(args.probes)
    h = run_hash("report", resolved, inputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / f"table-{h}.txt"
    table_path.write_text(table, encoding="utf-8")
    fig_path = out / f"accuracy-{h}.png"
    render_accuracy_figure(results, fig_path)
    outputs = {"table": table_path, "accuracy_figure": fig_path}
    if records is not None:
        dep_path = out / f"dep_degree-{h}.png"
        render_dep_degree_figure(records, dep_path)
        outputs["dep_degree_figure"] = dep_path
    write_manifest(out / f"manifest-{h}.json", "report", resolved, 0,
                   inputs, outputs)
    sys.stdout.write(table)
    print(f"wrote {table_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--data-dir", help="data root (overrides NLS_DATA_DIR)")


def _add_keys(p, keys, skip=()):
    for key, (kind, default) in keys.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        if kind == "bool":
            p.add_argument(flag, action="store_const", const=True,
                           default=None, help=f"(default {default})")
        elif kind == "list":
            p.add_argument(flag, nargs="+", default=None, metavar="NAME",
                           help=f"(default {', '.join(default) or 'mode default'})")
        else:
            typ = {"int": int, "float": float, "str": str}[kind]
            p.add_argument(flag, type=typ, default=None,
                           help=f"(default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nls",
        description="Nuisance-label supervision: train, corrupt, evaluate, "
                    "probe, and report on small image classifiers.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("corrupt", help="write a corrupted dataset + sidecar")
    _add_keys(p, CORRUPT_KEYS)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train a model, write checkpoint + metrics")
    _add_keys(p, TRAIN_KEYS)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on clean + corrupted suites")
    _add_keys(p, EVAL_KEYS)
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint to evaluate (repeatable)")
    p.add_argument("--out", default="reports", help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="measure nuisance dependency of a checkpoint")
    _add_keys(p, PROBE_KEYS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="reports", help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="render comparison table + figures from CSV")
    _add_keys(p, REPORT_KEYS)
    p.add_argument("--csv", action="append", required=True,
                   help="results CSV from `nls eval` (repeatable)")
    p.add_argument("--probes", help="dependency_reports.jsonl for the "
                                    "dep-degree figure")
    p.add_argument("--out", default="reports", help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        if isinstance(exc, OSError) and exc.filename is not None:
            msg = f"{exc.strerror}: {exc.filename}"
        else:
            msg = exc.args[0] if exc.args else str(exc)
        print(f"error[{type(exc).__name__}] {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

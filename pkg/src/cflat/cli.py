"""Experiment runner CLI: run, sweep, landscape, report.

Configs are strict JSON: every field has a default, unknown keys are
rejected, and the resolved config is embedded in the run manifest so a run
can be reproduced from its own output. All CSV output uses repr-formatted
floats, so reruns with the same config are byte-identical; wall-clock timing
is isolated in the manifest under "timing".
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .continual import (
    CLConfig,
    Dataset,
    load_csv_dataset,
    make_stream,
    run_cl_experiment,
    split_dataset,
    synth_dataset,
    SyntheticSpec,
    METHOD_NAMES,
)
from .landscape import flatness_report, landscape_slice_2d, top2_eigenpairs
from .metrics import (
    average_accuracy,
    bwt,
    cflat_proportion,
    fwt,
    last_accuracy,
    relative_return,
)
from .numcore import ParamVector, SeededRng, Segment
from .objective import Batch, MlpOracle, MlpSpec, make_quadratic
from .optim import DivergenceError, OptimConfig, ProxyState, OPTIMIZER_NAMES

SCHEMA_VERSION = 1

_DEFAULT_CONFIG = {
    "dataset": {
        "kind": "synthetic",
        "classes": 10,
        "dims": 16,
        "per_class": 100,
        "cluster_std": 1.0,
        "label_noise": 0.0,
        "feature_scale": 1.0,
        "seed": 7,
        "path": "",
        "test_fraction": 0.2,
        "split_seed": 0,
    },
    "protocol": "B0",
    "increment": 2,
    "perm_seed": 1993,
    "method": "replay",
    "optimizer": "cflat",
    "optim": {
        "eta": 0.5,
        "rho": 0.2,
        "lam": 0.2,
        "eps_guard": 1e-12,
        "rho_min": None,
        "rho_max": None,
        "eta_min": None,
        "eta_max": None,
    },
    "model": {"hidden": [32], "activation": "tanh", "l2": 0.0},
    "train": {"epochs": 8, "batch_size": 32, "milestones": [], "lr_decay": 0.1},
    "memory": {"capacity_per_class": 20},
    "icarl": {"temperature": 2.0},
    "proxy": {"A": 5.0, "k": 0.01, "i0": 80, "eta0": 0.005, "reset_per_task": True},
    "hybrid": {"p": 0.5, "ordering": "cflat_last"},
    "gpm": {"energy_threshold": 0.95, "eta1": 0.0, "eta2": None, "sample": 256},
    "seeds": [0, 1, 2],
    "out_dir": "runs/out",
}

_OPTIONAL_FLOAT_KEYS = {
    "optim.rho_min",
    "optim.rho_max",
    "optim.eta_min",
    "optim.eta_max",
    "gpm.eta2",
}

_ENUMS = {
    "dataset.kind": ("synthetic", "csv"),
    "protocol": ("B0", "B50"),
    "method": METHOD_NAMES,
    "optimizer": OPTIMIZER_NAMES,
    "model.activation": ("tanh", "relu"),
    "hybrid.ordering": ("cflat_first", "cflat_last"),
}


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _check_leaf(path: str, default, value):
    if path in _OPTIONAL_FLOAT_KEYS:
        if value is None or isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value) if value is not None else None
        raise ConfigError(f"{path} must be a number or null", path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean", path)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path} must be an integer", path)
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path} must be a number", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string", path)
        if path in _ENUMS and value not in _ENUMS[path]:
            raise ConfigError(
                f"{path} must be one of {list(_ENUMS[path])}, got {value!r}", path
            )
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{path} must be a list of integers", path)
        return list(value)
    raise ConfigError(f"unsupported config value at {path}", path)


def resolve_config(user: dict) -> dict:
    """Defaults plus user overrides; unknown keys and bad types are rejected."""
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")

    def walk(defaults: dict, overrides: dict, prefix: str) -> dict:
        out = {}
        for key, value in overrides.items():
            path = f"{prefix}{key}"
            if key not in defaults:
                raise ConfigError(f"unknown config key: {path}", path)
        for key, default in defaults.items():
            path = f"{prefix}{key}"
            if key not in overrides:
                out[key] = copy.deepcopy(default)
            elif isinstance(default, dict):
                if not isinstance(overrides[key], dict):
                    raise ConfigError(f"{path} must be an object", path)
                out[key] = walk(default, overrides[key], path + ".")
            else:
                out[key] = _check_leaf(path, default, overrides[key])
        return out

    cfg = walk(_DEFAULT_CONFIG, user, "")
    if cfg["dataset"]["kind"] == "csv" and not cfg["dataset"]["path"]:
        raise ConfigError("dataset.path is required for csv datasets", "dataset.path")
    if not cfg["seeds"]:
        raise ConfigError("seeds must be nonempty", "seeds")
    return cfg


def _build_dataset(cfg: dict) -> Dataset:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        spec = SyntheticSpec(
            classes=ds["classes"],
            dims=ds["dims"],
            per_class=ds["per_class"],
            cluster_std=ds["cluster_std"],
            seed=ds["seed"],
            label_noise=ds["label_noise"],
            feature_scale=ds["feature_scale"],
        )
        return synth_dataset(spec)
    x, y = load_csv_dataset(ds["path"])
    return split_dataset(x, y, ds["test_fraction"], ds["split_seed"])


def _build_optim(cfg: dict) -> OptimConfig:
    o = cfg["optim"]
    return OptimConfig(
        eta=o["eta"], rho=o["rho"], lam=o["lam"], eps_guard=o["eps_guard"],
        rho_min=o["rho_min"], rho_max=o["rho_max"],
        eta_min=o["eta_min"], eta_max=o["eta_max"],
    )


def _build_cl(cfg: dict) -> CLConfig:
    proxy = ProxyState(
        A=cfg["proxy"]["A"], k=cfg["proxy"]["k"],
        i0=cfg["proxy"]["i0"], eta0=cfg["proxy"]["eta0"],
    )
    return CLConfig(
        hidden=tuple(cfg["model"]["hidden"]),
        activation=cfg["model"]["activation"],
        l2=cfg["model"]["l2"],
        epochs=cfg["train"]["epochs"],
        batch_size=cfg["train"]["batch_size"],
        milestones=tuple(cfg["train"]["milestones"]),
        lr_decay=cfg["train"]["lr_decay"],
        memory_capacity=cfg["memory"]["capacity_per_class"],
        temperature=cfg["icarl"]["temperature"],
        gpm_energy_threshold=cfg["gpm"]["energy_threshold"],
        gpm_eta1=cfg["gpm"]["eta1"],
        gpm_eta2=cfg["gpm"]["eta2"],
        gpm_sample=cfg["gpm"]["sample"],
        hybrid_p=cfg["hybrid"]["p"],
        hybrid_ordering=cfg["hybrid"]["ordering"],
        proxy=proxy,
        proxy_reset_per_task=cfg["proxy"]["reset_per_task"],
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _seed_metrics(seed_result, n_tasks: int) -> dict:
    m: dict = {
        "avg_accuracy": average_accuracy(seed_result.matrix),
        "last_accuracy": last_accuracy(seed_result.matrix),
        "bwt": None,
        "fwt": None,
        "cflat_proportion": cflat_proportion(seed_result.trace),
    }
    if n_tasks >= 2:
        m["bwt"] = bwt(seed_result.matrix)
        m["fwt"] = fwt(seed_result.pre_train_acc, seed_result.baseline_acc)
    return m


def _write_metrics_csv(path: Path, result, n_tasks: int) -> None:
    lines = ["seed,avg_accuracy,last_accuracy,bwt,fwt,n_tasks"]
    for seed_result in result.results:
        m = _seed_metrics(seed_result, n_tasks)
        lines.append(
            ",".join([
                str(seed_result.seed),
                _fmt(m["avg_accuracy"]),
                _fmt(m["last_accuracy"]),
                _fmt(m["bwt"]),
                _fmt(m["fwt"]),
                str(n_tasks),
            ])
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_trace_csv(path: Path, result) -> None:
    header = ("seed,task,epoch,step,loss,sq_grad_norm,used_cflat,proxy_value,"
              "grad_evals,hvp_evals,gpm_in_span,gpm_src_norm")
    lines = [header]
    for seed_result in result.results:
        for step, s in enumerate(seed_result.trace):
            lines.append(",".join([
                str(seed_result.seed), str(s.task), str(s.epoch), str(step),
                _fmt(s.loss), _fmt(s.sq_grad_norm), _fmt(s.used_cflat),
                _fmt(s.proxy_value), str(s.grad_evals), str(s.hvp_evals),
                _fmt(s.gpm_in_span), _fmt(s.gpm_src_norm),
            ]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_checkpoint(path: Path, seed_result, cfg: dict, stream) -> None:
    theta = seed_result.final_theta
    n_classes = theta.manifest[-1].shape[0]
    eval_x, eval_y = [], []
    for task in stream.tasks:
        eval_x.append(task.test_x)
        eval_y.append(task.test_y)
    x = np.concatenate(eval_x)[:512]
    y = np.concatenate(eval_y)[:512]
    doc = {
        "kind": "mlp",
        "schema_version": SCHEMA_VERSION,
        "seed": seed_result.seed,
        "model": {
            "d_in": int(x.shape[1]),
            "hidden": list(cfg["model"]["hidden"]),
            "n_classes": int(n_classes),
            "activation": cfg["model"]["activation"],
            "l2": cfg["model"]["l2"],
        },
        "manifest": [[s.name, s.offset, list(s.shape)] for s in theta.manifest],
        "theta": [float(v) for v in theta.data],
        "eval_x": [[float(v) for v in row] for row in x],
        "eval_y": [int(v) for v in y],
    }
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def _run_to_manifest(cfg: dict, result, n_tasks: int) -> dict:
    per_seed = []
    for seed_result in result.results:
        m = _seed_metrics(seed_result, n_tasks)
        per_seed.append({
            "seed": seed_result.seed,
            "accuracy_matrix": seed_result.matrix,
            "pre_train_accuracy": seed_result.pre_train_acc,
            "baseline_accuracy": seed_result.baseline_acc,
            "metrics": m,
            "examples": seed_result.examples,
        })
    avgs = [s["metrics"]["avg_accuracy"] for s in per_seed]
    lasts = [s["metrics"]["last_accuracy"] for s in per_seed]
    props = [s["metrics"]["cflat_proportion"] for s in per_seed]
    timing = {
        "per_seed_train_seconds": [r.train_seconds for r in result.results],
        "per_seed_examples_per_second": [
            r.examples / r.train_seconds if r.train_seconds > 0 else None
            for r in result.results
        ],
    }
    return {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "config": cfg,
        "n_tasks": n_tasks,
        "seeds": [r.seed for r in result.results],
        "per_seed": per_seed,
        "aggregate": {
            "mean_accuracy_matrix": result.mean_matrix,
            "avg_accuracy_mean": float(np.mean(avgs)),
            "avg_accuracy_std": float(np.std(avgs)),
            "last_accuracy_mean": float(np.mean(lasts)),
            "last_accuracy_std": float(np.std(lasts)),
            "cflat_proportion_mean": float(np.mean(props)),
        },
        "timing": timing,
    }


def run_experiment_from_config(cfg: dict, out_dir: Path) -> dict:
    """Execute a resolved config and write manifest/metrics/trace/checkpoints."""
    dataset = _build_dataset(cfg)
    stream = make_stream(dataset, cfg["protocol"], cfg["increment"], cfg["perm_seed"])
    result = run_cl_experiment(
        stream, cfg["method"], cfg["optimizer"],
        _build_optim(cfg), _build_cl(cfg), cfg["seeds"],
    )
    n_tasks = len(stream.tasks)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _run_to_manifest(cfg, result, n_tasks)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8"
    )
    _write_metrics_csv(out_dir / "metrics.csv", result, n_tasks)
    _write_trace_csv(out_dir / "trace.csv", result)
    for seed_result in result.results:
        _write_checkpoint(
            out_dir / f"checkpoint_seed{seed_result.seed}.json",
            seed_result, cfg, stream,
        )
    return manifest


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    if isinstance(doc, dict) and "config" in doc and "schema_version" in doc:
        doc = doc["config"]  # a manifest reproduces its own run
    return doc


def _apply_overrides(cfg_doc: dict, args) -> dict:
    if getattr(args, "seeds", None):
        cfg_doc = dict(cfg_doc)
        cfg_doc["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "out", None):
        cfg_doc = dict(cfg_doc)
        cfg_doc["out_dir"] = args.out
    return cfg_doc


def cmd_run(args) -> int:
    cfg_doc = _apply_overrides(_load_config_file(args.config), args)
    cfg = resolve_config(cfg_doc)
    run_experiment_from_config(cfg, Path(cfg["out_dir"]))
    return 0


def _parse_axis(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"axis must look like key=v1,v2,...: {spec!r}")
    key, _, raw = spec.partition("=")
    values = []
    for item in raw.split(","):
        item = item.strip()
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            values.append(item)
    if not values:
        raise ConfigError(f"axis {key!r} has no values")
    return key.strip(), values


def _set_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"axis key {dotted!r} does not address an object")
    node[parts[-1]] = value


def _sweep_cell(payload) -> dict:
    cfg, out_dir = payload
    return run_experiment_from_config(cfg, Path(out_dir))


def cmd_sweep(args) -> int:
    base_doc = _apply_overrides(_load_config_file(args.config), args)
    axes = [_parse_axis(spec) for spec in args.axis]
    base_out = Path(base_doc.get("out_dir", _DEFAULT_CONFIG["out_dir"]))

    cells = []
    for combo in itertools.product(*[values for _, values in axes]):
        doc = copy.deepcopy(base_doc)
        slug_parts = []
        for (key, _), value in zip(axes, combo):
            _set_path(doc, key, value)
            slug_parts.append(f"{key.replace('.', '_')}={value}")
        cell_dir = base_out / ("cell_" + "__".join(slug_parts).replace("/", "_"))
        doc["out_dir"] = str(cell_dir)
        cells.append((resolve_config(doc), str(cell_dir), combo))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            manifests = list(pool.map(_sweep_cell, [(c, d) for c, d, _ in cells]))
    else:
        manifests = [_sweep_cell((c, d)) for c, d, _ in cells]

    lines = [
        ",".join([key for key, _ in axes]
                 + ["cell_dir", "avg_accuracy_mean", "avg_accuracy_std",
                    "last_accuracy_mean", "cflat_proportion_mean"])
    ]
    for (cfg, cell_dir, combo), manifest in zip(cells, manifests):
        agg = manifest["aggregate"]
        lines.append(",".join(
            [json.dumps(v) if not isinstance(v, str) else v for v in combo]
            + [cell_dir, _fmt(agg["avg_accuracy_mean"]), _fmt(agg["avg_accuracy_std"]),
               _fmt(agg["last_accuracy_mean"]), _fmt(agg["cflat_proportion_mean"])]
        ))
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _load_checkpoint(path: str):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    kind = doc.get("kind")
    if kind == "quadratic":
        oracle = make_quadratic(np.array(doc["H"]), np.array(doc["c"]) if "c" in doc else None)
        theta = ParamVector(np.array(doc["theta"]))
        return oracle, theta, None
    if kind == "mlp":
        model = doc["model"]
        spec = MlpSpec(
            d_in=model["d_in"], hidden=tuple(model["hidden"]),
            n_classes=model["n_classes"], activation=model["activation"],
            l2=model["l2"],
        )
        oracle = MlpOracle(spec)
        manifest = tuple(
            Segment(name, offset, tuple(shape)) for name, offset, shape in doc["manifest"]
        )
        theta = ParamVector(np.array(doc["theta"]), manifest)
        batch = Batch(np.array(doc["eval_x"]), np.array(doc["eval_y"]))
        return oracle, theta, batch
    raise ConfigError(f"unknown checkpoint kind {kind!r}")


def cmd_landscape(args) -> int:
    oracle, theta, batch = _load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(args.probe_seed)

    report = flatness_report(
        oracle, theta, batch, rho=args.rho, rng=rng,
        power_iters=args.iters, trace_probes=args.probes,
        ball_samples=args.samples,
    )
    doc = report.to_dict()
    doc["r0_le_r1"] = bool(report.r0_sample <= report.r1_sample * 1.02 + 1e-12)
    doc["probe_seed"] = args.probe_seed
    doc["checkpoint"] = args.checkpoint
    (out_dir / "flatness.json").write_text(
        json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8"
    )

    (l1, v1), (l2, v2) = top2_eigenpairs(oracle, theta, batch, rng=rng.spawn(9))
    a_axis, b_axis, losses = landscape_slice_2d(
        oracle, theta, batch, v1, v2, extent=args.extent, grid_n=args.grid
    )
    lines = ["dir1_offset,dir2_offset,loss"]
    for i, a in enumerate(a_axis):
        for j, b in enumerate(b_axis):
            lines.append(f"{_fmt(a)},{_fmt(b)},{_fmt(losses[i, j])}")
    (out_dir / "slice.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _collect_manifests(results_dir: Path) -> list[dict]:
    manifests = []
    for path in sorted(results_dir.rglob("manifest.json")):
        manifests.append(json.loads(path.read_text(encoding="utf-8")))
    if not manifests:
        raise ConfigError(f"no manifest.json found under {results_dir}")
    versions = {m.get("schema_version") for m in manifests}
    if len(versions) > 1:
        raise ConfigError(f"mixed manifest schema versions: {sorted(map(str, versions))}")
    return manifests


def cmd_report(args) -> int:
    manifests = _collect_manifests(Path(args.results))
    rows = {}
    for m in manifests:
        key = (m["config"]["method"], m["config"]["optimizer"])
        if key in rows:
            raise ConfigError(f"duplicate method/optimizer cell: {key}")
        speeds = [s for s in m["timing"]["per_seed_examples_per_second"] if s]
        rows[key] = {
            "avg_mean": m["aggregate"]["avg_accuracy_mean"],
            "avg_std": m["aggregate"]["avg_accuracy_std"],
            "last_mean": m["aggregate"]["last_accuracy_mean"],
            "last_std": m["aggregate"]["last_accuracy_std"],
            "proportion": m["aggregate"]["cflat_proportion_mean"],
            "throughput": float(np.mean(speeds)) if speeds else float("nan"),
        }

    sgd_ref = {method: row["avg_mean"] for (method, opt), row in rows.items() if opt == "sgd"}
    lines = [
        "# Continual-learning results",
        "",
        "Mean and std are over seeds (population std). Relative return compares",
        "average accuracy against the SGD row of the same method.",
        "",
        "| method | optimizer | avg acc | last acc | proportion | img/s | rel. return |",
        "|---|---|---|---|---|---|---|",
    ]
    for (method, opt) in sorted(rows):
        row = rows[(method, opt)]
        if method in sgd_ref and sgd_ref[method] != 0:
            rel = relative_return(row["avg_mean"], sgd_ref[method])
            rel_str = f"{rel * 100:+.2f}%"
        else:
            rel_str = "n/a"
        lines.append(
            f"| {method} | {opt} "
            f"| {row['avg_mean']:.4f} ± {row['avg_std']:.4f} "
            f"| {row['last_mean']:.4f} ± {row['last_std']:.4f} "
            f"| {row['proportion'] * 100:.1f}% "
            f"| {row['throughput']:.1f} "
            f"| {rel_str} |"
        )
    out_path = Path(args.out) if args.out else Path(args.results) / "report.md"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cflat", description="Flatness-seeking continual-learning experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a JSON config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default=None, help="override out_dir")
    run_p.add_argument("--seeds", default=None, help="comma-separated seed override")
    run_p.add_argument("--jobs", type=int, default=1)
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="Cartesian sweep over config axes")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--axis", action="append", required=True,
                         help="dotted.key=v1,v2,... (repeatable)")
    sweep_p.add_argument("--out", default=None)
    sweep_p.add_argument("--seeds", default=None)
    sweep_p.add_argument("--jobs", type=int, default=1)
    sweep_p.set_defaults(func=cmd_sweep)

    land_p = sub.add_parser("landscape", help="flatness report for a checkpoint")
    land_p.add_argument("--checkpoint", required=True)
    land_p.add_argument("--out", required=True)
    land_p.add_argument("--rho", type=float, default=0.2)
    land_p.add_argument("--samples", type=int, default=2000)
    land_p.add_argument("--probes", type=int, default=200)
    land_p.add_argument("--iters", type=int, default=200)
    land_p.add_argument("--grid", type=int, default=21)
    land_p.add_argument("--extent", type=float, default=1.0)
    land_p.add_argument("--probe-seed", type=int, default=0)
    land_p.set_defaults(func=cmd_landscape)

    rep_p = sub.add_parser("report", help="markdown summary over run manifests")
    rep_p.add_argument("--results", required=True)
    rep_p.add_argument("--out", default=None)
    rep_p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        payload = {"error": {"kind": "config", "message": str(err)}}
        if err.field:
            payload["error"]["field"] = err.field
        print(json.dumps(payload), file=sys.stderr)
        return 2
    except DivergenceError as err:
        payload = {"error": {"kind": "divergence", "message": str(err), "step": err.step}}
        print(json.dumps(payload), file=sys.stderr)
        return 3
    except (ValueError, OSError, json.JSONDecodeError) as err:
        payload = {"error": {"kind": type(err).__name__, "message": str(err)}}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

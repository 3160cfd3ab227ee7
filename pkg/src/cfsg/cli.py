"""Command-line front end: data generation, training, evaluation, inference
weight sweeps, explainability reports, and the self-test suite.

Exit codes: 0 success, 1 self-test/assertion failure, 2 usage or validation
error, 3 numeric divergence.  Every command writes a run manifest
(manifest.json next to its primary outputs) and never mutates its inputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (CFSGError, CheckpointError, DivergenceError, NumericError,
                     ValidationError)
from .explain import hierarchy_alignment, nc_diagnostics, pairs_table
from .hierarchy import load_hierarchy
from .model import partition_channels
from .network import CFSGNetwork
from . import autodiff as ad
from .selftest import LOSS_TERMS, run_selftest
from .synthdata import SyntheticDomainConfig, generate_synthetic_domains, load_dataset, save_dataset
from .train import (HISTORY_COLUMNS, evaluate, load_checkpoint, rebuild_network,
                    save_checkpoint, train, train_config_from_dict, weight_sweep)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict,
                   inputs: list[Path], outputs: list[Path], started: float) -> Path:
    doc = {
        "tool": "cfsg",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_seconds": time.monotonic() - started,
    }
    for p in outputs:
        if not Path(p).exists():
            raise ValidationError(f"declared output {p} was not written")
    path = out_dir / "manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in header])


def cmd_gen_data(args) -> int:
    started = time.monotonic()
    hierarchy_path = Path(args.hierarchy)
    h = load_hierarchy(hierarchy_path)
    partition = partition_channels(args.d, tuple(float(r) for r in args.ratio.split(":")))
    cfg = SyntheticDomainConfig(
        prototype_scales=tuple([args.proto_scale] * h.levels),
        noise_std=args.noise,
        shift_scale=1.0 + args.shift,
        shift_offset=args.shift,
        samples_per_class=args.per_class,
        seed=args.seed)
    source, target = generate_synthetic_domains(h, partition, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source_path = out_dir / "source.json"
    target_path = out_dir / "target.json"
    save_dataset(source, source_path)
    save_dataset(target, target_path)
    write_manifest(out_dir, "gen-data",
                   {"hierarchy": str(hierarchy_path), "seed": args.seed, "noise": args.noise,
                    "shift": args.shift, "per_class": args.per_class, "d": args.d,
                    "ratio": args.ratio, "proto_scale": args.proto_scale},
                   [hierarchy_path], [source_path, target_path], started)
    print(f"wrote {source_path} and {target_path} "
          f"({len(source)} samples per domain, {h.num_fine} fine classes)")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.monotonic()
    config_path = Path(args.config)
    try:
        doc = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {config_path}: {exc}") from exc
    cfg = train_config_from_dict(doc)
    data_path = Path(args.data) / "source.json"
    dataset = load_dataset(data_path, domain="source")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else out_path.parent / "history.csv"

    ckpt, history = train(cfg, dataset)
    save_checkpoint(ckpt, out_path)
    _write_csv(history_path, list(HISTORY_COLUMNS), history)
    write_manifest(out_path.parent, "train", doc, [config_path, data_path],
                   [out_path, history_path], started)
    final = history[-1] if history else {}
    print(f"trained {cfg.epochs} epochs; final total loss "
          f"{final.get('total', float('nan')):.6f}, "
          f"fine train accuracy {final.get('fine_train_acc', float('nan')):.4f}")
    print(f"checkpoint: {out_path}\nhistory: {history_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.monotonic()
    ckpt_path = Path(args.ckpt)
    data_path = Path(args.data)
    ckpt = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_path)
    report = evaluate(ckpt, dataset, lam=(args.lam_c, args.lam_p, args.lam_n),
                      use_subcentroid=args.subcentroid)
    out_path = Path(args.out) if args.out else data_path.parent / "eval.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    write_manifest(out_path.parent, "eval",
                   {"ckpt": str(ckpt_path), "data": str(data_path),
                    "lam": [args.lam_c, args.lam_p, args.lam_n],
                    "subcentroid": args.subcentroid},
                   [ckpt_path, data_path], [out_path], started)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.monotonic()
    ckpt_path = Path(args.ckpt)
    data_path = Path(args.data)
    ckpt = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_path)
    sweep = weight_sweep(ckpt, dataset, step=args.step)
    out_path = Path(args.out) if args.out else data_path.parent / "sweep.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out_path, ["lam_c", "lam_p", "lam_n", "fine_acc"], sweep["rows"])
    write_manifest(out_path.parent, "sweep",
                   {"ckpt": str(ckpt_path), "data": str(data_path), "step": args.step},
                   [ckpt_path, data_path], [out_path], started)
    best = sweep["best"]
    print(f"{len(sweep['rows'])} grid points -> {out_path}")
    print(f"best: lam_c={best['lam_c']:.2f} lam_p={best['lam_p']:.2f} "
          f"lam_n={best['lam_n']:.2f} fine_acc={best['fine_acc']:.4f}")
    return EXIT_OK


def _collect_fine_features(network: CFSGNetwork, dataset) -> list[np.ndarray]:
    """Per-class concatenated pooled fine-level features (for NC diagnostics)."""
    feats = []
    with ad.no_grad():
        for start in range(0, len(dataset), 256):
            sl = slice(start, min(start + 256, len(dataset)))
            state = network.forward(dataset.x[sl], mode="eval", lam=(1.0, 1.0, 1.0))
            pooled = state.pooled[0]
            feats.append(np.concatenate([pooled.common.data, pooled.specific.data,
                                         pooled.confounding.data], axis=1))
    all_feats = np.concatenate(feats, axis=0)
    labels = dataset.labels[:, 0]
    return [all_feats[labels == k] for k in range(dataset.hierarchy.num_fine)]


def cmd_explain(args) -> int:
    started = time.monotonic()
    ckpt_path = Path(args.ckpt)
    hierarchy_path = Path(args.hierarchy)
    ckpt = load_checkpoint(ckpt_path)
    h = load_hierarchy(hierarchy_path)
    if tuple(h.class_counts) != tuple(ckpt.hierarchy.class_counts):
        raise ValidationError(
            f"hierarchy class counts {h.class_counts} do not match checkpoint "
            f"{ckpt.hierarchy.class_counts}")
    weight = ckpt.tensors["classifier0.weight"]
    report = hierarchy_alignment(weight, ckpt.partition, h)

    doc = {"similarity": report.to_dict(), "nc": None}
    inputs = [ckpt_path, hierarchy_path]
    if args.data:
        data_path = Path(args.data)
        dataset = load_dataset(data_path)
        network = rebuild_network(ckpt)
        groups = _collect_fine_features(network, dataset)
        nonempty = [g for g in groups if g.size]
        if len(nonempty) != len(groups):
            raise ValidationError("some fine classes have no samples in --data")
        nc = nc_diagnostics(groups, weight)
        doc["nc"] = nc.to_dict()
        inputs.append(data_path)

    out_dir = Path(args.out_dir) if args.out_dir else ckpt_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    pairs_path = out_dir / "pairs.csv"
    report_path.write_text(json.dumps(doc, indent=2, allow_nan=True) + "\n", encoding="utf-8")
    _write_csv(pairs_path, ["i", "j", "gt_sim", "cos_all", "cos_c", "cos_p", "cos_n"],
               pairs_table(report))
    write_manifest(out_dir, "explain",
                   {"ckpt": str(ckpt_path), "hierarchy": str(hierarchy_path),
                    "data": args.data}, inputs, [report_path, pairs_path], started)
    print(json.dumps({"rho": doc["similarity"]["rho"], "nc": doc["nc"]}, indent=2))
    print(f"report: {report_path}\npairs: {pairs_path}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(perturb_term=args.perturb_grad)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failing checks: " + ", ".join(r.name for r in failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfsg",
        description="Structured-concept multi-granularity classifier toolkit")
    parser.add_argument("--version", action="version", version=f"cfsg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic source/target domain pair")
    g.add_argument("--hierarchy", required=True, help="hierarchy JSON file")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std")
    g.add_argument("--shift", type=float, default=0.0,
                   help="target-domain shift s: blocks get scale 1+s and offset s")
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--d", type=int, default=20, help="input dimension")
    g.add_argument("--ratio", default="5:3:2", help="common:specific:confounding ratio")
    g.add_argument("--proto-scale", type=float, default=1.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated source domain")
    t.add_argument("--config", required=True, help="training config JSON")
    t.add_argument("--data", required=True, help="directory containing source.json")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--history", default=None, help="history CSV path (default: alongside --out)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--lam-c", type=float, default=1.0)
    e.add_argument("--lam-p", type=float, default=1.0)
    e.add_argument("--lam-n", type=float, default=1.0)
    e.add_argument("--subcentroid", action="store_true",
                   help="nearest sub-centroid inference instead of the weighted classifier")
    e.add_argument("--out", default=None, help="report JSON path")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="evaluate every inference-weight grid point")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--step", type=float, default=0.05)
    s.add_argument("--out", default=None, help="sweep CSV path")
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("explain", help="concept-similarity and neural-collapse reports")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--hierarchy", required=True)
    x.add_argument("--data", default=None,
                   help="dataset file for the neural-collapse diagnostics")
    x.add_argument("--out-dir", default=None)
    x.set_defaults(func=cmd_explain)

    st = sub.add_parser("selftest", help="run the built-in invariant suite")
    st.add_argument("--perturb-grad", choices=list(LOSS_TERMS) + ["total"], default=None,
                    help="testing hook: corrupt one analytic gradient so its check fails")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc} (finished epochs: {len(exc.history)})", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, CheckpointError, CFSGError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

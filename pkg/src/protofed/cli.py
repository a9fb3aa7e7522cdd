"""Command-line entry point: ``protofed run | partition-inspect | gradcheck | score-dump``.

The output directory is taken from ``--out``, else from the ``PROTOFED_OUT``
environment variable, else from the config. A run computes everything in
memory and only then writes its artifacts through a staging directory
inside the output directory, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, resolve
from .datasets import LabeledDataset, partition_extreme
from .mediator import export_prototype
from .ocnf import FlowModel, GaussianDensity, KernelDensity, nll
from .representation import load_params, save_params, unflatten

log = logging.getLogger("protofed")

OUT_ENV = "PROTOFED_OUT"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ArtifactError(RuntimeError):
    pass


# -- config assembly --------------------------------------------------------

def build_config(args) -> tuple[RunConfig, Path | None]:
    """Config file (or defaults) plus command-line overrides, validated once.

    Relative dataset paths are resolved against the config file's directory
    and stored absolute, so later subcommands can find the data again.
    """
    base_dir = None
    if args.config:
        path = Path(args.config)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
        base_dir = path.parent
        if not isinstance(obj, dict):
            raise ConfigError([f"{path}: top level must be an object"])
    else:
        obj = RunConfig().to_dict()
    obj = dict(obj)
    ds = obj.get("dataset")
    if base_dir is not None and isinstance(ds, dict):
        ds = dict(ds)
        for key in ("path", "train_images", "train_labels", "test_images", "test_labels"):
            if isinstance(ds.get(key), str):
                ds[key] = str(resolve(ds[key], base_dir).resolve())
        obj["dataset"] = ds
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.ablate:
        obj["ablate"] = sorted(set(args.ablate))
    if args.gamma is not None:
        obj["gamma"] = args.gamma
    if args.scorer is not None:
        obj["scorer"] = args.scorer
    if args.workers is not None:
        obj["workers"] = args.workers
    if args.clients_per_round is not None:
        fed = obj.get("federation", {})
        obj["federation"] = {**fed, "clients_per_round": args.clients_per_round} if isinstance(fed, dict) else fed
    out = args.out or os.environ.get(OUT_ENV)
    if out:
        obj["out_dir"] = out
    cfg = RunConfig.from_dict(obj, base_dir=base_dir)
    return cfg, base_dir


# -- artifacts --------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _existing_hash(out: Path) -> str | None:
    manifest = out / MANIFEST
    if not manifest.is_file():
        return None
    try:
        return json.loads(manifest.read_text())["config_hash"]
    except (ValueError, KeyError) as exc:
        raise ArtifactError(f"{manifest}: unreadable manifest ({exc})") from None


def write_artifacts(outcome, cfg: RunConfig, out: Path, timings: dict) -> dict:
    """Stage every file under ``out/.staging`` and move them into place at the end."""
    h = cfg.hash()
    stage = out / ".staging"
    if stage.exists():
        shutil.rmtree(stage)
    (stage / "checkpoints").mkdir(parents=True)
    (stage / "prototypes").mkdir()
    try:
        report = outcome.report
        (stage / "config.json").write_text(
            json.dumps({"config_hash": h, "config": cfg.echo()}, sort_keys=True, indent=2) + "\n"
        )
        (stage / "report.json").write_text(report.to_json())
        (stage / "summary.csv").write_text(report.to_csv())
        meta = {"config_hash": h}
        save_params(stage / "checkpoints" / "encoder.params", outcome.theta, {**meta, "kind": "encoder"})
        for ev in outcome.evaluations:
            cid = ev.result.client_id
            if ev.scorer.flow is not None:
                save_params(
                    stage / "checkpoints" / f"flow_{cid:03d}.params",
                    ev.scorer.flow.flatten(),
                    {**meta, "kind": "flow", "client_id": cid},
                )
        for cid, proto in sorted(outcome.prepared.registry.prototypes.items()):
            export_prototype(stage / "prototypes" / f"client_{cid:03d}.params", proto, meta)
        files = sorted(p.relative_to(stage).as_posix() for p in stage.rglob("*") if p.is_file())
        manifest = {
            "config_hash": h,
            "config": cfg.echo(),
            "rounds": report.rounds,
            "encoder_checkpoint": "checkpoints/encoder.params",
            "files": {f: _sha256(stage / f) for f in files},
            "timings_s": timings,
        }
        (stage / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        for item in sorted(stage.iterdir()):
            target = out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            item.replace(target)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return manifest


# -- subcommands ------------------------------------------------------------

def cmd_run(args) -> int:
    from .evalharness import execute

    cfg, base_dir = build_config(args)
    out = Path(cfg.out_dir)
    previous = _existing_hash(out) if out.exists() else None
    if previous is not None and previous != cfg.hash():
        raise ArtifactError(
            f"{out} holds a run with config hash {previous}, refusing to mix it with {cfg.hash()}"
        )
    t0 = time.perf_counter()
    outcome = execute(cfg, "one_vs_rest" if cfg.gamma == 0 else "scalability", base_dir=base_dir)
    timings = {"total": round(time.perf_counter() - t0, 3)}
    out.mkdir(parents=True, exist_ok=True)
    write_artifacts(outcome, cfg, out, timings)
    r = outcome.report
    print(f"config {cfg.hash()}  mean AUROC {r.mean_auroc:.4f} (std {r.std_auroc:.4f})  "
          f"mean EER {r.mean_eer:.4f}  -> {out}")
    for g in r.groups():
        print(f"  {g}: mean AUROC {r.group_mean(g):.4f}")
    return EXIT_OK


def cmd_partition_inspect(args) -> int:
    if args.labels is not None:
        try:
            labels = np.array([int(v) for v in args.labels.split(",") if v.strip()], dtype=np.int64)
        except ValueError:
            raise ConfigError([f"--labels must be comma-separated integers, got {args.labels!r}"]) from None
        if labels.size == 0 or labels.min() < 0:
            raise ConfigError(["--labels needs at least one non-negative label"])
        data = LabeledDataset(np.zeros((labels.size, 1)), labels, int(labels.max()) + 1)
    else:
        from .evalharness.experiments import load_dataset

        cfg, base_dir = build_config(args)
        data = load_dataset(cfg, base_dir).train
    shards = partition_extreme(data, data.num_classes)
    print("client\tlabel\tsize")
    for s in shards:
        print(f"{s.client_id}\t{s.label}\t{len(s)}")
    print(f"total\t-\t{sum(len(s) for s in shards)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(range(args.seeds), args.step)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        print(f"{name:14s} max relative error {err:.3e}")
    overall = max(worst.values())
    print(f"overall max relative error {overall:.3e} ({'ok' if overall < args.tolerance else 'FAIL'})")
    return EXIT_OK if overall < args.tolerance else EXIT_FAIL


def cmd_score_dump(args) -> int:
    from .evalharness.experiments import flow_configs, prepare

    run_dir = Path(args.run)
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        raise ArtifactError(f"{run_dir}: no config.json, not a run directory")
    stored = json.loads(cfg_path.read_text())
    cfg = RunConfig.from_dict({**stored["config"], "out_dir": str(run_dir)})
    h = cfg.hash()
    manifest_hash = _existing_hash(run_dir)
    if stored.get("config_hash") != h or manifest_hash != h:
        raise ArtifactError(f"{run_dir}: config hash mismatch (config {stored.get('config_hash')}, manifest {manifest_hash}, recomputed {h})")
    enc_path = run_dir / "checkpoints" / "encoder.params"
    if not enc_path.is_file():
        raise ArtifactError(f"missing checkpoint {enc_path}")
    theta, meta = load_params(enc_path)
    if meta.get("config_hash") != h:
        raise ArtifactError(f"{enc_path}: checkpoint belongs to config {meta.get('config_hash')}, not {h}")
    prep = prepare(cfg)
    encoder = unflatten(theta, prep.encoder_config)
    test = prep.split.test
    latents = encoder(test.features)
    clients = [s for s in prep.shards if args.client is None or s.client_id == args.client]
    if not clients:
        raise ArtifactError(f"no client {args.client} in this run")
    rows = []
    for shard in clients:
        if cfg.scorer == "ocnf":
            path = run_dir / "checkpoints" / f"flow_{shard.client_id:03d}.params"
            if not path.is_file():
                raise ArtifactError(f"missing checkpoint {path}")
            pv, fmeta = load_params(path)
            if fmeta.get("config_hash") != h:
                raise ArtifactError(f"{path}: checkpoint belongs to config {fmeta.get('config_hash')}, not {h}")
            fcfg, _ = flow_configs(cfg, prep.encoder_config.output_dim)
            scores = nll(FlowModel.unflatten(pv, fcfg), latents)
        elif cfg.scorer == "gde":
            scores = GaussianDensity(encoder(shard.features)).score(latents)
        else:
            scores = KernelDensity(encoder(shard.features)).score(latents)
        for sid, lab, sc in zip(test.sample_ids, test.labels, scores):
            rows.append((shard.client_id, int(sid), int(lab), int(lab == shard.label), repr(float(sc))))
    dest = run_dir / (args.output or "scores.csv")
    if not dest.resolve().is_relative_to(run_dir.resolve()):
        raise ArtifactError(f"{dest} lies outside the run directory {run_dir}")
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["# config_hash", h])
        w.writerow(["client_id", "sample_id", "label", "is_target", "score"])
        w.writerows(rows)
    print(f"wrote {len(rows)} scores to {dest}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (defaults to the built-in synthetic benchmark)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    p.add_argument("--ablate", action="append", choices=["pd", "p", "reg"],
                   help="disable a loss term; repeatable")
    p.add_argument("--gamma", type=int, help="number of new joiners that skip phase 1")
    p.add_argument("--clients-per-round", type=int, dest="clients_per_round")
    p.add_argument("--scorer", choices=["ocnf", "gde", "kde"])
    p.add_argument("--workers", type=int, help="parallel client workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protofed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="phase 1 + phase 2 + one-vs-rest evaluation")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition-inspect", help="print shard sizes and labels")
    _add_config_args(p)
    p.add_argument("--labels", help="comma-separated labels to partition instead of a dataset")
    p.set_defaults(func=cmd_partition_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("score-dump", help="per-sample scores of a finished run")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--client", type=int, help="only this client (default: all)")
    p.add_argument("--output", help="file name inside the run directory (default scores.csv)")
    p.set_defaults(func=cmd_score_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

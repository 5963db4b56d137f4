"""Command line entry point: ``pfedgat run`` and ``pfedgat compare``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from pfedgat import __version__
from pfedgat.config import dump_config, load_config
from pfedgat.orchestrator import ExperimentConfig, RoundRecord, run_experiment, with_overrides

log = logging.getLogger("pfedgat")

COMMS_NOTE = (
    "Each client uploads one scalar loss per round, but the server update needs the gradient "
    "of that loss with respect to the received parameters (d floats per client). "
    "gradient_bytes is what the simulation actually transfers."
)


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_artifacts(out: Path, history: list[RoundRecord]) -> None:
    _write_csv(
        out / "metrics.csv",
        ["round", "client_id", "train_loss", "test_loss", "test_acc"],
        (
            [rec.round, cid, _num(tr), _num(te), _num(acc)]
            for rec in history
            for cid, tr, te, acc in zip(rec.client_ids, rec.train_loss, rec.test_loss, rec.test_acc)
        ),
    )
    _write_csv(
        out / "summary.csv",
        ["round", "n_clients", "mean_acc", "std_acc", "total_loss", "mean_train_loss", "mean_test_loss"],
        (
            [rec.round, len(rec.client_ids), _num(rec.mean_acc), _num(rec.std_acc), _num(rec.total_loss),
             _num(np.mean(rec.train_loss)), _num(np.mean(rec.test_loss))]
            for rec in history
        ),
    )
    _write_csv(
        out / "comms.csv",
        ["round", "n_clients", "param_bytes", "loss_bytes", "gradient_bytes"],
        (
            [rec.round, len(rec.client_ids), rec.bytes_uploaded.get("params", 0),
             rec.bytes_uploaded.get("losses", 0), rec.bytes_uploaded.get("gradients", 0)]
            for rec in history
        ),
    )
    if any(rec.allocation is not None for rec in history):
        (out / "alloc").mkdir()
        for rec in history:
            if rec.allocation is not None:
                _write_csv(out / "alloc" / f"round_{rec.round}.csv", [f"c{c}" for c in rec.client_ids],
                           ([_num(v) for v in row] for row in rec.allocation))


def _publish(tmp: Path, out: Path) -> None:
    """Move a finished temp directory into place, replacing a previous run's output."""
    if out.exists():
        if out.is_dir() and (not any(out.iterdir()) or (out / "manifest.json").exists()):
            shutil.rmtree(out)
        else:
            raise FileExistsError(f"{out} exists and does not look like a previous run")
    os.replace(tmp, out)


def run(cfg: ExperimentConfig, out_dir, config_path: Optional[str] = None, threads: int = 1) -> list[RoundRecord]:
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    history = run_experiment(cfg, threads=threads)
    elapsed = time.perf_counter() - t0

    tmp = Path(tempfile.mkdtemp(prefix=".pfedgat-", dir=out.parent))
    try:
        write_artifacts(tmp, history)
        (tmp / "resolved.cfg").write_text(dump_config(cfg), encoding="utf-8")
        comms_flag = cfg.strategy in ("pfedgat", "direct_matrix")
        manifest = {
            "config_path": config_path,
            "resolved_config": cfg.to_dict(),
            "resolved_config_file": "resolved.cfg",
            "output_dir": str(out),
            "tool_version": __version__,
            "wall_clock_seconds": round(elapsed, 3),
            "n_params": cfg.mlp_spec().n_params,
            "scalar_feedback_insufficient": comms_flag,
            "comms_note": COMMS_NOTE if comms_flag else "",
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        _publish(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return history


def compare(configs: Sequence[tuple[str, ExperimentConfig]], out_dir, threads: int = 1) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (name, cfg) in enumerate(configs):
        history = run(cfg, out / "runs" / f"{i:02d}_{Path(name).stem}", config_path=name, threads=threads)
        last = history[-1]
        rows.append({"index": i, "config": name, "strategy": cfg.strategy,
                     "final_mean_acc": last.mean_acc, "final_std_acc": last.std_acc})
    best = max(r["final_mean_acc"] for r in rows)
    _write_csv(
        out / "comparison.csv",
        ["index", "config", "strategy", "final_mean_acc", "final_std_acc", "best"],
        ([r["index"], r["config"], r["strategy"], _num(r["final_mean_acc"]), _num(r["final_std_acc"]),
          int(r["final_mean_acc"] == best)] for r in rows),
    )
    return rows


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfedgat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, nargs in (("run", None), ("compare", "+")):
        sp = sub.add_parser(name)
        sp.add_argument("config", nargs=nargs)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--threads", type=int, default=1, help="worker count; never changes results")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    paths = [args.config] if args.command == "run" else args.config
    try:
        cfgs = [(p, with_overrides(load_config(p), seed=args.seed, rounds=args.rounds)) for p in paths]
        if args.command == "run":
            history = run(cfgs[0][1], args.out, config_path=paths[0], threads=args.threads)
            log.info("%d rounds, final mean accuracy %.4f", len(history), history[-1].mean_acc)
        else:
            for r in compare(cfgs, args.out, threads=args.threads):
                log.info("%s [%s] final mean accuracy %.4f", r["config"], r["strategy"], r["final_mean_acc"])
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"pfedgat: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

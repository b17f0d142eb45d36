"""Command-line entry points.

Every command is first resolved into a :class:`RunManifest` (all flags,
config values and paths made explicit), the manifest is written into the run
directory, and the command then executes from the manifest alone. ``dgt rerun
<manifest>`` replays one.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import graph
from .evaluation import EvalReport, evaluate, evaluate_new_links, noisy_history
from .model import ModelConfig
from .trainer import Checkpoint, TrainConfig, finetune, pretrain

log = logging.getLogger("dgt")

RUN_ROOT_ENV = "DGT_RUN_ROOT"
DERIVED = {"num_nodes", "T"}  # filled from the data, never from flags

ABLATION_AXES = {
    "tower_mode": ["two-tower", "single-tower"],
    "attn_mask_hops": [1, 3, None],
    "use_tc": [True, False],
    "use_sd": [True, False],
    "num_layers": [2, 4, 6],
    "noise": [0.0, 0.1, 0.2, 0.5],
}


class CLIError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    inputs: dict
    outputs: dict
    seed: int
    options: dict = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- config resolution


def _config_fields() -> dict[str, dataclasses.Field]:
    out = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name not in DERIVED}
    out.update({f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"})
    return out


def _default(f: dataclasses.Field):
    return f.default if f.default is not dataclasses.MISSING else None


def _parse_value(name: str, raw: str):
    f = _config_fields()[name]
    ftype = str(f.type)
    if raw.lower() in ("none", "null"):
        return None
    if "bool" in ftype:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise CLIError(f"--{name.replace('_', '-')}: expected a boolean, got {raw!r}")
    if "int" in ftype:
        return int(raw)
    if "float" in ftype:
        return float(raw)
    return raw


def resolve_config(args, s: graph.SnapshotSequence, t_star: int) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    flat = {name: _default(f) for name, f in _config_fields().items()}
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(flat) - DERIVED
        if unknown:
            raise CLIError(f"{args.config}: unknown keys {sorted(unknown)}")
        flat.update({k: v for k, v in loaded.items() if k not in DERIVED})
    for name in _config_fields():
        raw = getattr(args, name, None)
        if raw is not None:
            flat[name] = _parse_value(name, raw)
    flat["num_nodes"] = s.num_nodes
    flat["T"] = t_star - 1
    TrainConfig.from_flat(flat)  # validate now, before anything runs
    return flat


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of config values")
    for name in _config_fields():
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="V")


def _run_dir(args, command: str, flat: dict) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    tag = hashlib.sha256(json.dumps([command, flat, vars(args)], sort_keys=True, default=str)
                         .encode()).hexdigest()[:10]
    return root / f"{command}-{tag}"


def _t_star(args, s) -> int:
    t = args.t_star if args.t_star is not None else s.num_steps
    if not 3 <= t <= s.num_steps:
        raise CLIError(f"--t-star must be in [3, {s.num_steps}] (needs two training snapshots)")
    return t


# ---------------------------------------------------------------- executors


def _exec_synth(m: RunManifest) -> dict:
    o = m.options
    s = graph.synth_dynamic_sbm(o["nodes"], o["blocks"], o["steps"], o["p_in"], o["p_out"],
                                o["persist"], m.seed)
    graph.write_snapshots(s, m.outputs["snapshots"])
    return {"snapshots": m.outputs["snapshots"], "steps": s.num_steps}


def _exec_ingest(m: RunManifest) -> dict:
    recs = graph.read_interactions(m.inputs["interactions"])
    s, labels = graph.window_interactions(recs, window=m.options.get("window"),
                                          steps=m.options.get("windows"))
    graph.write_snapshots(s, m.outputs["snapshots"])
    labels_path = m.outputs.get("labels")
    if labels_path:
        Path(labels_path).write_text("".join(f"{i} {lab}\n" for i, lab in enumerate(labels)))
    return {"snapshots": m.outputs["snapshots"], "nodes": s.num_nodes, "steps": s.num_steps}


def _train_seq(m: RunManifest) -> graph.SnapshotSequence:
    s = graph.read_snapshots(m.inputs["snapshots"])
    return s.prefix(m.options["t_star"] - 1)


def _exec_pretrain(m: RunManifest) -> dict:
    cfg = TrainConfig.from_flat(m.config)
    ck = pretrain(_train_seq(m), cfg, run_dir=m.outputs["run_dir"])
    return {"best_epoch": ck.epoch, "checkpoint": str(Path(m.outputs["run_dir"]) / "checkpoints" / "pretrain_best.ckpt")}


def _exec_finetune(m: RunManifest) -> dict:
    cfg = TrainConfig.from_flat(m.config)
    start = None
    if m.inputs.get("start"):
        start = Checkpoint.load(m.inputs["start"])
        if start.config.model != cfg.model:
            raise CLIError("start checkpoint model config differs from the requested one")
    ck = finetune(_train_seq(m), cfg, start=start, run_dir=m.outputs["run_dir"])
    return {"best_epoch": ck.epoch, "checkpoint": str(Path(m.outputs["run_dir"]) / "checkpoints" / "finetune_best.ckpt")}


def _exec_eval(m: RunManifest) -> dict:
    s = graph.read_snapshots(m.inputs["snapshots"])
    ck = Checkpoint.load(m.inputs["checkpoint"])
    o = m.options
    run_dir = Path(m.outputs["run_dir"])
    fn = evaluate_new_links if o.get("new_links") else evaluate
    report = fn(ck, s, o["t_star"], window=o["window"], seed=m.seed,
                chunk_size=ck.config.eval_chunk_size, split_dir=run_dir / "splits")
    (run_dir / "report.json").write_text(report.to_json() + "\n")
    return report.to_dict()


def run_cell(s: graph.SnapshotSequence, cfg: TrainConfig, t_star: int, noise: float = 0.0,
             use_pretrain: bool = True, run_dir=None, eval_window: int = 1) -> EvalReport:
    """Pre-train (optionally), fine-tune and evaluate one configuration."""
    data = noisy_history(s, t_star, noise, [cfg.seed, 31]) if noise else s
    train = data.prefix(t_star - 1)
    rd = None if run_dir is None else Path(run_dir)
    ck = pretrain(train, cfg, run_dir=rd) if use_pretrain else None
    ck = finetune(train, cfg, start=ck, run_dir=rd)
    return evaluate(ck, data, t_star, window=eval_window, seed=cfg.seed,
                    chunk_size=cfg.eval_chunk_size,
                    split_dir=None if rd is None else rd / "splits")


def ablation_grid(axes: dict[str, list]) -> list[dict]:
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def cell_id(cell: dict) -> str:
    return "_".join(f"{k}={v}" for k, v in cell.items()) or "default"


def _exec_ablate(m: RunManifest) -> dict:
    s = graph.read_snapshots(m.inputs["snapshots"])
    t_star = m.options["t_star"]
    run_dir = Path(m.outputs["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in m.options["cells"]:
        flat = dict(m.config)
        flat.update({k: v for k, v in cell.items() if k != "noise"})
        cfg = TrainConfig.from_flat(flat)
        cdir = run_dir / "cells" / cell_id(cell)
        rep = run_cell(s, cfg, t_star, noise=cell.get("noise", 0.0),
                       use_pretrain=m.options["pretrain"], run_dir=cdir,
                       eval_window=m.options["window"])
        (cdir / "report.json").write_text(rep.to_json() + "\n")
        rows.append({**cell, "micro_auc": rep.micro_auc, "macro_auc": rep.macro_auc})
        log.info("cell %s micro_auc=%.4f", cell_id(cell), rep.micro_auc)
    with open(run_dir / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["micro_auc", "macro_auc"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return {"cells": len(rows), "summary": str(run_dir / "summary.csv")}


EXECUTORS = {"synth": _exec_synth, "ingest": _exec_ingest, "pretrain": _exec_pretrain,
             "finetune": _exec_finetune, "eval": _exec_eval, "ablate": _exec_ablate}


def execute(m: RunManifest) -> dict:
    run_dir = m.outputs.get("run_dir")
    if run_dir:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        m.save(Path(run_dir) / "manifest.json")
    return EXECUTORS[m.command](m)


# ---------------------------------------------------------------- argument -> manifest


def _parse_axis(name: str, raw: str) -> list:
    vals = []
    for tok in raw.split(","):
        tok = tok.strip()
        if name == "noise":
            vals.append(float(tok))
        elif name == "tower_mode":
            vals.append(tok)
        else:
            vals.append(_parse_value(name, tok))
    return vals


def _abs(path) -> str:
    return str(Path(path).resolve())


def build_manifest(args) -> RunManifest:
    cmd = args.command
    if cmd == "synth":
        opts = {k: getattr(args, k) for k in ("nodes", "blocks", "steps", "p_in", "p_out", "persist")}
        return RunManifest(cmd, None, {}, {}, {"snapshots": _abs(args.out)}, args.seed, opts)
    if cmd == "ingest":
        if (args.window is None) == (args.windows is None):
            raise CLIError("give exactly one of --window or --windows")
        outs = {"snapshots": _abs(args.out)}
        if args.labels:
            outs["labels"] = _abs(args.labels)
        return RunManifest(cmd, None, {}, {"interactions": _abs(args.input)}, outs, 0,
                           {"window": args.window, "windows": args.windows})

    s = graph.read_snapshots(args.data)
    if cmd == "eval":
        ck = Checkpoint.load(args.checkpoint)
        t_star = args.t_star if args.t_star is not None else s.num_steps
        flat = ck.config.to_flat()
        opts = {"t_star": t_star, "window": args.window, "new_links": args.new_links}
        rd = _run_dir(args, cmd, flat)
        return RunManifest(cmd, None, flat, {"snapshots": _abs(args.data), "checkpoint": _abs(args.checkpoint)},
                           {"run_dir": _abs(rd)}, args.seed, opts)

    t_star = _t_star(args, s)
    flat = resolve_config(args, s, t_star)
    rd = _run_dir(args, cmd, flat)
    inputs = {"snapshots": _abs(args.data)}
    opts: dict = {"t_star": t_star}
    if cmd == "finetune" and args.start:
        inputs["start"] = _abs(args.start)
    if cmd == "ablate":
        axes = {}
        for name in ABLATION_AXES:
            raw = getattr(args, "axis_" + name)
            if raw is not None:
                axes[name] = _parse_axis(name, raw)
            elif args.full_grid:
                axes[name] = list(ABLATION_AXES[name])
        opts.update(cells=ablation_grid(axes) if axes else [{}], pretrain=not args.no_pretrain,
                    window=args.window)
    return RunManifest(cmd, args.config and _abs(args.config), flat, inputs, {"run_dir": _abs(rd)}, flat["seed"], opts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgt", description="Dynamic-graph transformer pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("synth", help="write a synthetic dynamic block-model sequence")
    q.add_argument("--nodes", type=int, default=60)
    q.add_argument("--blocks", type=int, default=3)
    q.add_argument("--steps", type=int, default=6)
    q.add_argument("--p-in", type=float, default=0.3)
    q.add_argument("--p-out", type=float, default=0.02)
    q.add_argument("--persist", type=float, default=0.8)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)

    q = sub.add_parser("ingest", help="window an `epoch u v` interaction log into snapshots")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--labels", help="write `id label` node mapping here")
    g = q.add_mutually_exclusive_group()
    g.add_argument("--window", type=float, help="fixed window length in epoch units")
    g.add_argument("--windows", type=int, help="number of equal-count windows")

    for name, help_ in (("pretrain", "self-supervised pre-training"),
                        ("finetune", "next-snapshot link-prediction training"),
                        ("ablate", "sweep ablation axes, pre-train + fine-tune + eval per cell")):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--data", required=True, help="snapshot file")
        q.add_argument("--t-star", type=int, help="prediction step; training sees 1..t*-1 (default: last)")
        q.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/<command>-<hash>)")
        _add_config_flags(q)
        if name == "finetune":
            q.add_argument("--start", help="checkpoint to start from (default: random init)")
        if name == "ablate":
            for axis, vals in ABLATION_AXES.items():
                q.add_argument("--axis-" + axis.replace("_", "-"), dest="axis_" + axis, metavar="A,B",
                               help=f"comma list from {vals}")
            q.add_argument("--full-grid", action="store_true", help="sweep every declared axis value")
            q.add_argument("--no-pretrain", action="store_true")
            q.add_argument("--window", type=int, default=1)

    q = sub.add_parser("eval", help="link-prediction evaluation of a checkpoint")
    q.add_argument("--data", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--t-star", type=int)
    q.add_argument("--window", type=int, default=1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--new-links", action="store_true")
    q.add_argument("--run-dir")

    q = sub.add_parser("rerun", help="replay a manifest.json")
    q.add_argument("manifest")
    q.add_argument("--run-dir", help="write outputs here instead of the recorded location")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            m = RunManifest.load(args.manifest)
            if args.run_dir:
                key = "run_dir" if "run_dir" in m.outputs else "snapshots"
                m.outputs[key] = _abs(args.run_dir)
        else:
            m = build_manifest(args)
        result = execute(m)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured message
        json.dump({"status": "error", "command": args.command, "error": type(exc).__name__,
                   "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1 if isinstance(exc, (CLIError, ValueError, OSError, KeyError)) else 2
    json.dump({"status": "ok", "command": m.command, "outputs": m.outputs, "result": result},
              sys.stdout, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0

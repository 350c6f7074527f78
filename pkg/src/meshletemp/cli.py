"""Command-line entry point: ``meshletemp <command> [options] [key=value ...]``.

Every command writes into ``<output_dir>/<command>-<timestamp>/`` together with a
``run_manifest.json`` holding the resolved config and sha256 hashes of the inputs
and outputs. ``MLT_OUT`` in the environment takes precedence over ``--output-dir``.

Exit codes: 0 success, 2 config error, 3 missing or unreadable input, 4 numeric failure.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .body_model import build_default_body
from .config import ConfigError, TrainConfig, apply_overrides, load_config, preset
from .synth import Dataset, DatasetError, generate_dataset
from .topology import build_topology
from .trainer import (
    Checkpoint,
    NumericalError,
    PresetMismatchError,
    evaluate,
    finetune,
    load_model,
    metrics_csv,
    predict,
    train,
)

log = logging.getLogger("meshletemp")

DEFAULT_SWEEP = (0.1, 0.2, 0.3, 0.33, 0.4)
EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str, path: str | None = None):
        super().__init__(message)
        self.code = code
        self.path = path


class MissingInput(CliError):
    def __init__(self, path, what: str = "input"):
        super().__init__(EXIT_INPUT, f"missing {what}: {path}", str(path))


# ---------------------------------------------------------------- OBJ files


def export_obj(vertices, faces, path: str | Path) -> Path:
    """ASCII OBJ: ``v x y z`` lines (6 decimals) then 1-based ``f i j k`` lines."""
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise ValueError(f"face index out of range for {len(verts)} vertices")
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in verts]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------- run plumbing


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root: Path, exclude: tuple[str, ...] = ()) -> dict[str, str]:
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    return {
        p.relative_to(root).as_posix(): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.relative_to(root).as_posix() not in exclude
    }


def make_run_dir(output_dir: str | Path | None, command: str) -> Path:
    base = Path(os.environ.get("MLT_OUT") or output_dir or "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = base / f"{command}-{stamp}"
    k = 1
    while run.exists():
        run = base / f"{command}-{stamp}-{k}"
        k += 1
    run.mkdir(parents=True)
    return run


class Run:
    """Collects inputs and extra fields, then writes the run manifest."""

    def __init__(self, command: str, output_dir, argv: list[str]):
        self.command = command
        self.argv = argv
        self.dir = make_run_dir(output_dir, command)
        self.inputs: dict[str, dict[str, str]] = {}
        self.config: TrainConfig | None = None
        self.extra: dict = {}

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = _hash_tree(path)

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config.to_dict() if self.config is not None else None,
            "inputs": self.inputs,
            "outputs": _hash_tree(self.dir, exclude=("run_manifest.json",)),
            **self.extra,
        }
        path = self.dir / "run_manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def resolve_config(args) -> TrainConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(path, "config")
        cfg = load_config(path)
    else:
        cfg = preset(args.preset)
    return apply_overrides(cfg, list(args.overrides)) if args.overrides else cfg


def open_dataset(path) -> Dataset:
    if path is None:
        raise CliError(EXIT_CONFIG, "--data is required")
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise MissingInput(path / "manifest.json", "dataset")
    return Dataset(path)


def resolve_checkpoints(path) -> list[Path]:
    """A checkpoint file, or a run/checkpoints directory (all step files, in order)."""
    if path is None:
        raise CliError(EXIT_CONFIG, "--checkpoint is required")
    path = Path(path)
    if path.is_file():
        return [path]
    for d in (path / "checkpoints", path):
        if d.is_dir():
            found = sorted(d.glob("step_*.mltc"))
            if found:
                return found
    raise MissingInput(path, "checkpoint")


def load_checkpoint(path) -> tuple[Path, Checkpoint]:
    p = resolve_checkpoints(path)[-1]
    return p, Checkpoint.load(p)


def _default_split(ds: Dataset) -> str:
    for split in ("test", "val", "train"):
        if ds.ids(split):
            return split
    raise CliError(EXIT_INPUT, "dataset has no records")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, run: Run) -> None:
    cfg = run.config
    d = cfg.data
    manifest = generate_dataset(
        run.dir / "dataset", d.count, d.seed, tiers=d.tiers, resolution=cfg.model.image_size,
        body_preset=cfg.model.body_preset, coarse_count=cfg.model.coarse_count,
        val_fraction=d.val_fraction, test_fraction=d.test_fraction,
    )
    run.extra["dataset_hash"] = manifest.content_hash


def _write_metrics(run: Run, rows: list[dict]) -> None:
    (run.dir / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")


def _eval_rows(ckpt, ds: Dataset) -> list[dict]:
    return [evaluate(ckpt, ds, s) for s in ("train", "val", "test") if ds.ids(s)]


def cmd_train(args, run: Run) -> None:
    ds = open_dataset(args.data)
    run.add_input(Path(args.data) / "manifest.json")
    run.extra["dataset_hash"] = ds.manifest.content_hash
    ck = train(run.config, ds, out_dir=run.dir)
    run.extra["final_loss"] = float(ck.history[-1, -1]) if len(ck.history) else None
    _write_metrics(run, _eval_rows(ck, ds))


def cmd_finetune(args, run: Run) -> None:
    path, ck = load_checkpoint(args.checkpoint)
    run.add_input(path)
    ds = open_dataset(args.data)
    run.add_input(Path(args.data) / "manifest.json")
    run.extra["dataset_hash"] = ds.manifest.content_hash
    ft = finetune(ck, ds, list(args.overrides), out_dir=run.dir)
    run.config = ft.config
    run.extra["final_loss"] = float(ft.history[-1, -1]) if len(ft.history) else None
    _write_metrics(run, _eval_rows(ft, ds))


def cmd_eval(args, run: Run) -> None:
    path, ck = load_checkpoint(args.checkpoint)
    run.add_input(path)
    run.config = ck.config
    ds = open_dataset(args.data)
    run.add_input(Path(args.data) / "manifest.json")
    splits = [args.split] if args.split else [s for s in ("train", "val", "test") if ds.ids(s)]
    rows = [evaluate(ck, ds, s) for s in splits]
    _write_metrics(run, rows)
    sys.stdout.write(metrics_csv(rows))


def _load_image(args, ds: Dataset | None) -> tuple[str, np.ndarray]:
    if args.image:
        p = Path(args.image)
        if not p.exists():
            raise MissingInput(p, "image")
        img = np.load(p) if p.suffix == ".npy" else tensorio.load(p)["image"]
        return p.stem, np.asarray(img, dtype=np.float64).reshape(*np.shape(img)[:2], 1)
    if ds is None or not args.id:
        raise CliError(EXIT_CONFIG, "infer needs --image PATH or --data DIR --id ID")
    if args.id not in ds.records:
        raise MissingInput(args.id, "record id")
    return args.id, ds.records[args.id].image


def cmd_infer(args, run: Run) -> None:
    path, ck = load_checkpoint(args.checkpoint)
    run.add_input(path)
    run.config = ck.config
    ds = open_dataset(args.data) if args.data else None
    name, image = _load_image(args, ds)
    if args.image:
        run.add_input(Path(args.image))
    model = load_model(ck, ds)
    dt = next(model.parameters()).dtype
    batch = torch.from_numpy(image).permute(2, 0, 1)[None].to(dt)
    fine, joints, temp, coarse = predict(model, batch)
    with torch.no_grad():
        cam = model(batch).pred.camera[0].double().numpy()
    body = ds.body if ds is not None else build_default_body(ck.config.model.body_preset)
    topo = ds.topo if ds is not None else build_topology(body, ck.config.model.coarse_count)
    export_obj(fine[0], topo.fine_faces, run.dir / f"{name}_fine.obj")
    export_obj(coarse[0], topo.coarse_faces, run.dir / f"{name}_coarse.obj")
    export_obj(temp[0], topo.coarse_faces, run.dir / f"{name}_template.obj")
    s, tx, ty = cam
    result = {
        "id": name,
        "joints3d": joints[0].tolist(),
        "camera": cam.tolist(),
        "joints2d": (s * joints[0][:, :2] + [tx, ty]).tolist(),
    }
    (run.dir / f"{name}_prediction.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")


def cmd_export_obj(args, run: Run) -> None:
    cfg = run.config
    if args.data:
        ds = open_dataset(args.data)
        run.add_input(Path(args.data) / "manifest.json")
        ids = args.ids.split(",") if args.ids else ds.ids("all")
        for rid in ids:
            if rid not in ds.records:
                raise MissingInput(rid, "record id")
            rec = ds.records[rid]
            export_obj(rec.fine_vertices, ds.topo.fine_faces, run.dir / f"{rid}_fine.obj")
            export_obj(rec.coarse_vertices, ds.topo.coarse_faces, run.dir / f"{rid}_coarse.obj")
    else:
        body = build_default_body(cfg.model.body_preset)
        topo = build_topology(body, cfg.model.coarse_count)
        export_obj(body.template_vertices, body.faces, run.dir / "rest_fine.obj")
        export_obj(topo.dense_downsample() @ body.template_vertices, topo.coarse_faces, run.dir / "rest_coarse.obj")


def cmd_snapshot_template(args, run: Run) -> None:
    paths = resolve_checkpoints(args.checkpoint)
    ds = open_dataset(args.data)
    run.add_input(Path(args.data) / "manifest.json")
    ids = args.ids.split(",") if args.ids else ds.ids("train")[:2]
    missing = [i for i in ids if i not in ds.records]
    if missing:
        raise MissingInput(",".join(missing), "record id")
    for path in paths:
        run.add_input(path)
        ck = Checkpoint.load(path)
        run.config = ck.config
        model = load_model(ck, ds)
        images, _ = ds.tensors(ids, next(model.parameters()).dtype)
        _, _, temp, coarse = predict(model, images)
        for rid, t, c in zip(ids, temp, coarse):
            export_obj(t, ds.topo.coarse_faces, run.dir / f"template_step{ck.step:07d}_{rid}.obj")
            export_obj(c, ds.topo.coarse_faces, run.dir / f"prediction_step{ck.step:07d}_{rid}.obj")


def cmd_plot(args, run: Run) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(args.log) if args.log else None
    if path is not None and path.is_dir():
        path = path / "train_log.csv"
    if path is None or not path.exists():
        raise MissingInput(path, "training log")
    run.add_input(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(EXIT_INPUT, f"empty training log: {path}", str(path))
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for col in ("total", "l_v", "l_j", "l_j_reg", "l_v_temp", "l_j_proj"):
        ax.plot(steps, [float(r[col]) for r in rows], label=col, lw=1.6 if col == "total" else 1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(run.dir / "loss_curves.png", dpi=120, metadata={"Software": None})
    plt.close(fig)


def cmd_sweep(args, run: Run) -> None:
    ds = open_dataset(args.data)
    run.add_input(Path(args.data) / "manifest.json")
    values = [float(v) for v in args.values.split(",")] if args.values else list(DEFAULT_SWEEP)
    split = args.split or _default_split(ds)
    rows = []
    for v in values:
        cfg = apply_overrides(run.config, {"loss.alpha_temp": v})
        ck = train(cfg, ds, out_dir=run.dir / f"alpha_temp_{v:g}")
        m = evaluate(ck, ds, split)
        rows.append({"alpha_temp": v, **m})
        log.info("alpha_temp=%g pa_mpjpe=%.5f", v, m["pa_mpjpe"])
    with open(run.dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha_temp", "split", "pa_mpjpe", "mpjpe", "mpve"])
        for r in rows:
            w.writerow([repr(r["alpha_temp"]), r["split"], repr(r["pa_mpjpe"]), repr(r["mpjpe"]), repr(r["mpve"])])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "export-obj": cmd_export_obj,
    "snapshot-template": cmd_snapshot_template,
    "plot": cmd_plot,
    "sweep-alpha-temp": cmd_sweep,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meshletemp", description="Learnable-template mesh recovery at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", default="desk", help="base preset when no --config is given")
        p.add_argument("--output-dir", default=None)
        p.add_argument("overrides", nargs="*", help="dotted key=value config overrides")
        if name in ("train", "eval", "finetune", "infer", "export-obj", "snapshot-template", "sweep-alpha-temp"):
            p.add_argument("--data", help="dataset directory")
        if name in ("eval", "finetune", "infer", "snapshot-template"):
            p.add_argument("--checkpoint", help="checkpoint file or run directory")
        if name in ("eval", "sweep-alpha-temp"):
            p.add_argument("--split")
        if name in ("export-obj", "snapshot-template"):
            p.add_argument("--ids", help="comma-separated record ids")
        if name == "infer":
            p.add_argument("--image", help=".npy image or .mlt record")
            p.add_argument("--id", help="record id inside --data")
        if name == "plot":
            p.add_argument("--log", help="train_log.csv or a run directory containing it")
        if name == "sweep-alpha-temp":
            p.add_argument("--values", help="comma-separated alpha_temp grid")
    return parser


def _fail(code: int, kind: str, message: str, path: str | None = None) -> int:
    err = {"error": kind, "exit_code": code, "message": message}
    if path is not None:
        err["path"] = path
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        # for finetune this only type-checks the overrides; they are applied to the checkpoint's config
        cfg = resolve_config(args)
        run = Run(args.command, args.output_dir, argv)
        run.config = cfg
        COMMANDS[args.command](args, run)
        run.finish()
        print(run.dir)
        return 0
    except CliError as exc:
        return _fail(exc.code, type(exc).__name__, str(exc), exc.path)
    except (ConfigError, PresetMismatchError) as exc:
        return _fail(EXIT_CONFIG, type(exc).__name__, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_INPUT, "MissingInput", str(exc), exc.filename or str(exc))
    except (DatasetError, tensorio.FormatError, KeyError) as exc:
        return _fail(EXIT_INPUT, type(exc).__name__, str(exc))
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "NumericalError", str(exc))


if __name__ == "__main__":
    raise SystemExit(main())

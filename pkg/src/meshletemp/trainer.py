"""Training, evaluation, fine-tuning and checkpoint I/O."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .config import TrainConfig, apply_overrides, config_from_dict
from .losses import GroundTruth, LossBreakdown, total_loss
from .metrics import mpjpe, mpve, pa_mpjpe
from .model import MeshLeTemp, build_model
from .synth import Dataset
from .topology import Topology

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
HISTORY_COLUMNS = ("step", "lr", "l_v", "l_j", "l_j_reg", "l_v_temp", "l_j_proj", "total")
METRIC_COLUMNS = ("split", "mpve", "mpjpe", "pa_mpjpe")


class PresetMismatchError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


def lr_at(s: int, S: int, eta: float) -> float:
    """Cosine schedule ``eta * cos(7 pi s / (16 S))``; stays positive at s = S."""
    if S < 1:
        raise ValueError("total steps S must be >= 1")
    if not 0 <= s <= S:
        raise ValueError(f"step {s} outside [0, {S}]")
    return eta * math.cos(7.0 * math.pi * s / (16.0 * S))


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    weights: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    history: np.ndarray = field(default_factory=lambda: np.zeros((0, len(HISTORY_COLUMNS))))
    rng: dict = field(default_factory=dict)
    body_preset: str = "desk"
    assets_digest: str = ""
    format_version: int = FORMAT_VERSION

    def meta(self) -> dict:
        return {
            "format_version": self.format_version,
            "step": self.step,
            "config": self.config.to_dict(),
            "rng": self.rng,
            "body_preset": self.body_preset,
            "assets_digest": self.assets_digest,
            "history_columns": list(HISTORY_COLUMNS),
        }

    def to_bytes(self) -> bytes:
        t: dict[str, np.ndarray] = {}
        meta = json.dumps(self.meta(), sort_keys=True).encode("utf-8")
        t["meta"] = np.frombuffer(meta, dtype=np.uint8)
        t.update({f"model/{k}": v for k, v in self.weights.items()})
        t.update({f"optim/{k}": v for k, v in self.optimizer.items()})
        t["history"] = np.asarray(self.history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
        return tensorio.CKPT_MAGIC + struct.pack("<I", self.format_version) + tensorio.dumps(t)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != tensorio.CKPT_MAGIC:
            raise tensorio.FormatError("not an MLTC checkpoint")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != FORMAT_VERSION:
            raise tensorio.FormatError(f"unsupported checkpoint version {version}")
        t = tensorio.loads(buf[8:])
        meta = json.loads(t.pop("meta").tobytes().decode("utf-8"))
        return cls(
            config=config_from_dict(meta["config"]),
            step=meta["step"],
            weights={k[6:]: v for k, v in t.items() if k.startswith("model/")},
            optimizer={k[6:]: v for k, v in t.items() if k.startswith("optim/")},
            history=t["history"],
            rng=meta["rng"],
            body_preset=meta["body_preset"],
            assets_digest=meta["assets_digest"],
            format_version=version,
        )

    def save(self, path: str | Path) -> bytes:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return data

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _dtype(cfg: TrainConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def _assets_digest(dataset_or_model) -> str:
    return dataset_or_model.body.digest()[:16] + dataset_or_model.topo.digest()[:16]


def check_compatible(cfg: TrainConfig, dataset: Dataset) -> None:
    m = dataset.manifest
    ours = (cfg.model.body_preset, cfg.model.coarse_count, cfg.model.image_size)
    theirs = (m.body_preset, m.coarse_count, m.resolution)
    if ours != theirs:
        raise PresetMismatchError(
            f"model expects (body, coarse, resolution)={ours} but dataset has {theirs}"
        )


def model_state(model: MeshLeTemp) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().double().numpy().copy() for k, v in model.state_dict().items()}


def load_model(ckpt: Checkpoint, dataset: Dataset | None = None) -> MeshLeTemp:
    cfg = ckpt.config
    if dataset is not None:
        check_compatible(cfg, dataset)
        model = build_model(cfg, dataset.body, dataset.topo)
    else:
        model = build_model(cfg)
    dt = _dtype(cfg)
    model.load_state_dict({k: torch.from_numpy(v).to(dt) for k, v in ckpt.weights.items()})
    return model


def _optimizer_state(opt: torch.optim.Adam) -> dict[str, np.ndarray]:
    out = {}
    for i, p in enumerate(opt.param_groups[0]["params"]):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{i}/step"] = np.array([float(st["step"])])
        out[f"{i}/exp_avg"] = st["exp_avg"].detach().double().numpy().copy()
        out[f"{i}/exp_avg_sq"] = st["exp_avg_sq"].detach().double().numpy().copy()
    return out


def _load_optimizer_state(opt: torch.optim.Adam, state: dict[str, np.ndarray]) -> None:
    params = opt.param_groups[0]["params"]
    for key, value in state.items():
        i, name = key.split("/")
        p = params[int(i)]
        st = opt.state.setdefault(p, {})
        if name == "step":
            st["step"] = torch.tensor(float(value[0]), dtype=torch.float32)
        else:
            st[name] = torch.from_numpy(value.copy()).to(p.dtype)


def split_loss(model: MeshLeTemp, images: torch.Tensor, gt: GroundTruth, G: torch.Tensor,
               cfg: TrainConfig, batch_size: int = 16) -> dict[str, float]:
    """Weighted training loss averaged over a whole split with masking disabled."""
    sums: dict[str, float] = {}
    n = images.shape[0]
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = torch.arange(start, min(n, start + batch_size))
            out = model(images[idx], 0.0, 0)
            lb = total_loss(out.pred, out.template, gt.index(idx), G, cfg.loss)
            for k, v in lb.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
    return {k: v / n for k, v in sums.items()}


def train(cfg: TrainConfig, dataset: Dataset, out_dir: str | Path | None = None,
          init: Checkpoint | None = None, checkpoint_every: int = 1) -> Checkpoint:
    """Adam + cosine schedule over ``epochs * ceil(N / batch)`` steps.

    Batch order and masking seeds are derived from ``cfg.seed`` and the step
    index, so a run is reproducible bit-for-bit in single-threaded float64 mode.
    With ``out_dir`` set, checkpoints are written every ``checkpoint_every``
    epochs (and at the end) together with ``train_log.csv``.
    """
    cfg.validate()
    check_compatible(cfg, dataset)
    torch.set_num_threads(cfg.threads)
    dt = _dtype(cfg)
    model = build_model(cfg, dataset.body, dataset.topo)
    if init is not None:
        model.load_state_dict({k: torch.from_numpy(v).to(dt) for k, v in init.weights.items()})
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8)

    ids = dataset.ids("train")
    if not ids:
        raise ValueError("training split is empty")
    images, gt = dataset.tensors(ids, dt)
    G = torch.from_numpy(dataset.topo.joint_regressor.copy()).to(dt)
    n = len(ids)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    history: list[tuple[float, ...]] = []
    digest = _assets_digest(dataset)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            config=cfg, step=step, weights=model_state(model), optimizer=_optimizer_state(opt),
            history=np.asarray(history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS)),
            rng={"seed": cfg.seed, "next_step": step}, body_preset=dataset.body.preset,
            assets_digest=digest,
        )

    def write(ck: Checkpoint) -> None:
        if out is not None:
            ck.save(out / "checkpoints" / f"step_{ck.step:07d}.mltc")

    step = 0
    write(snapshot(0))
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(n)
        for b in range(per_epoch):
            idx = torch.from_numpy(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            mvm_rng = np.random.default_rng([cfg.seed, 3, step])
            ratios = mvm_rng.uniform(0.0, cfg.mvm.max_ratio, size=len(idx))
            seeds = mvm_rng.integers(0, 2**62, size=len(idx))
            lr = lr_at(step, total_steps, cfg.base_lr)
            for group in opt.param_groups:
                group["lr"] = lr
            fwd = model(images[idx], ratios.tolist(), seeds.tolist())
            lb: LossBreakdown = total_loss(fwd.pred, fwd.template, gt.index(idx), G, cfg.loss)
            if not torch.isfinite(lb.total):
                batch_ids = [ids[i] for i in idx.tolist()]
                if out is not None:
                    (out / "nonfinite_batch.json").write_text(
                        json.dumps({"step": step, "batch_ids": batch_ids, "losses": lb.as_floats()},
                                   sort_keys=True), encoding="utf-8")
                raise NumericalError(f"non-finite loss at step {step}; batch ids {batch_ids}")
            opt.zero_grad(set_to_none=False)
            lb.total.backward()
            opt.step()
            row = lb.as_floats()
            history.append((step, lr, *(row[c] for c in HISTORY_COLUMNS[2:])))
            step += 1
        if (epoch + 1) % checkpoint_every == 0 and epoch + 1 < cfg.epochs:
            write(snapshot(step))
        log.debug("epoch %d step %d total %.6g", epoch, step, history[-1][-1])
    final = snapshot(step)
    if step > 0:
        write(final)
    if out is not None:
        write_history_csv(out / "train_log.csv", final.history)
    return final


def finetune(ckpt: Checkpoint, dataset: Dataset, overrides: dict | list | None = None,
             out_dir: str | Path | None = None, checkpoint_every: int = 1) -> Checkpoint:
    """Continue from ``ckpt`` weights with a fresh optimizer and a fresh schedule."""
    cfg = apply_overrides(ckpt.config, overrides or {})
    if cfg.model != ckpt.config.model or cfg.mte != ckpt.config.mte:
        raise PresetMismatchError("finetune cannot change the model architecture")
    return train(cfg, dataset, out_dir=out_dir, init=ckpt, checkpoint_every=checkpoint_every)


def write_history_csv(path: str | Path, history: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def evaluate_predictions(pred_fine, pred_joints, gt_fine, gt_joints, topo: Topology) -> dict[str, float]:
    """Mean MPVE / MPJPE / PA-MPJPE over a batch of numpy predictions."""
    rows = [
        (mpve(pf, gf, topo), mpjpe(pj, gj), pa_mpjpe(pj, gj))
        for pf, pj, gf, gj in zip(pred_fine, pred_joints, gt_fine, gt_joints)
    ]
    m = np.asarray(rows).mean(0)
    return {"mpve": float(m[0]), "mpjpe": float(m[1]), "pa_mpjpe": float(m[2])}


def predict(model: MeshLeTemp, images: torch.Tensor, batch_size: int = 16):
    """Run with masking disabled; returns numpy (fine, joints, template_coarse, coarse)."""
    model.eval()
    fine, joints, temp, coarse = [], [], [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out = model(images[start : start + batch_size], 0.0, 0)
            fine.append(out.pred.fine_vertices.double().numpy())
            joints.append(out.pred.joints3d.double().numpy())
            temp.append(out.template.template_coarse.double().numpy())
            coarse.append(out.pred.coarse_vertices.double().numpy())
    return tuple(np.concatenate(x) for x in (fine, joints, temp, coarse))


def evaluate(ckpt: Checkpoint | MeshLeTemp, dataset: Dataset, split: str = "test") -> dict:
    """Metric row (split, mpve, mpjpe, pa_mpjpe) for ``split`` of ``dataset``."""
    model = load_model(ckpt, dataset) if isinstance(ckpt, Checkpoint) else ckpt
    ids = dataset.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    dt = next(model.parameters()).dtype
    images, gt = dataset.tensors(ids, dt)
    fine, joints, _, _ = predict(model, images)
    metrics = evaluate_predictions(fine, joints, gt.fine_vertices.double().numpy(),
                                   gt.joints3d.double().numpy(), dataset.topo)
    return {"split": split, **metrics}


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["split"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()

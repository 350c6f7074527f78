"""Procedural dataset: sampled poses, body-model ground truth, splatted silhouettes."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .body_model import NUM_JOINTS, NUM_SHAPE, BodyParams, RestBody, build_default_body, forward
from .losses import GroundTruth
from .topology import Topology, build_topology, downsample, regress_joints

DATASET_VERSION = 1
TIER_BOUNDS = {"easy": 0.3, "medium": 0.8, "hard": 1.5}
IMAGE_EXTENT = 1.5        # projected coordinates in [-1.5, 1.5] fill the image
SPLAT_RADIUS = 2.0        # pixels at 112 px, scaled with resolution
OCCUPANCY_RANGE = (0.02, 0.9)
RECORD_FIELDS = ("image", "joints3d", "coarse_vertices", "fine_vertices", "joints2d",
                 "gen_theta", "gen_camera", "seed")  # fmt: skip


class DatasetError(RuntimeError):
    pass


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray            # (H, W, 1) in [0, 1]
    joints3d: np.ndarray
    coarse_vertices: np.ndarray
    fine_vertices: np.ndarray
    joints2d: np.ndarray
    gen_theta: np.ndarray        # (82,)
    gen_camera: np.ndarray       # (s, tx, ty)
    seed: int

    def to_bytes(self) -> bytes:
        t = {k: getattr(self, k) for k in RECORD_FIELDS if k != "seed"}
        t["seed"] = np.array([self.seed], dtype=np.int64)
        return tensorio.dumps(t)

    @classmethod
    def from_bytes(cls, rid: str, buf: bytes) -> "SampleRecord":
        t = tensorio.loads(buf)
        if tuple(t) != RECORD_FIELDS:
            raise tensorio.FormatError(f"record {rid}: unexpected fields {list(t)}")
        seed = int(t.pop("seed")[0])
        return cls(id=rid, seed=seed, **t)


@dataclass
class DatasetManifest:
    version: int
    body_preset: str
    coarse_count: int
    resolution: int
    count: int
    tiers: list[str]
    split: dict[str, list[str]]
    global_seed: int
    content_hash: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def sample_pose(rng: np.random.Generator, difficulty: str = "medium") -> BodyParams:
    """Axis-angle per joint with magnitude uniform in [0, bound]; hard adds free global yaw."""
    if difficulty not in TIER_BOUNDS:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    bound = TIER_BOUNDS[difficulty]
    axes = rng.normal(size=(NUM_JOINTS, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    pose = axes * rng.uniform(0.0, bound, size=(NUM_JOINTS, 1))
    if difficulty == "hard":
        pose[0] = [rng.uniform(-0.3, 0.3), rng.uniform(-math.pi, math.pi), rng.uniform(-0.3, 0.3)]
    shape = rng.uniform(-2.0, 2.0, size=NUM_SHAPE)
    return BodyParams(pose.reshape(-1), shape)


def sample_camera(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(0.7, 1.3), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)])


def project(points: np.ndarray, camera) -> np.ndarray:
    s, tx, ty = camera
    return s * points[..., :2] + np.array([tx, ty])


def render(fine_vertices: np.ndarray, camera, resolution=(112, 112)) -> np.ndarray:
    """Depth-weighted disc splat of the weak-perspective projected vertices."""
    h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
    image = np.zeros((h, w))
    verts = np.asarray(fine_vertices, dtype=np.float64).reshape(-1, 3)
    if len(verts) == 0:
        return image[..., None]
    uv = project(verts, camera)
    col = (uv[:, 0] + IMAGE_EXTENT) / (2 * IMAGE_EXTENT) * w - 0.5
    row = (IMAGE_EXTENT - uv[:, 1]) / (2 * IMAGE_EXTENT) * h - 0.5
    depth = verts[:, 2] - verts[:, 2].mean()
    value = np.clip(0.7 + 1.5 * depth, 0.3, 1.0)

    radius = SPLAT_RADIUS * w / 112
    reach = int(math.ceil(radius))
    off = np.arange(-reach, reach + 1)
    dr, dc = (a.ravel() for a in np.meshgrid(off, off, indexing="ij"))
    rr = np.rint(row)[:, None] + dr[None, :]
    cc = np.rint(col)[:, None] + dc[None, :]
    inside = ((rr - row[:, None]) ** 2 + (cc - col[:, None]) ** 2 <= radius**2)
    inside &= (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    vals = np.broadcast_to(value[:, None], rr.shape)
    np.maximum.at(image, (rr[inside].astype(np.int64), cc[inside].astype(np.int64)), vals[inside])
    return image[..., None]


def occupancy(image: np.ndarray) -> float:
    return float((image > 0).mean())


def record_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def ground_truth(theta: np.ndarray, camera: np.ndarray, body: RestBody, topo: Topology) -> dict[str, np.ndarray]:
    fine = forward(body, theta)[0].numpy()
    coarse = downsample(fine, topo)
    joints = regress_joints(coarse, topo)
    return {"fine_vertices": fine, "coarse_vertices": coarse, "joints3d": joints,
            "joints2d": project(joints, camera)}


def make_record(index: int, global_seed: int, tier: str, body: RestBody, topo: Topology,
                resolution: int) -> SampleRecord:
    seed = record_seed(global_seed, index)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        theta = sample_pose(rng, tier).to_vector()
        camera = sample_camera(rng)
        gt = ground_truth(theta, camera, body, topo)
        image = render(gt["fine_vertices"], camera, resolution)
        if OCCUPANCY_RANGE[0] <= occupancy(image) <= OCCUPANCY_RANGE[1]:
            return SampleRecord(f"{index:06d}", image, gen_theta=theta, gen_camera=camera, seed=seed, **gt)
    raise DatasetError(f"record {index}: no non-degenerate render after 100 draws")


def _splits(count: int, seed: int, val_fraction: float, test_fraction: float, ids: list[str]) -> dict[str, list[str]]:
    order = np.random.default_rng([seed, 1]).permutation(count)
    n_test = math.floor(count * test_fraction)
    n_val = math.floor(count * val_fraction)
    pick = lambda idx: sorted(ids[i] for i in idx)  # noqa: E731
    return {
        "test": pick(order[:n_test]),
        "val": pick(order[n_test : n_test + n_val]),
        "train": pick(order[n_test + n_val :]),
    }


def generate_dataset(out_dir: str | Path, count: int, seed: int, tiers=("easy", "medium", "hard"),
                     resolution: int = 112, body_preset: str = "desk", coarse_count: int = 64,
                     val_fraction: float = 0.0, test_fraction: float = 0.0) -> DatasetManifest:
    """Write ``manifest.json`` and ``records/<id>.mlt`` under ``out_dir``."""
    if count < 1:
        raise ValueError("count must be > 0")
    out = Path(out_dir)
    try:
        (out / "records").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out}: {exc}") from exc
    body = build_default_body(body_preset)
    topo = build_topology(body, coarse_count)
    digest = hashlib.sha256()
    ids = []
    for i in range(count):
        rec = make_record(i, seed, tiers[i % len(tiers)], body, topo, resolution)
        buf = rec.to_bytes()
        (out / "records" / f"{rec.id}.mlt").write_bytes(buf)
        digest.update(rec.id.encode() + buf)
        ids.append(rec.id)
    manifest = DatasetManifest(
        version=DATASET_VERSION, body_preset=body_preset, coarse_count=coarse_count,
        resolution=resolution, count=count, tiers=list(tiers),
        split=_splits(count, seed, val_fraction, test_fraction, ids), global_seed=seed,
        content_hash=digest.hexdigest(),
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


class Dataset:
    """A loaded dataset directory; ground truth is re-derived and checked on load."""

    def __init__(self, root: str | Path, verify: bool = True, tol: float = 1e-9):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(str(path))
        self.manifest = DatasetManifest.from_json(path.read_text(encoding="utf-8"))
        self.body = build_default_body(self.manifest.body_preset)
        self.topo = build_topology(self.body, self.manifest.coarse_count)
        self.records: dict[str, SampleRecord] = {}
        digest = hashlib.sha256()
        all_ids = sorted(i for ids in self.manifest.split.values() for i in ids)
        for rid in all_ids:
            buf = (self.root / "records" / f"{rid}.mlt").read_bytes()
            digest.update(rid.encode() + buf)
            self.records[rid] = SampleRecord.from_bytes(rid, buf)
        if digest.hexdigest() != self.manifest.content_hash:
            raise DatasetError(f"content hash mismatch in {self.root}")
        if verify:
            for rec in self.records.values():
                self._verify(rec, tol)

    def _verify(self, rec: SampleRecord, tol: float) -> None:
        gt = ground_truth(rec.gen_theta, rec.gen_camera, self.body, self.topo)
        for key, value in gt.items():
            err = np.abs(getattr(rec, key) - value).max()
            if not err <= tol:
                raise DatasetError(f"record {rec.id}: {key} deviates from the body model by {err:.3g}")

    def ids(self, split: str) -> list[str]:
        if split == "all":
            return sorted(self.records)
        if split not in self.manifest.split:
            raise KeyError(f"unknown split {split!r}")
        return list(self.manifest.split[split])

    def tensors(self, ids: list[str], dtype=torch.float64) -> tuple[torch.Tensor, GroundTruth]:
        recs = [self.records[i] for i in ids]
        stack = lambda k: torch.from_numpy(np.stack([getattr(r, k) for r in recs])).to(dtype)  # noqa: E731
        images = stack("image").permute(0, 3, 1, 2).contiguous()
        gt = GroundTruth(stack("joints3d"), stack("coarse_vertices"), stack("fine_vertices"),
                         stack("joints2d"), stack("gen_theta"))
        return images, gt

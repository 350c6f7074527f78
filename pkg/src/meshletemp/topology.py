"""Fixed linear operators between the fine mesh, the coarse mesh and the 14 keypoints."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
from torch import Tensor

from .body_model import PARENTS, RestBody

KEYPOINT_NAMES = (
    "right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle",
    "right_wrist", "right_elbow", "right_shoulder", "left_shoulder", "left_elbow",
    "left_wrist", "neck", "head",
)  # fmt: skip

# body-model joint that anchors each keypoint
_KEYPOINT_JOINTS = (8, 5, 2, 1, 4, 7, 21, 19, 17, 16, 18, 20, 12, 15)
_HEAD = 13


@dataclass(frozen=True)
class JointSchema:
    names: tuple[str, ...] = KEYPOINT_NAMES
    left_right_pairs: tuple[tuple[int, int], ...] = ((0, 5), (1, 4), (2, 3), (6, 11), (7, 10), (8, 9))
    root_indices: tuple[int, int] = (2, 3)

    @property
    def num_joints(self) -> int:
        return len(self.names)


JOINT_SCHEMA = JointSchema()


@dataclass(frozen=True, eq=False)
class Topology:
    fine_faces: np.ndarray        # (F_f, 3)
    coarse_faces: np.ndarray      # (F_c, 3)
    downsample: sp.csr_matrix     # (M_c, M_f), row-stochastic
    joint_regressor: np.ndarray   # (K, M_c), row-stochastic
    sample_indices: np.ndarray    # fine vertex chosen for each coarse vertex
    schema: JointSchema = JOINT_SCHEMA

    @property
    def num_fine(self) -> int:
        return self.downsample.shape[1]

    @property
    def num_coarse(self) -> int:
        return self.downsample.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_regressor.shape[0]

    def dense_downsample(self) -> np.ndarray:
        return self.downsample.toarray()

    def digest(self) -> str:
        h = hashlib.sha256()
        d = self.downsample
        for arr in (self.fine_faces, self.coarse_faces, d.indptr, d.indices, d.data,
                    self.joint_regressor, self.sample_indices):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(",".join(self.schema.names).encode())
        return h.hexdigest()

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "fine_faces": self.fine_faces,
            "coarse_faces": self.coarse_faces,
            "downsample": self.dense_downsample(),
            "joint_regressor": self.joint_regressor,
            "sample_indices": self.sample_indices,
        }

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "Topology":
        return cls(
            fine_faces=np.asarray(t["fine_faces"]),
            coarse_faces=np.asarray(t["coarse_faces"]),
            downsample=sp.csr_matrix(np.asarray(t["downsample"])),
            joint_regressor=np.asarray(t["joint_regressor"]),
            sample_indices=np.asarray(t["sample_indices"]),
        )


def _apply(matrix, verts, expected: int, what: str):
    if verts.shape[-2:] != (expected, 3):
        raise ValueError(f"{what}: expected (..., {expected}, 3) vertices, got {tuple(verts.shape)}")
    if isinstance(verts, Tensor):
        m = torch.as_tensor(matrix, dtype=verts.dtype, device=verts.device)
        return torch.matmul(m, verts)
    if sp.issparse(matrix):
        if verts.ndim == 2:
            return np.asarray(matrix @ verts)
        return np.stack([np.asarray(matrix @ v) for v in verts])
    return np.matmul(matrix, verts)


def downsample(fine_vertices, topo: Topology):
    """``D @ fine_vertices`` for (M_f, 3) or batched (B, M_f, 3) numpy/torch input."""
    mat = topo.downsample if not isinstance(fine_vertices, Tensor) else topo.dense_downsample()
    return _apply(mat, fine_vertices, topo.num_fine, "downsample")


def regress_joints(coarse_vertices, topo: Topology):
    """``G @ coarse_vertices`` -> (..., 14, 3)."""
    return _apply(topo.joint_regressor, coarse_vertices, topo.num_coarse, "regress_joints")


def farthest_point_sampling(points: np.ndarray, count: int) -> np.ndarray:
    """Greedy FPS seeded at the point nearest the centroid; ties break on lowest index."""
    first = int(np.argmin(np.linalg.norm(points - points.mean(0), axis=1)))
    chosen = [first]
    dist = np.linalg.norm(points - points[first], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


def _assign_cells(body: RestBody, samples: np.ndarray) -> np.ndarray:
    """Nearest sample for every fine vertex, preferring samples on the same capsule."""
    pts = body.template_vertices
    seg = body.segment_ids
    d = np.linalg.norm(pts[:, None, :] - pts[samples][None, :, :], axis=2)
    same = seg[:, None] == seg[samples][None, :]
    has_same = same.any(1)
    d_pref = np.where(same, d, np.inf)
    cell = np.where(has_same, np.argmin(d_pref, axis=1), np.argmin(d, axis=1))
    cell[samples] = np.arange(len(samples))
    return cell


def _joint_regressor(coarse_weights: np.ndarray) -> np.ndarray:
    """Each keypoint row weights coarse vertices by how much they straddle the joint."""
    rows = []
    for k, j in enumerate(_KEYPOINT_JOINTS):
        if k == _HEAD:
            score = coarse_weights[:, j] ** 4
        else:
            score = coarse_weights[:, j] * coarse_weights[:, PARENTS[j]]
            keep = score >= 0.5 * score.max() if score.max() > 0 else score > 0
            score = np.where(keep, score, 0.0)
        if score.sum() <= 0:
            score = (coarse_weights.argmax(1) == j).astype(np.float64)
        if score.sum() <= 0:
            score = coarse_weights[:, j].copy()
        rows.append(score / score.sum())
    return np.asarray(rows)


def build_topology(body: RestBody, coarse_count: int) -> Topology:
    """Farthest-point coarse sampling, cell-average downsampling and a skinning-derived G."""
    m_f = body.num_vertices
    if not 1 <= coarse_count < m_f:
        raise ValueError(f"coarse_count must lie in [1, {m_f - 1}], got {coarse_count}")
    samples = farthest_point_sampling(body.template_vertices, coarse_count)
    cell = _assign_cells(body, samples)
    sizes = np.bincount(cell, minlength=coarse_count).astype(np.float64)
    d = sp.csr_matrix(
        (1.0 / sizes[cell], (cell, np.arange(m_f))), shape=(coarse_count, m_f)
    )
    d.sort_indices()

    collapsed = cell[body.faces]
    ok = (collapsed[:, 0] != collapsed[:, 1]) & (collapsed[:, 1] != collapsed[:, 2]) & (
        collapsed[:, 0] != collapsed[:, 2]
    )
    coarse_faces = []
    seen = set()
    for f in collapsed[ok]:
        key = tuple(sorted(f.tolist()))
        if key not in seen:
            seen.add(key)
            coarse_faces.append(f)
    coarse_faces = np.asarray(coarse_faces, dtype=np.int64).reshape(-1, 3)

    coarse_weights = np.asarray(d @ body.skinning_weights)
    return Topology(
        fine_faces=np.asarray(body.faces, dtype=np.int64),
        coarse_faces=coarse_faces,
        downsample=d,
        joint_regressor=_joint_regressor(coarse_weights),
        sample_indices=samples,
    )

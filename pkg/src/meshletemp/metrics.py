"""MPJPE, PA-MPJPE and MPVE in body units (numpy, float64)."""

from __future__ import annotations

import numpy as np

from .topology import JOINT_SCHEMA, JointSchema, Topology


class AlignmentError(ValueError):
    """Procrustes alignment is undefined for the given configuration."""


def _check(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {a.shape} and {b.shape}")
    return a, b


def root_center(joints: np.ndarray, schema: JointSchema = JOINT_SCHEMA) -> np.ndarray:
    return joints[list(schema.root_indices)].mean(0)


def mpjpe(pred_joints, gt_joints, schema: JointSchema = JOINT_SCHEMA) -> float:
    pred, gt = _check(pred_joints, gt_joints)
    if len(pred) != schema.num_joints:
        raise ValueError(f"expected {schema.num_joints} joints, got {len(pred)}")
    pred = pred - root_center(pred, schema)
    gt = gt - root_center(gt, schema)
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def mpjpe_unaligned(pred_joints, gt_joints) -> float:
    pred, gt = _check(pred_joints, gt_joints)
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def similarity_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Least-squares s, R (det +1), t mapping ``pred`` onto ``gt``; returns aligned ``pred``."""
    pred, gt = _check(pred, gt)
    if len(gt) < 3:
        raise AlignmentError("need at least 3 points")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    p, g = pred - mu_p, gt - mu_g
    scale_g = np.linalg.norm(g)
    sv_g = np.linalg.svd(g, compute_uv=False)
    if scale_g == 0 or sv_g[1] <= 1e-12 * max(sv_g[0], 1.0):
        raise AlignmentError("ground truth is degenerate (collinear or coincident)")
    var_p = (p**2).sum()
    if var_p == 0:
        raise AlignmentError("prediction is degenerate (all points coincide)")
    u, s, vt = np.linalg.svd(p.T @ g)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    rot = u @ fix @ vt                        # p @ rot ~ g
    scale = (s * np.diag(fix)).sum() / var_p
    return scale * p @ rot + mu_g


def pa_mpjpe(pred_joints, gt_joints) -> float:
    pred, gt = _check(pred_joints, gt_joints)
    return float(np.linalg.norm(similarity_align(pred, gt) - gt, axis=1).mean())


def mpve(pred_fine, gt_fine, topo: Topology, schema: JointSchema = JOINT_SCHEMA) -> float:
    pred, gt = _check(pred_fine, gt_fine)
    if len(pred) != topo.num_fine:
        raise ValueError(f"expected {topo.num_fine} vertices, got {len(pred)}")
    reg = topo.joint_regressor @ topo.downsample
    pred = pred - root_center(np.asarray(reg @ pred), schema)
    gt = gt - root_center(np.asarray(reg @ gt), schema)
    return float(np.linalg.norm(pred - gt, axis=1).mean())

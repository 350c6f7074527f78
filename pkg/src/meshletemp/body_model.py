"""Procedural SMPL-interface body model.

``theta`` is an 82-vector: 72 axis-angle pose values over a 24-joint tree
followed by 10 shape coefficients. The mesh is a low-poly humanoid built from
capsules around the bones, skinned with linear blend skinning. Coordinates use
y up, +x toward the body's left, +z forward; the pelvis sits at the origin and
the rest body is about 1.7 units tall.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import Tensor, nn

NUM_JOINTS = 24
NUM_POSE = 72
NUM_SHAPE = 10
NUM_PARAMS = NUM_POSE + NUM_SHAPE

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)  # fmt: skip

# SMPL kinematic tree
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],     # pelvis
    [0.09, -0.08, 0.00],    # left_hip
    [-0.09, -0.08, 0.00],
    [0.00, 0.11, 0.00],     # spine1
    [0.10, -0.48, 0.01],    # left_knee
    [-0.10, -0.48, 0.01],
    [0.00, 0.24, 0.00],     # spine2
    [0.10, -0.86, -0.01],   # left_ankle
    [-0.10, -0.86, -0.01],
    [0.00, 0.30, 0.00],     # spine3
    [0.10, -0.92, 0.10],    # left_foot
    [-0.10, -0.92, 0.10],
    [0.00, 0.50, 0.00],     # neck
    [0.07, 0.42, 0.00],     # left_collar
    [-0.07, 0.42, 0.00],
    [0.00, 0.58, 0.01],     # head
    [0.17, 0.45, 0.00],     # left_shoulder
    [-0.17, 0.45, 0.00],
    [0.43, 0.45, 0.00],     # left_elbow
    [-0.43, 0.45, 0.00],
    [0.68, 0.45, 0.00],     # left_wrist
    [-0.68, 0.45, 0.00],
    [0.76, 0.45, 0.00],     # left_hand
    [-0.76, 0.45, 0.00],
])  # fmt: skip

# end points for the five leaf joints
_LEAF_ENDS = {
    10: (0.10, -0.92, 0.18),
    11: (-0.10, -0.92, 0.18),
    15: (0.00, 0.66, 0.01),
    22: (0.84, 0.45, 0.00),
    23: (-0.84, 0.45, 0.00),
}

# capsule radius keyed by (owner joint, child joint or -1 for a leaf end)
_RADII = {
    (0, 1): 0.09, (0, 2): 0.09, (0, 3): 0.12,
    (1, 4): 0.07, (2, 5): 0.07, (3, 6): 0.13,
    (4, 7): 0.05, (5, 8): 0.05, (6, 9): 0.13,
    (7, 10): 0.04, (8, 11): 0.04, (9, 12): 0.12, (9, 13): 0.06, (9, 14): 0.06,
    (10, -1): 0.035, (11, -1): 0.035, (12, 15): 0.045,
    (13, 16): 0.055, (14, 17): 0.055, (15, -1): 0.085,
    (16, 18): 0.045, (17, 19): 0.045, (18, 20): 0.038, (19, 21): 0.038,
    (20, 22): 0.03, (21, 23): 0.03, (22, -1): 0.025, (23, -1): 0.025,
}  # fmt: skip

_TORSO_OWNERS = (0, 3, 6, 9)
_WEIGHT_QUANTUM = 1024  # dyadic weights keep rest-pose LBS bit-exact

BODY_PRESETS = {"desk": (800, 8), "paper-shape": (6890, 10)}


@dataclass(frozen=True)
class BodyParams:
    pose: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        if np.shape(self.pose) != (NUM_POSE,) or np.shape(self.shape) != (NUM_SHAPE,):
            raise ValueError("BodyParams needs 72 pose and 10 shape values")
        if not (np.all(np.isfinite(self.pose)) and np.all(np.isfinite(self.shape))):
            raise ValueError("BodyParams must be finite")

    @classmethod
    def from_vector(cls, theta) -> "BodyParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (NUM_PARAMS,):
            raise ValueError(f"theta must have length {NUM_PARAMS}, got shape {theta.shape}")
        return cls(theta[:NUM_POSE].copy(), theta[NUM_POSE:].copy())

    @classmethod
    def zeros(cls) -> "BodyParams":
        return cls(np.zeros(NUM_POSE), np.zeros(NUM_SHAPE))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pose, self.shape])


@dataclass(frozen=True, eq=False)
class RestBody:
    """Immutable rest-state body assets."""

    preset: str
    template_vertices: np.ndarray    # (M, 3)
    shape_basis: np.ndarray          # (M, 3, 10)
    skinning_weights: np.ndarray     # (M, 24)
    kinematic_tree: np.ndarray       # (24,) parent indices, root -1
    rest_joint_positions: np.ndarray # (24, 3)
    joint_shape_basis: np.ndarray    # (24, 3, 10)
    faces: np.ndarray                # (F, 3) int64
    segment_ids: np.ndarray          # (M,) capsule index of each vertex
    segment_owners: np.ndarray       # (S,) joint that owns each capsule

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256(self.preset.encode())
        for name in ("template_vertices", "shape_basis", "skinning_weights", "kinematic_tree",
                     "rest_joint_positions", "joint_shape_basis", "faces", "segment_ids"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    def translated(self, t) -> "RestBody":
        t = np.asarray(t, dtype=np.float64)
        return RestBody(
            self.preset, self.template_vertices + t, self.shape_basis, self.skinning_weights,
            self.kinematic_tree, self.rest_joint_positions + t, self.joint_shape_basis,
            self.faces, self.segment_ids, self.segment_owners,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "template_vertices": self.template_vertices,
            "shape_basis": self.shape_basis,
            "skinning_weights": self.skinning_weights,
            "kinematic_tree": self.kinematic_tree.astype(np.int64),
            "rest_joint_positions": self.rest_joint_positions,
            "joint_shape_basis": self.joint_shape_basis,
            "faces": self.faces.astype(np.int64),
            "segment_ids": self.segment_ids.astype(np.int64),
            "segment_owners": self.segment_owners.astype(np.int64),
        }

    @classmethod
    def from_tensors(cls, preset: str, t: dict[str, np.ndarray]) -> "RestBody":
        return cls(preset, **{k: np.asarray(v) for k, v in t.items()})


def rodrigues(axis_angle: Tensor) -> Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Below ``|w| = 1e-8`` the Taylor expansion of the coefficients is used so the
    gradient at zero stays finite.
    """
    aa = torch.as_tensor(axis_angle)
    if not torch.is_floating_point(aa):
        aa = aa.to(torch.float64)
    sq = (aa * aa).sum(-1, keepdim=True)
    small = sq < 1e-16
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    angle = safe_sq.sqrt()
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / safe_sq)
    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(*aa.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand_as(k)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


def lbs(
    theta: Tensor,
    template: Tensor,
    shape_basis: Tensor,
    joints: Tensor,
    joint_shape_basis: Tensor,
    weights: Tensor,
    parents: tuple[int, ...],
) -> tuple[Tensor, Tensor]:
    """Batched blendshapes + linear blend skinning. ``theta`` is (B, 82)."""
    batch = theta.shape[0]
    betas = theta[:, NUM_POSE:]
    v_shaped = template + torch.einsum("mck,bk->bmc", shape_basis, betas)
    j_shaped = joints + torch.einsum("jck,bk->bjc", joint_shape_basis, betas)
    rot = rodrigues(theta[:, :NUM_POSE].reshape(batch, NUM_JOINTS, 3))

    # x -> R_g x + t, composed from per-joint rotations about the rest joints
    glob_r = [rot[:, 0]]
    glob_t = [j_shaped[:, 0] - (rot[:, 0] @ j_shaped[:, 0, :, None])[..., 0]]
    for i in range(1, len(parents)):
        p = parents[i]
        local_t = j_shaped[:, i] - (rot[:, i] @ j_shaped[:, i, :, None])[..., 0]
        glob_r.append(glob_r[p] @ rot[:, i])
        glob_t.append((glob_r[p] @ local_t[..., None])[..., 0] + glob_t[p])
    glob_r = torch.stack(glob_r, 1)
    glob_t = torch.stack(glob_t, 1)

    blend_r = torch.einsum("mj,bjrc->bmrc", weights, glob_r)
    blend_t = torch.einsum("mj,bjc->bmc", weights, glob_t)
    verts = (blend_r @ v_shaped[..., None])[..., 0] + blend_t
    posed_joints = (glob_r @ j_shaped[..., None])[..., 0] + glob_t
    return verts, posed_joints


class BodyLayer(nn.Module):
    """Holds a :class:`RestBody` as buffers; maps (B, 82) -> vertices, joints."""

    def __init__(self, body: RestBody):
        super().__init__()
        self.preset = body.preset
        self.parents = tuple(int(p) for p in body.kinematic_tree)
        self.register_buffer("template", torch.from_numpy(body.template_vertices.copy()))
        self.register_buffer("shape_basis", torch.from_numpy(body.shape_basis.copy()))
        self.register_buffer("joints", torch.from_numpy(body.rest_joint_positions.copy()))
        self.register_buffer("joint_shape_basis", torch.from_numpy(body.joint_shape_basis.copy()))
        self.register_buffer("weights", torch.from_numpy(body.skinning_weights.copy()))

    def forward(self, theta: Tensor) -> tuple[Tensor, Tensor]:
        if theta.shape[-1] != NUM_PARAMS:
            raise ValueError(f"theta must have {NUM_PARAMS} entries, got {theta.shape[-1]}")
        return lbs(theta, self.template, self.shape_basis, self.joints,
                   self.joint_shape_basis, self.weights, self.parents)


def forward(body: RestBody, params) -> tuple[Tensor, Tensor]:
    """Pose ``body`` with ``params`` (BodyParams, (82,) or (B, 82)).

    Returns fine vertices and the 24 posed model joints, unbatched if the input was.
    """
    if isinstance(params, BodyParams):
        params = params.to_vector()
    theta = torch.as_tensor(params, dtype=torch.float64)
    if theta.shape[-1] != NUM_PARAMS:
        raise ValueError(f"params must have length {NUM_PARAMS}, got {tuple(theta.shape)}")
    single = theta.dim() == 1
    if single:
        theta = theta[None]
    verts, joints = lbs(
        theta,
        torch.tensor(body.template_vertices),
        torch.tensor(body.shape_basis),
        torch.tensor(body.rest_joint_positions),
        torch.tensor(body.joint_shape_basis),
        torch.tensor(body.skinning_weights),
        tuple(int(p) for p in body.kinematic_tree),
    )
    if single:
        return verts[0], joints[0]
    return verts, joints


# ---------------------------------------------------------------------------
# procedural construction


def _segments() -> list[tuple[int, int, np.ndarray, np.ndarray, float]]:
    """(owner, child or -1, start, end, radius) for every capsule."""
    segs = []
    for j in range(NUM_JOINTS):
        children = [c for c in range(NUM_JOINTS) if PARENTS[c] == j]
        for c in children:
            segs.append((j, c, _REST_JOINTS[j], _REST_JOINTS[c], _RADII[(j, c)]))
        if not children:
            segs.append((j, -1, _REST_JOINTS[j], np.array(_LEAF_ENDS[j]), _RADII[(j, -1)]))
    return segs


def _allocate(shares: np.ndarray, total: int, minimum: int) -> np.ndarray:
    """Largest-remainder integer allocation with a per-item floor."""
    spare = total - minimum * len(shares)
    if spare < 0:
        raise ValueError("vertex budget too small for the capsule layout")
    raw = shares / shares.sum() * spare
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: spare - counts.sum()]] += 1
    return counts + minimum


def _frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _skin_row(owner: int, child: int, t: float) -> np.ndarray:
    row = np.zeros(NUM_JOINTS)
    parent = PARENTS[owner]
    w_p = 0.5 * max(0.0, 1.0 - t / 0.3) if parent >= 0 else 0.0
    w_c = 0.5 * max(0.0, (t - 0.7) / 0.3) if child >= 0 else 0.0
    q_p = round(w_p * _WEIGHT_QUANTUM) / _WEIGHT_QUANTUM
    q_c = round(w_c * _WEIGHT_QUANTUM) / _WEIGHT_QUANTUM
    if parent >= 0:
        row[parent] += q_p
    if child >= 0:
        row[child] += q_c
    row[owner] += 1.0 - q_p - q_c
    return row


def _shape_fields(points: np.ndarray, radial: np.ndarray | None, owners: np.ndarray | None) -> np.ndarray:
    """Displacement field (N, 3, 10). ``radial``/``owners`` are None for joints."""
    n = len(points)
    x, y, z = points.T
    out = np.zeros((n, 3, NUM_SHAPE))
    out[:, 1, 0] = 0.05 * y                                         # stature
    out[:, 0, 1] = 0.04 * x                                         # width
    out[:, 2, 2] = 0.04 * z                                         # depth
    reach = np.clip(np.abs(x) - 0.17, 0.0, None)
    out[:, 0, 4] = 0.04 * np.sign(x) * reach                        # arm length
    out[:, 1, 5] = 0.04 * np.minimum(y + 0.08, 0.0)                 # leg length
    span = np.clip((np.abs(x) - 0.07) / 0.1, 0, 1) * np.clip((y - 0.3) / 0.1, 0, 1)
    out[:, 0, 9] = 0.02 * np.sign(x) * span                         # shoulder breadth
    if radial is not None:
        torso = np.isin(owners, _TORSO_OWNERS)
        head = owners == 15
        out[:, :, 3] = 0.01 * radial                                # limb girth
        out[torso, :, 6] = 0.015 * radial[torso]                    # torso girth
        belly = torso & (z > 0)
        out[belly, 2, 7] = 0.02 * np.exp(-(((y[belly] - 0.15) / 0.12) ** 2))
        centre = np.array(_LEAF_ENDS[15]) * 0.5 + _REST_JOINTS[15] * 0.5
        out[head, :, 8] = 0.05 * (points[head] - centre)            # head size
    return out


@lru_cache(maxsize=None)
def _build(preset: str) -> RestBody:
    if preset not in BODY_PRESETS:
        raise ValueError(f"unknown body preset {preset!r}; choose from {sorted(BODY_PRESETS)}")
    total, around = BODY_PRESETS[preset]
    if total % around:
        raise ValueError("vertex budget must be a multiple of the ring size")
    segs = _segments()
    lengths = np.array([np.linalg.norm(e - s) for _, _, s, e, _ in segs])
    radii = np.array([r for *_, r in segs])
    rings = _allocate((lengths + 2 * radii) * radii, total // around, minimum=2)

    verts, radial, weights, seg_ids, faces = [], [], [], [], []
    base = 0
    for si, ((owner, child, start, end, r), n_rings) in enumerate(zip(segs, rings)):
        axis = (end - start) / lengths[si]
        u, w = _frame(axis)
        extent = lengths[si] + 2 * r
        for k in range(n_rings):
            d = -r + extent * (k + 0.5) / n_rings          # axial coordinate along capsule
            if d < 0:
                ring_r = r * np.sqrt(max(0.0, 1 - (d / r) ** 2))
            elif d > lengths[si]:
                ring_r = r * np.sqrt(max(0.0, 1 - ((d - lengths[si]) / r) ** 2))
            else:
                ring_r = r
            centre = start + axis * d
            t = float(np.clip(d / lengths[si], 0.0, 1.0))
            for a in range(around):
                phi = 2 * np.pi * (a + 0.5 * (k % 2)) / around
                direction = np.cos(phi) * u + np.sin(phi) * w
                verts.append(centre + ring_r * direction)
                radial.append(direction)
                weights.append(_skin_row(owner, child, t))
                seg_ids.append(si)
        for k in range(n_rings - 1):
            r0, r1 = base + k * around, base + (k + 1) * around
            for a in range(around):
                b = (a + 1) % around
                faces.append((r0 + a, r0 + b, r1 + a))
                faces.append((r0 + b, r1 + b, r1 + a))
        last = base + (n_rings - 1) * around
        for a in range(1, around - 1):
            faces.append((base, base + a + 1, base + a))
            faces.append((last, last + a, last + a + 1))
        base += n_rings * around

    verts = np.asarray(verts)
    radial = np.asarray(radial)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    owners = np.array([s[0] for s in segs], dtype=np.int64)
    return RestBody(
        preset=preset,
        template_vertices=verts,
        shape_basis=_shape_fields(verts, radial, owners[seg_ids]),
        skinning_weights=np.asarray(weights),
        kinematic_tree=np.array(PARENTS, dtype=np.int64),
        rest_joint_positions=_REST_JOINTS.copy(),
        joint_shape_basis=_shape_fields(_REST_JOINTS, None, None),
        faces=np.asarray(faces, dtype=np.int64),
        segment_ids=seg_ids,
        segment_owners=owners,
    )


def build_default_body(preset: str = "desk") -> RestBody:
    """Deterministic procedural body for ``preset`` ("desk": 800 verts, "paper-shape": 6890)."""
    body = _build(preset)
    for name in ("template_vertices", "shape_basis", "skinning_weights", "kinematic_tree",
                 "rest_joint_positions", "joint_shape_basis", "faces", "segment_ids", "segment_owners"):
        getattr(body, name).setflags(write=False)
    return body

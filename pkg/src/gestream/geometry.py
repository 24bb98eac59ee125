"""Rotation representations, forward kinematics and geometric distances.

Rotations are carried as 6D vectors (first two columns of the rotation
matrix) inside motion blocks and as explicit 3x3 matrices everywhere a
distance or kinematic chain is evaluated.  All functions are pure and
accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, InvalidRotation, ShapeError, TopologyError

_EPS = 1e-6

REGION_UPPER = "upper"
REGION_LOWER = "lower"
REGION_FACE = "face"


def rot6d_to_matrix(a: np.ndarray) -> np.ndarray:
    """Gram-Schmidt orthonormalization of a (..., 6) vector into (..., 3, 3).

    The six numbers are read as two 3-vectors (the intended first two
    columns).  Raises DegenerateInput when a column is near zero or the
    columns are near parallel (angle <= ~1e-6 rad).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != 6:
        raise ShapeError(f"expected trailing dim 6, got {a.shape}")
    c1 = a[..., 0:3]
    c2 = a[..., 3:6]
    n1 = np.linalg.norm(c1, axis=-1, keepdims=True)
    if np.any(n1 < _EPS):
        raise DegenerateInput("first column near zero")
    b1 = c1 / n1
    proj = np.sum(b1 * c2, axis=-1, keepdims=True)
    r2 = c2 - proj * b1
    n2 = np.linalg.norm(r2, axis=-1, keepdims=True)
    if np.any(n2 < _EPS * np.linalg.norm(c2, axis=-1, keepdims=True)) or np.any(n2 < _EPS):
        raise DegenerateInput("columns near parallel or second column near zero")
    b2 = r2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """Concatenate the first two columns of a valid rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    validate_rotation(m)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def validate_rotation(m: np.ndarray, tol: float = 1e-6) -> None:
    """Check m^T m = I and det = +1 within tol; raises InvalidRotation."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ShapeError(f"expected (...,3,3), got {m.shape}")
    ident = np.eye(3)
    err = np.abs(np.swapaxes(m, -1, -2) @ m - ident).max()
    if err > tol:
        raise InvalidRotation(f"m^T m deviates from I by {err:.3e}")
    det_err = np.abs(np.linalg.det(m) - 1.0).max()
    if det_err > tol:
        raise InvalidRotation(f"det deviates from +1 by {det_err:.3e}")


def geodesic_distance(m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Rotation angle between two rotation matrices, in radians."""
    validate_rotation(m1)
    validate_rotation(m2)
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    tr = np.einsum("...ij,...ij->...", m1, m2)
    cosang = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(cosang)


def geodesic_from_6d(a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    """Geodesic distance between two 6D-encoded rotations."""
    return geodesic_distance(rot6d_to_matrix(a1), rot6d_to_matrix(a2))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; axis need not be normalized."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < _EPS:
        raise DegenerateInput("zero axis")
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


@dataclass
class SkeletonSpec:
    """Articulated body split into upper/lower/face channel blocks.

    parent[j] = -1 marks the root.  Joints must be ordered so the three
    regions are contiguous only in region_map terms, not in index order.
    """

    parent: np.ndarray          # (J,) int
    offset: np.ndarray          # (J, 3) rest-pose bone offsets, meters
    region_map: list            # per-joint tag in {upper, lower, face}
    expr_dim: int = 100
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        j = self.parent.shape[0]
        if self.offset.shape != (j, 3):
            raise ShapeError("offset must be (J, 3)")
        if len(self.region_map) != j:
            raise ShapeError("region_map must have J entries")
        if self.expr_dim < 1:
            raise ShapeError("expr_dim must be >= 1")
        self._check_tree()

    def _check_tree(self):
        j = self.joint_count
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise TopologyError("skeleton must have exactly one root")
        # walk each joint to the root; cycle if more than J hops
        for start in range(j):
            node, hops = start, 0
            while node >= 0:
                node = self.parent[node]
                hops += 1
                if hops > j:
                    raise TopologyError("parent array is cyclic")

    @property
    def joint_count(self) -> int:
        return int(self.parent.shape[0])

    def region_indices(self, region: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.region_map) if r == region], dtype=np.int64)

    @property
    def j_upper(self) -> int:
        return len(self.region_indices(REGION_UPPER))

    @property
    def j_lower(self) -> int:
        return len(self.region_indices(REGION_LOWER))

    @property
    def j_face(self) -> int:
        return len(self.region_indices(REGION_FACE))

    def joints_named(self, substr: str) -> list:
        return [i for i, n in enumerate(self.names) if substr in n]


def default_skeleton(expr_dim: int = 100) -> SkeletonSpec:
    """Desk skeleton: J_u=16, J_l=8, J_f=1.

    Index order: lower body first (root at 0), then upper, then jaw.
    Offsets are rough human proportions in meters.
    """
    names = []
    parent = []
    offset = []
    region = []

    def add(name, par, off, reg):
        names.append(name)
        parent.append(par)
        offset.append(off)
        region.append(reg)
        return len(names) - 1

    hips = add("hips", -1, [0.0, 0.0, 0.0], REGION_LOWER)
    lup = add("left_up_leg", hips, [0.10, -0.05, 0.0], REGION_LOWER)
    lkn = add("left_leg", lup, [0.0, -0.42, 0.0], REGION_LOWER)
    add("left_foot", lkn, [0.0, -0.42, 0.0], REGION_LOWER)
    rup = add("right_up_leg", hips, [-0.10, -0.05, 0.0], REGION_LOWER)
    rkn = add("right_leg", rup, [0.0, -0.42, 0.0], REGION_LOWER)
    add("right_foot", rkn, [0.0, -0.42, 0.0], REGION_LOWER)
    lspine = add("lower_spine", hips, [0.0, 0.12, 0.0], REGION_LOWER)

    uspine = add("upper_spine", lspine, [0.0, 0.14, 0.0], REGION_UPPER)
    chest = add("chest", uspine, [0.0, 0.14, 0.0], REGION_UPPER)
    neck = add("neck", chest, [0.0, 0.12, 0.0], REGION_UPPER)
    head = add("head", neck, [0.0, 0.10, 0.0], REGION_UPPER)
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        sh = add(f"{side}_shoulder", chest, [sgn * 0.18, 0.08, 0.0], REGION_UPPER)
        el = add(f"{side}_elbow", sh, [sgn * 0.28, 0.0, 0.0], REGION_UPPER)
        wr = add(f"{side}_wrist", el, [sgn * 0.26, 0.0, 0.0], REGION_UPPER)
        pa = add(f"{side}_palm", wr, [sgn * 0.06, 0.0, 0.0], REGION_UPPER)
        add(f"{side}_finger", pa, [sgn * 0.05, 0.0, 0.0], REGION_UPPER)
        add(f"{side}_thumb", pa, [sgn * 0.03, 0.0, 0.02], REGION_UPPER)

    add("jaw", head, [0.0, -0.03, 0.05], REGION_FACE)
    return SkeletonSpec(parent=np.array(parent), offset=np.array(offset),
                        region_map=region, expr_dim=expr_dim, names=names)


def forward_kinematics(spec: SkeletonSpec, rotations: np.ndarray,
                       root_translation: np.ndarray) -> np.ndarray:
    """Joint positions from per-joint local rotations + root translation.

    rotations: (..., J, 3, 3); root_translation: (..., 3).
    Returns (..., J, 3).  p_j = p_parent + R_parent_global @ offset_j.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    root_translation = np.asarray(root_translation, dtype=np.float64)
    j = spec.joint_count
    if rotations.shape[-3:] != (j, 3, 3):
        raise ShapeError(f"rotations must be (...,{j},3,3), got {rotations.shape}")
    batch = rotations.shape[:-3]
    pos = np.zeros(batch + (j, 3))
    glob = np.zeros(batch + (j, 3, 3))
    order = _topo_order(spec)
    for jj in order:
        par = spec.parent[jj]
        if par < 0:
            pos[..., jj, :] = root_translation
            glob[..., jj, :, :] = rotations[..., jj, :, :]
        else:
            pos[..., jj, :] = pos[..., par, :] + np.einsum(
                "...ij,j->...i", glob[..., par, :, :], spec.offset[jj])
            glob[..., jj, :, :] = glob[..., par, :, :] @ rotations[..., jj, :, :]
    return pos


def _topo_order(spec: SkeletonSpec) -> list:
    order, seen = [], set()
    pending = list(range(spec.joint_count))
    while pending:
        nxt = [j for j in pending if spec.parent[j] < 0 or spec.parent[j] in seen]
        if not nxt:
            raise TopologyError("parent array is cyclic")
        for j in nxt:
            order.append(j)
            seen.add(j)
        pending = [j for j in pending if j not in seen]
    return order


def fk_positions_from_6d(spec: SkeletonSpec, rot6d: np.ndarray,
                         root_translation: np.ndarray) -> np.ndarray:
    """FK on (..., J, 6) stacked 6D rotations."""
    return forward_kinematics(spec, rot6d_to_matrix(rot6d), root_translation)

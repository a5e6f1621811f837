"""Training objective: x0 reconstruction plus kinematic regularizers.

Every function accepts predictions as tensors of shape (..., L, F) and ground
truth as arrays of the same shape; leading axes are batch. ``mask`` marks
valid frames with shape (..., L).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import V_MAX, SkeletonSpec, frame_dim
from .errors import ConfigurationError, DimensionError

LENGTH_EPS = 1e-12
ORTHO_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    vel: float = 30.0
    foot: float = 30.0
    bl: float = 10.0
    dm: float = 3.0
    ro: float = 0.01

    def __post_init__(self):
        for name in ("vel", "foot", "bl", "dm", "ro"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be non-negative")


def _lead(x: Tensor) -> tuple:
    return (slice(None),) * (x.ndim - 1)


def joint_positions(x, n_joints: int) -> Tensor:
    """(..., L, F) frames -> (..., L, J, 3) positions."""
    x = ad.as_tensor(x)
    if x.shape[-1] != frame_dim(n_joints):
        raise DimensionError(f"frame width {x.shape[-1]} does not match {n_joints} joints")
    pos = x[_lead(x) + (slice(0, 3 * n_joints),)]
    return ad.reshape(pos, x.shape[:-1] + (n_joints, 3))


def _frame_weights(mask, shape: tuple) -> np.ndarray:
    """Frame mask broadcast to ``shape`` minus its trailing axes, as floats."""
    if mask is None:
        return np.ones(shape)
    return np.broadcast_to(np.asarray(mask, dtype=np.float64), shape).copy()


def _masked_mean(values: Tensor, weights: np.ndarray) -> Tensor:
    """Mean over the entries whose frame weight is 1; ``weights`` covers the leading axes of ``values``."""
    extra = values.ndim - weights.ndim
    w = weights.reshape(weights.shape + (1,) * extra)
    per_frame = int(np.prod(values.shape[weights.ndim:]))
    denom = max(weights.sum() * per_frame, 1.0)
    return ad.sum_(values * np.broadcast_to(w, values.shape)) * (1.0 / denom)


def _diff(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    ax = axis % x.ndim
    head = (slice(None),) * ax
    return x[head + (slice(1, n),)] - x[head + (slice(0, n - 1),)]


def _pair_mask(mask, lead_shape: tuple) -> np.ndarray:
    m = _frame_weights(mask, lead_shape)
    return m[..., 1:] * m[..., :-1]


def l_simple(pred, target, mask=None) -> Tensor:
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from target {target.shape}")
    return _masked_mean(ad.square(pred - target), _frame_weights(mask, pred.shape[:-1]))


def l_vel(pred, target, n_joints: int, mask=None) -> Tensor:
    """MSE between forward-difference joint velocities."""
    p = joint_positions(pred, n_joints)
    g = np.asarray(target, dtype=np.float64)
    if g.shape[-2] < 2:
        raise DimensionError("velocity loss needs at least two frames")
    g = g[..., : 3 * n_joints].reshape(g.shape[:-1] + (n_joints, 3))
    dv = _diff(p, -3) - (g[..., 1:, :, :] - g[..., :-1, :, :])
    return _masked_mean(ad.square(dv), _pair_mask(mask, p.shape[:-2]))


def l_foot(pred, contact, spec: SkeletonSpec, mask=None, v_max: float = V_MAX) -> Tensor:
    """Foot sliding where the foot is labelled in contact.

    Penalises squared foot speed beyond ``v_max``, the speed below which a
    foot counts as planted, so ground truth labelled with the same threshold
    scores zero.
    """
    if len(spec.foot_joints) != 4:
        raise ConfigurationError("skeleton defines no foot joints")
    p = joint_positions(pred, spec.n_joints)
    feet = ad.take(p, np.asarray(spec.foot_joints), axis=-2)  # (..., L, 4, 3)
    speed2 = ad.sum_(ad.square(_diff(feet, -3)), axis=-1)
    c = np.asarray(contact, dtype=np.float64)[..., :-1, :]
    slide = ad.relu(speed2 - v_max**2) * np.broadcast_to(c, speed2.shape)
    return _masked_mean(slide, _pair_mask(mask, p.shape[:-2]))


def bone_lengths(pos: Tensor, spec: SkeletonSpec) -> Tensor:
    """(..., L, J, 3) positions -> (..., L, J-1) bone lengths."""
    child = np.arange(1, spec.n_joints)
    parent = np.asarray(spec.parents[1:])
    bone = ad.take(pos, child, axis=-2) - ad.take(pos, parent, axis=-2)
    return ad.sqrt(ad.sum_(ad.square(bone), axis=-1) + LENGTH_EPS)


def l_bl(pred, spec: SkeletonSpec, mask=None) -> Tensor:
    """MSE between predicted bone lengths and the skeleton's rest lengths."""
    if spec.n_joints < 2:
        return ad.Tensor(0.0)
    p = joint_positions(pred, spec.n_joints)
    lengths = bone_lengths(p, spec)
    err = ad.square(lengths - np.broadcast_to(spec.bone_lengths, lengths.shape))
    return _masked_mean(err, _frame_weights(mask, lengths.shape[:-1]))


def distance_map(pos_a, pos_b) -> Tensor:
    """(..., L, J, 3) x2 -> (..., L, J, J) distances between every joint pair."""
    pos_a, pos_b = ad.as_tensor(pos_a), ad.as_tensor(pos_b)
    j = pos_a.shape[-2]
    lead = pos_a.shape[:-2]
    a = ad.reshape(pos_a, lead + (j, 1, 3))
    b = ad.reshape(pos_b, lead + (1, j, 3))
    full = lead + (j, j, 3)
    ones = np.ones(full)
    diff = a * ones - b * ones
    return ad.sqrt(ad.sum_(ad.square(diff), axis=-1) + LENGTH_EPS)


def l_dm(pred_a, pred_b, gt_a, gt_b, n_joints: int, d_max: float = 1.0, mask=None) -> Tensor:
    """Masked distance-map loss over joint pairs closer than ``d_max`` in ground truth.

    Averages over the selected entries; zero when no entry is selected.
    """
    d_pred = distance_map(joint_positions(pred_a, n_joints), joint_positions(pred_b, n_joints))
    with ad.no_grad():
        d_gt = distance_map(joint_positions(gt_a, n_joints), joint_positions(gt_b, n_joints)).data
    sel = (d_gt < d_max).astype(np.float64)
    sel = sel * _frame_weights(mask, d_gt.shape[:-2])[..., None, None]
    count = sel.sum()
    if count == 0:
        return ad.sum_(d_pred * 0.0)
    return ad.sum_(ad.square(d_pred - d_gt) * sel) * (1.0 / count)


def _dot(u: Tensor, v: Tensor) -> Tensor:
    return ad.sum_(u * v, axis=-1, keepdims=True)


def _cross(u: Tensor, v: Tensor) -> Tensor:
    lead = _lead(u)

    def c(x, i):
        return x[lead + (slice(i, i + 1),)]

    return ad.concat(
        [c(u, 1) * c(v, 2) - c(u, 2) * c(v, 1), c(u, 2) * c(v, 0) - c(u, 0) * c(v, 2), c(u, 0) * c(v, 1) - c(u, 1) * c(v, 0)],
        axis=-1,
    )


def orthonormal_columns(r6) -> tuple[Tensor, Tensor, Tensor]:
    """Gram-Schmidt on a (..., 6) rotation code, guarded by a small epsilon."""
    r6 = ad.as_tensor(r6)
    lead = _lead(r6)
    a1 = r6[lead + (slice(0, 3),)]
    a2 = r6[lead + (slice(3, 6),)]
    b1 = a1 / ad.sqrt(_dot(a1, a1) + ORTHO_EPS)
    a2 = a2 - _dot(b1, a2) * b1
    b2 = a2 / ad.sqrt(_dot(a2, a2) + ORTHO_EPS)
    return b1, b2, _cross(b1, b2)


def root_rot6d(x, n_joints: int) -> Tensor:
    x = ad.as_tensor(x)
    return x[_lead(x) + (slice(6 * n_joints, 6 * n_joints + 6),)]


def relative_rotation_6d(x_a, x_b, n_joints: int) -> Tensor:
    """First two columns of R_b^T R_a from the root rotations, as (..., L, 6)."""
    cols_a = orthonormal_columns(root_rot6d(x_a, n_joints))
    cols_b = orthonormal_columns(root_rot6d(x_b, n_joints))
    # entry (i, k) of R_b^T R_a is column i of R_b dotted with column k of R_a
    parts = [_dot(cols_b[i], cols_a[k]) for k in range(2) for i in range(3)]
    return ad.concat(parts, axis=-1)


def l_ro(pred_a, pred_b, gt_a, gt_b, n_joints: int, mask=None) -> Tensor:
    rel = relative_rotation_6d(pred_a, pred_b, n_joints)
    with ad.no_grad():
        rel_gt = relative_rotation_6d(gt_a, gt_b, n_joints).data
    return _masked_mean(ad.square(rel - rel_gt), _frame_weights(mask, rel.shape[:-1]))


def total_loss(pred_a, pred_b, gt_a, gt_b, spec: SkeletonSpec, weights: LossWeights = LossWeights(), mask=None, d_max: float = 1.0) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective and its unweighted components.

    Per-person terms are averaged over the two persons.
    """
    n = spec.n_joints
    gt_a = np.asarray(gt_a, dtype=np.float64)
    gt_b = np.asarray(gt_b, dtype=np.float64)
    pred = ad.stack([pred_a, pred_b], axis=0)
    gt = np.stack([gt_a, gt_b], axis=0)
    pair_mask = None if mask is None else np.stack([mask, mask], axis=0)
    parts = {"simple": l_simple(pred, gt, pair_mask)}
    if weights.vel:
        parts["vel"] = l_vel(pred, gt, n, pair_mask)
    if weights.foot:
        parts["foot"] = l_foot(pred, gt[..., 12 * n:], spec, pair_mask)
    if weights.bl:
        parts["bl"] = l_bl(pred, spec, pair_mask)
    if weights.dm:
        parts["dm"] = l_dm(pred_a, pred_b, gt_a, gt_b, n, d_max, mask)
    if weights.ro:
        parts["ro"] = l_ro(pred_a, pred_b, gt_a, gt_b, n, mask)
    total = parts["simple"]
    for name, value in parts.items():
        if name != "simple":
            total = total + value * getattr(weights, name)
    return total, {name: float(v.data) for name, v in parts.items()}

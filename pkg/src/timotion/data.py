"""Motion representation, skeletons, a synthetic two-person generator and file I/O.

A frame is laid out as ``[positions 3J | velocities 3J | 6D rotations 6J |
contacts 4]`` in a y-up world frame, for a skeleton with J joints. Positions
and velocities are global; rotations are local to each joint's parent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, UsageError

SCENARIOS = ("approach_handshake", "circle_around", "mirror_dance", "push_retreat")
SCENARIO_TOKENS = {
    "approach_handshake": (1, 2, 3),
    "circle_around": (4, 5, 6),
    "mirror_dance": (7, 8, 9),
    "push_retreat": (10, 11, 12),
}
H_MAX = 0.05
V_MAX = 0.02


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint tree with rest offsets (metres) and four foot-contact slots.

    ``parents[0] == 0`` marks the root. ``foot_joints`` always has four
    entries (heel/toe per side); a skeleton with fewer foot joints repeats them.
    """

    parents: tuple[int, ...]
    offsets: np.ndarray = field(compare=False)
    foot_joints: tuple[int, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "offsets", offsets)
        n = len(self.parents)
        if n < 1 or self.parents[0] != 0:
            raise ConfigurationError("joint 0 must be the root (its own parent)")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise ConfigurationError(f"joint {j} has parent {self.parents[j]}; parents must precede children")
        if offsets.shape != (n, 3):
            raise ConfigurationError(f"offsets must have shape ({n}, 3), got {offsets.shape}")
        if n > 1 and np.any(self.bone_lengths <= 0):
            raise ConfigurationError("bone lengths must be positive")
        if len(self.foot_joints) != 4:
            raise ConfigurationError(f"expected 4 foot slots, got {len(self.foot_joints)}")
        if any(not 0 <= f < n for f in self.foot_joints):
            raise ConfigurationError(f"foot joints {self.foot_joints} out of range for {n} joints")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def bone_lengths(self) -> np.ndarray:
        """Rest length of the bone ending at each non-root joint."""
        return np.linalg.norm(self.offsets[1:], axis=1)


def frame_dim(spec: SkeletonSpec | int) -> int:
    n = spec if isinstance(spec, int) else spec.n_joints
    return 12 * n + 4


def minimal_skeleton() -> SkeletonSpec:
    """Five joints: pelvis, two feet, neck and one hand."""
    offsets = [
        [0.0, 0.0, 0.0],
        [0.1, -0.9, 0.0],
        [-0.1, -0.9, 0.0],
        [0.0, 0.55, 0.0],
        [-0.2, -0.5, 0.1],
    ]
    return SkeletonSpec((0, 0, 0, 0, 3), offsets, (1, 1, 2, 2), ("pelvis", "l_foot", "r_foot", "neck", "r_hand"))


def smpl_like_skeleton() -> SkeletonSpec:
    """A 22-joint body tree with the usual parent layout."""
    parents = (0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
    offsets = [
        [0.0, 0.0, 0.0],
        [0.06, -0.09, 0.0], [-0.06, -0.09, 0.0], [0.0, 0.11, -0.02],
        [0.04, -0.38, 0.0], [-0.04, -0.38, 0.0], [0.0, 0.13, 0.02],
        [-0.01, -0.4, -0.04], [0.01, -0.4, -0.04], [0.0, 0.05, 0.0],
        [0.03, -0.06, 0.12], [-0.03, -0.06, 0.12], [0.0, 0.21, -0.03],
        [0.08, 0.12, -0.01], [-0.08, 0.12, -0.01], [0.0, 0.09, 0.05],
        [0.12, 0.04, -0.02], [-0.12, 0.04, -0.02], [0.26, -0.01, -0.02],
        [-0.26, -0.01, -0.02], [0.25, 0.01, 0.0], [-0.25, 0.01, 0.0],
    ]
    return SkeletonSpec(parents, offsets, (7, 10, 8, 11))


def skeleton_for(n_joints: int) -> SkeletonSpec:
    if n_joints == 5:
        return minimal_skeleton()
    if n_joints == 22:
        return smpl_like_skeleton()
    raise ConfigurationError(f"no built-in skeleton with {n_joints} joints (have 5 and 22)")


# ---------------------------------------------------------------------------
# frame layout


def _check_width(frames: np.ndarray, n_joints: int) -> None:
    if frames.shape[-1] != frame_dim(n_joints):
        raise DimensionError(f"frame width {frames.shape[-1]} does not match {n_joints} joints ({frame_dim(n_joints)})")


def positions(frames: np.ndarray, n_joints: int) -> np.ndarray:
    _check_width(frames, n_joints)
    return frames[..., : 3 * n_joints].reshape(frames.shape[:-1] + (n_joints, 3))


def velocities(frames: np.ndarray, n_joints: int) -> np.ndarray:
    _check_width(frames, n_joints)
    return frames[..., 3 * n_joints: 6 * n_joints].reshape(frames.shape[:-1] + (n_joints, 3))


def rotations6d(frames: np.ndarray, n_joints: int) -> np.ndarray:
    _check_width(frames, n_joints)
    return frames[..., 6 * n_joints: 12 * n_joints].reshape(frames.shape[:-1] + (n_joints, 6))


def contacts(frames: np.ndarray, n_joints: int) -> np.ndarray:
    _check_width(frames, n_joints)
    return frames[..., 12 * n_joints:]


def pack_frames(pos: np.ndarray, rot6d: np.ndarray, contact: np.ndarray) -> np.ndarray:
    """Assemble frames from (L, J, 3) positions, (L, J, 6) rotations and (L, 4) contacts."""
    n = pos.shape[0]
    vel = forward_velocity(pos)
    return np.concatenate([pos.reshape(n, -1), vel.reshape(n, -1), rot6d.reshape(n, -1), contact], axis=1)


def forward_velocity(pos: np.ndarray) -> np.ndarray:
    """v[t] = p[t+1] - p[t]; the last frame repeats the previous velocity."""
    vel = np.zeros_like(pos)
    if pos.shape[0] > 1:
        vel[:-1] = pos[1:] - pos[:-1]
        vel[-1] = vel[-2]
    return vel


# ---------------------------------------------------------------------------
# rotations


def axis_angle_matrix(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; ``angle`` may be an array, giving (..., 3, 3)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=np.float64)[..., None, None]
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def matrix_to_6d(rot: np.ndarray) -> np.ndarray:
    """First two columns, column-major: [c1, c2]."""
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def sixd_to_matrix(r6: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    a1, a2 = r6[..., :3], r6[..., 3:]
    b1 = a1 / np.maximum(np.linalg.norm(a1, axis=-1, keepdims=True), eps)
    a2 = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    b2 = a2 / np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), eps)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def forward_kinematics(spec: SkeletonSpec, root_pos: np.ndarray, local_rot: np.ndarray) -> np.ndarray:
    """Global joint positions from root positions (L, 3) and local rotations (L, J, 3, 3).

    Each joint's global rotation orients the bone from its parent to it.
    """
    n = spec.n_joints
    glob = np.empty_like(local_rot)
    pos = np.empty(root_pos.shape[:-1] + (n, 3))
    glob[..., 0, :, :] = local_rot[..., 0, :, :]
    pos[..., 0, :] = root_pos
    for j in range(1, n):
        par = spec.parents[j]
        glob[..., j, :, :] = glob[..., par, :, :] @ local_rot[..., j, :, :]
        pos[..., j, :] = pos[..., par, :] + glob[..., j, :, :] @ spec.offsets[j]
    return pos


# ---------------------------------------------------------------------------
# contact labels


def foot_contact_labels(frames: np.ndarray, spec: SkeletonSpec, h_max: float = H_MAX, v_max: float = V_MAX) -> np.ndarray:
    """1 where a foot slot's height is below ``h_max`` and its speed below ``v_max``."""
    if h_max <= 0 or v_max <= 0:
        raise UsageError(f"thresholds must be positive, got h_max={h_max}, v_max={v_max}")
    if len(spec.foot_joints) != 4:
        raise ConfigurationError("skeleton defines no foot joints")
    n = spec.n_joints
    feet = list(spec.foot_joints)
    height = positions(frames, n)[..., feet, 1]
    speed = np.linalg.norm(velocities(frames, n)[..., feet, :], axis=-1)
    return ((height < h_max) & (speed < v_max)).astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic pairs


@dataclass
class MotionPair:
    x_a: np.ndarray
    x_b: np.ndarray
    tokens: tuple[int, ...]
    frame_rate: float = 30.0
    valid_length: int | None = None

    def __post_init__(self):
        self.x_a = np.asarray(self.x_a, dtype=np.float64)
        self.x_b = np.asarray(self.x_b, dtype=np.float64)
        self.tokens = tuple(int(t) for t in self.tokens)
        if self.x_a.shape != self.x_b.shape or self.x_a.ndim != 2:
            raise DimensionError(f"persons must be equal-shape (L, F) arrays, got {self.x_a.shape} and {self.x_b.shape}")
        if self.valid_length is None:
            self.valid_length = self.length
        if not 0 <= self.valid_length <= self.length:
            raise DimensionError(f"valid length {self.valid_length} outside [0, {self.length}]")

    @property
    def length(self) -> int:
        return self.x_a.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.length) < self.valid_length

    def __eq__(self, other) -> bool:
        if not isinstance(other, MotionPair):
            return NotImplemented
        return (
            np.array_equal(self.x_a, other.x_a)
            and np.array_equal(self.x_b, other.x_b)
            and self.tokens == other.tokens
            and self.frame_rate == other.frame_rate
            and self.valid_length == other.valid_length
        )


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _root_paths(scenario: str, tau: np.ndarray, rng: np.random.Generator):
    """Ground-plane (x, z) paths and yaw angles for both persons."""
    center = rng.uniform(-0.5, 0.5, 2)
    if scenario == "approach_handshake":
        d0, d1 = 3.0 + rng.uniform(-0.3, 0.3), 0.7 + rng.uniform(-0.1, 0.1)
        lateral = rng.uniform(-0.1, 0.1)
        d = d0 - (d0 - d1) * _smoothstep(tau)
        xa = np.stack([-d / 2, np.full_like(d, lateral)], axis=1)
        xb = np.stack([d / 2, np.full_like(d, -lateral)], axis=1)
        yaw_a, yaw_b = np.full_like(tau, np.pi / 2), np.full_like(tau, -np.pi / 2)
    elif scenario == "circle_around":
        r = 1.0 + rng.uniform(-0.2, 0.2)
        theta = rng.uniform(0, 2 * np.pi) + 2 * np.pi * (0.5 + rng.uniform(0, 0.25)) * tau
        ring = r * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        xa, xb = ring, -ring
        yaw_a = -theta
        yaw_b = -theta + np.pi
    elif scenario == "mirror_dance":
        f = 1.0 + rng.uniform(-0.2, 0.2)
        sway = 0.3 * np.sin(2 * np.pi * f * tau)
        drift = 0.3 * np.sin(4 * np.pi * f * tau)
        xa = np.stack([-0.8 + sway, drift], axis=1)
        xb = np.stack([0.8 - sway, drift], axis=1)
        yaw_a, yaw_b = np.full_like(tau, np.pi / 2), np.full_like(tau, -np.pi / 2)
    elif scenario == "push_retreat":
        push = 0.6 + rng.uniform(-0.1, 0.1)
        back = 0.8 + rng.uniform(-0.1, 0.1)
        xa = np.stack([-1.0 + push * _smoothstep(2 * tau), np.zeros_like(tau)], axis=1)
        xb = np.stack([1.0 + back * _smoothstep(2 * tau - 1), np.zeros_like(tau)], axis=1)
        yaw_a, yaw_b = np.full_like(tau, np.pi / 2), np.full_like(tau, -np.pi / 2)
    else:
        raise UsageError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return xa + center, xb + center, yaw_a, yaw_b


def _person_frames(spec: SkeletonSpec, ground: np.ndarray, yaw: np.ndarray, t: np.ndarray, rng: np.random.Generator, h_max: float, v_max: float) -> np.ndarray:
    n = spec.n_joints
    length = t.shape[0]
    omega = 2 * np.pi / (24.0 * (1.0 + rng.uniform(-0.15, 0.15)))
    root = np.stack([ground[:, 0], 0.9 + 0.02 * np.sin(2 * omega * t), ground[:, 1]], axis=1)
    local = np.empty((length, n, 3, 3))
    local[:, 0] = axis_angle_matrix([0.0, 1.0, 0.0], yaw)
    for j in range(1, n):
        axis = np.array([1.0, 0.0, 0.0]) if j % 2 else np.array([0.0, 0.0, 1.0])
        amp = 0.25 * (1.0 + rng.uniform(-0.2, 0.2))
        phase = np.pi * (j % 2) + rng.uniform(-0.3, 0.3)
        local[:, j] = axis_angle_matrix(axis, amp * np.sin(omega * t + phase))
    pos = forward_kinematics(spec, root, local)
    frames = pack_frames(pos, matrix_to_6d(local), np.zeros((length, 4)))
    frames[:, 12 * n:] = foot_contact_labels(frames, spec, h_max, v_max)
    return frames


def generate_synthetic_pair(
    spec: SkeletonSpec,
    scenario: str,
    length: int,
    seed: int,
    frame_rate: float = 30.0,
    h_max: float = H_MAX,
    v_max: float = V_MAX,
) -> MotionPair:
    """Analytic two-person motion for one scenario, reproducible from ``seed``."""
    if scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if length < 8:
        raise UsageError(f"length must be >= 8, got {length}")
    rng = np.random.default_rng([seed, SCENARIOS.index(scenario)])
    t = np.arange(length, dtype=np.float64)
    tau = t / (length - 1)
    ga, gb, yaw_a, yaw_b = _root_paths(scenario, tau, rng)
    x_a = _person_frames(spec, ga, yaw_a, t, rng, h_max, v_max)
    x_b = _person_frames(spec, gb, yaw_b, t, rng, h_max, v_max)
    return MotionPair(x_a, x_b, SCENARIO_TOKENS[scenario], frame_rate)


def generate_dataset(spec: SkeletonSpec, count: int, length: int, seed: int, scenarios: Sequence[str] = SCENARIOS) -> list[MotionPair]:
    """``count`` pairs cycling through ``scenarios``, pair i seeded by (seed, i)."""
    seeds = np.random.SeedSequence(seed).generate_state(max(count, 1), dtype=np.uint32)
    return [generate_synthetic_pair(spec, scenarios[i % len(scenarios)], length, int(seeds[i])) for i in range(count)]


def walk_cycle(spec: SkeletonSpec, length: int, period: int = 30, stride: float = 0.6, lift: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Frames of an in-place-rooted walk plus the analytic stance mask (L, 4).

    Each foot alternates a planted stance half-period with a swing half-period
    in which it lifts along a sine arc and advances at constant speed. The feet
    are half a period apart.
    """
    n = spec.n_joints
    half = period // 2
    speed = stride / half
    t = np.arange(length)
    root = np.stack([speed * t / 2.0, np.full(length, 0.9), np.zeros(length)], axis=1)
    pos = root[:, None, :] + spec.offsets[None, :, :] * np.array([1.0, 1.0, 1.0])
    stance = np.zeros((length, n), dtype=bool)
    feet = sorted(set(spec.foot_joints))
    for side, j in enumerate(feet):
        phase = (t + side * half) % period
        cycle = (t + side * half) // period
        swing = phase >= half
        s = np.where(swing, phase - half, 0)
        x = cycle * stride + np.where(swing, s * speed, 0.0)
        y = np.where(swing, lift * np.sin(np.pi * s / half), 0.0)
        pos[:, j, 0] = x + spec.offsets[j, 0]
        pos[:, j, 1] = y
        pos[:, j, 2] = spec.offsets[j, 2]
        stance[:, j] = ~swing
    rot = np.tile(matrix_to_6d(np.eye(3)), (length, n, 1))
    truth = stance[:, list(spec.foot_joints)].astype(np.float64)
    return pack_frames(pos, rot, truth), truth


# ---------------------------------------------------------------------------
# dataset files

DATA_MAGIC = b"TIMD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sIIdI")


def save_dataset(path, pairs: Iterable[MotionPair], n_joints: int, frame_rate: float = 30.0, manifest: dict | None = None) -> None:
    """Little-endian header then one record per pair; a JSON manifest is written alongside."""
    pairs = list(pairs)
    width = frame_dim(n_joints)
    parts = [_HEADER.pack(DATA_MAGIC, DATA_VERSION, n_joints, frame_rate, len(pairs))]
    for i, pair in enumerate(pairs):
        if pair.x_a.shape[1] != width:
            raise DimensionError(f"pair {i}: frame width {pair.x_a.shape[1]} does not match {n_joints} joints")
        if pair.frame_rate != frame_rate:
            raise DimensionError(f"pair {i}: frame rate {pair.frame_rate} differs from dataset rate {frame_rate}")
        parts.append(struct.pack("<II", pair.length, len(pair.tokens)))
        parts.append(np.asarray(pair.tokens, dtype="<i4").tobytes())
        parts.append(struct.pack("<I", pair.valid_length))
        parts.append(np.ascontiguousarray(pair.x_a, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(pair.x_b, dtype="<f8").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    info = {"n_joints": n_joints, "frame_rate": frame_rate, "count": len(pairs)}
    info.update(manifest or {})
    path.with_name(path.name + ".json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[list[MotionPair], int]:
    """Read a dataset file; returns the pairs and the joint count."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n_joints, frame_rate, count = _HEADER.unpack_from(buf, 0)
    if magic != DATA_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n_joints < 1:
        raise FormatError(f"invalid joint count {n_joints}", 8)
    width = frame_dim(n_joints)
    pos = _HEADER.size
    pairs = []

    def need(n: int, what: str) -> None:
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)

    for _ in range(count):
        need(8, "pair header")
        length, n_tok = struct.unpack_from("<II", buf, pos)
        if length < 1:
            raise FormatError(f"invalid sequence length {length}", pos)
        pos += 8
        need(4 * n_tok + 4, "token list")
        tokens = tuple(int(x) for x in np.frombuffer(buf, dtype="<i4", count=n_tok, offset=pos))
        pos += 4 * n_tok
        (valid,) = struct.unpack_from("<I", buf, pos)
        if valid > length:
            raise FormatError(f"valid length {valid} exceeds sequence length {length}", pos)
        pos += 4
        n_floats = length * width
        need(16 * n_floats, "frame data")
        x_a = np.frombuffer(buf, dtype="<f8", count=n_floats, offset=pos).reshape(length, width).astype(np.float64)
        pos += 8 * n_floats
        x_b = np.frombuffer(buf, dtype="<f8", count=n_floats, offset=pos).reshape(length, width).astype(np.float64)
        pos += 8 * n_floats
        pairs.append(MotionPair(x_a, x_b, tokens, frame_rate, valid))
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", pos)
    return pairs, n_joints

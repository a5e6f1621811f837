"""Analysis experiments: gradient magnitudes, feature spectra, diversity metrics, parameter counts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .denoiser import DenoiserConfig, count_parameters
from .errors import UsageError
from .seeding import stream
from .temporal import causal_interleave, role_evolving_concat, split_and_merge, symmetric_interleave

# ---------------------------------------------------------------------------
# gradient magnitude: separate cross-attention vs interleaved self-attention


def _attention(x_q, x_kv, w_q, w_k, w_v) -> ad.Tensor:
    d = w_q.shape[1]
    scores = ad.matmul(ad.matmul(x_q, w_q), ad.swapaxes(ad.matmul(x_kv, w_k), -1, -2)) * (1.0 / np.sqrt(d))
    return ad.matmul(ad.softmax(scores, axis=-1), ad.matmul(x_kv, w_v))


def _half_sq(out, target) -> ad.Tensor:
    return ad.sum_(ad.square(out - target)) * 0.5


def separate_outputs(x_a, x_b, weights) -> tuple[ad.Tensor, ad.Tensor]:
    """Scheme I: each person attends to the other with shared projections."""
    return _attention(x_a, x_b, *weights), _attention(x_b, x_a, *weights)


def interleaved_outputs(x_a, x_b, weights) -> tuple[ad.Tensor, ad.Tensor]:
    """Scheme II: self-attention over both interleavings concatenated on channels.

    Weights act on the 2d-wide concatenation; the per-person outputs come back
    through the split-and-sum of the two branches.
    """
    x = role_evolving_concat(causal_interleave(x_a, x_b), symmetric_interleave(x_a, x_b))
    return split_and_merge(_attention(x, x, *weights))


def scheme_grad_norms(x_a, x_b, y_a, y_b, w_q, w_k, w_v) -> tuple[float, float]:
    """Squared Frobenius norms of the loss gradient over all projections, schemes I and II.

    Scheme II starts from block-diagonal copies of the Scheme I matrices so
    both act identically on each person's channels at initialization.
    """
    w1 = [ad.Tensor(np.array(w, dtype=np.float64), requires_grad=True) for w in (w_q, w_k, w_v)]
    out_a, out_b = separate_outputs(x_a, x_b, w1)
    g1 = ad.gradients(_half_sq(out_a, y_a) + _half_sq(out_b, y_b), w1)
    w2 = [ad.Tensor(np.kron(np.eye(2), w), requires_grad=True) for w in (w_q, w_k, w_v)]
    out_a, out_b = interleaved_outputs(x_a, x_b, w2)
    g2 = ad.gradients(_half_sq(out_a, y_a) + _half_sq(out_b, y_b), w2)
    return float(sum((g**2).sum() for g in g1)), float(sum((g**2).sum() for g in g2))


@dataclass
class GradNormReport:
    norms: np.ndarray  # (trials, 2): scheme I, scheme II
    seed: int
    orthonormal: bool

    @property
    def trials(self) -> int:
        return len(self.norms)

    @property
    def fraction(self) -> float:
        return float(np.mean(self.norms[:, 1] > self.norms[:, 0])) if self.trials else 0.0

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.norms[:, 1] / self.norms[:, 0]))

    def to_dict(self) -> dict:
        return {"trials": self.trials, "seed": self.seed, "orthonormal": self.orthonormal, "fraction": self.fraction, "mean_ratio": self.mean_ratio}


def _trial_inputs(rng: np.random.Generator, length: int, d: int, orthonormal: bool):
    x_a = rng.standard_normal((length, d))
    x_b = rng.standard_normal((length, d))
    if orthonormal:
        if 2 * length > d:
            raise UsageError(f"orthonormal inputs need 2L <= d, got L={length}, d={d}")
        q, _ = np.linalg.qr(np.vstack([x_a, x_b]).T)
        x_a, x_b = q.T[:length], q.T[length:]
    else:
        x_a /= np.linalg.norm(x_a, axis=1, keepdims=True)
        x_b /= np.linalg.norm(x_b, axis=1, keepdims=True)
    weights = [rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(3)]
    y_a = rng.standard_normal((length, d))
    y_b = rng.standard_normal((length, d))
    return x_a, x_b, y_a, y_b, weights


def gradient_norm_experiment(length: int = 8, d: int = 16, trials: int = 500, seed: int = 0, orthonormal: bool = False) -> GradNormReport:
    """Paired trials: both schemes see the same inputs, targets and initial projections."""
    if not (1 <= length <= 16 and 1 <= d <= 32):
        raise UsageError(f"experiment is sized for L <= 16 and d <= 32, got L={length}, d={d}")
    norms = np.empty((trials, 2))
    for i in range(trials):
        x_a, x_b, y_a, y_b, w = _trial_inputs(stream(seed, i), length, d, orthonormal)
        norms[i] = scheme_grad_norms(x_a, x_b, y_a, y_b, *w)
    return GradNormReport(norms, seed, orthonormal)


def write_gradnorm_csv(path, report: GradNormReport) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "norm_separate", "norm_interleaved"])
        for i, (a, b) in enumerate(report.norms):
            writer.writerow([i, repr(float(a)), repr(float(b))])


# ---------------------------------------------------------------------------
# spectrum


@dataclass
class SpectrumReport:
    magnitudes: np.ndarray  # (bins, C), each channel scaled to max 1
    frequencies: np.ndarray  # bin frequency as a fraction of Nyquist
    proportion: float
    cutoff: float


def spectrum_analysis(features, cutoff: float = 0.5) -> SpectrumReport:
    """Share of spectral magnitude above ``cutoff`` (fraction of Nyquist), averaged over channels.

    For each channel: magnitudes of the real DFT along time, scaled to a
    maximum of one; the share is the magnitude summed over bins above the
    cutoff divided by the magnitude summed over all bins. All-zero channels
    contribute zero.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    length = x.shape[0]
    if length < 8:
        raise UsageError(f"spectrum needs at least 8 frames, got {length}")
    if not 0.0 <= cutoff < 1.0:
        raise UsageError(f"cutoff must lie in [0, 1), got {cutoff}")
    mag = np.abs(np.fft.rfft(x, axis=0))
    freqs = np.arange(mag.shape[0]) / (length / 2.0)
    peak = mag.max(axis=0)
    safe = np.where(peak > 0, peak, 1.0)
    mag = mag / safe
    total = mag.sum(axis=0)
    high = mag[freqs > cutoff].sum(axis=0)
    share = np.where(total > 0, high / np.where(total > 0, total, 1.0), 0.0)
    return SpectrumReport(mag, freqs, float(share.mean()), cutoff)


def mean_high_frequency(feature_sets: Sequence[np.ndarray], cutoff: float = 0.5) -> float:
    return float(np.mean([spectrum_analysis(f, cutoff).proportion for f in feature_sets]))


def model_features(model, motions: Sequence, t: int = 1) -> list[np.ndarray]:
    """Final-block outputs (before the output projection) for each person of each pair."""
    x_a = np.stack([m.x_a for m in motions])
    x_b = np.stack([m.x_b for m in motions])
    tokens = [m.tokens for m in motions]
    with ad.no_grad():
        _, _, (h_a, h_b) = model(x_a, x_b, np.full(len(motions), t), tokens, return_features=True)
    return [f for pair in zip(h_a.data, h_b.data) for f in pair]


def write_spectrum_csv(path, report: SpectrumReport) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "frequency", *(f"ch{c}" for c in range(report.magnitudes.shape[1]))])
        for k, row in enumerate(report.magnitudes):
            writer.writerow([k, repr(float(report.frequencies[k])), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# diversity


def _canonical(motions) -> np.ndarray:
    """Flatten to (N, D) and sort rows so the result ignores input order."""
    motions = list(motions)
    if not motions:
        return np.zeros((0, 0))
    v = np.asarray([np.asarray(m, dtype=np.float64).reshape(-1) for m in motions])
    if v.ndim != 2:
        raise UsageError("motions must share one shape")
    order = np.lexsort(v.T[::-1])
    return v[order]


def _paired_distance_sum(v: np.ndarray, count: int, rng: np.random.Generator) -> float:
    pick = rng.permutation(len(v))[: 2 * count]
    first, second = v[pick[:count]], v[pick[count:]]
    return float(np.sqrt(((first - second) ** 2).sum(axis=1)).sum())


def diversity_metric(motions, subset: int, seed: int = 0) -> float:
    """Mean distance between two disjoint random subsets of ``subset`` motions each."""
    v = _canonical(motions)
    if subset < 1 or len(v) < 2 * subset:
        raise UsageError(f"diversity needs at least {2 * subset} motions, got {len(v)}")
    return _paired_distance_sum(v, subset, stream(seed, 0)) / subset


def mmodality_metric(groups, subset: int, seed: int = 0) -> float:
    """Mean within-group distance between disjoint random subsets, over all groups."""
    groups = list(groups)
    if not groups:
        raise UsageError("mmodality needs at least one group")
    total = 0.0
    for c, group in enumerate(groups):
        v = _canonical(group)
        if subset < 1 or len(v) < 2 * subset:
            raise UsageError(f"group {c} needs at least {2 * subset} motions, got {len(v)}")
        total += _paired_distance_sum(v, subset, stream(seed, c + 1))
    return total / (len(groups) * subset)


# ---------------------------------------------------------------------------
# parameter accounting

SCHEMES = ("separate", "cii", "cii+res", "cii+res+lpa")


def scheme_config(base: DenoiserConfig, scheme: str, mixing_width: int) -> DenoiserConfig:
    """Config for one ablation scheme with the interaction mixer at ``mixing_width`` channels.

    Role-evolving schemes feed the mixer two concatenated branches, so their
    per-person width is half the mixing width.
    """
    if scheme == "separate":
        return replace(base, backend="attention", temporal="separate", use_lpa=False, width=mixing_width)
    if scheme == "cii":
        return replace(base, temporal="cii", use_lpa=False, width=mixing_width)
    if mixing_width % 2:
        raise UsageError(f"mixing width {mixing_width} must be even for the role-evolving schemes")
    return replace(base, temporal="res", use_lpa=scheme == "cii+res+lpa", width=mixing_width // 2)


def compare_schemes(base: DenoiserConfig = DenoiserConfig(), mixing_width: int | None = None) -> list[tuple[str, int]]:
    width = mixing_width or base.mixing_width
    return [(s, count_parameters(scheme_config(base, s, width))) for s in SCHEMES]


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

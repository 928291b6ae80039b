"""Drift-field construction and the fixed-point regression loss.

The geometry is built entirely from detached hypotheses and references, so
everything up to the regression target is plain float64 numpy: pairwise
distances, a weighted global scale, symmetric affinities per temperature,
mass-balanced signed coefficients, per-scale forces, RMS normalization and
the aggregated field.  Gradients enter only through the squared regression
of the live hypothesis tensor onto the detached target, with the global
scale treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, square, stop_gradient

DEFAULT_TEMPERATURES = (0.2,)
MULTISCALE_TEMPERATURES = (0.02, 0.05, 0.2)

LOSS_MODES = ("chunk", "step_wise")


class DriftConfigError(ValueError):
    """Invalid drift-field configuration or pool construction."""


@dataclass(frozen=True)
class DriftConfig:
    """Geometry and loss-mode knobs for drift-field training."""

    hypothesis_count: int = 4
    temperatures: tuple[float, ...] = DEFAULT_TEMPERATURES
    negative_count: int = 0
    positive_count: int = 1
    scale_floor: float = 1e-6
    force_floor: float = 1e-6
    loss_mode: str = "chunk"

    def __post_init__(self):
        if self.hypothesis_count < 1:
            raise DriftConfigError("hypothesis_count must be positive")
        if not self.temperatures:
            raise DriftConfigError("at least one temperature required")
        if any(t <= 0 for t in self.temperatures):
            raise DriftConfigError("temperatures must be positive")
        if len(set(self.temperatures)) != len(self.temperatures):
            raise DriftConfigError("temperatures must be distinct")
        if self.negative_count < 0:
            raise DriftConfigError("negative_count must be non-negative")
        if self.positive_count < 1:
            raise DriftConfigError("positive_count must be positive")
        if self.scale_floor <= 0 or self.force_floor <= 0:
            raise DriftConfigError("floors must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise DriftConfigError(f"loss_mode must be one of {LOSS_MODES}")

    @property
    def pool_size(self) -> int:
        return self.hypothesis_count + self.negative_count + self.positive_count


@dataclass
class HypothesisBatch:
    """Generated hypotheses (B, G, S): the live tensor and its detached copy."""

    values: Tensor
    detached: np.ndarray

    @classmethod
    def from_values(cls, values: Tensor) -> "HypothesisBatch":
        if values.data.ndim != 3:
            raise DriftConfigError(f"hypotheses must be (B, G, S), got {values.shape}")
        return cls(values=values, detached=stop_gradient(values).data)


@dataclass
class ReferencePool:
    """Reference tensor (B, U, S) with weights and the signed index partition.

    The first G references are always the detached hypotheses (repulsive
    side), optionally followed by explicit negatives, then the positives.
    """

    refs: np.ndarray
    weights: np.ndarray
    negative_indices: np.ndarray
    positive_indices: np.ndarray


def build_reference_pool(batch: HypothesisBatch, positives: np.ndarray,
                         negatives: np.ndarray | None = None,
                         weights: np.ndarray | None = None) -> ReferencePool:
    """Assemble [detached hypotheses, negatives, positives] along the pool axis."""
    det = batch.detached
    b, g, s = det.shape
    positives = np.asarray(positives, dtype=np.float64)
    if positives.ndim != 3 or positives.shape[0] != b or positives.shape[2] != s:
        raise DriftConfigError(f"positives must be (B, C_p, S), got {positives.shape}")
    if positives.shape[1] < 1:
        raise DriftConfigError("positive reference set must be non-empty")
    parts = [det]
    c_n = 0
    if negatives is not None:
        negatives = np.asarray(negatives, dtype=np.float64)
        if negatives.ndim != 3 or negatives.shape[0] != b or negatives.shape[2] != s:
            raise DriftConfigError(f"negatives must be (B, C_n, S), got {negatives.shape}")
        c_n = negatives.shape[1]
        if c_n:
            parts.append(negatives)
    parts.append(positives)
    refs = np.concatenate(parts, axis=1)
    u = refs.shape[1]
    if weights is None:
        weights = np.ones((b, u), dtype=np.float64)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (b, u):
            raise DriftConfigError(f"weights must be (B, U)=({b}, {u}), got {weights.shape}")
        if np.any(weights < 0):
            raise DriftConfigError("weights must be non-negative")
    return ReferencePool(
        refs=refs,
        weights=weights,
        negative_indices=np.arange(g + c_n),
        positive_indices=np.arange(g + c_n, u),
    )


@dataclass
class DriftFieldTensors:
    """All intermediates of one drift-field evaluation, for diagnostics and tests."""

    distances: np.ndarray
    scale: float
    affinities: dict[float, np.ndarray] = field(default_factory=dict)
    coefficients: dict[float, np.ndarray] = field(default_factory=dict)
    forces: dict[float, np.ndarray] = field(default_factory=dict)
    aggregate: np.ndarray | None = None
    target: np.ndarray | None = None


# -- geometry (gradient-free) -------------------------------------------


def pairwise_distances(detached: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Euclidean distance between every hypothesis (i, r) and reference (i, u)."""
    detached = np.asarray(detached, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if detached.ndim != 3 or refs.ndim != 3:
        raise DriftConfigError("pairwise_distances expects 3-d inputs")
    if detached.shape[0] != refs.shape[0] or detached.shape[2] != refs.shape[2]:
        raise DriftConfigError(
            f"batch/space mismatch: {detached.shape} vs {refs.shape}")
    diff = detached[:, :, None, :] - refs[:, None, :, :]
    return np.sqrt(np.square(diff).sum(axis=-1))


def global_scale(distances: np.ndarray, weights: np.ndarray, scale_floor: float) -> float:
    """Weighted mean distance with a floor.

    Each reference weight is counted once per (i, u), so the distance average
    over (i, r, u) divides by G times the weight mass.
    """
    g = distances.shape[1]
    wsum = float(weights.sum())
    if wsum <= 0.0:
        raise DriftConfigError("reference weights have zero total mass")
    raw = float((distances * weights[:, None, :]).sum() / (g * wsum))
    return max(raw, scale_floor)


def symmetric_affinity(distances: np.ndarray, scale: float, temperature: float,
                       weights: np.ndarray) -> np.ndarray:
    """Geometric mean of the reference-axis and hypothesis-axis softmaxes.

    Both softmaxes are taken over the same normalized logits -d/(R*scale);
    the per-reference weight multiplies the affinity post hoc.
    """
    logits = -(distances / scale) / temperature
    s_u = _softmax_np(logits, axis=2)
    s_r = _softmax_np(logits, axis=1)
    return np.sqrt(s_u * s_r) * weights[:, None, :]


def _softmax_np(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def balanced_coefficients(affinity: np.ndarray, negative_indices: np.ndarray,
                          positive_indices: np.ndarray) -> np.ndarray:
    """Signed coefficients with cross-side mass balancing.

    Negative-side entries get -A * S_plus, positive-side entries +A * S_minus,
    so the two sides exchange exactly opposite total mass per hypothesis.
    """
    if len(positive_indices) == 0:
        raise DriftConfigError("positive index set is empty")
    s_minus = affinity[:, :, negative_indices].sum(axis=2, keepdims=True)
    s_plus = affinity[:, :, positive_indices].sum(axis=2, keepdims=True)
    alpha = np.empty_like(affinity)
    alpha[:, :, negative_indices] = -affinity[:, :, negative_indices] * s_plus
    alpha[:, :, positive_indices] = affinity[:, :, positive_indices] * s_minus
    return alpha


def per_scale_force(alpha: np.ndarray, refs: np.ndarray, detached: np.ndarray,
                    scale: float) -> np.ndarray:
    """Coefficient-weighted sum of scale-normalized displacements toward references."""
    disp = (refs[:, None, :, :] - detached[:, :, None, :]) / scale
    return np.einsum("bgu,bgud->bgd", alpha, disp)


def rms_normalize(force: np.ndarray, force_floor: float) -> np.ndarray:
    """Divide by the RMS of per-(i, r) force norms, floored to avoid blowup."""
    mean_sq = float(np.square(force).sum(axis=-1).mean())
    return force / np.sqrt(mean_sq + force_floor)


def aggregate_and_target(forces: list[np.ndarray], detached: np.ndarray,
                         scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Sum the normalized per-temperature forces and build the detached target."""
    if not forces:
        raise DriftConfigError("at least one per-temperature force required")
    aggregate = forces[0].copy()
    for f in forces[1:]:
        aggregate += f
    target = detached / scale + aggregate
    return aggregate, target


def compute_drift_field(detached: np.ndarray, pool: ReferencePool,
                        config: DriftConfig) -> DriftFieldTensors:
    """Run the full geometry pipeline on one (B, G, S) / (B, U, S) instance."""
    d = pairwise_distances(detached, pool.refs)
    scale = global_scale(d, pool.weights, config.scale_floor)
    out = DriftFieldTensors(distances=d, scale=scale)
    normalized = []
    for temp in config.temperatures:
        aff = symmetric_affinity(d, scale, temp, pool.weights)
        alpha = balanced_coefficients(aff, pool.negative_indices, pool.positive_indices)
        force = per_scale_force(alpha, pool.refs, detached, scale)
        out.affinities[temp] = aff
        out.coefficients[temp] = alpha
        out.forces[temp] = force
        normalized.append(rms_normalize(force, config.force_floor))
    out.aggregate, out.target = aggregate_and_target(normalized, detached, scale)
    return out


# -- regression loss (gradient-carrying) ---------------------------------


def fixed_point_loss(values: Tensor, target: np.ndarray, scale: float, mode: str = "chunk") -> Tensor:
    """Mean squared gap between scale-normalized hypotheses and the frozen target.

    Equals the sample average of the per-sample losses; in the forward pass the
    value reduces to the mean squared drift magnitude because the target is the
    detached hypotheses plus the drift.
    """
    if mode not in LOSS_MODES:
        raise DriftConfigError(f"unknown loss mode {mode!r}")
    if values.shape != target.shape:
        raise DriftConfigError(f"values {values.shape} vs target {target.shape}")
    return square(values / scale - Tensor(target)).mean()


def drift_loss(batch: HypothesisBatch, positives: np.ndarray, config: DriftConfig,
               negatives: np.ndarray | None = None,
               weights: np.ndarray | None = None,
               slice_width: int | None = None):
    """Drift-field regression loss for one minibatch.

    Chunk mode runs one pipeline over the flattened chunk space.  Step-wise
    mode runs an independent pipeline on every ``slice_width``-sized time
    slice of the flattened chunk and averages the per-slice losses over the
    horizon.  Returns the scalar loss and the field tensors (one per slice in
    step-wise mode).
    """
    if config.loss_mode == "chunk":
        pool = build_reference_pool(batch, positives, negatives, weights)
        fld = compute_drift_field(batch.detached, pool, config)
        return fixed_point_loss(batch.values, fld.target, fld.scale, "chunk"), fld

    if slice_width is None or slice_width < 1:
        raise DriftConfigError("step_wise mode requires a positive slice_width")
    s_total = batch.values.shape[2]
    d_a = slice_width
    if s_total % d_a != 0:
        raise DriftConfigError(
            f"chunk width {s_total} is not a multiple of slice width {d_a}")
    horizon = s_total // d_a
    total = None
    fields = []
    for h in range(horizon):
        lo, hi = h * d_a, (h + 1) * d_a
        sl = HypothesisBatch(values=batch.values[:, :, lo:hi],
                             detached=batch.detached[:, :, lo:hi])
        neg = negatives[:, :, lo:hi] if negatives is not None else None
        pool = build_reference_pool(sl, positives[:, :, lo:hi], neg, weights)
        fld = compute_drift_field(sl.detached, pool, config)
        piece = fixed_point_loss(sl.values, fld.target, fld.scale, "step_wise")
        fields.append(fld)
        total = piece if total is None else total + piece
    return total / horizon, fields

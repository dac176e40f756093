"""Two-class MAP partial-volume estimation.

A voxel intensity is modeled as f = sum_k p_k * c_k + noise with Gaussian
noise of standard deviation sigma, and at most two classes mixing per
voxel: the voxel's own label and the spatially nearest different tissue
class. Writing the mixing fraction of the first class as alpha, the
negative log posterior (up to constants) is

    J(alpha) = (f - alpha*c_a - (1 - alpha)*c_b)^2 / (2 sigma^2)
               - 2 beta (alpha - 0.5)^2

because the pure-tissue prior exp(beta (p - 0.5)^2) applies to both active
fractions and (alpha - 0.5)^2 = ((1 - alpha) - 0.5)^2. Positive beta favors
pure tissue. The MAP alpha is found exactly by comparing J at the endpoints
{0, 1} and, when the quadratic coefficient d^2/(2 sigma^2) - 2 beta is
strictly positive (d = c_a - c_b), at the clamped stationary point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import (
    ArgumentError,
    DegeneratePairError,
    EstimationError,
    GeometryError,
)
from . import tissues
from .volumes import (
    LabelVolume,
    PartialVolumeSet,
    ScalarVolume,
    require_same_header,
)

SIGMA_FLOOR_FRACTION = 1e-3  # of the image intensity range


@dataclass(frozen=True)
class PvConfig:
    """Estimator knobs.

    beta is a dimensionless prior weight; at estimation time the absolute
    weight entering J is beta / (2 sigma_hat^2), so its effect is invariant
    to the intensity scale. grid_oracle_step only parameterizes the brute
    force grid used by verification tests.
    """

    beta: float = 0.1
    sigma_mode: str = "pooled"
    grid_oracle_step: float = 1e-4

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise ArgumentError("beta must be finite")
        if self.sigma_mode not in ("pooled", "per-class-min"):
            raise ArgumentError(f"unknown sigma_mode {self.sigma_mode!r}")
        if not 0 < self.grid_oracle_step <= 0.01:
            raise ArgumentError("grid_oracle_step must be in (0, 0.01]")


@dataclass
class PvModel:
    """Per-image mixture parameters: class means, noise level, second classes."""

    class_means: np.ndarray
    noise_sigma: float
    second_class: LabelVolume


def class_means(image: ScalarVolume, labels: LabelVolume) -> np.ndarray:
    """Mean intensity per tissue class, estimated from the hard segmentation.

    Raises EstimationError naming the first class with no voxels.
    """
    require_same_header(image, labels)
    means = np.empty(labels.num_classes, dtype=np.float64)
    data = image.data.astype(np.float64)
    for k in range(1, labels.num_classes + 1):
        sel = labels.data == k
        if not sel.any():
            raise EstimationError(f"class {tissues.class_name(k)} ({k}) has no voxels")
        means[k - 1] = data[sel].mean()
    return means


def present_class_means(image: ScalarVolume, labels: LabelVolume) -> np.ndarray:
    """Like class_means but absent classes get a 0.0 placeholder."""
    means = np.zeros(labels.num_classes, dtype=np.float64)
    data = image.data.astype(np.float64)
    for k in range(1, labels.num_classes + 1):
        sel = labels.data == k
        if sel.any():
            means[k - 1] = data[sel].mean()
    return means


def noise_sigma(
    image: ScalarVolume,
    labels: LabelVolume,
    means: np.ndarray,
    mode: str = "pooled",
) -> float:
    """Noise scale from residuals against per-class means.

    "pooled" takes the RMS residual over all non-background voxels;
    "per-class-min" takes the smallest per-class RMS residual. Either way
    the result is floored at SIGMA_FLOOR_FRACTION of the intensity range so
    noiseless images do not produce a degenerate likelihood.
    """
    require_same_header(image, labels)
    data = image.data.astype(np.float64)
    mask = labels.data > 0
    if not mask.any():
        raise EstimationError("no non-background voxels")
    residuals = data[mask] - np.asarray(means, dtype=np.float64)[labels.data[mask] - 1]
    if mode == "pooled":
        sigma = float(np.sqrt(np.mean(residuals**2)))
    elif mode == "per-class-min":
        lab = labels.data[mask]
        per_class = [
            float(np.sqrt(np.mean(residuals[lab == k] ** 2)))
            for k in range(1, labels.num_classes + 1)
            if (lab == k).any()
        ]
        sigma = min(per_class)
    else:
        raise ArgumentError(f"unknown sigma mode {mode!r}")
    floor = SIGMA_FLOOR_FRACTION * float(data.max() - data.min())
    return max(sigma, floor, np.finfo(np.float64).tiny)


def second_class_map(labels: LabelVolume) -> LabelVolume:
    """Per voxel, the label of the nearest different non-background class.

    Distances are anisotropic Euclidean using the header voxel size;
    exact-distance ties resolve to the smaller class index. Background
    voxels map to 0.
    """
    present = [k for k in range(1, labels.num_classes + 1) if (labels.data == k).any()]
    if len(present) < 2:
        raise GeometryError(f"need at least two tissue classes, found {len(present)}")
    sampling = labels.header.voxel_size
    dist = np.empty((len(present),) + labels.header.dims, dtype=np.float64)
    for i, k in enumerate(present):
        dist[i] = distance_transform_edt(labels.data != k, sampling=sampling)
    # a voxel may not pick its own class
    for i, k in enumerate(present):
        dist[i][labels.data == k] = np.inf
    nearest = np.asarray(present, dtype=np.uint8)[dist.argmin(axis=0)]
    nearest[labels.data == 0] = 0
    return LabelVolume(labels.header, nearest, num_classes=labels.num_classes)


def _objective(alpha, f, c_a, c_b, sigma, beta):
    r = f - alpha * c_a - (1.0 - alpha) * c_b
    return r * r / (2.0 * sigma * sigma) - 2.0 * beta * (alpha - 0.5) ** 2


def _map_alpha_arrays(f, c_a, c_b, sigma, beta):
    """Vectorized MAP mixing fraction; inputs broadcast as float64 arrays."""
    f = np.asarray(f, dtype=np.float64)
    c_a = np.asarray(c_a, dtype=np.float64)
    c_b = np.asarray(c_b, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)

    d = c_a - c_b
    sig2 = sigma * sigma
    curvature = d * d / sig2 - 4.0 * beta  # twice the quadratic coefficient of J

    # candidates in descending alpha; strict improvement keeps the larger
    # alpha on ties, as required
    best_alpha = np.ones(np.broadcast(f, c_a, c_b, sigma, beta).shape)
    best_j = _objective(best_alpha, f, c_a, c_b, sigma, beta)

    with np.errstate(divide="ignore", invalid="ignore"):
        stationary = (d * (f - c_b) / sig2 - 2.0 * beta) / curvature
    stationary = np.clip(stationary, 0.0, 1.0)
    convex = curvature > 0
    j_st = _objective(stationary, f, c_a, c_b, sigma, beta)
    take = convex & (j_st < best_j)
    best_alpha = np.where(take, stationary, best_alpha)
    best_j = np.where(take, j_st, best_j)

    j0 = _objective(0.0, f, c_a, c_b, sigma, beta)
    take = j0 < best_j
    best_alpha = np.where(take, 0.0, best_alpha)
    return best_alpha


def map_alpha(f: float, c_a: float, c_b: float, sigma: float, beta: float) -> float:
    """MAP estimate of the first-class fraction for a single voxel.

    Returns argmin over [0, 1] of J(alpha) as defined in the module
    docstring, breaking exact ties toward the larger alpha.
    """
    if sigma <= 0 or not np.isfinite(sigma):
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    if c_a == c_b:
        raise DegeneratePairError(f"class means coincide at {c_a}")
    return float(_map_alpha_arrays(f, c_a, c_b, sigma, beta))


def build_pv_model(image: ScalarVolume, labels: LabelVolume, cfg: PvConfig) -> PvModel:
    """Estimate class means, noise sigma and the second-class geometry."""
    require_same_header(image, labels)
    means = present_class_means(image, labels)
    sigma = noise_sigma(image, labels, means, mode=cfg.sigma_mode)
    second = second_class_map(labels)
    return PvModel(class_means=means, noise_sigma=sigma, second_class=second)


def estimate_pv(image: ScalarVolume, labels: LabelVolume, cfg: PvConfig) -> PartialVolumeSet:
    """Full per-voxel two-class MAP partial volume estimation.

    At each non-background voxel the first class is the voxel's label and
    the second class the nearest different class; their fractions are
    (alpha, 1 - alpha) with alpha the MAP mixing fraction. Background
    voxels get all-zero fractions.
    """
    model = build_pv_model(image, labels, cfg)
    sigma = model.noise_sigma
    beta_abs = cfg.beta / (2.0 * sigma * sigma)

    mask = labels.data > 0
    idx = np.flatnonzero(mask)
    first = labels.data.reshape(-1)[idx].astype(np.int64)
    second = model.second_class.data.reshape(-1)[idx].astype(np.int64)
    c_a = model.class_means[first - 1]
    c_b = model.class_means[second - 1]
    coincide = c_a == c_b
    if coincide.any():
        pairs = {(int(a), int(b)) for a, b in zip(first[coincide], second[coincide])}
        raise DegeneratePairError(f"classes with identical means: {sorted(pairs)}")
    f = image.data.reshape(-1)[idx].astype(np.float64)
    alpha = _map_alpha_arrays(f, c_a, c_b, sigma, beta_abs)

    channels = np.zeros((labels.num_classes, labels.header.n_voxels), dtype=np.float32)
    channels[first - 1, idx] = alpha
    channels[second - 1, idx] = 1.0 - alpha
    channels = channels.reshape((labels.num_classes,) + labels.header.dims)
    return PartialVolumeSet(labels.header, channels)

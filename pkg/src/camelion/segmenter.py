"""Trainable segmentation backends: intensity image in, labels plus
per-class posteriors out.

The reference backend is a Gaussian intensity classifier with a spatial
atlas prior: class k contributes N(f; mu_k, sigma_k^2) * pi_k(j), where pi
is the smoothed per-voxel label frequency across the atlases. Training is
exact and fast, which matters because the adaptation loop retrains the
segmenter on every iteration. The backend interface (train / predict /
warm_start plus serialization) is what an iterative network backend would
have to provide to drop in.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import tissues
from .errors import ArgumentError, FormatError, PersistenceError, TrainingError
from .volumes import (
    AtlasPair,
    LabelVolume,
    PartialVolumeSet,
    ScalarVolume,
    VolumeHeader,
    decode_mvf,
    encode_mvf,
    require_same_header,
)

GAUSSIAN_BACKEND = "gaussian"
PRIOR_SMOOTH_RADIUS = 3            # box filter radius in voxels
VARIANCE_FLOOR_FRACTION = 1e-4     # of the squared global intensity range

_SEGM_MAGIC = b"SEGM"
_BACKEND_CODES = {GAUSSIAN_BACKEND: 1}
_BACKEND_NAMES = {v: k for k, v in _BACKEND_CODES.items()}


@dataclass(frozen=True)
class SegmenterConfig:
    prior_epsilon: float = 1e-6
    smoothing_weight: float = 0.5

    def __post_init__(self):
        if not 0 < self.prior_epsilon < 1:
            raise ArgumentError(f"prior_epsilon must be in (0, 1), got {self.prior_epsilon}")
        if self.smoothing_weight < 0:
            raise ArgumentError(f"smoothing_weight must be >= 0, got {self.smoothing_weight}")


@dataclass
class SegmenterModel:
    """Per-class intensity statistics plus the spatial prior stack."""

    backend: str
    header: VolumeHeader
    means: np.ndarray          # (K,) float64
    variances: np.ndarray      # (K,) float64, all > 0
    prior: np.ndarray          # (K, *dims) float32, channel sums <= 1
    prior_epsilon: float
    smoothing_weight: float

    @property
    def num_classes(self) -> int:
        return self.prior.shape[0]

    @property
    def brain_mask(self) -> np.ndarray:
        return self.prior.any(axis=0)


@dataclass
class SegOutput:
    """Hard labels with the posterior stack they were taken from.

    labels is always the per-voxel argmax of posteriors (ties to the
    smaller class); out_of_prior counts voxels with positive intensity that
    were forced to background because no atlas prior covers them.
    """

    labels: LabelVolume
    posteriors: np.ndarray
    out_of_prior: int


def label_frequency(atlas_labels: list[LabelVolume]) -> np.ndarray:
    """Per-voxel fraction of atlases carrying each class (no smoothing)."""
    if not atlas_labels:
        raise ArgumentError("need at least one atlas")
    header = require_same_header(*atlas_labels)
    k_max = atlas_labels[0].num_classes
    freq = np.zeros((k_max,) + header.dims, dtype=np.float32)
    for lab in atlas_labels:
        if lab.num_classes != k_max:
            raise ArgumentError("atlases disagree on the number of classes")
        for k in range(1, k_max + 1):
            freq[k - 1] += lab.data == k
    freq /= len(atlas_labels)
    return freq


def train(atlases: list[AtlasPair], cfg: SegmenterConfig) -> SegmenterModel:
    """Fit the Gaussian backend on atlas image/label pairs.

    Class statistics are pooled over every atlas voxel of the class; the
    spatial prior is the cross-atlas label frequency, box-smoothed, floored
    at prior_epsilon inside the brain mask (union of non-background atlas
    voxels) and zero outside it. Per-atlas partial sums are reduced in
    sorted order, so the result is invariant to atlas ordering.
    """
    if not atlases:
        raise ArgumentError("need at least one atlas")
    header = require_same_header(*(a.image for a in atlases), *(a.labels for a in atlases))
    k_max = atlases[0].labels.num_classes

    counts = np.zeros((len(atlases), k_max), dtype=np.float64)
    sums = np.zeros((len(atlases), k_max), dtype=np.float64)
    sq_sums = np.zeros((len(atlases), k_max), dtype=np.float64)
    lo = np.empty(len(atlases))
    hi = np.empty(len(atlases))
    for i, pair in enumerate(atlases):
        data = pair.image.data.astype(np.float64)
        lo[i], hi[i] = data.min(), data.max()
        for k in range(1, k_max + 1):
            sel = pair.labels.data == k
            if sel.any():
                vals = data[sel]
                counts[i, k - 1] = vals.size
                sums[i, k - 1] = vals.sum()
                sq_sums[i, k - 1] = np.sum(vals * vals)

    total = np.sort(counts, axis=0).sum(axis=0)
    for k in range(k_max):
        if total[k] == 0:
            raise TrainingError(
                f"class {tissues.class_name(k + 1)} ({k + 1}) absent from all atlases"
            )
    mean = np.sort(sums, axis=0).sum(axis=0) / total
    var = np.sort(sq_sums, axis=0).sum(axis=0) / total - mean**2
    intensity_range = float(hi.max() - lo.min())
    floor = VARIANCE_FLOOR_FRACTION * intensity_range**2
    var = np.maximum(var, max(floor, np.finfo(np.float64).tiny))

    freq = label_frequency([a.labels for a in atlases])
    size = 2 * PRIOR_SMOOTH_RADIUS + 1
    prior = np.empty_like(freq)
    for k in range(k_max):
        prior[k] = uniform_filter(freq[k], size=size, mode="constant")
    np.clip(prior, 0.0, 1.0, out=prior)

    mask = np.zeros(header.dims, dtype=bool)
    for pair in atlases:
        mask |= pair.labels.data > 0
    prior = np.where(mask, np.maximum(prior, np.float32(cfg.prior_epsilon)), 0.0).astype(np.float32)
    channel_sum = prior.sum(axis=0)
    over = channel_sum > 1.0
    if over.any():
        prior = np.where(over, prior / np.maximum(channel_sum, 1.0), prior)

    return SegmenterModel(
        backend=GAUSSIAN_BACKEND,
        header=header,
        means=mean,
        variances=var,
        prior=np.ascontiguousarray(prior, dtype=np.float32),
        prior_epsilon=cfg.prior_epsilon,
        smoothing_weight=cfg.smoothing_weight,
    )


def _neighbor_counts(labels: np.ndarray, k_max: int) -> np.ndarray:
    """Count of 6-neighbors carrying each class; borders count as none."""
    counts = np.zeros((k_max,) + labels.shape, dtype=np.float64)
    for k in range(1, k_max + 1):
        onehot = (labels == k).astype(np.float64)
        acc = counts[k - 1]
        acc[1:, :, :] += onehot[:-1, :, :]
        acc[:-1, :, :] += onehot[1:, :, :]
        acc[:, 1:, :] += onehot[:, :-1, :]
        acc[:, :-1, :] += onehot[:, 1:, :]
        acc[:, :, 1:] += onehot[:, :, :-1]
        acc[:, :, :-1] += onehot[:, :, 1:]
    return counts


def predict(model: SegmenterModel, image: ScalarVolume) -> SegOutput:
    """Per-voxel Bayes classification under the trained model.

    Posterior(k | f) is proportional to N(f; mu_k, sigma_k^2) * pi_k.
    Voxels without any prior support are background. When smoothing_weight
    is positive, one synchronous iterated-conditional-modes pass folds a
    6-neighborhood agreement bonus exp(w * n_k) into the posteriors and
    relabels from the adjusted stack, so labels stay the posterior argmax.
    """
    if model.backend != GAUSSIAN_BACKEND:
        raise ArgumentError(f"unknown backend {model.backend!r}")
    if image.header != model.header:
        raise ArgumentError(f"image header {image.header} does not match model {model.header}")
    k_max = model.num_classes
    f = image.data.astype(np.float64)
    mask = model.brain_mask

    log_w = np.empty((k_max,) + image.header.dims, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_prior = np.log(model.prior.astype(np.float64))
    for k in range(k_max):
        mu, var = model.means[k], model.variances[k]
        log_w[k] = -0.5 * np.log(2.0 * np.pi * var) - (f - mu) ** 2 / (2.0 * var)
    log_w += log_prior

    def normalize(log_stack):
        top = log_stack.max(axis=0)
        q = np.exp(log_stack - np.where(mask, top, 0.0), where=mask[None], out=np.zeros_like(log_stack))
        q[:, ~mask] = 0.0
        denom = q.sum(axis=0)
        np.divide(q, denom, where=mask[None], out=q)
        return q

    posteriors = normalize(log_w)
    labels = np.where(mask, posteriors.argmax(axis=0) + 1, 0).astype(np.uint8)

    if model.smoothing_weight > 0:
        bonus = model.smoothing_weight * _neighbor_counts(labels, k_max)
        posteriors = normalize(log_w + bonus)
        labels = np.where(mask, posteriors.argmax(axis=0) + 1, 0).astype(np.uint8)

    out_of_prior = int(np.count_nonzero((image.data > 0) & ~mask))
    return SegOutput(
        labels=LabelVolume(image.header, labels, num_classes=k_max),
        posteriors=posteriors,
        out_of_prior=out_of_prior,
    )


def warm_start(model: SegmenterModel, previous: SegmenterModel) -> SegmenterModel:
    """Carry state across retrains.

    The Gaussian backend retrains exactly, so this returns the fresh model
    unchanged; it exists so iterative backends can reuse weights under the
    same interface.
    """
    if model.backend != previous.backend:
        raise ArgumentError(f"backend mismatch: {model.backend!r} vs {previous.backend!r}")
    if model.num_classes != previous.num_classes:
        raise ArgumentError(
            f"class count mismatch: {model.num_classes} vs {previous.num_classes}"
        )
    return model


def save_segmenter(model: SegmenterModel, path) -> None:
    """Serialize a model: SEGM header, float64 statistics, prior as an
    embedded partial-volume MVF block."""
    code = _BACKEND_CODES.get(model.backend)
    if code is None:
        raise ArgumentError(f"cannot serialize backend {model.backend!r}")
    buf = io.BytesIO()
    buf.write(_SEGM_MAGIC)
    buf.write(struct.pack("<BBdd", code, model.num_classes, model.prior_epsilon, model.smoothing_weight))
    buf.write(model.means.astype("<f8").tobytes())
    buf.write(model.variances.astype("<f8").tobytes())
    buf.write(encode_mvf(PartialVolumeSet(model.header, model.prior)))
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def load_segmenter(path) -> SegmenterModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    head = struct.calcsize("<BBdd")
    if len(blob) < 4 + head or blob[:4] != _SEGM_MAGIC:
        raise FormatError(f"{path}: not a segmenter model file")
    code, k, eps, smooth = struct.unpack_from("<BBdd", blob, 4)
    backend = _BACKEND_NAMES.get(code)
    if backend is None:
        raise FormatError(f"{path}: unknown backend code {code}")
    off = 4 + head
    need = 2 * 8 * k
    if len(blob) < off + need:
        raise FormatError(f"{path}: truncated statistics block")
    means = np.frombuffer(blob, dtype="<f8", count=k, offset=off).copy()
    variances = np.frombuffer(blob, dtype="<f8", count=k, offset=off + 8 * k).copy()
    pv = decode_mvf(blob[off + need:], source=f"{path} (embedded prior)")
    if not isinstance(pv, PartialVolumeSet) or pv.num_classes != k:
        raise FormatError(f"{path}: embedded prior block is inconsistent")
    return SegmenterModel(
        backend=backend,
        header=pv.header,
        means=means,
        variances=variances,
        prior=np.array(pv.channels),
        prior_epsilon=float(eps),
        smoothing_weight=float(smooth),
    )

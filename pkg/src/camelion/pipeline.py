"""The contrast adaptation loop (CAMELION) and its comparison arms.

The loop alternates three stages while the input image and the atlas
labels stay fixed: segment the input with the current model, estimate
two-class partial volumes from the input and that segmentation, fit a
synthesis model on the single (partial volumes, input) pair, and re-render
every atlas image from its own precomputed partial volumes before
retraining the segmenter. Iteration stops when fewer than the configured
fraction of voxels change labels, or at the iteration cap.

Comparison arms: "direct" (train on the original atlases, predict once)
and "nhm" (histogram-match the input to one atlas image, then direct).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import harmonize, metrics, synth
from .errors import ArgumentError, CamelionError, PipelineError
from .pv import PvConfig, estimate_pv, noise_sigma, present_class_means
from .segmenter import SegmenterConfig, predict, train, warm_start
from .synth import SynthConfig, SynthModel, save_synth_model, synthesize
from .util import derived_seed
from .volumes import (
    AtlasPair,
    LabelVolume,
    ScalarVolume,
    require_same_header,
    write_mvf,
)


@dataclass(frozen=True)
class LoopConfig:
    max_iterations: int = 5
    change_threshold: float = 0.05
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pv: PvConfig = field(default_factory=PvConfig)
    seed: int = 0
    synth_noise: bool = True
    nhm_percentiles: tuple[float, ...] = harmonize.DEFAULT_PERCENTILES
    mask_rel_threshold: float = 0.1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ArgumentError("max_iterations must be >= 1")
        if not 0 < self.change_threshold < 1:
            raise ArgumentError("change_threshold must be in (0, 1)")
        if self.seed < 0:
            raise ArgumentError("seed must be non-negative")


@dataclass
class IterationRecord:
    index: int
    change_fraction: float
    synth_train_mse: float
    out_of_prior: int


@dataclass
class LoopResult:
    """Everything the loop produced, including the full trajectory."""

    final_labels: LabelVolume
    labels_history: list[LabelVolume]          # initial labels first
    atlas_images_history: list[list[ScalarVolume]]
    synth_models: list[SynthModel]
    records: list[IterationRecord]
    converged: bool

    @property
    def iterations_run(self) -> int:
        return len(self.records)

    @property
    def change_fractions(self) -> list[float]:
        return [r.change_fraction for r in self.records]


class _Stage:
    """Context manager that tags any toolkit error with the failing stage."""

    def __init__(self, name: str, partial=None):
        self.name = name
        self.partial = partial

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, CamelionError) and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, str(exc), partial=self.partial) from exc
        return False


def precompute_atlas_pv(atlases: list[AtlasPair], cfg: PvConfig) -> list[AtlasPair]:
    """Estimate each atlas's partial volumes from its original image and
    labels. Computed once; the loop reuses them every iteration."""
    out = []
    with _Stage("precompute_atlas_pv"):
        for pair in atlases:
            if pair.precomputed_pv is not None:
                out.append(pair)
            else:
                pv = estimate_pv(pair.image, pair.labels, cfg)
                out.append(AtlasPair(pair.image, pair.labels, precomputed_pv=pv))
    return out


def _strip(labels: LabelVolume, fg: np.ndarray) -> LabelVolume:
    """Skull-strip analog: clear labels outside the input's own foreground.

    The atlas union mask can overhang a smaller input head; without this,
    in-mask air voxels pick up tissue labels and poison the class-intensity
    estimates the adaptation loop feeds on.
    """
    data = labels.data.copy()
    data[~fg] = 0
    return LabelVolume(labels.header, data, num_classes=labels.num_classes)


def _initial_segmentation(input_image: ScalarVolume, atlases: list[AtlasPair],
                          cfg: LoopConfig, fg: np.ndarray):
    with _Stage("train"):
        model = train(atlases, cfg.segmenter)
    with _Stage("segment"):
        out = predict(model, input_image)
    return model, out, _strip(out.labels, fg)


def run_direct(input_image: ScalarVolume, atlases: list[AtlasPair], cfg: LoopConfig) -> LabelVolume:
    """Comparison arm: train on the original atlas images and predict once."""
    if not atlases:
        raise ArgumentError("need at least one atlas")
    require_same_header(input_image, *(a.image for a in atlases))
    fg = foreground_mask(input_image, cfg.mask_rel_threshold)
    _, _, labels = _initial_segmentation(input_image, atlases, cfg, fg)
    return labels


def run_nhm(input_image: ScalarVolume, atlases: list[AtlasPair],
            reference_atlas_index: int, cfg: LoopConfig) -> LabelVolume:
    """Comparison arm: histogram-match the input to one designated atlas
    image, then segment directly."""
    if not atlases:
        raise ArgumentError("need at least one atlas")
    if not 0 <= reference_atlas_index < len(atlases):
        raise ArgumentError(
            f"reference_atlas_index {reference_atlas_index} out of range for {len(atlases)} atlases"
        )
    require_same_header(input_image, *(a.image for a in atlases))
    ref = atlases[reference_atlas_index]
    with _Stage("histogram_match"):
        src_mask = foreground_mask(input_image, cfg.mask_rel_threshold)
        src_lm = harmonize.landmarks(input_image, mask=src_mask, percentiles=cfg.nhm_percentiles)
        ref_lm = harmonize.landmarks(ref.image, mask=ref.labels, percentiles=cfg.nhm_percentiles)
        # quantized or noiseless histograms can plateau; collapse repeated
        # source landmarks so the piecewise-linear map stays well defined
        keep = np.concatenate([[True], np.diff(src_lm) > 0])
        if keep.sum() >= 2:
            lmap = harmonize.build_map(src_lm[keep], ref_lm[keep])
            matched = harmonize.apply(lmap, input_image, mask=src_mask)
        else:
            matched = input_image
    with _Stage("train"):
        model = train(atlases, cfg.segmenter)
    with _Stage("segment"):
        out = predict(model, matched)
    return _strip(out.labels, src_mask)


def foreground_mask(image: ScalarVolume, rel_threshold: float) -> np.ndarray:
    """Noise-robust head mask: intensity above rel_threshold times the 99th
    percentile of the positive intensities (plain > 0 when rel_threshold
    is 0)."""
    data = image.data
    positive = data[data > 0]
    if positive.size == 0:
        raise ArgumentError("image has no positive intensities")
    cut = rel_threshold * float(np.percentile(positive.astype(np.float64), 99))
    return data > max(cut, 0.0)


def run(input_image: ScalarVolume, atlases: list[AtlasPair], cfg: LoopConfig) -> LoopResult:
    """Run the full adaptation loop on one input image.

    Deterministic for a given config seed. On non-convergence at the
    iteration cap the last labels are returned with converged = False.
    """
    if not atlases:
        raise ArgumentError("need at least one atlas")
    require_same_header(input_image, *(a.image for a in atlases))
    atlases = precompute_atlas_pv(atlases, cfg.pv)
    fg = foreground_mask(input_image, cfg.mask_rel_threshold)

    model, seg_out, stripped = _initial_segmentation(input_image, atlases, cfg, fg)
    labels_history = [stripped]
    # intensities for classes that vanish from an intermediate segmentation:
    # start from the atlas-side class means, then carry the latest fit
    last_intensities = model.means.copy()
    atlas_images_history: list[list[ScalarVolume]] = []
    synth_models: list[SynthModel] = []
    records: list[IterationRecord] = []
    converged = False

    def partial():
        return LoopResult(
            final_labels=labels_history[-1],
            labels_history=labels_history,
            atlas_images_history=atlas_images_history,
            synth_models=synth_models,
            records=records,
            converged=converged,
        )

    for t in range(cfg.max_iterations):
        current = labels_history[-1]
        with _Stage(f"estimate_pv[{t}]", partial()):
            input_pv = estimate_pv(input_image, current, cfg.pv)
        with _Stage(f"fit_synth[{t}]", partial()):
            synth_cfg = replace(cfg.synth, seed=derived_seed(cfg.seed, t, 101))
            model_t = synth.fit(
                input_pv, input_image, synth_cfg, fallback_intensities=last_intensities
            )
            if model_t.class_intensities is not None:
                last_intensities = model_t.class_intensities.copy()
        with _Stage(f"synthesize[{t}]", partial()):
            new_images = [synthesize(model_t, a.precomputed_pv) for a in atlases]
            if cfg.synth_noise:
                sigma = _spread_gap_sigma(input_image, current, new_images, atlases)
                new_images = [
                    _with_noise(img, sigma, derived_seed(cfg.seed, t, 211, i))
                    for i, img in enumerate(new_images)
                ]
        with _Stage(f"retrain[{t}]", partial()):
            pairs = [
                AtlasPair(img, a.labels, precomputed_pv=a.precomputed_pv)
                for img, a in zip(new_images, atlases)
            ]
            fresh = train(pairs, cfg.segmenter)
            model = warm_start(fresh, model)
        with _Stage(f"segment[{t}]", partial()):
            seg_out = predict(model, input_image)
            new_labels = _strip(seg_out.labels, fg)
        change = metrics.label_change_fraction(current, new_labels)
        labels_history.append(new_labels)
        atlas_images_history.append(new_images)
        synth_models.append(model_t)
        records.append(
            IterationRecord(
                index=t + 1,
                change_fraction=change,
                synth_train_mse=model_t.train_mse,
                out_of_prior=seg_out.out_of_prior,
            )
        )
        if change < cfg.change_threshold:
            converged = True
            break

    return LoopResult(
        final_labels=labels_history[-1],
        labels_history=labels_history,
        atlas_images_history=atlas_images_history,
        synth_models=synth_models,
        records=records,
        converged=converged,
    )


def _with_noise(image: ScalarVolume, sigma: float, seed: int) -> ScalarVolume:
    if sigma <= 0:
        return image
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    data = image.data.astype(np.float64) + rng.normal(0.0, sigma, size=image.header.dims)
    return ScalarVolume(image.header, data.astype(np.float32))


def _spread_gap_sigma(input_image, current_labels, synthetic_images, atlases) -> float:
    """Noise level that closes the within-class spread gap between the input
    and the synthesized atlases.

    Synthesized atlases carry the partial-volume mixture spread structurally
    but none of the input's noise or bias-field spread. Matching the pooled
    within-class variance keeps the retrained Gaussian backend's likelihood
    widths realistic; without it the loop's likelihoods turn pathologically
    sharp and ignore the spatial prior.
    """
    means_in = present_class_means(input_image, current_labels)
    pooled_in = noise_sigma(input_image, current_labels, means_in)
    total = 0.0
    count = 0
    for img, pair in zip(synthetic_images, atlases):
        means_syn = present_class_means(img, pair.labels)
        mask = pair.labels.data > 0
        residual = img.data.astype(np.float64)[mask] - means_syn[pair.labels.data[mask] - 1]
        total += float(np.sum(residual**2))
        count += int(mask.sum())
    pooled_syn_sq = total / max(count, 1)
    return float(np.sqrt(max(pooled_in**2 - pooled_syn_sq, 0.0)))


def save_loop_artifacts(result: LoopResult, out_dir, truth_labels: LabelVolume | None = None) -> None:
    """Write per-iteration artifacts: labels_t.mvf, atlas{i}_t.mvf,
    synth_t.bin and trajectory.csv (with Dice-vs-truth columns when truth
    labels are supplied)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, labels in enumerate(result.labels_history):
        write_mvf(labels, out_dir / f"labels_{t}.mvf")
    for t, images in enumerate(result.atlas_images_history, start=1):
        for i, img in enumerate(images):
            write_mvf(img, out_dir / f"atlas{i}_{t}.mvf")
    for t, model in enumerate(result.synth_models, start=1):
        save_synth_model(model, out_dir / f"synth_{t}.bin")

    dice_rows = None
    if truth_labels is not None:
        dice_rows = [
            np.array([
                metrics.dice(lab, truth_labels, k)
                for k in range(1, truth_labels.num_classes + 1)
            ])
            for lab in result.labels_history[1:]
        ]
    metrics.write_trajectory(
        out_dir / "trajectory.csv",
        result.change_fractions,
        dice_rows,
        num_classes=result.final_labels.num_classes,
    )

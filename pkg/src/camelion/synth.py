"""Synthesis of intensity images from partial volumes.

Two backends learn the mapping from the single (partial volumes, image)
pair of the current subject:

* "linear": per-class intensities fitted by the K x K normal equations,
  so a voxel synthesizes to sum_k p_k * c_k. Exactly solvable and stable
  across retrains, which makes it the default inside the adaptation loop.
* "regressor": a small feed-forward network from the flattened local
  partial-volume patch to the center intensity, trained with mini-batch
  adaptive-moment gradient descent. It carries a linear skip connection
  initialized at the least-squares solution, so the linear map is inside
  its hypothesis set and training can only improve on it.

Synthesized images are noiseless by design; callers that want matched
noise can add it explicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, PersistenceError, RankError
from .volumes import PartialVolumeSet, ScalarVolume, require_same_header

LINEAR_BACKEND = "linear"
REGRESSOR_BACKEND = "regressor"

_SYNM_MAGIC = b"SYNM"
_BACKEND_CODES = {LINEAR_BACKEND: 1, REGRESSOR_BACKEND: 2}
_BACKEND_NAMES = {v: k for k, v in _BACKEND_CODES.items()}

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class SynthConfig:
    backend: str = LINEAR_BACKEND
    patch_radius: int = 1
    hidden_units: int = 64
    epochs: int = 20
    batch_size: int = 1024
    learning_rate: float = 1e-3
    seed: int = 0
    keep_best: bool = True

    def __post_init__(self):
        if self.backend not in (LINEAR_BACKEND, REGRESSOR_BACKEND):
            raise ArgumentError(f"unknown synthesis backend {self.backend!r}")
        if self.patch_radius < 0:
            raise ArgumentError("patch_radius must be >= 0")
        if self.hidden_units < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("hidden_units, epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ArgumentError("learning_rate must be positive")


@dataclass
class RegressorWeights:
    patch_radius: int
    input_mean: np.ndarray   # (D,)
    input_scale: np.ndarray  # (D,)
    w_hidden: np.ndarray     # (D, H)
    b_hidden: np.ndarray     # (H,)
    w_skip: np.ndarray       # (D,)
    w_out: np.ndarray        # (H,)
    b_out: float


@dataclass
class SynthModel:
    backend: str
    num_classes: int
    class_intensities: np.ndarray | None = None
    regressor: RegressorWeights | None = None
    train_mse: float = 0.0


def fit_linear(
    pv: PartialVolumeSet, image: ScalarVolume, fallback_intensities=None
) -> SynthModel:
    """Least-squares per-class intensities over non-background voxels.

    Solves min_c sum_j (f_j - sum_k p_jk c_k)^2 through the normal
    equations. Raises RankError, reporting per-class support counts, when
    the system is singular (e.g. a class with no support anywhere). When
    ``fallback_intensities`` is given, classes without any support take
    their fallback value instead and the reduced system is solved; the
    adaptation loop uses this so a class that temporarily vanishes from an
    intermediate segmentation keeps its last known intensity.
    """
    require_same_header(pv, image)
    k = pv.num_classes
    ch = pv.channels.reshape(k, -1).astype(np.float64)
    mask = ch.any(axis=0)
    p = ch[:, mask]
    f = image.data.reshape(-1)[mask].astype(np.float64)

    support = (p > 0).sum(axis=1)
    active = support > 0
    if fallback_intensities is None:
        active = np.ones(k, dtype=bool)
    else:
        fallback = np.asarray(fallback_intensities, dtype=np.float64)
        if fallback.shape != (k,):
            raise ArgumentError(f"fallback_intensities must have shape ({k},)")

    p_active = p[active]
    gram = p_active @ p_active.T
    rhs = p_active @ f
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise RankError(
            "singular normal equations; per-class support counts: "
            + ", ".join(f"{i + 1}: {int(s)}" for i, s in enumerate(support))
        )
    c = np.zeros(k)
    if fallback_intensities is not None:
        c[~active] = fallback[~active]
    c[active] = np.linalg.solve(gram, rhs)
    residual = f - c[active] @ p_active
    mse = float(np.mean(residual**2)) if f.size else 0.0
    return SynthModel(
        backend=LINEAR_BACKEND, num_classes=k, class_intensities=c, train_mse=mse
    )


def _patch_matrix(channels: np.ndarray, radius: int, flat_index: np.ndarray) -> np.ndarray:
    """Rows of flattened (K * (2r+1)^3) patches at the given flat voxel indices."""
    k = channels.shape[0]
    dims = channels.shape[1:]
    if radius == 0:
        return channels.reshape(k, -1).T[flat_index].astype(np.float64)
    w = 2 * radius + 1
    padded = np.pad(
        channels, ((0, 0), (radius, radius), (radius, radius), (radius, radius))
    )
    windows = np.lib.stride_tricks.sliding_window_view(padded, (w, w, w), axis=(1, 2, 3))
    windows = windows.reshape(k, dims[0] * dims[1] * dims[2], w**3)
    out = windows[:, flat_index, :]                     # (K, n, w^3)
    return np.moveaxis(out, 0, 1).reshape(len(flat_index), k * w**3).astype(np.float64)


def _forward(reg: RegressorWeights, x_norm: np.ndarray) -> np.ndarray:
    hidden = np.tanh(x_norm @ reg.w_hidden + reg.b_hidden)
    return hidden @ reg.w_out + x_norm @ reg.w_skip + reg.b_out


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], rate: float):
        self.rate = rate
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1**self.t)
            v_hat = self.v[k] / (1 - self.beta2**self.t)
            params[k] -= self.rate * m_hat / (np.sqrt(v_hat) + self.eps)


def fit_regressor(pv: PartialVolumeSet, image: ScalarVolume, cfg: SynthConfig) -> SynthModel:
    """Train the patch regressor on the (partial volumes, image) pair.

    Mini-batch MSE training with seeded shuffling; fully deterministic for
    a given config. With keep_best the returned weights are the best epoch
    by training error, and train_mse is always recomputed from the weights
    actually returned.
    """
    require_same_header(pv, image)
    k = pv.num_classes
    mask_flat = pv.channels.reshape(k, -1).any(axis=0)
    flat_index = np.flatnonzero(mask_flat)
    if flat_index.size < k:
        raise RankError(f"only {flat_index.size} tissue voxels for {k} classes")
    x = _patch_matrix(pv.channels, cfg.patch_radius, flat_index)
    y = image.data.reshape(-1)[flat_index].astype(np.float64)

    x_mean = x.mean(axis=0)
    x_scale = np.maximum(x.std(axis=0), 1e-8)
    xn = (x - x_mean) / x_scale

    rng = np.random.default_rng(cfg.seed)
    d = x.shape[1]
    h = cfg.hidden_units
    design = np.concatenate([xn, np.ones((xn.shape[0], 1))], axis=1)
    # fractions sum to one, so the normalized columns are near-collinear
    # with the intercept; truncating tiny singular values keeps the affine
    # initialization small enough to survive float32 quantization
    theta, *_ = np.linalg.lstsq(design, y, rcond=1e-6)
    params = {
        "w_hidden": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h)),
        "b_hidden": np.zeros(h),
        "w_out": np.zeros(h),
        "w_skip": theta[:d].copy(),
        "b_out": np.array([theta[d]]),
    }

    def forward(batch):
        hidden = np.tanh(batch @ params["w_hidden"] + params["b_hidden"])
        pred = hidden @ params["w_out"] + batch @ params["w_skip"] + params["b_out"][0]
        return hidden, pred

    def full_mse():
        _, pred = forward(xn)
        return float(np.mean((pred - y) ** 2))

    adam = _Adam(params, cfg.learning_rate)
    best_mse = full_mse()
    best = {p: v.copy() for p, v in params.items()}
    n = xn.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            xb, yb = xn[sel], y[sel]
            hidden, pred = forward(xb)
            err = 2.0 * (pred - yb) / len(sel)
            d_hidden = np.outer(err, params["w_out"]) * (1.0 - hidden**2)
            grads = {
                "w_out": hidden.T @ err,
                "w_skip": xb.T @ err,
                "b_out": np.array([err.sum()]),
                "w_hidden": xb.T @ d_hidden,
                "b_hidden": d_hidden.sum(axis=0),
            }
            adam.step(params, grads)
        mse = full_mse()
        if mse < best_mse:
            best_mse = mse
            best = {p: v.copy() for p, v in params.items()}
    if cfg.keep_best:
        params = best

    # quantize to float32 up front so serialization is lossless and the
    # recorded train_mse matches what a reloaded model synthesizes
    def q(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    reg = RegressorWeights(
        patch_radius=cfg.patch_radius,
        input_mean=q(x_mean),
        input_scale=q(x_scale),
        w_hidden=q(params["w_hidden"]),
        b_hidden=q(params["b_hidden"]),
        w_skip=q(params["w_skip"]),
        w_out=q(params["w_out"]),
        b_out=float(np.float32(params["b_out"][0])),
    )
    final_pred = _forward(reg, (x - reg.input_mean) / reg.input_scale)
    final_mse = float(np.mean((final_pred - y) ** 2))
    return SynthModel(
        backend=REGRESSOR_BACKEND, num_classes=k, regressor=reg, train_mse=final_mse
    )


def fit(pv: PartialVolumeSet, image: ScalarVolume, cfg: SynthConfig,
        fallback_intensities=None) -> SynthModel:
    """Fit whichever backend the config selects."""
    if cfg.backend == LINEAR_BACKEND:
        return fit_linear(pv, image, fallback_intensities=fallback_intensities)
    return fit_regressor(pv, image, cfg)


def synthesize(model: SynthModel, pv: PartialVolumeSet, chunk: int = 32768) -> ScalarVolume:
    """Render an intensity image from partial volumes with a fitted model.

    Background voxels (all-zero fractions) always synthesize to 0.
    """
    if pv.num_classes != model.num_classes:
        raise ArgumentError(
            f"model has {model.num_classes} classes, volume has {pv.num_classes}"
        )
    k = pv.num_classes
    if model.backend == LINEAR_BACKEND:
        out = np.tensordot(model.class_intensities, pv.channels.astype(np.float64), axes=(0, 0))
        return ScalarVolume(pv.header, out.astype(np.float32))
    if model.backend != REGRESSOR_BACKEND:
        raise ArgumentError(f"unknown backend {model.backend!r}")

    reg = model.regressor
    n = pv.header.n_voxels
    mask_flat = pv.channels.reshape(k, -1).any(axis=0)
    out = np.zeros(n, dtype=np.float64)
    tissue_index = np.flatnonzero(mask_flat)
    for start in range(0, tissue_index.size, chunk):
        sel = tissue_index[start : start + chunk]
        x = _patch_matrix(pv.channels, reg.patch_radius, sel)
        xn = (x - reg.input_mean) / reg.input_scale
        out[sel] = _forward(reg, xn)
    return ScalarVolume(pv.header, out.reshape(pv.header.dims).astype(np.float32))


def save_synth_model(model: SynthModel, path) -> None:
    """Serialize a model (SYNM container, little-endian float32 arrays)."""
    code = _BACKEND_CODES.get(model.backend)
    if code is None:
        raise ArgumentError(f"cannot serialize backend {model.backend!r}")
    parts = [_SYNM_MAGIC, struct.pack("<BBf", code, model.num_classes, model.train_mse)]
    if model.backend == LINEAR_BACKEND:
        parts.append(np.asarray(model.class_intensities, dtype="<f4").tobytes())
    else:
        reg = model.regressor
        d = reg.input_mean.shape[0]
        h = reg.w_out.shape[0]
        parts.append(struct.pack("<BII", reg.patch_radius, d, h))
        for arr in (reg.input_mean, reg.input_scale, reg.w_hidden, reg.b_hidden,
                    reg.w_skip, reg.w_out):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        parts.append(struct.pack("<f", reg.b_out))
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def load_synth_model(path) -> SynthModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 + struct.calcsize("<BBf") or blob[:4] != _SYNM_MAGIC:
        raise FormatError(f"{path}: not a synthesis model file")
    code, k, mse = struct.unpack_from("<BBf", blob, 4)
    backend = _BACKEND_NAMES.get(code)
    if backend is None:
        raise FormatError(f"{path}: unknown backend code {code}")
    off = 4 + struct.calcsize("<BBf")
    if backend == LINEAR_BACKEND:
        if len(blob) != off + 4 * k:
            raise FormatError(f"{path}: bad linear payload size")
        c = np.frombuffer(blob, dtype="<f4", count=k, offset=off).astype(np.float64)
        return SynthModel(LINEAR_BACKEND, k, class_intensities=c, train_mse=float(mse))
    radius, d, h = struct.unpack_from("<BII", blob, off)
    off += struct.calcsize("<BII")
    sizes = [d, d, d * h, h, d, h]
    expected = off + 4 * (sum(sizes) + 1)
    if len(blob) != expected:
        raise FormatError(f"{path}: bad regressor payload size")
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64))
        off += 4 * count
    b_out = struct.unpack_from("<f", blob, off)[0]
    reg = RegressorWeights(
        patch_radius=int(radius),
        input_mean=arrays[0],
        input_scale=arrays[1],
        w_hidden=arrays[2].reshape(d, h),
        b_hidden=arrays[3],
        w_skip=arrays[4],
        w_out=arrays[5],
        b_out=float(b_out),
    )
    return SynthModel(REGRESSOR_BACKEND, k, regressor=reg, train_mse=float(mse))

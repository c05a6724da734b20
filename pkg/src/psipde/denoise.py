"""Neural smoothing of noisy fields.

A small fully connected tanh network learns u ~ f(t, x[, y]) from the
noisy samples; resampling the fitted surrogate on the grid yields a
smoothed field.  Training is (mini-)batch gradient descent with momentum,
early stopping on a validation split, and a best-validation snapshot.
Inputs and outputs are standardized, which also makes the fit invariant
to affine rescaling of the coordinates.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from psipde.core import FieldTensor, Grid
from psipde.simulate import rng_stream

PSIN_MAGIC = b"PSIN"
PSIN_VERSION = 1

HIDDEN_LAYERS = (32, 32, 32)


class TrainingDiverged(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    split_fraction: float = 0.8  # train share of the samples
    patience: int = 200  # epochs without validation improvement
    max_epochs: int = 20_000
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 0  # 0 = full batch
    lr_decay: float = 0.5  # applied on a validation plateau
    max_decays: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1 or self.learning_rate <= 0:
            raise ValueError("max_epochs and learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class SurrogateModel:
    """Tanh MLP mapping standardized coordinates to a standardized value."""

    layer_sizes: list  # input dim, hidden..., 1
    weights: list  # per layer, (n_in, n_out)
    biases: list  # per layer, (n_out,)
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: float
    out_std: float
    training_history: dict = field(default_factory=lambda: {"train": [], "val": []})

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("model parameters must be finite")
        if np.any(self.in_std <= 0) or self.out_std <= 0:
            raise ValueError("normalization stds must be > 0")
        if len(self.training_history["train"]) != len(self.training_history["val"]):
            raise ValueError("history lengths must match")

    def _forward_norm(self, xn: np.ndarray) -> np.ndarray:
        a = xn
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if i != last:
                a = np.tanh(a)
        return a[:, 0]

    def predict(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at raw coordinate rows (t, x[, y])."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"expected {self.layer_sizes[0]} input coordinates, got {pts.shape[1]}"
            )
        xn = (pts - self.in_mean) / self.in_std
        return self._forward_norm(xn) * self.out_std + self.out_mean

    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def _grid_points(grid: Grid) -> np.ndarray:
    axes = [grid.t, grid.x] + ([grid.y] if grid.spatial_dims == 2 else [])
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _init_params(layer_sizes: Sequence[int], gen: np.random.Generator):
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(gen.uniform(-bound, bound, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return weights, biases


def _forward_cached(weights, biases, xn):
    acts = [xn]
    last = len(weights) - 1
    a = xn
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        a = z if i == last else np.tanh(z)
        acts.append(a)
    return acts


def _backward(weights, acts, resid):
    """Gradients of mean((pred - y)^2) w.r.t. weights and biases."""
    m = resid.size
    delta = (2.0 / m) * resid[:, None]
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (1.0 - acts[i] ** 2)
    return gw, gb


def fit_surrogate(f_noisy: FieldTensor, cfg: TrainConfig = TrainConfig()) -> SurrogateModel:
    """Fit the surrogate to the noisy field; returns the best-validation
    snapshot, not the last epoch."""
    pts = _grid_points(f_noisy.grid)
    y = f_noisy.values.ravel()
    in_mean = pts.mean(axis=0)
    in_std = pts.std(axis=0)
    in_std[in_std == 0] = 1.0
    out_mean = float(y.mean())
    out_std = float(y.std()) or 1.0
    xn = (pts - in_mean) / in_std
    yn = (y - out_mean) / out_std

    layer_sizes = [pts.shape[1], *HIDDEN_LAYERS, 1]
    weights, biases = _init_params(layer_sizes, rng_stream(cfg.seed, "denoise.init"))
    n_params = sum(w.size + b.size for w, b in zip(weights, biases))
    if y.size < 10 * n_params:
        warnings.warn(
            f"only {y.size} samples for {n_params} parameters "
            "(< 10x); the fit may interpolate noise"
        )

    perm = rng_stream(cfg.seed, "denoise.split").permutation(y.size)
    n_trn = int(round(cfg.split_fraction * y.size))
    trn, val = perm[:n_trn], perm[n_trn:]
    x_trn, y_trn = xn[trn], yn[trn]
    x_val, y_val = xn[val], yn[val]

    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    lr = cfg.learning_rate
    history = {"train": [], "val": []}
    best_val = np.inf
    best = None
    since_best = 0
    decays = 0
    batch = cfg.batch_size if cfg.batch_size > 0 else n_trn
    batch_gen = rng_stream(cfg.seed, "denoise.batches")

    for _ in range(cfg.max_epochs):
        order = (
            np.arange(n_trn) if batch >= n_trn else batch_gen.permutation(n_trn)
        )
        # training loss is the pre-update loss accumulated over the epoch,
        # so no extra forward pass is needed
        sq_sum = 0.0
        for lo in range(0, n_trn, batch):
            idx = order[lo : lo + batch]
            acts = _forward_cached(weights, biases, x_trn[idx])
            resid = acts[-1][:, 0] - y_trn[idx]
            sq_sum += float(resid @ resid)
            gw, gb = _backward(weights, acts, resid)
            for i in range(len(weights)):
                vel_w[i] = cfg.momentum * vel_w[i] - lr * gw[i]
                vel_b[i] = cfg.momentum * vel_b[i] - lr * gb[i]
                weights[i] = weights[i] + vel_w[i]
                biases[i] = biases[i] + vel_b[i]
        pred_val = _forward_cached(weights, biases, x_val)[-1][:, 0]
        loss_trn = sq_sum / n_trn
        with np.errstate(over="ignore", invalid="ignore"):
            loss_val = float(np.mean((pred_val - y_val) ** 2))
        if not (np.isfinite(loss_trn) and np.isfinite(loss_val)):
            raise TrainingDiverged("training diverged; lower learning rate")
        history["train"].append(loss_trn)
        history["val"].append(loss_val)
        if loss_val < best_val:
            best_val = loss_val
            best = ([w.copy() for w in weights], [b.copy() for b in biases])
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                decays += 1
                if decays > cfg.max_decays:
                    break
                lr *= cfg.lr_decay
                since_best = 0

    weights, biases = best
    return SurrogateModel(
        layer_sizes,
        weights,
        biases,
        in_mean,
        in_std,
        out_mean,
        out_std,
        history,
    )


def resample(model: SurrogateModel, grid: Grid) -> FieldTensor:
    """Evaluate the surrogate on every node of the grid."""
    expected = 3 if grid.spatial_dims == 2 else 2
    if model.layer_sizes[0] != expected:
        raise ValueError(
            f"model takes {model.layer_sizes[0]} coordinates, grid supplies {expected}"
        )
    vals = model.predict(_grid_points(grid)).reshape(grid.shape)
    return FieldTensor(grid, vals)


def denoise_field(f_noisy: FieldTensor, cfg: TrainConfig = TrainConfig()) -> FieldTensor:
    """Convenience: fit and resample on the field's own grid."""
    return resample(fit_surrogate(f_noisy, cfg), f_noisy.grid)


def _flatten_params(weights, biases):
    return np.concatenate([w.ravel() for w in weights] + [b.ravel() for b in biases])


def _unflatten_params(vec, weights, biases):
    out_w, out_b = [], []
    off = 0
    for w in weights:
        out_w.append(vec[off : off + w.size].reshape(w.shape))
        off += w.size
    for b in biases:
        out_b.append(vec[off : off + b.size].reshape(b.shape))
        off += b.size
    return out_w, out_b


def finite_diff_gradient_check(
    model: SurrogateModel,
    sample_points: np.ndarray,
    targets: np.ndarray,
    n_coords: int = 20,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between backpropagated and central-difference
    parameter gradients of the MSE loss at random coordinates."""
    if n_coords < 10:
        raise ValueError("check at least 10 parameter coordinates")
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    xn = (pts - model.in_mean) / model.in_std
    yn = (np.asarray(targets, dtype=float).ravel() - model.out_mean) / model.out_std
    acts = _forward_cached(model.weights, model.biases, xn)
    gw, gb = _backward(model.weights, acts, acts[-1][:, 0] - yn)
    analytic = _flatten_params(gw, gb)
    theta = _flatten_params(model.weights, model.biases)

    def loss_at(vec):
        w, b = _unflatten_params(vec, model.weights, model.biases)
        pred = _forward_cached(w, b, xn)[-1][:, 0]
        return float(np.mean((pred - yn) ** 2))

    gen = rng_stream(seed, "denoise.gradcheck")
    coords = gen.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    max_rel = 0.0
    for j in coords:
        tp, tm = theta.copy(), theta.copy()
        tp[j] += step
        tm[j] -= step
        fd = (loss_at(tp) - loss_at(tm)) / (2 * step)
        denom = max(abs(fd), abs(analytic[j]), 1e-12)
        max_rel = max(max_rel, abs(fd - analytic[j]) / denom)
    return max_rel


def save_model(model: SurrogateModel, path) -> None:
    """Binary checkpoint: magic, version, layer dims, normalization, f64
    parameters (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(PSIN_MAGIC)
        fh.write(struct.pack("<HB", PSIN_VERSION, len(model.layer_sizes)))
        fh.write(struct.pack(f"<{len(model.layer_sizes)}Q", *model.layer_sizes))
        dim = model.layer_sizes[0]
        fh.write(np.asarray(model.in_mean, dtype="<f8").tobytes())
        fh.write(np.asarray(model.in_std, dtype="<f8").tobytes())
        fh.write(struct.pack("<dd", model.out_mean, model.out_std))
        for w, b in zip(model.weights, model.biases):
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_model(path) -> SurrogateModel:
    data = Path(path).read_bytes()
    if len(data) < 7 or data[:4] != PSIN_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, n_layers = struct.unpack_from("<HB", data, 4)
    if version != PSIN_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 7
    layer_sizes = list(struct.unpack_from(f"<{n_layers}Q", data, off))
    off += 8 * n_layers
    dim = layer_sizes[0]
    in_mean = np.frombuffer(data, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    in_std = np.frombuffer(data, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    out_mean, out_std = struct.unpack_from("<dd", data, off)
    off += 16
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(
            np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=off)
            .reshape(n_in, n_out)
            .copy()
        )
        off += 8 * n_in * n_out
        biases.append(np.frombuffer(data, dtype="<f8", count=n_out, offset=off).copy())
        off += 8 * n_out
    if off != len(data):
        raise ValueError(f"{path}: checkpoint size mismatch")
    return SurrogateModel(
        layer_sizes, weights, biases, in_mean, in_std, out_mean, out_std
    )

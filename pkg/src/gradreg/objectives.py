"""Differentiable objectives with analytic gradients.

Two families: a quadratic 0.5 theta^T H theta, where the gradient-norm
penalty has a closed-form gradient (the exactness testbed), and a small
fully-connected softmax classifier trained on synthetic 2-D datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .numerics import NonFiniteError, RngState, as_vector, l2_norm

__all__ = [
    "Objective",
    "QuadraticObjective",
    "MlpClassifier",
    "Batch",
    "Dataset",
    "synth_dataset",
    "random_spd_matrix",
    "save_dataset_csv",
    "load_dataset_csv",
]


class Objective(Protocol):
    """Loss/gradient evaluation contract over parameters and a batch."""

    def loss(self, theta, batch) -> float: ...

    def loss_grad(self, theta, batch) -> tuple[float, np.ndarray]: ...

    def init_params(self, rng: RngState) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Quadratic family


class QuadraticObjective:
    """Loss 0.5 * theta^T H theta for a fixed symmetric PSD matrix H.

    Because the Hessian is constant, the two-point approximation of the
    gradient-norm-penalized gradient is exact here, making this the
    canonical cross-check target: the penalized gradient is
    H theta + lam * H^2 theta / ||H theta||.

    init_scale sets the magnitude of the random starting point drawn by
    ``init_params`` (standard normal times init_scale).
    """

    def __init__(self, hessian, init_scale: float = 1.0):
        h = np.asarray(hessian, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValueError(f"hessian must be square, got shape {h.shape}")
        scale = max(float(np.abs(h).max()), 1.0)
        if not np.allclose(h, h.T, rtol=0.0, atol=1e-12 * scale):
            raise ValueError("hessian must be symmetric to machine precision")
        if float(np.linalg.eigvalsh(h).min()) < -1e-10 * scale:
            raise ValueError("hessian must be positive semidefinite")
        if init_scale <= 0:
            raise ValueError(f"init_scale must be positive, got {init_scale}")
        self.hessian = h
        self.init_scale = float(init_scale)

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    def _check(self, theta) -> np.ndarray:
        theta = as_vector(theta)
        if theta.size != self.dim:
            raise ValueError(f"expected {self.dim} parameters, got {theta.size}")
        return theta

    def loss(self, theta, batch=None) -> float:
        theta = self._check(theta)
        return 0.5 * float(theta @ (self.hessian @ theta))

    def loss_grad(self, theta, batch=None) -> tuple[float, np.ndarray]:
        theta = self._check(theta)
        g = self.hessian @ theta
        return 0.5 * float(theta @ g), g

    def gr_exact_grad(self, theta, lam: float) -> np.ndarray:
        """Closed-form gradient of 0.5 theta^T H theta + lam ||H theta||."""
        theta = self._check(theta)
        g = self.hessian @ theta
        norm = l2_norm(g)
        if norm == 0.0:
            raise ZeroDivisionError("penalty gradient undefined where H theta = 0")
        return g + lam * (self.hessian @ g) / norm

    def init_params(self, rng: RngState) -> np.ndarray:
        return self.init_scale * rng.standard_normals(self.dim)


def random_spd_matrix(dim: int, rng: RngState, eig_low: float = 0.5, eig_high: float = 5.0) -> np.ndarray:
    """Random symmetric positive-definite matrix with eigenvalues in [eig_low, eig_high]."""
    q, _ = np.linalg.qr(rng.standard_normals((dim, dim)))
    eigs = rng.uniform(eig_low, eig_high, dim)
    return (q * eigs) @ q.T


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class Batch:
    """A matrix of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ValueError("labels must be 1-D and aligned with inputs")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative class indices")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_features(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class Dataset(Batch):
    """A full synthetic dataset plus the recipe that generated it."""

    num_classes: int = 2
    kind: str = "blobs"
    seed: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")

    def batch(self, indices) -> Batch:
        indices = np.asarray(indices, dtype=np.intp)
        return Batch(self.inputs[indices], self.labels[indices])


def synth_dataset(kind: str, n: int, classes: int, seed: int) -> Dataset:
    """Deterministic 2-D synthetic dataset.

    ``blobs`` places Gaussian clusters on a circle of radius 4 (cluster std
    0.6), ``spirals`` interleaves one arm per class.  Labels are assigned
    round-robin, so per-class counts are balanced within one sample.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ValueError(f"need at least {classes} samples, got {n}")
    labels = np.arange(n, dtype=np.int64) % classes
    rng = RngState(seed)
    noise = rng.standard_normals((n, 2))
    angles = 2.0 * np.pi * labels / classes
    if kind == "blobs":
        means = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        inputs = means + 0.6 * noise
    elif kind == "spirals":
        within = np.arange(n) // classes
        per_class = np.bincount(labels, minlength=classes)
        u = within / np.maximum(per_class[labels] - 1, 1)
        radius = 0.5 + 3.0 * u
        arm = angles + 3.5 * u
        inputs = np.stack([radius * np.cos(arm), radius * np.sin(arm)], axis=1)
        inputs = inputs + 0.08 * noise
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return Dataset(inputs, labels, num_classes=classes, kind=kind, seed=seed)


def save_dataset_csv(data: Batch, path) -> None:
    """Write feature columns plus an integer label column (17 significant digits)."""
    cols = [f"x{j}" for j in range(data.num_features)] + ["label"]
    lines = [",".join(cols)]
    for row, label in zip(data.inputs, data.labels):
        lines.append(",".join(format(x, ".17g") for x in row) + f",{int(label)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_csv(path) -> Batch:
    """Read a dataset written by :func:`save_dataset_csv`."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[-1] != "label":
            raise ValueError("expected a trailing 'label' column")
        inputs, labels = [], []
        for line in fh:
            parts = line.strip().split(",")
            inputs.append([float(x) for x in parts[:-1]])
            labels.append(int(parts[-1]))
    return Batch(np.asarray(inputs, dtype=np.float64), np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# MLP classifier


_ACTIVATIONS = ("tanh", "relu")


class MlpClassifier:
    """Fully-connected softmax classifier with analytic backprop gradients.

    All weights and biases live in one flat parameter vector (per layer:
    weight matrix row-major, then bias).  The default tanh activation keeps
    the loss smooth, which the perturbation-quality checks rely on.
    """

    def __init__(self, layer_widths, activation: str = "tanh"):
        widths = tuple(int(w) for w in layer_widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {activation!r}")
        self.layer_widths = widths
        self.activation = activation

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_params(self) -> int:
        return sum(
            fan_in * fan_out + fan_out
            for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:])
        )

    def init_params(self, rng: RngState) -> np.ndarray:
        """Symmetric uniform weights scaled by 1/sqrt(fan_in); zero biases."""
        chunks = []
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, fan_out * fan_in))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def _unpack(self, theta) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = as_vector(theta)
        if theta.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {theta.size}")
        layers = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w = theta[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
            offset += fan_out * fan_in
            b = theta[offset : offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers

    def _act(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def _act_deriv(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.activation == "tanh":
            return 1.0 - a * a
        return (z > 0.0).astype(np.float64)

    def _forward(self, layers, inputs):
        """Return (activations per layer incl. input, pre-activations, logits)."""
        acts = [np.asarray(inputs, dtype=np.float64)]
        pres = []
        a = acts[0]
        for i, (w, b) in enumerate(layers):
            z = a @ w.T + b
            if not np.all(np.isfinite(z)):
                raise NonFiniteError(f"non-finite activations in layer {i}")
            pres.append(z)
            if i < len(layers) - 1:
                a = self._act(z)
                acts.append(a)
        return acts, pres, pres[-1]

    def forward(self, theta, inputs) -> np.ndarray:
        """Class probabilities (softmax over the final logits)."""
        _, _, logits = self._forward(self._unpack(theta), inputs)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        return expz / expz.sum(axis=1, keepdims=True)

    def loss(self, theta, batch) -> float:
        """Mean softmax cross-entropy over the batch."""
        loss, _, _, _, _ = self._loss_parts(theta, batch)
        return loss

    def _loss_parts(self, theta, batch):
        if batch.n == 0:
            raise ValueError("batch must be nonempty")
        labels = batch.labels
        if labels.max() >= self.num_classes:
            raise ValueError("label out of range for the output layer")
        layers = self._unpack(theta)
        acts, pres, logits = self._forward(layers, batch.inputs)
        lse = logits.max(axis=1, keepdims=True)
        lse = lse + np.log(np.exp(logits - lse).sum(axis=1, keepdims=True))
        loss = float(np.mean(lse[:, 0] - logits[np.arange(batch.n), labels]))
        return loss, layers, acts, pres, logits - lse

    def loss_grad(self, theta, batch) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its exact gradient via backpropagation."""
        loss, layers, acts, pres, log_probs = self._loss_parts(theta, batch)
        n = batch.n
        delta = np.exp(log_probs)
        delta[np.arange(n), batch.labels] -= 1.0
        delta /= n
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            grads.append((delta.T @ acts[i], delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ w) * self._act_deriv(pres[i - 1], acts[i])
        flat = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in reversed(grads)])
        return loss, flat

    def predict(self, theta, inputs) -> np.ndarray:
        return np.argmax(self.forward(theta, inputs), axis=1)

    def eval_error(self, theta, batch) -> float:
        """Misclassification rate in [0, 1]."""
        return float(np.mean(self.predict(theta, batch.inputs) != batch.labels))

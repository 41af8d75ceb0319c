"""Adaptive optimizers, warmup schedules, and the step-indexed training loop.

Adam's two statistics at step t, written over the raw gradient history, are
the bias-corrected exponential mean

    phi = (1 - beta1) sum_i beta1^{t-i} g_i / (1 - beta1^t)

and the adaptive learning rate

    psi = sqrt((1 - beta2^t) / ((1 - beta2) sum_i beta2^{t-i} g_i^2)).

The streaming states below reproduce both exactly.  The learning rate warms
up linearly, eta(t) = min(t/T_w, 1) * eta0, and the gradient-norm
regularization strength can be warmed up alongside it in three ways:
ramping the perturbation radius (with the lambda/r ratio preserved),
ramping the regularization degree at fixed radius, or disabling
regularization outright until the warmup window ends.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import NonFiniteError, RngState, as_vector, l2_norm
from .objectives import Dataset, MlpClassifier, QuadraticObjective, synth_dataset
from .regularizer import GrConfig, gr_gradient_parts

__all__ = [
    "momentum_phi",
    "adaptive_lr_psi",
    "AdamState",
    "adam_step",
    "RmsPropState",
    "rmsprop_step",
    "POLICIES",
    "lr_at",
    "gr_params_at",
    "WarmupSchedule",
    "grad_clip",
    "TrainConfig",
    "TrainRecord",
    "TrainResult",
    "train",
    "write_trace",
    "read_trace",
    "trace_line",
    "ConfigError",
    "load_train_setup",
]


# ---------------------------------------------------------------------------
# Direct-sum moment statistics (reference forms)


def momentum_phi(grads, beta1: float) -> float:
    """Bias-corrected exponentially weighted mean of a gradient sequence."""
    g = np.asarray(grads, dtype=np.float64)
    if g.size == 0:
        raise ValueError("gradient sequence must be nonempty")
    if not 0.0 <= beta1 < 1.0:
        raise ValueError(f"beta1 must lie in [0, 1), got {beta1}")
    t = g.size
    weights = beta1 ** np.arange(t - 1, -1, -1, dtype=np.float64)
    return float((1.0 - beta1) * np.dot(weights, g) / (1.0 - beta1**t))


def adaptive_lr_psi(grads, beta2: float) -> float:
    """Inverse root of the bias-corrected second gradient moment."""
    g = np.asarray(grads, dtype=np.float64)
    if g.size == 0:
        raise ValueError("gradient sequence must be nonempty")
    if not 0.0 <= beta2 < 1.0:
        raise ValueError(f"beta2 must lie in [0, 1), got {beta2}")
    t = g.size
    weights = beta2 ** np.arange(t - 1, -1, -1, dtype=np.float64)
    denom = (1.0 - beta2) * np.dot(weights, g * g)
    if denom == 0.0:
        raise ZeroDivisionError("adaptive learning rate diverges for all-zero gradients")
    return float(math.sqrt((1.0 - beta2**t) / denom))


# ---------------------------------------------------------------------------
# Optimizer states


@dataclass(frozen=True)
class AdamState:
    """Adam moment accumulators; step counter t counts completed steps."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, dim: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        return cls(m=np.zeros(dim), v=np.zeros(dim), beta1=beta1, beta2=beta2, eps=eps)

    def momentum(self) -> np.ndarray:
        """Bias-corrected first moment; equals the direct-sum phi per coordinate."""
        if self.t < 1:
            raise ValueError("no steps taken yet")
        return self.m / (1.0 - self.beta1**self.t)

    def adaptive_lr(self) -> np.ndarray:
        """Per-coordinate psi; equals the direct-sum form for nonzero histories."""
        if self.t < 1:
            raise ValueError("no steps taken yet")
        if np.any(self.v == 0.0):
            raise ZeroDivisionError("adaptive learning rate diverges for all-zero gradients")
        return np.sqrt((1.0 - self.beta2**self.t) / self.v)


def adam_step(state: AdamState, theta, g, lr: float):
    """One Adam update; returns (new_theta, new_state)."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match {theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t_next = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t_next)
    v_hat = v / (1.0 - state.beta2**t_next)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_theta, replace(state, m=m, v=v, t=t_next)


@dataclass(frozen=True)
class RmsPropState:
    """Running second-moment accumulator for RMSProp."""

    v: np.ndarray
    decay: float = 0.9
    eps: float = 1e-8

    @classmethod
    def fresh(cls, dim: int, decay: float = 0.9, eps: float = 1e-8):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        return cls(v=np.zeros(dim), decay=decay, eps=eps)


def rmsprop_step(state: RmsPropState, theta, g, lr: float):
    """One RMSProp update; returns (new_theta, new_state)."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match {theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient passed to rmsprop_step")
    v = state.decay * state.v + (1.0 - state.decay) * g * g
    new_theta = theta - lr * g / (np.sqrt(v) + state.eps)
    return new_theta, replace(state, v=v)


# ---------------------------------------------------------------------------
# Schedules

POLICIES = ("none", "r_warmup", "lambda_warmup", "zero_warmup")


def lr_at(t: int, warmup_steps: int, eta0: float) -> float:
    """Gradual warmup: min(t / T_w, 1) * eta0."""
    if warmup_steps < 1:
        raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    return min(t / warmup_steps, 1.0) * eta0


@dataclass(frozen=True)
class WarmupSchedule:
    """Learning-rate warmup plus one of the regularization warmup policies."""

    policy: str
    warmup_steps: int
    eta0: float
    gr: GrConfig

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not np.isfinite(self.eta0) or self.eta0 <= 0:
            raise ValueError(f"eta0 must be finite and > 0, got {self.eta0}")

    def lr_at(self, t: int) -> float:
        return lr_at(t, self.warmup_steps, self.eta0)

    def gr_params_at(self, t: int) -> tuple[float, float]:
        return gr_params_at(t, self)


def gr_params_at(t: int, sched: WarmupSchedule) -> tuple[float, float]:
    """Regularization degree and radius (lambda_t, r_t) at step t.

    none:           (lambda0, r0) at every step.
    r_warmup:       r_t = min(t/T_w, 1) * r0, lambda_t = (lambda0/r0) * r_t,
                    so the mixing ratio lambda/r stays fixed while the
                    perturbation radius ramps.
    lambda_warmup:  lambda_t = min(t/T_w, 1) * lambda0 at fixed r0.
    zero_warmup:    lambda_t = 0 through t = T_w inclusive, lambda0 after.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    gr = sched.gr
    if sched.policy == "none":
        return gr.lambda0, gr.r0
    if sched.policy == "r_warmup":
        r_t = min(t / sched.warmup_steps, 1.0) * gr.r0
        return (gr.lambda0 / gr.r0) * r_t, r_t
    if sched.policy == "lambda_warmup":
        return min(t / sched.warmup_steps, 1.0) * gr.lambda0, gr.r0
    # zero_warmup
    return (0.0 if t <= sched.warmup_steps else gr.lambda0), gr.r0


def grad_clip(g, max_norm: float) -> np.ndarray:
    """Rescale g to norm max_norm when it exceeds it; otherwise return g."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    g = np.asarray(g, dtype=np.float64)
    norm = l2_norm(g)
    if norm <= max_norm:
        return g
    return g * (max_norm / norm)


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer choice, schedule, and loop bookkeeping for one run."""

    schedule: WarmupSchedule
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.9
    eps_num: float = 1e-8
    epochs: int = 1
    batch_size: int = 32
    clip_norm: float | None = 1.0
    seed: int = 0
    eval_every: int | None = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "rmsprop"):
            raise ValueError(f"optimizer must be 'adam' or 'rmsprop', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError(f"eval_every must be positive or None, got {self.eval_every}")


@dataclass(frozen=True)
class TrainRecord:
    """One training step: losses, norms, and the schedule values applied.

    grad_norm is the norm of the base gradient (before regularization mixing
    and before clipping); mixed_grad_norm is the norm of the mixed gradient
    before clipping.
    """

    step: int
    epoch: int
    loss: float
    grad_norm: float
    mixed_grad_norm: float
    lr: float
    lambda_t: float
    r_t: float
    eval_error: float | None = None


@dataclass
class TrainResult:
    records: list[TrainRecord]
    theta: np.ndarray
    diverged: bool = False


_INIT_STREAM = 0
_SHUFFLE_STREAM = 1


def train(cfg: TrainConfig, obj, data: Dataset) -> TrainResult:
    """Run the mini-batch loop with per-step schedule evaluation and tracing.

    Steps are indexed from 1.  Each epoch reshuffles the sample order with a
    seeded permutation; each step evaluates the learning rate and the
    (lambda_t, r_t) pair, forms the mixed gradient (skipping the second
    gradient evaluation entirely when lambda_t = 0), optionally clips, and
    applies the optimizer update.  Fully deterministic given cfg.seed.

    A non-finite loss or gradient aborts the run: a diagnostic record with
    NaN metrics is appended and the result is flagged as diverged.
    """
    if data.n == 0:
        raise ValueError("dataset must be nonempty")
    sched = cfg.schedule
    theta = obj.init_params(RngState(cfg.seed, _INIT_STREAM))
    shuffle_rng = RngState(cfg.seed, _SHUFFLE_STREAM)
    if cfg.optimizer == "adam":
        state = AdamState.fresh(theta.size, cfg.beta1, cfg.beta2, cfg.eps_num)
        step_fn = adam_step
    else:
        state = RmsPropState.fresh(theta.size, cfg.decay, cfg.eps_num)
        step_fn = rmsprop_step
    steps_per_epoch = -(-data.n // cfg.batch_size)
    records: list[TrainRecord] = []
    can_eval = hasattr(obj, "eval_error")
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(data.n)
        for b in range(steps_per_epoch):
            t += 1
            batch = data.batch(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            eta = sched.lr_at(t)
            lambda_t, r_t = sched.gr_params_at(t)
            try:
                loss, g1, g = gr_gradient_parts(obj, theta, batch, lambda_t, r_t)
                if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite loss or gradient")
            except NonFiniteError:
                records.append(
                    TrainRecord(t, epoch, math.nan, math.nan, math.nan, eta, lambda_t, r_t)
                )
                return TrainResult(records, theta, diverged=True)
            grad_norm = l2_norm(g1)
            mixed_norm = l2_norm(g)
            if cfg.clip_norm is not None:
                g = grad_clip(g, cfg.clip_norm)
            theta, state = step_fn(state, theta, g, eta)
            eval_error = None
            if can_eval and cfg.eval_every is not None and t % cfg.eval_every == 0:
                eval_error = obj.eval_error(theta, data)
            records.append(
                TrainRecord(t, epoch, loss, grad_norm, mixed_norm, eta, lambda_t, r_t, eval_error)
            )
    return TrainResult(records, theta)


# ---------------------------------------------------------------------------
# Trace serialization (JSON lines, 17 significant digits, exact round-trip)


def _fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def trace_line(rec: TrainRecord) -> str:
    parts = [
        f'"step": {rec.step}',
        f'"epoch": {rec.epoch}',
        f'"loss": {_fmt_float(rec.loss)}',
        f'"grad_norm": {_fmt_float(rec.grad_norm)}',
        f'"mixed_grad_norm": {_fmt_float(rec.mixed_grad_norm)}',
        f'"lr": {_fmt_float(rec.lr)}',
        f'"lambda_t": {_fmt_float(rec.lambda_t)}',
        f'"r_t": {_fmt_float(rec.r_t)}',
    ]
    if rec.eval_error is not None:
        parts.append(f'"eval_error": {_fmt_float(rec.eval_error)}')
    return "{" + ", ".join(parts) + "}"


def write_trace(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(trace_line(rec) + "\n")


def read_trace(path) -> list[TrainRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            records.append(
                TrainRecord(
                    step=doc["step"],
                    epoch=doc["epoch"],
                    loss=math.nan if doc["loss"] is None else doc["loss"],
                    grad_norm=math.nan if doc["grad_norm"] is None else doc["grad_norm"],
                    mixed_grad_norm=(
                        math.nan if doc["mixed_grad_norm"] is None else doc["mixed_grad_norm"]
                    ),
                    lr=doc["lr"],
                    lambda_t=doc["lambda_t"],
                    r_t=doc["r_t"],
                    eval_error=doc.get("eval_error"),
                )
            )
    return records


# ---------------------------------------------------------------------------
# JSON run configuration


class ConfigError(ValueError):
    """A run-configuration document failed validation."""

    def __init__(self, fieldname: str, message: str):
        super().__init__(f"config field {fieldname!r}: {message}")
        self.fieldname = fieldname


def _get(doc: dict, fieldname: str, kinds, *, required=True, default=None, prefix=""):
    path = f"{prefix}{fieldname}"
    if fieldname not in doc:
        if required:
            raise ConfigError(path, "required")
        return default
    value = doc[fieldname]
    if isinstance(value, bool):
        raise ConfigError(path, "expected a number or string, got a boolean")
    if kinds is not None and not isinstance(value, kinds):
        kind_names = ", ".join(k.__name__ for k in np.atleast_1d(kinds))
        raise ConfigError(path, f"expected {kind_names}, got {type(value).__name__}")
    return value


def load_train_setup(source):
    """Build (objective, dataset, TrainConfig) from a JSON document.

    ``source`` may be a dict, a path, or an open file.  Raises ConfigError
    with the offending field path on schema violations.
    """
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")

    ds = _get(doc, "dataset", dict)
    kind = _get(ds, "kind", str, prefix="dataset.")
    n = _get(ds, "n", int, prefix="dataset.")
    classes = _get(ds, "classes", int, prefix="dataset.")
    ds_seed = _get(ds, "seed", int, prefix="dataset.")
    try:
        dataset = synth_dataset(kind, n, classes, ds_seed)
    except ValueError as exc:
        raise ConfigError("dataset", str(exc)) from exc

    model = _get(doc, "model", dict)
    model_kind = _get(model, "kind", str, prefix="model.")
    if model_kind == "mlp":
        hidden = _get(model, "hidden", list, required=False, default=[16], prefix="model.")
        activation = _get(model, "activation", str, required=False, default="tanh", prefix="model.")
        widths = (dataset.num_features, *[int(h) for h in hidden], dataset.num_classes)
        try:
            obj = MlpClassifier(widths, activation)
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from exc
    elif model_kind == "quadratic":
        dim = _get(model, "dim", int, prefix="model.")
        cond = _get(model, "cond", (int, float), required=False, default=10.0, prefix="model.")
        init_scale = _get(model, "init_scale", (int, float), required=False, default=1.0, prefix="model.")
        rotation_seed = _get(model, "rotation_seed", int, required=False, default=None, prefix="model.")
        if dim < 1:
            raise ConfigError("model.dim", f"must be >= 1, got {dim}")
        if cond < 1:
            raise ConfigError("model.cond", f"must be >= 1, got {cond}")
        spectrum = np.geomspace(1.0, float(cond), dim)
        if rotation_seed is None:
            hessian = np.diag(spectrum)
        else:
            basis, _ = np.linalg.qr(RngState(rotation_seed).standard_normals((dim, dim)))
            hessian = (basis * spectrum) @ basis.T
        try:
            obj = QuadraticObjective(hessian, init_scale=float(init_scale))
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from exc
    else:
        raise ConfigError("model.kind", f"must be 'mlp' or 'quadratic', got {model_kind!r}")

    opt = _get(doc, "optimizer", dict, required=False, default={"kind": "adam"})
    opt_kind = _get(opt, "kind", str, prefix="optimizer.")
    lr = _get(doc, "lr", (int, float))
    warmup_steps = _get(doc, "warmup_steps", int)
    policy = _get(doc, "policy", str)
    lambda0 = _get(doc, "lambda0", (int, float))
    r0 = _get(doc, "r0", (int, float))
    epochs = _get(doc, "epochs", int)
    batch_size = _get(doc, "batch_size", int)
    clip_norm = _get(doc, "clip_norm", (int, float, type(None)), required=False, default=1.0)
    seed = _get(doc, "seed", int)
    eval_every = _get(doc, "eval_every", (int, type(None)), required=False, default=None)

    try:
        schedule = WarmupSchedule(policy, warmup_steps, float(lr), GrConfig(float(lambda0), float(r0)))
        cfg = TrainConfig(
            schedule=schedule,
            optimizer=opt_kind,
            beta1=float(_get(opt, "beta1", (int, float), required=False, default=0.9, prefix="optimizer.")),
            beta2=float(_get(opt, "beta2", (int, float), required=False, default=0.999, prefix="optimizer.")),
            decay=float(_get(opt, "decay", (int, float), required=False, default=0.9, prefix="optimizer.")),
            eps_num=float(_get(opt, "eps", (int, float), required=False, default=1e-8, prefix="optimizer.")),
            epochs=epochs,
            batch_size=batch_size,
            clip_norm=None if clip_norm is None else float(clip_norm),
            seed=seed,
            eval_every=eval_every,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("<schedule/optimizer>", str(exc)) from exc
    return obj, dataset, cfg

"""Toy cascade with per-layer exits and two-stage training.

The model is a stack of tanh layers with a classifier head on every
layer: intermediate heads are the exits, the final head is the teacher.
Training runs in two stages.  Stage one fits the backbone and teacher
with cross-entropy on the final head only.  Stage two freezes the
backbone and fits the exit heads against a summed per-exit loss of
cross-entropy on the hard targets plus a KL term pulling each exit's
distribution toward the teacher's.

Everything is plain full-batch gradient descent with hand-written
gradients, small enough that every gradient path is checkable against
central finite differences.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cascade import LayerOutcome, TokenTrace

DEFAULT_PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "exitsim-toy-cascade"
CHECKPOINT_VERSION = 1

LOSS_TERM_CHOICES = ("ce", "kl", "both")


class TrainingError(RuntimeError):
    """Training aborted: bad state or a non-finite loss."""


class CheckpointError(ValueError):
    """Model checkpoint file is malformed or has the wrong version."""


@dataclass(frozen=True)
class ToyConfig:
    """Dimensions of the toy cascade."""

    input_dim: int = 16
    hidden_dim: int = 32
    n_layers: int = 6
    vocab_size: int = 32

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.n_layers < 2:
            raise ValueError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")


@dataclass(frozen=True)
class SyntheticExample:
    """One training item: a feature row per token position plus targets."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError(
                f"features must be (tokens, input_dim), got shape "
                f"{self.features.shape}"
            )
        if self.targets.ndim != 1 or len(self.targets) != len(self.features):
            raise ValueError(
                f"targets shape {self.targets.shape} does not match "
                f"{len(self.features)} feature rows"
            )
        if len(self.targets) and self.targets.min() < 0:
            raise ValueError("targets must be non-negative token ids")


@dataclass(frozen=True)
class LossBreakdown:
    """Cross-entropy and distillation parts of one exit loss."""

    ce: float
    kl: float

    @property
    def total(self) -> float:
        return self.ce + self.kl


@dataclass
class ToyCascade:
    """Tanh stack with an exit head per intermediate layer.

    ``layer_weights[0]`` maps input_dim -> hidden_dim; the rest are
    hidden -> hidden.  Exit heads cover layers 1..n_layers-1; the
    final layer's head is the teacher.  ``frozen`` marks the end of
    stage one: after that, backbone and teacher bytes must not change.
    """

    config: ToyConfig
    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]
    exit_weights: list[np.ndarray]
    exit_biases: list[np.ndarray]
    teacher_weight: np.ndarray
    teacher_bias: np.ndarray
    frozen: bool = False

    def backbone_bytes(self) -> bytes:
        """Concatenated raw bytes of backbone + teacher parameters."""
        parts = []
        for w, b in zip(self.layer_weights, self.layer_biases):
            parts.append(w.tobytes())
            parts.append(b.tobytes())
        parts.append(self.teacher_weight.tobytes())
        parts.append(self.teacher_bias.tobytes())
        return b"".join(parts)


def init_cascade(config: ToyConfig, rng: np.random.Generator) -> ToyCascade:
    """Fan-in-scaled gaussian backbone, zero exit heads, zero biases.

    Exit heads start at zero so every exit opens at the uniform
    distribution.  A gaussian start can strand distillation-only
    training in a zero-forcing basin (components the student already
    ignores get no KL gradient); the uniform start does not.
    """
    layer_weights = []
    layer_biases = []
    fan_in = config.input_dim
    for _ in range(config.n_layers):
        scale = 1.0 / np.sqrt(fan_in)
        layer_weights.append(rng.normal(0.0, scale, (fan_in, config.hidden_dim)))
        layer_biases.append(np.zeros(config.hidden_dim))
        fan_in = config.hidden_dim
    head_shape = (config.hidden_dim, config.vocab_size)
    exit_weights = [np.zeros(head_shape) for _ in range(config.n_layers - 1)]
    exit_biases = [np.zeros(config.vocab_size) for _ in range(config.n_layers - 1)]
    teacher_weight = rng.normal(0.0, 1.0 / np.sqrt(config.hidden_dim), head_shape)
    teacher_bias = np.zeros(config.vocab_size)
    return ToyCascade(
        config=config,
        layer_weights=layer_weights,
        layer_biases=layer_biases,
        exit_weights=exit_weights,
        exit_biases=exit_biases,
        teacher_weight=teacher_weight,
        teacher_bias=teacher_bias,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _hidden_states(model: ToyCascade, features: np.ndarray) -> list[np.ndarray]:
    """Per-layer activations for a (rows, input_dim) feature block."""
    if features.ndim != 2 or features.shape[1] != model.config.input_dim:
        raise ValueError(
            f"features shape {features.shape} incompatible with input_dim "
            f"{model.config.input_dim}"
        )
    states = []
    h = features
    for w, b in zip(model.layer_weights, model.layer_biases):
        h = np.tanh(h @ w + b)
        states.append(h)
    return states


def _head_probs(model: ToyCascade, states: Sequence[np.ndarray]) -> np.ndarray:
    """(rows, n_layers, vocab) probabilities from every head."""
    rows = states[0].shape[0]
    out = np.empty((rows, model.config.n_layers, model.config.vocab_size))
    for i in range(model.config.n_layers - 1):
        out[:, i, :] = softmax(states[i] @ model.exit_weights[i] + model.exit_biases[i])
    out[:, -1, :] = softmax(states[-1] @ model.teacher_weight + model.teacher_bias)
    return out


def forward(model: ToyCascade, example: SyntheticExample) -> np.ndarray:
    """Probability vector from every head at every token position.

    Returns an array of shape (tokens, n_layers, vocab_size); the last
    layer slot is the teacher head.
    """
    states = _hidden_states(model, example.features)
    return _head_probs(model, states)


def forward_traces(model: ToyCascade, example: SyntheticExample) -> tuple[TokenTrace, ...]:
    """Run the cascade and package each position as a TokenTrace."""
    probs = forward(model, example)
    traces = []
    for t in range(probs.shape[0]):
        layers = tuple(
            LayerOutcome(float(probs[t, i].max()), int(probs[t, i].argmax()))
            for i in range(probs.shape[1])
        )
        traces.append(TokenTrace(layers=layers))
    return tuple(traces)


def finetune_loss(final_probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy of the final head against the hard targets."""
    if final_probs.ndim != 2 or len(final_probs) != len(targets):
        raise ValueError(
            f"probs shape {final_probs.shape} does not match "
            f"{len(targets)} targets"
        )
    if len(targets) == 0:
        raise ValueError("need at least one target")
    picked = final_probs[np.arange(len(targets)), targets]
    return float(-np.log(np.maximum(picked, DEFAULT_PROB_FLOOR)).mean())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, student distribution first.

    Zero-mass components of p contribute nothing; q is floored at
    DEFAULT_PROB_FLOOR so the value stays finite.  The floor inflates
    q's mass by at most vocab * 1e-12, which can pull the exact value
    a hair below zero; that rounding is clamped away.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"need matching vectors, got {p.shape} and {q.shape}")
    logp = np.log(np.maximum(p, DEFAULT_PROB_FLOOR))
    logq = np.log(np.maximum(q, DEFAULT_PROB_FLOOR))
    value = float(np.where(p > 0.0, p * (logp - logq), 0.0).sum())
    return max(value, 0.0)


def exit_loss(
    student_probs: np.ndarray,
    teacher_probs: np.ndarray,
    targets: np.ndarray,
) -> LossBreakdown:
    """Hard-label CE plus mean KL toward the teacher, per token."""
    if student_probs.shape != teacher_probs.shape:
        raise ValueError(
            f"student shape {student_probs.shape} does not match teacher "
            f"shape {teacher_probs.shape}"
        )
    ce = finetune_loss(student_probs, targets)
    kl = float(
        np.mean([kl_divergence(s, t) for s, t in zip(student_probs, teacher_probs)])
    )
    return LossBreakdown(ce=ce, kl=kl)


@dataclass(frozen=True)
class StepSchedule:
    """Constant learning rate halved every ``every`` epochs."""

    initial: float = 0.5
    decay: float = 0.5
    every: int = 50

    def __post_init__(self) -> None:
        if self.initial <= 0:
            raise ValueError(f"initial rate must be positive, got {self.initial}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.every < 1:
            raise ValueError(f"every must be >= 1, got {self.every}")

    def rate(self, epoch: int) -> float:
        return self.initial * self.decay ** (epoch // self.every)


def _stack_examples(
    examples: Sequence[SyntheticExample],
) -> tuple[np.ndarray, np.ndarray]:
    if not examples:
        raise ValueError("need at least one example")
    features = np.concatenate([e.features for e in examples], axis=0)
    targets = np.concatenate([e.targets for e in examples], axis=0)
    return features, targets


def _ce_grad_logits(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of mean CE with respect to the logits: (p - onehot)/rows."""
    grad = probs.copy()
    grad[np.arange(len(targets)), targets] -= 1.0
    return grad / len(targets)


def _kl_grad_logits(student: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    """Gradient of mean KL(student || teacher) w.r.t. student logits."""
    logp = np.log(np.maximum(student, DEFAULT_PROB_FLOOR))
    logq = np.log(np.maximum(teacher, DEFAULT_PROB_FLOOR))
    diff = logp - logq
    per_row_kl = (np.where(student > 0.0, student * diff, 0.0)).sum(
        axis=1, keepdims=True
    )
    return student * (diff - per_row_kl) / len(student)


def _backbone_backward(
    model: ToyCascade,
    features: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, list[np.ndarray], list[np.ndarray], np.ndarray, np.ndarray]:
    """Loss and gradients for stage one (backbone + teacher head)."""
    states = _hidden_states(model, features)
    logits = states[-1] @ model.teacher_weight + model.teacher_bias
    probs = softmax(logits)
    loss = finetune_loss(probs, targets)

    g_logits = _ce_grad_logits(probs, targets)
    g_teacher_w = states[-1].T @ g_logits
    g_teacher_b = g_logits.sum(axis=0)
    g_h = g_logits @ model.teacher_weight.T

    g_weights: list[np.ndarray] = [None] * len(model.layer_weights)  # type: ignore[list-item]
    g_biases: list[np.ndarray] = [None] * len(model.layer_biases)  # type: ignore[list-item]
    for i in range(len(model.layer_weights) - 1, -1, -1):
        g_z = g_h * (1.0 - states[i] ** 2)
        below = features if i == 0 else states[i - 1]
        g_weights[i] = below.T @ g_z
        g_biases[i] = g_z.sum(axis=0)
        g_h = g_z @ model.layer_weights[i].T
    return loss, g_weights, g_biases, g_teacher_w, g_teacher_b


def _exits_backward(
    model: ToyCascade,
    features: np.ndarray,
    targets: np.ndarray,
    loss_terms: str,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Summed exit loss and per-head gradients for stage two.

    The backbone is fixed, so gradients never flow below the heads and
    each head's gradient is independent of the others.
    """
    if loss_terms not in LOSS_TERM_CHOICES:
        raise ValueError(
            f"loss_terms must be one of {LOSS_TERM_CHOICES}, got {loss_terms!r}"
        )
    states = _hidden_states(model, features)
    teacher = softmax(states[-1] @ model.teacher_weight + model.teacher_bias)
    rows = np.arange(len(targets))

    total = 0.0
    g_weights = []
    g_biases = []
    for i in range(model.config.n_layers - 1):
        logits = states[i] @ model.exit_weights[i] + model.exit_biases[i]
        probs = softmax(logits)
        g_logits = np.zeros_like(logits)
        if loss_terms in ("ce", "both"):
            picked = probs[rows, targets]
            total += float(-np.log(np.maximum(picked, DEFAULT_PROB_FLOOR)).mean())
            g_logits += _ce_grad_logits(probs, targets)
        if loss_terms in ("kl", "both"):
            logp = np.log(np.maximum(probs, DEFAULT_PROB_FLOOR))
            logq = np.log(np.maximum(teacher, DEFAULT_PROB_FLOOR))
            kl_rows = np.where(probs > 0.0, probs * (logp - logq), 0.0).sum(axis=1)
            total += float(np.maximum(kl_rows, 0.0).mean())
            g_logits += _kl_grad_logits(probs, teacher)
        g_weights.append(states[i].T @ g_logits)
        g_biases.append(g_logits.sum(axis=0))
    return total, g_weights, g_biases


def train_backbone(
    model: ToyCascade,
    examples: Sequence[SyntheticExample],
    epochs: int,
    schedule: StepSchedule,
) -> list[float]:
    """Stage one: descend the final-head CE, then freeze the backbone.

    Returns the per-epoch loss history (evaluated before each step).
    The model is mutated in place and comes out with frozen = True even
    for zero epochs.
    """
    if model.frozen:
        raise TrainingError("backbone is frozen; stage one already ran")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    features, targets = _stack_examples(examples)
    if targets.max() >= model.config.vocab_size:
        raise ValueError("target id outside the model vocabulary")
    history = []
    for epoch in range(epochs):
        loss, g_w, g_b, g_tw, g_tb = _backbone_backward(model, features, targets)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at epoch {epoch}")
        history.append(loss)
        lr = schedule.rate(epoch)
        for i in range(len(model.layer_weights)):
            model.layer_weights[i] -= lr * g_w[i]
            model.layer_biases[i] -= lr * g_b[i]
        model.teacher_weight -= lr * g_tw
        model.teacher_bias -= lr * g_tb
    model.frozen = True
    return history


def train_exits(
    model: ToyCascade,
    examples: Sequence[SyntheticExample],
    epochs: int,
    schedule: StepSchedule,
    loss_terms: str = "both",
) -> list[float]:
    """Stage two: descend the summed exit losses over heads 1..N-1.

    Requires a frozen backbone; only exit head parameters move.
    Returns the per-epoch summed-loss history.
    """
    if not model.frozen:
        raise TrainingError("freeze the backbone (stage one) before exit training")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    features, targets = _stack_examples(examples)
    if targets.max() >= model.config.vocab_size:
        raise ValueError("target id outside the model vocabulary")
    history = []
    for epoch in range(epochs):
        loss, g_w, g_b = _exits_backward(model, features, targets, loss_terms)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at epoch {epoch}")
        history.append(loss)
        lr = schedule.rate(epoch)
        for i in range(len(model.exit_weights)):
            model.exit_weights[i] -= lr * g_w[i]
            model.exit_biases[i] -= lr * g_b[i]
    return history


def layer_accuracies(
    model: ToyCascade, examples: Sequence[SyntheticExample]
) -> tuple[float, ...]:
    """Exact-match accuracy of every head, exits first, teacher last."""
    features, targets = _stack_examples(examples)
    states = _hidden_states(model, features)
    probs = _head_probs(model, states)
    hits = probs.argmax(axis=2) == targets[:, None]
    return tuple(float(v) for v in hits.mean(axis=0))


# ---------------------------------------------------------------------------
# Flat-vector objectives for finite-difference checking


def _flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def _unflatten(vector: np.ndarray, templates: Sequence[np.ndarray]) -> list[np.ndarray]:
    out = []
    offset = 0
    for t in templates:
        out.append(vector[offset : offset + t.size].reshape(t.shape))
        offset += t.size
    if offset != vector.size:
        raise ValueError(f"vector has {vector.size} entries, expected {offset}")
    return out


def backbone_objective(
    model: ToyCascade, examples: Sequence[SyntheticExample]
) -> tuple[np.ndarray, Callable[[np.ndarray], tuple[float, np.ndarray]]]:
    """Stage-one loss as a function of the flat backbone parameters.

    Returns the current flat parameter vector and a function mapping
    any such vector to (loss, flat analytic gradient).  The model
    itself is never mutated.
    """
    features, targets = _stack_examples(examples)
    templates = (
        list(model.layer_weights)
        + list(model.layer_biases)
        + [model.teacher_weight, model.teacher_bias]
    )
    x0 = _flatten(templates)
    n = len(model.layer_weights)

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        parts = _unflatten(x, templates)
        probe = dataclasses.replace(
            model,
            layer_weights=parts[:n],
            layer_biases=parts[n : 2 * n],
            teacher_weight=parts[2 * n],
            teacher_bias=parts[2 * n + 1],
        )
        loss, g_w, g_b, g_tw, g_tb = _backbone_backward(probe, features, targets)
        return loss, _flatten(g_w + g_b + [g_tw, g_tb])

    return x0, objective


def exit_objective(
    model: ToyCascade,
    examples: Sequence[SyntheticExample],
    loss_terms: str = "both",
) -> tuple[np.ndarray, Callable[[np.ndarray], tuple[float, np.ndarray]]]:
    """Stage-two summed exit loss as a function of the flat head params."""
    features, targets = _stack_examples(examples)
    templates = list(model.exit_weights) + list(model.exit_biases)
    x0 = _flatten(templates)
    n = len(model.exit_weights)

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        parts = _unflatten(x, templates)
        probe = dataclasses.replace(
            model, exit_weights=parts[:n], exit_biases=parts[n:]
        )
        loss, g_w, g_b = _exits_backward(probe, features, targets, loss_terms)
        return loss, _flatten(g_w + g_b)

    return x0, objective


def gradient_check(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    n_probes: int = 100,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error of the analytic gradient on random coordinates.

    Central differences with the given step; relative error uses
    max(|analytic|, |numeric|, 1e-6) as the denominator so near-zero
    coordinates do not blow up the ratio.
    """
    rng = np.random.default_rng(seed)
    _, grad = objective(x0)
    worst = 0.0
    for _ in range(n_probes):
        j = int(rng.integers(0, x0.size))
        bumped = x0.copy()
        bumped[j] = x0[j] + step
        up, _ = objective(bumped)
        bumped[j] = x0[j] - step
        down, _ = objective(bumped)
        numeric = (up - down) / (2.0 * step)
        denom = max(abs(grad[j]), abs(numeric), 1e-6)
        worst = max(worst, abs(grad[j] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Toy task construction


@dataclass(frozen=True)
class ToyTask:
    """Train/heldout split over one fixed parity labeling."""

    train: tuple[SyntheticExample, ...]
    heldout: tuple[SyntheticExample, ...]


def make_task(
    config: ToyConfig,
    rng: np.random.Generator,
    n_train: int = 512,
    n_heldout: int = 1024,
    tokens_per_example: int = 8,
    n_classes: int = 4,
    margin: float = 0.3,
    label_noise: float = 0.1,
) -> ToyTask:
    """Sign-parity labeling task over gaussian features.

    The class index is built from sign-XOR bits of consecutive feature
    pairs, so no single linear readout solves it but a few tanh layers
    do: exit accuracy then genuinely increases with depth.  Rows whose
    defining coordinates fall within ``margin`` of zero are rejected,
    keeping the boundary crisp.  A ``label_noise`` fraction of training
    targets is resampled uniformly; held-out targets stay clean, so
    held-out accuracy measures the true boundary and soft teacher
    labels carry real value over the corrupted hard ones.
    """
    if n_train < 1 or n_heldout < 1:
        raise ValueError("need at least one example per split")
    if tokens_per_example < 1:
        raise ValueError(
            f"tokens_per_example must be >= 1, got {tokens_per_example}"
        )
    n_bits = n_classes.bit_length() - 1
    if n_classes < 2 or n_classes != 1 << n_bits:
        raise ValueError(f"n_classes must be a power of two >= 2, got {n_classes}")
    if n_classes > config.vocab_size:
        raise ValueError(
            f"n_classes {n_classes} exceeds vocab_size {config.vocab_size}"
        )
    if 2 * n_bits > config.input_dim:
        raise ValueError(
            f"{n_classes} classes need {2 * n_bits} defining coordinates, "
            f"input_dim is {config.input_dim}"
        )
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError(f"label_noise {label_noise} outside [0, 1]")

    def draw_rows(n_rows: int, noisy: bool) -> tuple[np.ndarray, np.ndarray]:
        feats = []
        got = 0
        while got < n_rows:
            x = rng.normal(0.0, 1.0, (4096, config.input_dim))
            keep = np.abs(x[:, : 2 * n_bits]).min(axis=1) >= margin
            feats.append(x[keep])
            got += int(keep.sum())
        x = np.concatenate(feats)[:n_rows]
        y = np.zeros(n_rows, dtype=np.int64)
        for k in range(n_bits):
            bit = (x[:, 2 * k] > 0) ^ (x[:, 2 * k + 1] > 0)
            y |= bit.astype(np.int64) << (n_bits - 1 - k)
        if noisy and label_noise > 0:
            flip = rng.random(n_rows) < label_noise
            y = np.where(flip, rng.integers(0, n_classes, n_rows), y)
        return x, y

    def pack(n_examples: int, noisy: bool) -> tuple[SyntheticExample, ...]:
        x, y = draw_rows(n_examples * tokens_per_example, noisy)
        return tuple(
            SyntheticExample(
                features=x[i * tokens_per_example : (i + 1) * tokens_per_example],
                targets=y[i * tokens_per_example : (i + 1) * tokens_per_example],
            )
            for i in range(n_examples)
        )

    return ToyTask(train=pack(n_train, True), heldout=pack(n_heldout, False))


# ---------------------------------------------------------------------------
# Checkpoint serialization


def save_cascade(model: ToyCascade, path: str) -> None:
    """Write the model as a versioned JSON checkpoint."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "frozen": model.frozen,
        "layer_weights": [w.tolist() for w in model.layer_weights],
        "layer_biases": [b.tolist() for b in model.layer_biases],
        "exit_weights": [w.tolist() for w in model.exit_weights],
        "exit_biases": [b.tolist() for b in model.exit_biases],
        "teacher_weight": model.teacher_weight.tolist(),
        "teacher_bias": model.teacher_bias.tolist(),
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True)
        handle.write("\n")


def load_cascade(path: str) -> ToyCascade:
    """Read a checkpoint written by save_cascade.

    Raises CheckpointError on a wrong format tag, unknown version, or
    dimensions that disagree with the stored config.
    """
    with open(path, "r", encoding="utf-8") as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: format {payload.get('format')!r} is not "
            f"{CHECKPOINT_FORMAT!r}"
        )
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {payload.get('version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        config = ToyConfig(**payload["config"])
        model = ToyCascade(
            config=config,
            layer_weights=[np.array(w, dtype=float) for w in payload["layer_weights"]],
            layer_biases=[np.array(b, dtype=float) for b in payload["layer_biases"]],
            exit_weights=[np.array(w, dtype=float) for w in payload["exit_weights"]],
            exit_biases=[np.array(b, dtype=float) for b in payload["exit_biases"]],
            teacher_weight=np.array(payload["teacher_weight"], dtype=float),
            teacher_bias=np.array(payload["teacher_bias"], dtype=float),
            frozen=bool(payload["frozen"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad checkpoint contents: {exc}") from exc
    _validate_shapes(model, path)
    return model


def _validate_shapes(model: ToyCascade, path: str) -> None:
    cfg = model.config
    expected_layers = [(cfg.input_dim, cfg.hidden_dim)] + [
        (cfg.hidden_dim, cfg.hidden_dim)
    ] * (cfg.n_layers - 1)
    if len(model.layer_weights) != cfg.n_layers or len(model.layer_biases) != cfg.n_layers:
        raise CheckpointError(f"{path}: wrong number of backbone layers")
    for w, b, shape in zip(model.layer_weights, model.layer_biases, expected_layers):
        if w.shape != shape or b.shape != (cfg.hidden_dim,):
            raise CheckpointError(f"{path}: backbone parameter shape mismatch")
    head_shape = (cfg.hidden_dim, cfg.vocab_size)
    if (
        len(model.exit_weights) != cfg.n_layers - 1
        or len(model.exit_biases) != cfg.n_layers - 1
    ):
        raise CheckpointError(f"{path}: wrong number of exit heads")
    for w, b in zip(model.exit_weights, model.exit_biases):
        if w.shape != head_shape or b.shape != (cfg.vocab_size,):
            raise CheckpointError(f"{path}: exit head shape mismatch")
    if model.teacher_weight.shape != head_shape or model.teacher_bias.shape != (
        cfg.vocab_size,
    ):
        raise CheckpointError(f"{path}: teacher head shape mismatch")

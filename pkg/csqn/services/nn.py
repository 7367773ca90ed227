"""Feed-forward ReLU network with manual backprop over a flat parameter vector.

Parameters are laid out layer by layer as W (fan_in x fan_out, row-major)
followed by b (fan_out). The network computes in the dtype of θ, so the
training loop passes float32 while curvature sampling may pass float64.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from csqn.errors import NumericalError, ShapeError


TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths from input to output; ReLU on hidden layers."""
    widths: Tuple[int, ...]
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("an MLP needs an input, at least one hidden and an output layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def build(cls, input_dim: int, hidden: Sequence[int], classes: int,
              dropout: float = 0.0) -> "MlpArchitecture":
        return cls(widths=(input_dim, *hidden, classes), dropout=dropout)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def classes(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


@dataclass
class Batch:
    """Inputs (batch x d) with integer class labels."""
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ShapeError(f"batch inputs must be 2-D, got {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, index: np.ndarray) -> "Batch":
        return Batch(self.inputs[index], self.labels[index])


@dataclass
class ForwardRecord:
    """Activations and dropout masks needed for exact backprop."""
    activations: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    logits: np.ndarray


class Mlp:
    """Stateless network: θ is always passed in, never stored."""

    def __init__(self, architecture: MlpArchitecture):
        self.architecture = architecture

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        chunks = []
        for fan_in, fan_out in self.architecture.layer_shapes:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
        return np.concatenate(chunks).astype(np.float32)

    def unflatten(self, theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) per layer into θ."""
        if theta.shape != (self.architecture.param_count,):
            raise ShapeError(
                f"θ has shape {theta.shape}, expected ({self.architecture.param_count},)"
            )
        layers = []
        offset = 0
        for fan_in, fan_out in self.architecture.layer_shapes:
            w = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = theta[offset:offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers

    @staticmethod
    def flatten(layers: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        return np.concatenate([part.ravel() for w, b in layers for part in (w, b)])

    def forward(self, theta: np.ndarray, inputs: np.ndarray, mode: str = EVAL,
                rng: Optional[np.random.Generator] = None) -> ForwardRecord:
        if inputs.ndim != 2 or inputs.shape[1] != self.architecture.input_dim:
            raise ShapeError(
                f"inputs of shape {inputs.shape} do not match input width "
                f"{self.architecture.input_dim}"
            )
        if mode == TRAIN and self.architecture.dropout > 0 and rng is None:
            raise ValueError("train mode with dropout needs an rng")
        layers = self.unflatten(theta)
        h = inputs.astype(theta.dtype, copy=False)
        activations = [h]
        masks: List[Optional[np.ndarray]] = []
        keep = 1.0 - self.architecture.dropout
        for w, b in layers[:-1]:
            h = np.maximum(h @ w + b, 0)
            mask = None
            if mode == TRAIN and self.architecture.dropout > 0:
                # inverted dropout: eval needs no rescaling
                mask = ((rng.random(h.shape) < keep) / keep).astype(theta.dtype)
                h = h * mask
            masks.append(mask)
            activations.append(h)
        w, b = layers[-1]
        return ForwardRecord(activations, masks, h @ w + b)

    def _backward(self, theta: np.ndarray, record: ForwardRecord,
                  delta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per-layer (dW, db) given dLoss/dlogits, summed over the batch."""
        layers = self.unflatten(theta)
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            a_in = record.activations[i]
            grads.append((a_in.T @ delta, delta.sum(axis=0)))
            if i > 0:
                delta = delta @ layers[i][0].T
                if record.masks[i - 1] is not None:
                    delta = delta * record.masks[i - 1]
                delta = delta * (record.activations[i] > 0)
        return grads[::-1]

    def _delta(self, record: ForwardRecord, labels: np.ndarray) -> np.ndarray:
        # d(-log softmax_y)/dlogits per sample
        probs = softmax(record.logits, axis=1)
        probs[np.arange(labels.shape[0]), labels] -= 1
        return probs

    def loss_and_grad(self, theta: np.ndarray, batch: Batch, mode: str = EVAL,
                      rng: Optional[np.random.Generator] = None) -> Tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient with respect to θ."""
        if len(batch) == 0:
            raise ShapeError("empty batch")
        record = self.forward(theta, batch.inputs, mode, rng)
        logp = log_softmax(record.logits, axis=1)
        n = len(batch)
        loss = float(-logp[np.arange(n), batch.labels].mean())
        delta = self._delta(record, batch.labels) / n
        grad = self.flatten(self._backward(theta, record, delta))
        return loss, grad.astype(theta.dtype, copy=False)

    def fisher_and_grad(self, theta: np.ndarray, batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
        """Diagonal empirical Fisher and the mean gradient from one eval-mode pass.

        The Fisher entry is (1/B)Σ_b g_b∘g_b with g_b the single-sample gradient
        of -log p(y_b|x_b). For a linear layer the per-sample weight gradient is
        outer(a_b, δ_b), so the sum of its squares is (A∘A)ᵀ(Δ∘Δ).
        """
        n = len(batch)
        if n == 0:
            raise ShapeError("empty batch")
        record = self.forward(theta, batch.inputs, EVAL)
        layers = self.unflatten(theta)
        delta = self._delta(record, batch.labels).astype(np.float64)
        sq_parts, grad_parts = [], []
        for i in range(len(layers) - 1, -1, -1):
            a_in = record.activations[i].astype(np.float64)
            sq_parts.append(((a_in * a_in).T @ (delta * delta), (delta * delta).sum(axis=0)))
            grad_parts.append((a_in.T @ delta, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ layers[i][0].T.astype(np.float64)) * (record.activations[i] > 0)
        fisher = self.flatten(sq_parts[::-1]) / n
        grad = self.flatten(grad_parts[::-1]) / n
        return fisher, grad

    def per_sample_sq_grad(self, theta: np.ndarray, batch: Batch) -> np.ndarray:
        return self.fisher_and_grad(theta, batch)[0]

    def predict(self, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(theta, inputs, EVAL).logits, axis=1)


@dataclass
class OptimizerState:
    """Adam or SGD-momentum state over a flat parameter vector."""
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @classmethod
    def from_settings(cls, settings, size: int) -> "OptimizerState":
        state = cls(kind=settings.kind, lr=settings.lr, beta1=settings.beta1,
                    beta2=settings.beta2, eps=settings.eps, momentum=settings.momentum)
        state.m = np.zeros(size, dtype=np.float32)
        if state.kind == "adam":
            state.v = np.zeros(size, dtype=np.float32)
        return state


def optimizer_step(state: OptimizerState, theta: np.ndarray,
                   grad: np.ndarray) -> Tuple[np.ndarray, OptimizerState]:
    """One SGD-momentum or bias-corrected Adam update; returns new θ."""
    if theta.shape != grad.shape:
        raise ShapeError(f"θ {theta.shape} and gradient {grad.shape} differ")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NumericalError(
            f"non-finite gradient at optimizer step {state.step + 1} ({bad} entries)"
        )
    if state.m is None:
        state.m = np.zeros_like(theta)
    state.step += 1
    if state.kind == "sgd":
        state.m = state.momentum * state.m + grad
        return theta - state.lr * state.m, state
    if state.kind != "adam":
        raise ValueError(f"unknown optimizer kind '{state.kind}'")
    if state.v is None:
        state.v = np.zeros_like(theta)
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return (theta - update).astype(theta.dtype, copy=False), state

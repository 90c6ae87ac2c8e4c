"""Two-layer perceptron classifier with hand-written backpropagation.

The model bilinearly resamples its input to ``input_side x input_side``
(default 16x16), flattens the RGB values and applies
``affine -> relu -> affine`` to produce two logits. The resampling is a
fixed linear map (followed by the centering ``x - 0.5``) and is
differentiated through, so ``input_gradient`` is
the exact gradient of the cross-entropy with respect to the original pixels.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidCheckpoint

CHECKPOINT_VERSION = "toy-mlp-v1"
INPUT_GAIN = 1.0  # unit input range keeps the fixed SGD rate stable on 768 inputs


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.init_scale <= 0:
            raise ValueError(f"invalid training config {self}")


@lru_cache(maxsize=None)
def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` 1-D bilinear interpolation matrix (half-pixel centers)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def resample_operator(height: int, width: int, side: int) -> np.ndarray:
    """``(side*side, height*width)`` separable bilinear resampling as one matrix."""
    m = np.kron(resample_matrix(height, side), resample_matrix(width, side))
    m.setflags(write=False)
    return m


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class MlpClassifier:
    """``resample -> affine -> relu -> affine`` network over RGB patches.

    Satisfies the differentiable-model contract used by the adversary:
    ``loss(image, label)`` and ``input_gradient(image, label)``.
    """

    def __init__(self, w1, b1, w2, b2, input_side: int = 16):
        self.input_side = int(input_side)
        self.w1 = np.asarray(w1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.w2 = np.asarray(w2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        n_in = self.input_side * self.input_side * 3
        hidden = self.w1.shape[1]
        if self.w1.shape != (n_in, hidden) or self.b1.shape != (hidden,):
            raise ValueError("first layer shapes are inconsistent")
        if self.w2.shape != (hidden, 2) or self.b2.shape != (2,):
            raise ValueError("second layer shapes are inconsistent")

    @classmethod
    def init(cls, seed: int = 0, input_side: int = 16, hidden: int = 32, scale: float = 1.0):
        rng = np.random.default_rng(seed)
        n_in = input_side * input_side * 3
        lim1 = scale / np.sqrt(n_in)
        lim2 = scale / np.sqrt(hidden)
        return cls(
            rng.uniform(-lim1, lim1, size=(n_in, hidden)),
            np.zeros(hidden),
            rng.uniform(-lim2, lim2, size=(hidden, 2)),
            np.zeros(2),
            input_side=input_side,
        )

    @classmethod
    def zeros(cls, input_side: int = 16, hidden: int = 32):
        n_in = input_side * input_side * 3
        return cls(np.zeros((n_in, hidden)), np.zeros(hidden), np.zeros((hidden, 2)),
                   np.zeros(2), input_side=input_side)

    def copy(self) -> "MlpClassifier":
        return copy.deepcopy(self)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    # ------------------------------------------------------------------ forward/backward

    def _features(self, images: np.ndarray) -> np.ndarray:
        b, height, width, _ = images.shape
        op = resample_operator(height, width, self.input_side)
        # centered input: intensities in [0, 1] map to [-GAIN/2, GAIN/2]
        return INPUT_GAIN * ((op @ images.reshape(b, height * width, 3)).reshape(b, -1) - 0.5)

    def _forward(self, images: np.ndarray):
        x = self._features(images)
        pre = x @ self.w1 + self.b1
        act = np.maximum(pre, 0.0)
        logits = act @ self.w2 + self.b2
        return x, pre, act, logits

    def _backward(self, images, labels, want_input=False, want_params=False):
        images = np.asarray(images, dtype=float)
        labels = np.asarray(labels, dtype=int)
        x, pre, act, logits = self._forward(images)
        logp = _log_softmax(logits)
        b = images.shape[0]
        losses = -logp[np.arange(b), labels]
        # gradient of the per-sample losses (not averaged)
        d_logits = np.exp(logp)
        d_logits[np.arange(b), labels] -= 1.0
        d_act = d_logits @ self.w2.T
        d_pre = d_act * (pre > 0.0)
        out = {"losses": losses}
        if want_params:
            out["w2"] = act.T @ d_logits / b
            out["b2"] = d_logits.mean(axis=0)
            out["w1"] = x.T @ d_pre / b
            out["b1"] = d_pre.mean(axis=0)
        if want_input:
            _, height, width, _ = images.shape
            op = resample_operator(height, width, self.input_side)
            d_small = (d_pre @ self.w1.T).reshape(b, -1, 3)
            out["input"] = INPUT_GAIN * (op.T @ d_small).reshape(images.shape)
        return out

    # ------------------------------------------------------------------ public API

    def logits(self, images) -> np.ndarray:
        return self._forward(np.asarray(images, dtype=float))[3]

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)

    def losses(self, images, labels) -> np.ndarray:
        """Per-sample cross-entropy."""
        logits = self.logits(images)
        logp = _log_softmax(logits)
        labels = np.asarray(labels, dtype=int)
        return -logp[np.arange(len(labels)), labels]

    def batch_loss(self, images, labels) -> float:
        return float(self.losses(images, labels).mean())

    def loss(self, image, label) -> float:
        return float(self.losses(np.asarray(image, dtype=float)[None], [label])[0])

    def input_gradient(self, image, label) -> np.ndarray:
        return self._backward(np.asarray(image, dtype=float)[None], [label], want_input=True)["input"][0]

    def loss_and_input_gradient(self, image, label) -> tuple[float, np.ndarray]:
        out = self._backward(np.asarray(image, dtype=float)[None], [label], want_input=True)
        return float(out["losses"][0]), out["input"][0]

    def param_gradients(self, images, labels) -> tuple[float, dict[str, np.ndarray]]:
        """Mean batch loss and its gradient with respect to every parameter."""
        out = self._backward(images, labels, want_params=True)
        return float(out["losses"].mean()), {k: out[k] for k in ("w1", "b1", "w2", "b2")}

    def sgd_step(self, images, labels, lr: float) -> float:
        """One in-place SGD step on the mean batch loss; returns the pre-step loss."""
        if len(labels) == 0:
            raise ValueError("empty batch")
        loss, grads = self.param_gradients(images, labels)
        if lr:
            self.w1 = self.w1 - lr * grads["w1"]
            self.b1 = self.b1 - lr * grads["b1"]
            self.w2 = self.w2 - lr * grads["w2"]
            self.b2 = self.b2 - lr * grads["b2"]
        return loss

    # ------------------------------------------------------------------ checkpoints

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "input_side": self.input_side,
            "layers": [
                {"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.items()
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MlpClassifier":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise InvalidCheckpoint(f"unsupported checkpoint version {doc.get('version')!r}")
        arrays = {
            layer["name"]: np.asarray(layer["data"], dtype=float).reshape(layer["shape"])
            for layer in doc["layers"]
        }
        return cls(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"],
                   input_side=int(doc["input_side"]))


def forward_loss(model: MlpClassifier, image, label) -> float:
    return model.loss(image, label)


def input_gradient(model: MlpClassifier, image, label) -> np.ndarray:
    return model.input_gradient(image, label)


def param_step(model: MlpClassifier, images, labels, lr: float):
    """SGD step on a batch; returns ``(model, pre_step_loss)``. Updates ``model`` in place."""
    loss = model.sgd_step(images, labels, lr)
    return model, loss

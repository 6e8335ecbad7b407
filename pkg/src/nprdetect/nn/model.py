"""The detector: a small residual CNN producing one logit per image."""

from __future__ import annotations

import copy

import numpy as np

from .layers import (
    Conv2D,
    GlobalAvgPool,
    Linear,
    ReLU,
    ResidualBlock,
    check_finite,
)
from .loss import bce_loss

ARCHITECTURE = "stem3x3(3>16)+res(16)+conv3x3s2(16>32)+res(32)+gap+fc(32>1)"
INPUT_CHANNELS = 3


class DetectorModel:
    """Fixed residual classifier, ~28k parameters.

    stem 3x3 conv 3->16 + ReLU, residual block at 16, 3x3 stride-2 conv
    16->32 + ReLU, residual block at 32, global average pool, affine 32->1.
    """

    architecture = ARCHITECTURE

    def __init__(self):
        self.stem = Conv2D(INPUT_CHANNELS, 16, 3, 1, 1)
        self.stem_relu = ReLU()
        self.res1 = ResidualBlock(16)
        self.down = Conv2D(16, 32, 3, 2, 1)
        self.down_relu = ReLU()
        self.res2 = ResidualBlock(32)
        self.pool = GlobalAvgPool()
        self.head = Linear(32, 1)
        # fixed per-channel input standardization, (x - shift) * scale
        self.input_shift = np.zeros(INPUT_CHANNELS, np.float32)
        self.input_scale = np.ones(INPUT_CHANNELS, np.float32)
        self._sequence = [
            self.stem, self.stem_relu, self.res1, self.down, self.down_relu,
            self.res2, self.pool, self.head,
        ]

    @classmethod
    def initialize(cls, seed: int, dtype=np.float32) -> "DetectorModel":
        """Seeded uniform(+-1/sqrt(fan_in)) weights, zero biases, zero head.

        The zero head makes every initial prediction exactly 0.5.
        """
        model = cls()
        rng = np.random.default_rng(seed)
        for name, layer in model.param_layers():
            if isinstance(layer, Linear):
                continue
            bound = 1.0 / np.sqrt(layer.fan_in)
            layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
        return model.astype(dtype) if dtype != np.float32 else model

    def param_layers(self):
        """Yield ``(prefix, layer)`` for layers owning parameters, in order."""
        yield "stem", self.stem
        for k, child in self.res1.children().items():
            yield f"res1.{k}", child
        yield "down", self.down
        for k, child in self.res2.children().items():
            yield f"res2.{k}", child
        yield "head", self.head

    def parameters(self) -> dict:
        return {
            f"{prefix}.{name}": arr
            for prefix, layer in self.param_layers()
            for name, arr in layer.params().items()
        }

    def gradients(self) -> dict:
        return {
            f"{prefix}.{name}": arr
            for prefix, layer in self.param_layers()
            for name, arr in layer.grads().items()
        }

    def buffers(self) -> dict:
        """Non-trained state saved with the parameters."""
        return {"input.shift": self.input_shift, "input.scale": self.input_scale}

    def state(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def set_input_normalization(self, shift, scale) -> None:
        shift = np.asarray(shift, dtype=np.float64).reshape(-1)
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        if shift.shape != (INPUT_CHANNELS,) or scale.shape != (INPUT_CHANNELS,):
            raise ValueError("input normalization needs one shift and scale per channel")
        if not (np.all(np.isfinite(shift)) and np.all(np.isfinite(scale)) and np.all(scale > 0)):
            raise ValueError("input normalization must be finite with positive scale")
        self.input_shift = shift.astype(self.dtype)
        self.input_scale = scale.astype(self.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    @property
    def dtype(self):
        return self.stem.weight.dtype

    def astype(self, dtype) -> "DetectorModel":
        """Deep copy with every parameter (and gradient buffer) cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, layer in clone.param_layers():
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
            layer.dweight = np.zeros_like(layer.weight)
            layer.dbias = np.zeros_like(layer.bias)
        clone.input_shift = clone.input_shift.astype(dtype)
        clone.input_scale = clone.input_scale.astype(dtype)
        return clone

    def copy(self) -> "DetectorModel":
        return self.astype(self.dtype)

    def load_parameters(self, params: dict) -> None:
        self._load(self.parameters(), params)

    def load_state(self, state: dict) -> None:
        """Load parameters and buffers, as produced by :meth:`state`."""
        self._load(self.state(), state)

    @staticmethod
    def _load(own: dict, params: dict) -> None:
        if set(own) != set(params):
            missing = sorted(set(own) ^ set(params))
            raise ValueError(f"parameter names differ: {missing}")
        for name, arr in params.items():
            if own[name].shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != {own[name].shape}")
            own[name][...] = arr

    def forward(self, x) -> np.ndarray:
        """Logits of shape (batch, 1) for an NCHW batch with 3 channels."""
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
            raise ValueError(f"expected (N, 3, H, W) input, got {x.shape}")
        out = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        out = (out - self.input_shift) * self.input_scale
        for layer in self._sequence:
            out = layer.forward(out)
        return check_finite("logits", out)

    __call__ = forward

    def backward(self, dlogits) -> np.ndarray:
        """Back-propagate ``dL/dlogits``; fills :meth:`gradients`, returns ``dL/dx``."""
        grad = np.asarray(dlogits, dtype=self.dtype).reshape(-1, 1)
        for layer in reversed(self._sequence):
            grad = layer.backward(grad)
        for name, g in self.gradients().items():
            check_finite(f"gradient of {name}", g)
        grad = grad * self.input_scale
        return np.ascontiguousarray(grad.transpose(0, 3, 1, 2))

    def predict_proba(self, x) -> np.ndarray:
        logits = self.forward(x)[:, 0].astype(np.float64)
        return 1.0 / (1.0 + np.exp(-logits))

    def loss_and_grads(self, x, labels):
        """Mean BCE of the batch; gradients are left in :meth:`gradients`."""
        logits = self.forward(x)
        loss, dlogits = bce_loss(logits[:, 0], labels)
        self.backward(dlogits)
        return loss


def backward(model: DetectorModel, npr_batch, labels) -> dict:
    """Exact gradients of the mean BCE w.r.t. every parameter, as copies."""
    model.loss_and_grads(npr_batch, labels)
    return {k: v.copy() for k, v in model.gradients().items()}


def forward(model: DetectorModel, npr_batch) -> np.ndarray:
    return model.forward(npr_batch)

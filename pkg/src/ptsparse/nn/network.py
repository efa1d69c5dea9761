"""Network container: masked forward, exact backward, BN recalibration."""

from __future__ import annotations

import copy as _copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Layer, ShapeMismatchError


@dataclass
class ForwardTrace:
    """Per-layer caches from one forward pass, enough for an exact backward."""

    caches: list = field(default_factory=list)
    activations: list = field(default_factory=list)  # input, then each layer's output
    logits: np.ndarray | None = None
    masks: dict | None = None
    net_id: int = 0


class Network:
    """Ordered layer stack. Masks are passed per call, keyed by layer index."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers
        self.mode = "eval"

    # -- structure -----------------------------------------------------

    def prunable_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.prunable]

    def prunable_weights(self) -> dict[int, np.ndarray]:
        return {i: self.layers[i].weight for i in self.prunable_indices()}

    def numels(self) -> dict[int, int]:
        return {i: self.layers[i].weight.size for i in self.prunable_indices()}

    def total_prunable(self) -> int:
        return sum(self.numels().values())

    def copy(self) -> "Network":
        return _copy.deepcopy(self)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            for name in sorted(layer.params()):
                h.update(np.ascontiguousarray(layer.params()[name]).tobytes())
        return h.hexdigest()

    # -- execution -----------------------------------------------------

    def _check_masks(self, masks):
        if not masks:
            return
        for idx, m in masks.items():
            if idx >= len(self.layers) or not self.layers[idx].prunable:
                raise ShapeMismatchError(idx, "mask given for non-prunable layer")
            if m.shape != self.layers[idx].weight.shape:
                raise ShapeMismatchError(
                    idx, f"mask shape {m.shape} != weight shape {self.layers[idx].weight.shape}")

    def forward(self, x, masks: dict | None = None, mode: str | None = None) -> ForwardTrace:
        mode = self.mode if mode is None else mode
        self._check_masks(masks)
        trace = ForwardTrace(masks=masks, net_id=id(self))
        h = np.asarray(x, dtype=np.float64)
        trace.activations.append(h)
        for i, layer in enumerate(self.layers):
            weff = None
            if layer.prunable and masks and i in masks:
                weff = layer.weight * masks[i]
            try:
                h, cache = layer.forward(h, mode=mode, weff=weff)
            except ValueError as exc:
                raise ShapeMismatchError(i, str(exc)) from exc
            cache["weff"] = weff
            trace.caches.append(cache)
            trace.activations.append(h)
        trace.logits = h
        return trace

    def backward(self, trace: ForwardTrace, grad_logits: np.ndarray,
                 masks: dict | None = None, ste: bool = False) -> dict[int, dict]:
        """Gradients per layer index. With ste, masked weights still get grads."""
        if trace.net_id != id(self) or len(trace.caches) != len(self.layers):
            raise ValueError("trace does not belong to this network")
        masks = trace.masks if masks is None else masks
        grads: dict[int, dict] = {}
        g = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g, pg = layer.backward(g, trace.caches[i])
            if pg:
                if layer.prunable and masks and i in masks and not ste:
                    pg["weight"] = pg["weight"] * masks[i]
                grads[i] = pg
        return grads

    def bn_recalibrate(self, batches, masks: dict | None = None) -> "Network":
        """Replace all BN statistics by exact streaming moments over batches."""
        seen = False
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.reset_stats()
        for batch in batches:
            seen = True
            self.forward(batch, masks=masks, mode="recal")
        if not seen:
            raise ValueError("bn_recalibrate: empty batch stream")
        return self

    # -- inference helpers ----------------------------------------------

    def predict(self, x, masks=None):
        return predict_distribution(self.forward(x, masks=masks, mode="eval").logits)

    def accuracy(self, x, y, masks=None, batch_size=256) -> float:
        correct = 0
        for start in range(0, len(x), batch_size):
            logits = self.forward(x[start:start + batch_size], masks=masks, mode="eval").logits
            correct += int(np.sum(np.argmax(logits, axis=1) == y[start:start + batch_size]))
        return correct / len(x)


def predict_distribution(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shift-stabilized."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)

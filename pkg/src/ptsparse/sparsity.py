"""Mask algebra and per-layer sparsity distributions.

Masks are dense binary float64 tensors congruent to the weight tensors they
select from. All functions here are pure.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn.network import Network

MAGIC = b"PTSMSK01"


def topk_mask(weights: np.ndarray, rate: float) -> np.ndarray:
    """Keep the floor((1-rate)*S) largest-magnitude entries.

    Ties break stably by ascending flat index among equal magnitudes.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate {rate} outside [0,1]")
    s = weights.size
    k = math.floor((1.0 - rate) * s)
    mask = np.zeros(s)
    if k > 0:
        order = np.argsort(-np.abs(weights).ravel(), kind="stable")
        mask[order[:k]] = 1.0
    return mask.reshape(weights.shape)


@dataclass(frozen=True)
class NMPattern:
    """Keep n weights per group of m consecutive weights along the reduction
    axis (input-channel-major flattening of the weight tensor)."""

    n: int
    m: int

    def __post_init__(self):
        if not 1 <= self.n <= self.m or self.m < 2:
            raise ValueError(f"invalid N:M pattern {self.n}:{self.m}")

    @property
    def sparsity(self) -> float:
        return 1.0 - self.n / self.m

    @classmethod
    def parse(cls, text: str) -> "NMPattern":
        n, m = text.split(":")
        return cls(int(n), int(m))

    def __str__(self):
        return f"{self.n}:{self.m}"


def nm_mask(weights: np.ndarray, pattern: NMPattern) -> np.ndarray:
    """Per length-m group along the reduction axis, keep the n largest
    magnitudes. A short trailing group keeps min(n, len) weights."""
    rows = weights.reshape(weights.shape[0], -1)
    mask = np.zeros_like(rows)
    m = pattern.m
    for start in range(0, rows.shape[1], m):
        block = rows[:, start:start + m]
        keep = min(pattern.n, block.shape[1])
        order = np.argsort(-np.abs(block), axis=1, kind="stable")[:, :keep]
        np.put_along_axis(mask[:, start:start + m], order, 1.0, axis=1)
    return mask.reshape(weights.shape)


def apply_mask(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if weights.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} != weights shape {weights.shape}")
    return weights * mask


def global_sparsity(net: Network, masks: dict[int, np.ndarray]) -> float:
    """1 - kept/total over prunable parameters; layers without a mask count
    as fully dense."""
    total = net.total_prunable()
    ones = 0.0
    for i in net.prunable_indices():
        ones += masks[i].sum() if i in masks else net.layers[i].weight.size
    return 1.0 - ones / total


@dataclass
class SparsityDistribution:
    """Per-prunable-layer sparsity rates realizing a global target."""

    rates: list[float]
    target: float
    layer_indices: list[int] = field(default_factory=list)

    def validate(self, numels: list[int], tol_pp: float = 0.5) -> None:
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ValueError("per-layer rate outside [0,1]")
        realized = self.weighted_rate(numels)
        if abs(realized - self.target) > tol_pp / 100.0:
            raise ValueError(
                f"weighted rate {realized:.4f} off target {self.target:.4f} by >{tol_pp}pp")

    def weighted_rate(self, numels: list[int]) -> float:
        return float(np.dot(self.rates, numels) / np.sum(numels))

    def build_masks(self, net: Network) -> dict[int, np.ndarray]:
        idxs = self.layer_indices or net.prunable_indices()
        return {i: topk_mask(net.layers[i].weight, r) for i, r in zip(idxs, self.rates)}

    def summary(self, numels: list[int] | None = None) -> str:
        lines = [f"target global sparsity: {self.target:.4f}",
                 f"{'layer':>6} {'rate':>8}" + ("" if numels is None else f" {'numel':>10}")]
        idxs = self.layer_indices or list(range(len(self.rates)))
        for pos, (i, r) in enumerate(zip(idxs, self.rates)):
            line = f"{i:>6} {r:8.4f}"
            if numels is not None:
                line += f" {numels[pos]:>10}"
            lines.append(line)
        if numels is not None:
            lines.append(f"weighted rate: {self.weighted_rate(numels):.4f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"rates": self.rates, "target": self.target,
                           "layer_indices": self.layer_indices}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SparsityDistribution":
        d = json.loads(text)
        return cls(rates=d["rates"], target=d["target"],
                   layer_indices=d.get("layer_indices", []))


def uniform_distribution(net: Network, p: float,
                         exclude: set[int] | None = None) -> SparsityDistribution:
    idxs = _included(net, exclude)
    return SparsityDistribution(rates=[p] * len(idxs), target=p, layer_indices=idxs)


def erk_distribution(net: Network, p: float,
                     exclude: set[int] | None = None) -> SparsityDistribution:
    """Per-layer density proportional to sum(dims)/prod(dims), rescaled so the
    parameter-weighted density hits 1-p; densities above 1 are frozen dense and
    the rest renormalized, iterated to a fixpoint."""
    idxs = _included(net, exclude)
    shapes = [net.layers[i].weight.shape for i in idxs]
    numels = np.array([net.layers[i].weight.size for i in idxs], dtype=float)
    raw = np.array([sum(s) / np.prod(s) for s in shapes])
    budget = (1.0 - p) * numels.sum()
    dense = np.zeros(len(idxs), dtype=bool)
    while True:
        remaining = budget - numels[dense].sum()
        active = ~dense
        denom = float((numels[active] * raw[active]).sum())
        if denom <= 0 or remaining <= 0:
            eps = 0.0
        else:
            eps = remaining / denom
        density = np.where(dense, 1.0, np.clip(eps * raw, 0.0, None))
        over = active & (density > 1.0)
        if not over.any():
            break
        dense |= over
    rates = [float(1.0 - d) for d in np.clip(density, 0.0, 1.0)]
    return SparsityDistribution(rates=rates, target=p, layer_indices=idxs)


def _included(net: Network, exclude: set[int] | None) -> list[int]:
    exclude = exclude or set()
    idxs = [i for i in net.prunable_indices() if i not in exclude]
    if not idxs:
        raise ValueError("no prunable layers left after exclusion")
    return idxs


# -- mask export -------------------------------------------------------

def save_masks(masks: dict[int, np.ndarray], path) -> None:
    """Bit-packed masks with a JSON index; same container style as
    checkpoints: magic | uint64 header length | JSON | packed payload."""
    index = []
    blobs = []
    offset = 0
    for i in sorted(masks):
        m = masks[i]
        packed = np.packbits(m.astype(np.uint8).ravel())
        index.append({"layer": i, "shape": list(m.shape), "nnz": int(m.sum()),
                      "rate": 1.0 - float(m.sum()) / m.size,
                      "offset": offset, "nbytes": packed.nbytes})
        blobs.append(packed.tobytes())
        offset += packed.nbytes
    header = json.dumps({"masks": index}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_masks(path) -> dict[int, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError("bad mask file magic")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    masks = {}
    for rec in header["masks"]:
        packed = np.frombuffer(payload[rec["offset"]:rec["offset"] + rec["nbytes"]],
                               dtype=np.uint8)
        size = int(np.prod(rec["shape"]))
        bits = np.unpackbits(packed)[:size]
        masks[rec["layer"]] = bits.astype(np.float64).reshape(rec["shape"])
    return masks


def mask_summary(masks: dict[int, np.ndarray]) -> str:
    lines = [f"{'layer':>6} {'shape':>18} {'nnz':>10} {'rate':>8}"]
    for i in sorted(masks):
        m = masks[i]
        lines.append(f"{i:>6} {str(tuple(m.shape)):>18} {int(m.sum()):>10} "
                     f"{1.0 - m.sum() / m.size:8.4f}")
    return "\n".join(lines)

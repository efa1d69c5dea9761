"""Dynamic sparse training against a frozen dense teacher.

The student starts as a copy of the teacher, trains with a masked forward and
straight-through backward, and refreshes its magnitude masks every delta_t
iterations. Pruned entries receive an extra magnitude decay on every update,
which damps mask churn. The layerwise-MSE objective instead runs a sequential
per-layer reconstruction with static masks (POT-style baseline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn.network import Network, predict_distribution
from .objectives import DecaySchedule, base_decayed_kl, cross_entropy, kl_loss
from .sparsity import NMPattern, SparsityDistribution, nm_mask, topk_mask

OBJECTIVES = ("base_decayed_kl", "kl", "ce", "layerwise_mse")


@dataclass
class TrainConfig:
    iterations: int = 16000
    batch_size: int = 64
    lr: float = 0.01
    alpha: float = 3e-5           # pruned-weight decay
    weight_decay: float = 0.0     # standard L2, unpruned entries only
    delta_t: int = 1              # mask refresh interval
    gamma: float = 0.99
    schedule_unit: str = "epoch"
    clamp_min: float = 0.05
    objective: str = "base_decayed_kl"
    momentum: float = 0.0
    seed: int = 0
    metrics_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.delta_t < 1:
            raise ValueError("delta_t must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")

    def schedule(self) -> DecaySchedule:
        return DecaySchedule(gamma=self.gamma, unit=self.schedule_unit,
                             clamp_min=self.clamp_min)


@dataclass
class TrainState:
    student: Network
    masks: dict[int, np.ndarray]
    rates: dict[int, float]
    nm: NMPattern | None = None
    iteration: int = 0
    lr: float = 0.0
    velocity: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def cosine_lr(iteration: int, total: int, lr0: float) -> float:
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * iteration / total))


def build_masks(net: Network, rates: dict[int, float],
                nm: NMPattern | None = None) -> dict[int, np.ndarray]:
    if nm is not None:
        return {i: nm_mask(net.layers[i].weight, nm) for i in rates}
    return {i: topk_mask(net.layers[i].weight, r) for i, r in rates.items()}


def mask_churn(old: dict[int, np.ndarray], new: dict[int, np.ndarray]) -> float:
    flipped = sum(float(np.sum(old[i] != new[i])) for i in old)
    total = sum(m.size for m in old.values())
    return flipped / total


def _objective_grad(cfg: TrainConfig, sched, z, logits_hat, labels, t):
    z_hat = predict_distribution(logits_hat)
    if cfg.objective == "base_decayed_kl":
        return base_decayed_kl(z, z_hat, t, sched)
    if cfg.objective == "kl":
        return kl_loss(z, z_hat)
    if cfg.objective == "ce":
        return cross_entropy(z_hat, labels)
    raise ValueError(f"objective {cfg.objective!r} has no global gradient")


def train_step(state: TrainState, teacher: Network, batch, cfg: TrainConfig,
               sched: DecaySchedule, calib_size: int):
    """One update: masked forward, STE backward, decayed update of
    pruned entries, then a mask refresh when the interval divides."""
    x, labels = batch
    z = teacher.predict(x)
    trace = state.student.forward(x, masks=state.masks, mode="train")
    if cfg.schedule_unit == "epoch":
        t = (state.iteration * cfg.batch_size) // max(calib_size, 1)
    else:
        t = state.iteration
    loss, grad_logits = _objective_grad(cfg, sched, z, trace.logits, labels, t)
    grads = state.student.backward(trace, grad_logits, ste=True)
    lr = cosine_lr(state.iteration, cfg.iterations, cfg.lr)
    state.lr = lr
    _apply_update(state, grads, lr, cfg)
    state.iteration += 1
    churn = None
    if state.iteration % cfg.delta_t == 0:
        new_masks = build_masks(state.student, state.rates, state.nm)
        churn = mask_churn(state.masks, new_masks)
        state.masks = new_masks
    return loss, churn


def _apply_update(state, grads, lr, cfg):
    for i, pg in grads.items():
        layer = state.student.layers[i]
        for name, g in pg.items():
            if name in ("running_mean", "running_var"):
                continue
            p = layer.params()[name]
            if cfg.momentum > 0:
                key = (i, name)
                v = state.velocity.get(key)
                v = g if v is None else cfg.momentum * v + g
                state.velocity[key] = v
                g = v
            step = lr * g
            if layer.prunable and name == "weight" and i in state.masks:
                mask = state.masks[i]
                decay = np.where(mask == 0.0, cfg.alpha, cfg.weight_decay * lr)
                p -= step + decay * p
            else:
                p -= step


@dataclass
class RunResult:
    student: Network
    masks: dict[int, np.ndarray]
    history: list          # dict rows: iter, loss, lr, churn, sparsity, calib_acc
    final_sparsity: float


def _batch_stream(inputs, labels, batch_size, iterations, rng):
    """Cycle the calibration set with a fresh permutation each epoch."""
    n = len(inputs)
    produced = 0
    while produced < iterations:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if produced >= iterations:
                return
            sel = order[start:start + batch_size]
            yield inputs[sel], labels[sel]
            produced += 1


def _realized_sparsity(masks):
    total = sum(m.size for m in masks.values())
    ones = sum(float(m.sum()) for m in masks.values())
    return 1.0 - ones / total if total else 0.0


def run_training(teacher: Network, distribution: SparsityDistribution | None,
                 calib, cfg: TrainConfig, nm: NMPattern | None = None) -> RunResult:
    """Train a sparse student from a teacher copy on the calibration set.

    Either a per-layer sparsity distribution or an N:M pattern selects the
    masks. The returned student has its final masks applied destructively, so
    exported weights are genuinely sparse.
    """
    if len(calib.inputs) == 0:
        raise ValueError("empty calibration set")
    if (distribution is None) == (nm is None):
        raise ValueError("exactly one of distribution / nm must be given")
    student = teacher.copy()
    if nm is not None:
        rates = {i: nm.sparsity for i in student.prunable_indices()}
    else:
        rates = dict(zip(distribution.layer_indices, distribution.rates))
    masks = build_masks(student, rates, nm)
    if cfg.objective == "layerwise_mse":
        return _run_layerwise_reconstruction(teacher, student, masks, calib, cfg)
    state = TrainState(student=student, masks=masks, rates=rates, nm=nm)
    sched = cfg.schedule()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7D)))
    history = []
    for batch in _batch_stream(calib.inputs, calib.labels, cfg.batch_size,
                               cfg.iterations, rng):
        loss, churn = train_step(state, teacher, batch, cfg, sched, len(calib.inputs))
        if state.iteration % cfg.metrics_every == 0 or state.iteration == cfg.iterations:
            history.append({
                "iter": state.iteration, "loss": loss, "lr": state.lr,
                "churn": churn if churn is not None else 0.0,
                "sparsity": _realized_sparsity(state.masks),
                "calib_acc": state.student.accuracy(calib.inputs, calib.labels,
                                                    masks=state.masks),
            })
    _hard_mask(state.student, state.masks)
    return RunResult(student=state.student, masks=state.masks, history=history,
                     final_sparsity=_realized_sparsity(state.masks))


def _hard_mask(net: Network, masks):
    for i, m in masks.items():
        net.layers[i].weight *= m


def _run_layerwise_reconstruction(teacher, student, masks, calib, cfg) -> RunResult:
    """POT-style baseline: static one-shot masks, then each prunable layer is
    tuned in order to reconstruct the dense layer's output under MSE; only
    surviving weights move."""
    from .objectives import layerwise_mse

    idxs = [i for i in student.prunable_indices() if i in masks]
    per_layer = max(cfg.iterations // max(len(idxs), 1), 1) if cfg.iterations else 0
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7D)))
    history = []
    step_count = 0
    for li in idxs:
        for x, _ in _batch_stream(calib.inputs, calib.labels, cfg.batch_size,
                                  per_layer, rng):
            t_trace = teacher.forward(x, mode="eval")
            s_trace = student.forward(x, masks=masks, mode="train")
            # reconstruct this layer's pre-activation output
            y_dense = _layer_output(t_trace, teacher, li, x)
            y_sparse = _layer_output(s_trace, student, li, x)
            loss, gy = layerwise_mse(y_dense, y_sparse)
            gy = gy / y_dense.size  # per-element normalization keeps steps sane
            _, pg = student.layers[li].backward(gy, s_trace.caches[li])
            lr = cosine_lr(step_count, cfg.iterations, cfg.lr)
            layer = student.layers[li]
            layer.weight -= lr * pg["weight"] * masks[li]
            layer.bias -= lr * pg["bias"]
            step_count += 1
            if step_count % cfg.metrics_every == 0:
                history.append({"iter": step_count, "loss": loss / x.shape[0],
                                "lr": lr, "churn": 0.0,
                                "sparsity": _realized_sparsity(masks),
                                "calib_acc": student.accuracy(
                                    calib.inputs, calib.labels, masks=masks)})
    _hard_mask(student, masks)
    return RunResult(student=student, masks=masks, history=history,
                     final_sparsity=_realized_sparsity(masks))


def _layer_output(trace, net, layer_index, x):
    """Output of layer `layer_index` during the traced forward."""
    return trace.activations[layer_index + 1]

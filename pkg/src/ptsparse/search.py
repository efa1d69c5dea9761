"""Evolutionary search over per-layer sparsity distributions.

A genome is one real gene per prunable layer. Decoding over-prunes every
layer to the excessive rate, then returns the residual keep-budget across
layers through a softmax over the genes. Fitness is calibration accuracy of
the masked network after BN recalibration on noise-perturbed calibration
batches; evaluation itself runs on clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.network import Network
from .sparsity import SparsityDistribution, topk_mask


@dataclass
class SearchConfig:
    p: float = 0.9
    p_e: float | None = None      # defaults to p + 0.05
    population: int = 32
    generations: int = 20
    tournament: int = 4
    crossover_rate: float = 0.5
    mutation_std: float = 0.5
    elites: int = 2
    noise_std: float = 0.1        # x per-channel input std
    batch_size: int = 64
    seed: int = 0
    exclude_layers: tuple = ()

    def __post_init__(self):
        if self.p_e is None:
            self.p_e = min(self.p + 0.05, 1.0)
        if not 0.0 <= self.p < self.p_e <= 1.0:
            raise ValueError(f"need 0 <= P < P_e <= 1, got P={self.p}, P_e={self.p_e}")
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.elites < 1 or self.elites > self.population:
            raise ValueError("elites must be in [1, population]")


@dataclass
class FitnessRecord:
    genome: np.ndarray
    distribution: SparsityDistribution
    fitness: float
    seed: int


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def decode(genome: np.ndarray, net: Network, cfg: SearchConfig) -> SparsityDistribution:
    """Residual = (P_e - P) * numel(W); T = softmax(genome) * Residual;
    r_l = P_e - T_l / numel(W_l). Layers whose regrow share would push the
    rate below 0 are clamped dense-side and the surplus is redistributed
    proportionally to the remaining softmax weights, to a fixpoint."""
    idxs = [i for i in net.prunable_indices() if i not in set(cfg.exclude_layers)]
    numels = np.array([net.layers[i].weight.size for i in idxs], dtype=float)
    genome = np.asarray(genome, dtype=np.float64)
    if genome.shape != (len(idxs),):
        raise ValueError(f"genome length {genome.size} != prunable layers {len(idxs)}")
    residual = (cfg.p_e - cfg.p) * numels.sum()
    weights = _softmax(genome)
    alloc = weights * residual
    cap = cfg.p_e * numels  # regrow beyond this would drive r_l below 0
    clamped = np.zeros(len(idxs), dtype=bool)
    for _ in range(len(idxs)):
        over = ~clamped & (alloc > cap + 1e-12)
        if not over.any():
            break
        surplus = float((alloc[over] - cap[over]).sum())
        alloc[over] = cap[over]
        clamped |= over
        free = ~clamped
        if not free.any():
            break
        share = weights[free] / weights[free].sum()
        alloc[free] += share * surplus
    rates = np.clip(cfg.p_e - alloc / numels, 0.0, 1.0)
    return SparsityDistribution(rates=[float(r) for r in rates], target=cfg.p,
                                layer_indices=idxs)


def _per_channel_std(x: np.ndarray) -> np.ndarray:
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    return x.std(axis=axes)


def noised_batches(inputs: np.ndarray, batch_size: int, rng, noise_std: float):
    """Calibration batches with additive Gaussian noise scaled per channel."""
    scale = noise_std * _per_channel_std(inputs)
    shp = (1, -1) if inputs.ndim == 2 else (1, -1, 1, 1)
    for start in range(0, len(inputs), batch_size):
        batch = inputs[start:start + batch_size]
        yield batch + rng.standard_normal(batch.shape) * scale.reshape(shp)


def fitness(genome: np.ndarray, teacher: Network, calib, cfg: SearchConfig,
            seed: int | None = None) -> FitnessRecord:
    """Prune a copy of the teacher at the decoded rates, recalibrate BN on
    noised calibration batches, score accuracy on the clean calibration set."""
    if len(calib.inputs) == 0:
        raise ValueError("empty calibration set")
    seed = cfg.seed if seed is None else seed
    dist = decode(genome, teacher, cfg)
    net = teacher.copy()
    masks = {i: topk_mask(net.layers[i].weight, r)
             for i, r in zip(dist.layer_indices, dist.rates)}
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    net.bn_recalibrate(
        noised_batches(calib.inputs, cfg.batch_size, rng, cfg.noise_std), masks=masks)
    acc = net.accuracy(calib.inputs, calib.labels, masks=masks)
    return FitnessRecord(genome=np.array(genome), distribution=dist,
                         fitness=acc, seed=seed)


@dataclass
class GenerationStats:
    generation: int
    best: float
    mean: float
    worst: float
    elite_rates: list[float] = field(default_factory=list)

    def format(self) -> str:
        rates = " ".join(f"{r:.3f}" for r in self.elite_rates)
        return (f"gen={self.generation} best={self.best:.4f} mean={self.mean:.4f} "
                f"worst={self.worst:.4f} elite_rates=[{rates}]")


def _eval_seed(cfg: SearchConfig, generation: int, index: int) -> int:
    # deterministic per (seed, generation, individual); order-independent
    ss = np.random.SeedSequence(entropy=(cfg.seed, generation, index))
    return int(ss.generate_state(1)[0])


def evolve(teacher: Network, calib, cfg: SearchConfig,
           log_path=None) -> tuple[FitnessRecord, list[GenerationStats]]:
    """Tournament selection + uniform crossover + Gaussian mutation with
    elitism. Elites carry their records forward unevaluated, so the running
    best is non-decreasing."""
    n_layers = len([i for i in teacher.prunable_indices()
                    if i not in set(cfg.exclude_layers)])
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xE7)))
    pop = [rng.standard_normal(n_layers) for _ in range(cfg.population)]
    records = [fitness(g, teacher, calib, cfg, seed=_eval_seed(cfg, 0, i))
               for i, g in enumerate(pop)]
    history: list[GenerationStats] = []
    log_lines: list[str] = []

    def record_gen(gen, recs):
        fits = [r.fitness for r in recs]
        best = max(recs, key=lambda r: r.fitness)
        st = GenerationStats(generation=gen, best=max(fits),
                             mean=float(np.mean(fits)), worst=min(fits),
                             elite_rates=list(best.distribution.rates))
        history.append(st)
        log_lines.append(st.format())
        return st

    record_gen(0, records)
    for gen in range(1, cfg.generations + 1):
        records.sort(key=lambda r: r.fitness, reverse=True)
        elites = records[:cfg.elites]
        children = []
        while len(children) < cfg.population - cfg.elites:
            pa = _tournament(records, cfg, rng)
            pb = _tournament(records, cfg, rng)
            child = pa.genome.copy()
            if rng.random() < cfg.crossover_rate:
                take = rng.random(n_layers) < 0.5
                child[take] = pb.genome[take]
            child = child + rng.standard_normal(n_layers) * cfg.mutation_std
            children.append(child)
        child_records = [fitness(g, teacher, calib, cfg,
                                 seed=_eval_seed(cfg, gen, i))
                         for i, g in enumerate(children)]
        records = elites + child_records
        record_gen(gen, records)
    best = max(records, key=lambda r: r.fitness)
    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("\n".join(log_lines) + "\n")
    return best, history


def _tournament(records, cfg, rng):
    picks = rng.integers(0, len(records), size=min(cfg.tournament, len(records)))
    return max((records[i] for i in picks), key=lambda r: r.fitness)

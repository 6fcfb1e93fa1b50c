"""Two-stage evolutionary architecture search.

Stage one evolves a population of generator genomes against one fixed-
architecture critic (many-to-one adversarial training over the shared
generator store); stage two freezes the winning generator and evolves critic
genomes the same way.  Each round trains the shared weights, scores every
candidate with a quality-minus-weighted-complexity fitness, keeps the better
half as parents, and refills the population with crossover/mutation
offspring.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError
from .genome import (
    DISCRIMINATOR,
    GENERATOR,
    Genome,
    complexity,
    crossover,
    genome_hash,
    mutate,
    random_genome,
    uniform_genome,
)
from .numerics import OptimHyper, make_rng
from .supernet import Subnet, SupernetParams
from .wgan import CriticConfig, GanBatch, gan_step

GEN_FAIL_FITNESS = float("-inf")    # generators are maximized
DISC_FAIL_FITNESS = float("inf")    # discriminators are minimized


@dataclass
class Individual:
    genome: Genome
    quality: float
    complexity: float
    fitness: float
    eval_round: int = 0


@dataclass
class SearchConfig:
    population_size: int = 8
    rounds: int = 10
    epochs_per_round: int = 1
    eval_batches: int = 8
    lambda_g: float = 0.1
    lambda_d: float = 1.5
    warmup_epochs: int = 5
    seed: int = 0
    batch_size: int = 64
    d_complexity_sign: str = "paper"   # "paper": F_D - lambda*c; "penalize": + lambda*c
    critic: CriticConfig = field(default_factory=CriticConfig)
    optim: OptimHyper = field(default_factory=OptimHyper)

    def __post_init__(self):
        n = self.population_size
        if n != 1 and (n < 2 or n % 2):  # N=1 is a degenerate test-only escape hatch
            raise ParameterError(f"population_size must be even, got {n}")
        for name in ("rounds", "epochs_per_round", "eval_batches", "batch_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.warmup_epochs < 0:
            raise ParameterError("warmup_epochs must be >= 0")
        if self.d_complexity_sign not in ("paper", "penalize"):
            raise ParameterError(
                f"d_complexity_sign must be 'paper' or 'penalize', got "
                f"{self.d_complexity_sign!r}"
            )


@dataclass
class StageResult:
    role: str
    best: Genome
    trajectory: list[dict]      # per round: {round, best, mean, worst}
    rounds_log: list[dict]      # per round: individuals with fitness breakdown
    wall_clock_s: float


def _draw_batch(data, rng: np.random.Generator, batch_size: int, noise_dim: int) -> GanBatch:
    feats, attrs = data.sample(rng, batch_size)
    noise = rng.normal(size=(batch_size, noise_dim))
    return GanBatch(feats, attrs, noise)


def _slots_per_round(cfg: SearchConfig, data) -> int:
    return cfg.epochs_per_round * max(1, data.n_train // cfg.batch_size)


# ---------------------------------------------------------------------------
# warm-up


def warmup(g_store: SupernetParams, d_store: SupernetParams, data, epochs: int,
           cfg: SearchConfig, logger=None) -> None:
    """Train both shared stores with uniformly sampled subnets.

    Per batch: draw a fresh generator and critic genome with every edge op
    uniform over all five candidates (resampling any draw that leaves the
    output unreachable), then run one critic step and one generator step.
    Gives every (edge, op) slice a nonzero visitation rate before search.
    """
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    if epochs == 0:
        return
    rng = make_rng(cfg.seed, "warmup")
    noise_dim = g_store.space.input_dims[1]
    n_batches = max(1, data.n_train // cfg.batch_size)
    step = 0
    for _epoch in range(epochs):
        for _b in range(n_batches):
            g_genome = None
            while g_genome is None:
                g_genome = uniform_genome(g_store.space, rng)
            d_genome = None
            while d_genome is None:
                d_genome = uniform_genome(d_store.space, rng)
            g_sub = Subnet(g_store, g_genome)
            d_sub = Subnet(d_store, d_genome)
            batch = _draw_batch(data, rng, cfg.batch_size, noise_dim)
            try:
                md = gan_step(d_sub, g_sub, batch, cfg.critic, cfg.optim, "train_d", rng)
                mg = gan_step(d_sub, g_sub, batch, cfg.critic, cfg.optim, "train_g", rng)
            except NumericError:
                continue   # unstable random pair; skip it
            if logger is not None:
                logger.log(0, step, "warmup", md.w_estimate, md.gp, mg.g_loss, md.d_loss)
            step += 1


# ---------------------------------------------------------------------------
# fitness


def fitness_generator(d_bar: Subnet, candidate: Subnet, attr_batches,
                      lambda_g: float, rng: np.random.Generator,
                      eval_round: int = 0) -> Individual:
    """Quality = mean critic score of the candidate's fakes (eval mode,
    fresh noise per batch); fitness = quality - lambda_g * complexity."""
    comp = complexity(candidate.genome)
    noise_dim = candidate.space.input_dims[1]
    try:
        scores = []
        for attrs in attr_batches:
            z = rng.normal(size=(attrs.shape[0], noise_dim))
            fake, _ = candidate.forward(attrs, z, mode="eval")
            s, _ = d_bar.forward(attrs, fake, mode="eval")
            scores.append(float(np.mean(s)))
        quality = float(np.mean(scores))
        if not np.isfinite(quality):
            raise NumericError("non-finite generator quality")
    except NumericError:
        quality = GEN_FAIL_FITNESS
    return Individual(candidate.genome, quality, comp,
                      quality - lambda_g * comp, eval_round)


def fitness_discriminator(candidate: Subnet, g_star: Subnet, eval_batches,
                          lambda_d: float, rng: np.random.Generator,
                          eval_round: int = 0,
                          sign: str = "paper") -> Individual:
    """Quality = -E[D(a, x)] + E[D(a, G*(a, z))], smaller meaning a sharper
    critic; fitness combines the complexity ratio per the configured sign and
    is minimized."""
    comp = complexity(candidate.genome)
    noise_dim = g_star.space.input_dims[1]
    try:
        vals = []
        for feats, attrs in eval_batches:
            z = rng.normal(size=(attrs.shape[0], noise_dim))
            fake, _ = g_star.forward(attrs, z, mode="eval")
            real_s, _ = candidate.forward(attrs, feats, mode="eval")
            fake_s, _ = candidate.forward(attrs, fake, mode="eval")
            vals.append(float(-np.mean(real_s) + np.mean(fake_s)))
        quality = float(np.mean(vals))
        if not np.isfinite(quality):
            raise NumericError("non-finite discriminator quality")
    except NumericError:
        quality = DISC_FAIL_FITNESS
    lam = -lambda_d if sign == "penalize" else lambda_d
    return Individual(candidate.genome, quality, comp,
                      quality - lam * comp, eval_round)


def select_parents(pop: list[Individual], role: str) -> list[Individual]:
    """Keep the better half: largest fitness for generators, smallest for
    critics; ties broken by genome hash for reproducibility."""
    if role == GENERATOR:
        key = lambda ind: (-ind.fitness, genome_hash(ind.genome))
    elif role == DISCRIMINATOR:
        key = lambda ind: (ind.fitness, genome_hash(ind.genome))
    else:
        raise ParameterError(f"unknown role {role!r}")
    return sorted(pop, key=key)[: max(1, len(pop) // 2)]


def reproduce(parents: list[Individual], rng: np.random.Generator,
              record: list | None = None) -> list[Genome]:
    """One offspring per parent slot: crossover of two distinct parents with
    probability 0.5, otherwise mutation of one random parent."""
    if len(parents) < 2:
        raise ParameterError("reproduce needs at least two parents")
    offspring = []
    for _ in range(len(parents)):
        if rng.random() < 0.5:
            i, j = rng.choice(len(parents), size=2, replace=False)
            child = crossover(parents[int(i)].genome, parents[int(j)].genome, rng)
            if record is not None:
                record.append("crossover")
        else:
            k = int(rng.integers(len(parents)))
            child = mutate(parents[k].genome, rng)
            if record is not None:
                record.append("mutate")
        offspring.append(child)
    return offspring


# ---------------------------------------------------------------------------
# stage loops


def search_generator(cfg: SearchConfig, data, g_store: SupernetParams,
                     d_store: SupernetParams, d_bar_genome: Genome,
                     logger=None, step_hook=None) -> StageResult:
    """Evolve generator genomes against the fixed critic architecture."""
    return _search_stage(cfg, data, GENERATOR, cand_store=g_store,
                         fixed=Subnet(d_store, d_bar_genome),
                         logger=logger, step_hook=step_hook)


def search_discriminator(cfg: SearchConfig, data, g_store: SupernetParams,
                         d_store: SupernetParams, g_star_genome: Genome,
                         logger=None, step_hook=None) -> StageResult:
    """Evolve critic genomes against the searched generator (whose shared
    weights keep training)."""
    return _search_stage(cfg, data, DISCRIMINATOR, cand_store=d_store,
                         fixed=Subnet(g_store, g_star_genome),
                         logger=logger, step_hook=step_hook)


def _search_stage(cfg: SearchConfig, data, role: str, cand_store: SupernetParams,
                  fixed: Subnet, logger=None, step_hook=None) -> StageResult:
    if data.n_train < 1:
        raise ParameterError("search requires non-empty training data")
    t_start = time.perf_counter()
    n = cfg.population_size
    stage = "gsearch" if role == GENERATOR else "dsearch"
    noise_dim = (cand_store if role == GENERATOR else fixed).space.input_dims[1]

    init_rng = make_rng(cfg.seed, stage, "init")
    pop = [random_genome(cand_store.space, 0.5, init_rng) for _ in range(n)]

    trajectory: list[dict] = []
    rounds_log: list[dict] = []
    individuals: list[Individual] = []
    step = 0

    for rnd in range(1, cfg.rounds + 1):
        # (a) many-to-one adversarial training through the shared store
        train_rng = make_rng(cfg.seed, stage, "train", rnd)
        failed: set[int] = set()
        for _slot in range(_slots_per_round(cfg, data)):
            alive = [i for i in range(n) if i not in failed]
            if not alive:
                break
            i = alive[int(train_rng.integers(len(alive)))]
            cand = Subnet(cand_store, pop[i])
            d_sub, g_sub = (fixed, cand) if role == GENERATOR else (cand, fixed)
            try:
                for _ in range(cfg.critic.n_critic):
                    batch = _draw_batch(data, train_rng, cfg.batch_size, noise_dim)
                    md = gan_step(d_sub, g_sub, batch, cfg.critic, cfg.optim,
                                  "train_d", train_rng)
                    if logger is not None:
                        logger.log(rnd, step, genome_hash(pop[i]),
                                   md.w_estimate, md.gp, float("nan"), md.d_loss)
                    step += 1
                batch = _draw_batch(data, train_rng, cfg.batch_size, noise_dim)
                mg = gan_step(d_sub, g_sub, batch, cfg.critic, cfg.optim,
                              "train_g", train_rng)
                if logger is not None:
                    logger.log(rnd, step, genome_hash(pop[i]),
                               float("nan"), float("nan"), mg.g_loss, float("nan"))
                step += 1
            except NumericError:
                failed.add(i)
            if step_hook is not None:
                step_hook(role=role, round=rnd, candidate=i, stores=(cand_store, fixed.store))

        # (b) fitness of every candidate on fixed eval batches, fresh noise
        eval_data_rng = make_rng(cfg.seed, stage, "evalbatches", rnd)
        batches = [data.sample(eval_data_rng, cfg.batch_size)
                   for _ in range(cfg.eval_batches)]
        individuals = []
        for i, g in enumerate(pop):
            eval_rng = make_rng(cfg.seed, stage, "eval", rnd, i)
            if i in failed:
                comp = complexity(g)
                bad = GEN_FAIL_FITNESS if role == GENERATOR else DISC_FAIL_FITNESS
                ind = Individual(g, bad, comp, bad, rnd)
            elif role == GENERATOR:
                ind = fitness_generator(fixed, Subnet(cand_store, g),
                                        [attrs for _feats, attrs in batches],
                                        cfg.lambda_g, eval_rng, rnd)
            else:
                ind = fitness_discriminator(Subnet(cand_store, g), fixed, batches,
                                            cfg.lambda_d, eval_rng, rnd,
                                            sign=cfg.d_complexity_sign)
            individuals.append(ind)

        # (c) selection
        parents = select_parents(individuals, role) if n > 1 else individuals
        selected = {id(ind) for ind in parents}
        fitnesses = [ind.fitness for ind in individuals]
        trajectory.append({
            "round": rnd,
            "best": max(fitnesses) if role == GENERATOR else min(fitnesses),
            "mean": float(np.mean(fitnesses)),
            "worst": min(fitnesses) if role == GENERATOR else max(fitnesses),
        })
        rounds_log.append({
            "round": rnd,
            "individuals": [
                {
                    "hash": genome_hash(ind.genome),
                    "quality": ind.quality,
                    "complexity": ind.complexity,
                    "fitness": ind.fitness,
                    "selected": id(ind) in selected,
                }
                for ind in individuals
            ],
        })

        # (d) reproduction refills the population around the retained parents
        if rnd < cfg.rounds and n > 1:
            repro_rng = make_rng(cfg.seed, stage, "repro", rnd)
            pop = [p.genome for p in parents] + reproduce(parents, repro_rng)

    best = select_parents(individuals, role)[0]
    return StageResult(
        role=role,
        best=best.genome,
        trajectory=trajectory,
        rounds_log=rounds_log,
        wall_clock_s=time.perf_counter() - t_start,
    )

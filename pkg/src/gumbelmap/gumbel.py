"""Gumbel noise and perturb-and-MAP estimators.

The perturbed maximum  max_y ( f(y) + sum_d z_d(y_d) )  with independent
zero-mean Gumbel draws z upper-bounds the log-partition A(f) in
expectation, with equality for separable f.  Conditional variants clamp
one variable and restrict the perturbation to the remaining ones; counting
the labels of many perturbed maximizers estimates marginals.

All randomness comes from counter-based streams keyed on
(seed, context words), so estimates are reproducible regardless of
batching or evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cuts import build_cut_problem, clamp_variables
from .errors import StructuralError
from .exact import all_state_values, viterbi_map, viterbi_map_batch
from .model import (
    CompiledPotentials,
    MarginalTable,
    PairwiseModel,
    evaluate_potential,
    exact_row_normalize,
)

EULER_GAMMA = 0.5772156649015329
_U_LO = 2.0 ** -53
_U_HI = 1.0 - 2.0 ** -53

SOLVER_CHAIN = "chain"
SOLVER_GRAPHCUT = "graphcut"
SOLVER_BRUTE = "brute"
_SOLVERS = (SOLVER_CHAIN, SOLVER_GRAPHCUT, SOLVER_BRUTE)

# context tags keep independent purposes on disjoint Philox counters
TAG_NOISE = 1
TAG_ESTIMATE = 2
TAG_COUNT = 3
TAG_BATCH = 4
TAG_DATA = 5


def stream(seed: int, w1: int = 0, w2: int = 0, w3: int = 0) -> np.random.Generator:
    """Counter-based generator: identical (seed, words) always yields the
    identical stream, independent of any other stream's consumption."""
    key = int(seed) & ((1 << 128) - 1)
    bits = np.random.Philox(key=key, counter=[0, int(w1), int(w2), int(w3)])
    return np.random.Generator(bits)


def gumbel_from_uniform(u):
    """Zero-mean Gumbel via the inverse CDF of exp(-exp(-(z + c)))."""
    return -np.log(-np.log(u)) - EULER_GAMMA


@dataclass(frozen=True)
class GumbelNoise:
    """One perturbation realization z_d(k), padded like unary tables."""

    values: np.ndarray  # (D, Kmax)
    seed: tuple  # (seed, context words) that produced it

    def restrict(self, kept: np.ndarray, kmax: int) -> "GumbelNoise":
        return GumbelNoise(self.values[kept, :kmax], self.seed)


@dataclass(frozen=True)
class EstimatorConfig:
    num_samples: int
    seed: int
    solver: str = SOLVER_BRUTE
    stream_context: int = 0  # extra counter word, e.g. an instance index

    def __post_init__(self):
        if self.num_samples < 1:
            raise StructuralError("num_samples must be >= 1")
        if self.solver not in _SOLVERS:
            raise StructuralError(f"unknown solver {self.solver!r}")


def sample_noise(model: PairwiseModel, seed: int,
                 context: tuple[int, ...] = ()) -> GumbelNoise:
    """Independent zero-mean Gumbel per (variable, label); deterministic
    given (seed, context).  Uniforms are clamped away from {0, 1}."""
    words = tuple(context) + (0, 0)
    rng = stream(seed, words[0], words[1], TAG_NOISE)
    kmax = model.max_labels
    u = rng.random((model.num_vars, kmax))
    u = np.clip(u, _U_LO, _U_HI)
    z = gumbel_from_uniform(u)
    for d, kd in enumerate(model.label_counts):
        z[d, kd:] = 0.0
    return GumbelNoise(z, (seed,) + tuple(context))


# ---------------------------------------------------------------------------
# Perturbed MAP
# ---------------------------------------------------------------------------


def _check_solver(p: CompiledPotentials, solver: str) -> None:
    if solver not in _SOLVERS:
        raise StructuralError(f"unknown solver {solver!r}")
    if solver == SOLVER_CHAIN and p.model.structure_kind != "chain":
        raise StructuralError("chain solver requires chain structure")
    if solver == SOLVER_GRAPHCUT and not p.model.is_binary:
        raise StructuralError("graphcut solver requires binary labels")


def _solve_map(p: CompiledPotentials, solver: str) -> tuple[np.ndarray, float]:
    if solver == SOLVER_CHAIN:
        y = viterbi_map(p)
        return y, evaluate_potential(p, y)
    if solver == SOLVER_GRAPHCUT:
        return build_cut_problem(p).solve()
    states, vals = all_state_values(p)
    best = int(np.argmax(vals))
    return states[best].copy(), float(vals[best])


def perturbed_map(p: CompiledPotentials, z: GumbelNoise,
                  solver: str) -> tuple[np.ndarray, float]:
    """Exact maximizer of f + noise; the noise folds into the unary tables
    so every solver applies unchanged.  The returned value includes the
    noise term."""
    _check_solver(p, solver)
    if z.values.shape != p.unary.shape:
        raise StructuralError("noise shape does not match potentials")
    return _solve_map(p.with_unary(p.unary + z.values), solver)


def perturbed_conditional_map(p: CompiledPotentials, d: int, k: int,
                              z: GumbelNoise, solver: str
                              ) -> tuple[np.ndarray, float]:
    """Perturbed MAP with y_d clamped to k and the same noise restricted to
    the other variables.  Returns the completed full labeling and the
    conditional value (which excludes z_d)."""
    clamped = clamp_variables(p, {d: k})
    red = clamped.potentials
    z_red = z.restrict(clamped.kept, red.model.max_labels)
    _check_solver(red, solver)
    y_red, val = _solve_map(red.with_unary(red.unary + z_red.values), solver)
    return clamped.complete(y_red), clamped.offset + val


def estimate_B(p: CompiledPotentials, d: int, k: int, z: GumbelNoise,
               solver: str) -> float:
    """One draw of the clamped perturbed maximum; averaging over noise
    realizations estimates the conditional log-partition bound."""
    return perturbed_conditional_map(p, d, k, z, solver)[1]


# ---------------------------------------------------------------------------
# Batched solving (one model, many noise realizations)
# ---------------------------------------------------------------------------


def _noise_batch(model: PairwiseModel, cfg: EstimatorConfig,
                 tag: int) -> np.ndarray:
    """(M, D, Kmax) noise block; sample m uses counter word m so streams
    match any per-sample evaluation order."""
    kmax = model.max_labels
    out = np.empty((cfg.num_samples, model.num_vars, kmax))
    for m in range(cfg.num_samples):
        rng = stream(cfg.seed, m, cfg.stream_context, tag)
        u = np.clip(rng.random((model.num_vars, kmax)), _U_LO, _U_HI)
        out[m] = gumbel_from_uniform(u)
    for d, kd in enumerate(model.label_counts):
        out[:, d, kd:] = 0.0
    return out


def _perturbed_map_batch(p: CompiledPotentials, znoise: np.ndarray,
                         solver: str) -> tuple[np.ndarray, np.ndarray]:
    """Labelings (M, D) and perturbed values (M,) for a block of noise."""
    _check_solver(p, solver)
    m = znoise.shape[0]
    model = p.model
    if solver == SOLVER_CHAIN:
        pert = p.unary[None, :, :] + znoise
        labels = viterbi_map_batch(pert, p.pairwise, model.label_counts)
        vals = _batch_values(p, labels, znoise)
        return labels, vals
    if solver == SOLVER_BRUTE:
        states, base = all_state_values(p)
        scores = np.broadcast_to(base, (m, base.shape[0])).copy()
        for d in range(model.num_vars):
            scores += znoise[:, d, states[:, d]]
        idx = np.argmax(scores, axis=1)
        labels = states[idx]
        vals = scores[np.arange(m), idx]
        return labels, vals
    # graphcut: solve each realization; unary-only changes reuse the state
    labels = np.zeros((m, model.num_vars), dtype=np.int64)
    vals = np.zeros(m)
    state = None
    for i in range(m):
        pert_u = p.unary + znoise[i]
        if state is None:
            state = build_cut_problem(p.with_unary(pert_u))
        else:
            for d in range(model.num_vars):
                state.update_unary(d, pert_u[d])
        y, v = state.solve()
        labels[i] = y
        vals[i] = v
    return labels, vals


def _batch_values(p: CompiledPotentials, labels: np.ndarray,
                  znoise: np.ndarray) -> np.ndarray:
    m, d_n = labels.shape
    vals = np.zeros(m)
    rows = np.arange(m)
    for d in range(d_n):
        vals += p.unary[d, labels[:, d]] + znoise[rows, d, labels[:, d]]
    ea = p.model.edge_array()
    for e in range(p.model.num_edges):
        vals += p.pairwise[e, labels[:, ea[e, 0]], labels[:, ea[e, 1]]]
    return vals


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def estimate_A(p: CompiledPotentials, cfg: EstimatorConfig
               ) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the perturbed maximum over
    cfg.num_samples independent realizations."""
    znoise = _noise_batch(p.model, cfg, TAG_ESTIMATE)
    _, vals = _perturbed_map_batch(p, znoise, cfg.solver)
    mean = float(np.mean(vals))
    if cfg.num_samples == 1:
        return mean, 0.0
    stderr = float(np.std(vals, ddof=1) / math.sqrt(cfg.num_samples))
    return mean, stderr


def counting_marginals(p: CompiledPotentials,
                       cfg: EstimatorConfig) -> MarginalTable:
    """q_d(k) = frequency of label k at variable d across perturbed
    maximizers.  Rows sum to exactly 1."""
    znoise = _noise_batch(p.model, cfg, TAG_COUNT)
    labels, _ = _perturbed_map_batch(p, znoise, cfg.solver)
    return _count_table(labels, p.model, cfg.num_samples)


def _count_table(labels: np.ndarray, model: PairwiseModel,
                 m: int) -> MarginalTable:
    kmax = model.max_labels
    counts = np.zeros((model.num_vars, kmax), dtype=np.int64)
    for d in range(model.num_vars):
        counts[d, : model.label_counts[d]] = np.bincount(
            labels[:, d], minlength=model.label_counts[d]
        )[: model.label_counts[d]]
    return MarginalTable(exact_row_normalize(counts, m, model.label_counts),
                         model.label_counts)


def conditional_counting_marginals(p: CompiledPotentials,
                                   given: dict[int, int],
                                   cfg: EstimatorConfig) -> MarginalTable:
    """Counting marginals with the given variables clamped before every
    perturbed solve; rows for given variables are exact one-hot."""
    model = p.model
    if not given:
        return counting_marginals(p, cfg)
    if len(given) == model.num_vars:
        q = np.zeros((model.num_vars, model.max_labels))
        for d, k in given.items():
            if not 0 <= k < model.label_counts[d]:
                raise StructuralError(f"label {k} out of range at {d}")
            q[d, k] = 1.0
        return MarginalTable(q, model.label_counts)
    clamped = clamp_variables(p, given)
    red = clamped.potentials
    znoise = _noise_batch(model, cfg, TAG_COUNT)
    z_red = znoise[:, clamped.kept, : red.model.max_labels]
    labels_red, _ = _perturbed_map_batch(red, z_red, cfg.solver)
    red_table = _count_table(labels_red, red.model, cfg.num_samples)
    q = np.zeros((model.num_vars, model.max_labels))
    for i, old in enumerate(clamped.kept):
        kd = red.model.label_counts[i]
        q[old, :kd] = red_table.probs[i, :kd]
    for d, k in given.items():
        q[d, k] = 1.0
    return MarginalTable(q, model.label_counts)

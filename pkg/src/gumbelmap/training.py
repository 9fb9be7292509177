"""Double stochastic gradient descent: random mini-batches, fresh Gumbel
perturbations every iteration.

Three step kinds share one skeleton: plain log-likelihood (whole-labeling
objective), marginal likelihood (per-variable objective, optionally
weighted), and expected marginal likelihood against a fixed marginal table
(for unlabeled data).  The per-variable objectives need one unconditional
perturbed MAP plus clamped re-solves; two accelerations apply:

* skipping clamped solves whose maximizer provably equals the
  unconditional one under the shared noise (zero gradient contribution);
* re-solving the clamped problems on one dynamic cut state instead of
  building each from scratch (graph-cut solver only).

Both are exact rewrites: trajectories do not depend on them.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np

from .cuts import build_cut_problem, clamp_variables
from .errors import InternalInvariantError, StructuralError
from .gumbel import (
    EstimatorConfig,
    GumbelNoise,
    SOLVER_GRAPHCUT,
    TAG_BATCH,
    _solve_map,
    conditional_counting_marginals,
    counting_marginals,
    perturbed_conditional_map,
    sample_noise,
    stream,
)
from .model import (
    CompiledPotentials,
    FeatureInstance,
    LossSpec,
    MarginalTable,
    WeightLayout,
    WeightVector,
    ZERO_ONE,
    WEIGHTED_HAMMING,
    compile_potentials,
    evaluate_potential,
    feature_map,
    loss_weights,
)

PHASE_SUPERVISED = 1
PHASE_MARGINALS = 2
PHASE_MIXED = 3

PREDICT_MAP = "map"
PREDICT_MARGINAL = "marginal"


@dataclass
class TrainConfig:
    lam: float
    iters: int
    batch: int
    loss: LossSpec
    seed: int
    solver: str
    layout: WeightLayout
    kappa: float = 1.0
    inference_samples: int = 100
    stepsize: float | None = None  # None -> 1 / (lam * h)
    acceleration: bool = True
    dynamic_cuts: bool = True

    def __post_init__(self):
        if self.lam <= 0:
            raise StructuralError("lam must be positive")
        if self.iters < 1 or self.batch < 1:
            raise StructuralError("iters and batch must be >= 1")
        if self.kappa < 0:
            raise StructuralError("kappa must be >= 0")


@dataclass
class TrainCounters:
    map_solves: int = 0
    clamp_solves: int = 0
    clamp_skipped: int = 0

    def as_dict(self) -> dict[str, int]:
        return {"map_solves": self.map_solves,
                "clamp_solves": self.clamp_solves,
                "clamp_skipped": self.clamp_skipped}


@dataclass
class TrainReport:
    weights: WeightVector          # last iterate
    averaged: WeightVector         # mean of the last half of the iterates
    objective_estimates: np.ndarray
    counters: TrainCounters
    phase_seconds: dict[str, float] = field(default_factory=dict)
    skipped_fraction_series: list[tuple[int, float]] = field(default_factory=list)


def stepsize(cfg: TrainConfig, h: int) -> float:
    if cfg.stepsize is not None:
        return cfg.stepsize
    return 1.0 / (cfg.lam * h)


def project_supermodular(w: WeightVector) -> WeightVector:
    """Clamp the pairwise block to be non-positive (idempotent).  With the
    disagreement ('potts') parameterization and non-negative edge features
    this keeps every compiled instance cut-solvable."""
    values = w.values.copy()
    block = w.pairwise_block
    values[block] = np.minimum(values[block], 0.0)
    return WeightVector(values, w.layout)


def _noise_for(model, seed: int, phase: int, h: int, slot: int) -> GumbelNoise:
    return sample_noise(model, seed, context=(slot, (phase << 48) | h))


def _batch_indices(n: int, t: int, seed: int, phase: int, h: int,
                   group: int = 0) -> np.ndarray:
    rng = stream(seed, group, (phase << 48) | h, TAG_BATCH)
    return rng.integers(0, n, size=t)


# ---------------------------------------------------------------------------
# Per-element solving
# ---------------------------------------------------------------------------


class _ElementSolver:
    """Unconditional and clamped perturbed MAPs for one batch element,
    sharing one noise realization.

    For the graph-cut solver the clamped problems run on one retained
    dynamic state: the clamp is a temporary unary boost large enough to
    pin the label, removed afterwards, so the trees carry over between
    the D re-solves.
    """

    def __init__(self, p: CompiledPotentials, z: GumbelNoise, solver: str,
                 dynamic: bool):
        self.p = p
        self.z = z
        self.solver = solver
        self.perturbed = p.with_unary(p.unary + z.values)
        self.dynamic = dynamic and solver == SOLVER_GRAPHCUT
        self.state = None
        if solver == SOLVER_GRAPHCUT:
            pu = self.perturbed.unary
            bounds = np.abs(pu[:, 0] - pu[:, 1])
            if p.model.num_edges:
                pw = self.perturbed.pairwise
                ea = p.model.edge_array()
                span_i = np.max(np.abs(pw[:, 0, :2] - pw[:, 1, :2]), axis=1)
                span_j = np.max(np.abs(pw[:, :2, 0] - pw[:, :2, 1]), axis=1)
                np.add.at(bounds, ea[:, 0], span_i)
                np.add.at(bounds, ea[:, 1], span_j)
            self._pin = bounds + 1.0  # boost that provably pins a label

    def map_full(self) -> tuple[np.ndarray, float]:
        if self.solver == SOLVER_GRAPHCUT and self.dynamic:
            self.state = build_cut_problem(self.perturbed)
            return self.state.solve()
        return _solve_map(self.perturbed, self.solver)

    def map_clamped(self, d: int, k: int) -> tuple[np.ndarray, float]:
        """Maximizer with y_d pinned to k under the shared noise restricted
        to the other variables; value excludes z_d."""
        if self.solver != SOLVER_GRAPHCUT:
            return perturbed_conditional_map(self.p, d, k, self.z, self.solver)
        big = float(self._pin[d])
        if self.dynamic and self.state is not None:
            orig = self.perturbed.unary[d].copy()
            boosted = orig.copy()
            boosted[k] += big
            self.state.update_unary(d, boosted)
            y, _ = self.state.solve()
            self.state.update_unary(d, orig)
        else:
            bu = self.perturbed.unary.copy()
            bu[d, k] += big
            y, _ = build_cut_problem(self.perturbed.with_unary(bu)).solve()
        if y[d] != k:
            raise InternalInvariantError(
                f"pinning bound failed to clamp variable {d}")
        val = evaluate_potential(self.perturbed, y) - self.z.values[d, k]
        return y, val


def _marginal_element(x: FeatureInstance, y: np.ndarray, theta: np.ndarray,
                      p: CompiledPotentials, z: GumbelNoise, solver: str,
                      dynamic: bool, acceleration: bool,
                      layout: WeightLayout, counters: TrainCounters
                      ) -> tuple[np.ndarray, float]:
    """Gradient and objective estimate of the per-variable marginal
    objective sum_d theta_d (B_d - A) for one element under one noise
    realization."""
    es = _ElementSolver(p, z, solver, dynamic)
    y_a, val_a = es.map_full()
    counters.map_solves += 1
    psi_a = feature_map(x, y_a, layout)
    grad = np.zeros(layout.total_size)
    obj = 0.0
    for d in range(x.model.num_vars):
        k = int(y[d])
        if y_a[d] == k and acceleration:
            # shared noise: the clamped maximizer equals y_a, so the
            # gradient term vanishes and B_d - A is exactly -z_d(k)
            counters.clamp_skipped += 1
            obj += theta[d] * (-z.values[d, k])
            continue
        y_b, val_b = es.map_clamped(d, k)
        counters.clamp_solves += 1
        grad += theta[d] * (feature_map(x, y_b, layout) - psi_a)
        obj += theta[d] * (val_b - val_a)
    return grad, obj


def _unsup_element(x: FeatureInstance, q: MarginalTable,
                   theta_table: np.ndarray | None, p: CompiledPotentials,
                   z: GumbelNoise, solver: str, dynamic: bool,
                   acceleration: bool, layout: WeightLayout,
                   counters: TrainCounters) -> tuple[np.ndarray, float]:
    """Expected marginal objective sum_d sum_k q_d(k) theta_d(k) (B_dk - A)
    for one (possibly partially labeled) element.

    Present labels are folded out first: both the unconditional and the
    clamped solves run conditioned on them, and the d-sum runs over the
    free variables.
    """
    model = x.model
    given = x.given_labels()
    if len(given) == model.num_vars:
        # every conditional marginal is degenerate: nothing to match
        return np.zeros(layout.total_size), 0.0
    if given:
        clamped = clamp_variables(p, given)
        red = clamped.potentials
        z_red = z.restrict(clamped.kept, red.model.max_labels)
        es = _ElementSolver(red, z_red, solver, dynamic)
        y_a_red, val_a = es.map_full()
        y_a = clamped.complete(y_a_red)
        free = [int(v) for v in clamped.kept]
    else:
        clamped = None
        es = _ElementSolver(p, z, solver, dynamic)
        y_a, val_a = es.map_full()
        free = list(range(model.num_vars))
    counters.map_solves += 1
    psi_a = feature_map(x, y_a, layout)
    grad = np.zeros(layout.total_size)
    obj = 0.0
    for pos, d in enumerate(free):
        qrow = q.row(d)
        for k in range(model.label_counts[d]):
            w_dk = float(qrow[k])
            if theta_table is not None:
                w_dk *= theta_table[d, k]
            zval = z.values[d, k]
            if y_a[d] == k and acceleration:
                counters.clamp_skipped += 1
                obj += w_dk * (-zval)
                continue
            if clamped is not None:
                y_b_red, val_b = es.map_clamped(pos, k)
                y_b = clamped.complete(y_b_red)
            else:
                y_b, val_b = es.map_clamped(d, k)
            counters.clamp_solves += 1
            if w_dk != 0.0:
                grad += w_dk * (feature_map(x, y_b, layout) - psi_a)
                obj += w_dk * (val_b - val_a)
    return grad, obj


# ---------------------------------------------------------------------------
# SGD steps
# ---------------------------------------------------------------------------


def sgd_loglik_step(w: WeightVector, batch: list[FeatureInstance], h: int,
                    cfg: TrainConfig, counters: TrainCounters | None = None,
                    phase: int = PHASE_SUPERVISED
                    ) -> tuple[WeightVector, float]:
    """One whole-labeling likelihood step: the gradient is the empirical
    feature average minus the average perturbed maximizer's features."""
    counters = counters if counters is not None else TrainCounters()
    layout = w.layout
    gsum = np.zeros(layout.total_size)
    obj = 0.0
    for t, x in enumerate(batch):
        if not x.fully_labeled:
            raise StructuralError("log-likelihood step requires full labels")
        p = compile_potentials(w, x)
        z = _noise_for(x.model, cfg.seed, phase, h, t + 1)
        es = _ElementSolver(p, z, cfg.solver, cfg.dynamic_cuts)
        y_star, val = es.map_full()
        counters.map_solves += 1
        gsum += feature_map(x, x.labels, layout) - feature_map(x, y_star, layout)
        obj += evaluate_potential(p, x.labels) - val
    t_n = len(batch)
    grad = gsum / t_n
    gamma = stepsize(cfg, h)
    w_new = WeightVector(w.values + gamma * (grad - cfg.lam * w.values), layout)
    if cfg.solver == SOLVER_GRAPHCUT:
        w_new = project_supermodular(w_new)
    est = obj / t_n - 0.5 * cfg.lam * float(w.values @ w.values)
    return w_new, est


def sgd_marginal_step(w: WeightVector, batch: list[FeatureInstance], h: int,
                      cfg: TrainConfig, counters: TrainCounters | None = None,
                      phase: int = PHASE_SUPERVISED
                      ) -> tuple[WeightVector, float]:
    """One marginal-likelihood step (plain or weighted Hamming)."""
    counters = counters if counters is not None else TrainCounters()
    layout = w.layout
    gsum = np.zeros(layout.total_size)
    obj = 0.0
    for t, x in enumerate(batch):
        if not x.fully_labeled:
            raise StructuralError("marginal step requires full labels")
        y = x.labels
        theta = loss_weights(cfg.loss, y, x.volumes())
        p = compile_potentials(w, x)
        z = _noise_for(x.model, cfg.seed, phase, h, t + 1)
        grad, o = _marginal_element(x, y, theta, p, z, cfg.solver,
                                    cfg.dynamic_cuts, cfg.acceleration,
                                    layout, counters)
        gsum += grad
        obj += o
    t_n = len(batch)
    gamma = stepsize(cfg, h)
    w_new = WeightVector(
        w.values + gamma * (gsum / t_n - cfg.lam * w.values), layout)
    w_new = project_supermodular(w_new)
    est = obj / t_n - 0.5 * cfg.lam * float(w.values @ w.values)
    return w_new, est


def sgd_unsup_step(w: WeightVector,
                   batch: list[tuple[FeatureInstance, MarginalTable,
                                     np.ndarray | None]],
                   h: int, cfg: TrainConfig,
                   counters: TrainCounters | None = None,
                   phase: int = PHASE_MIXED, slot_base: int = 0,
                   scale: float = 1.0) -> tuple[WeightVector, float]:
    """One expected-marginal-likelihood step over unlabeled (or partially
    labeled) elements carrying fixed marginal tables q (and, for the
    weighted loss, frozen per-label weight tables)."""
    counters = counters if counters is not None else TrainCounters()
    layout = w.layout
    gsum = np.zeros(layout.total_size)
    obj = 0.0
    for t, (x, q, theta_table) in enumerate(batch):
        p = compile_potentials(w, x)
        z = _noise_for(x.model, cfg.seed, phase, h, slot_base + t + 1)
        grad, o = _unsup_element(x, q, theta_table, p, z, cfg.solver,
                                 cfg.dynamic_cuts, cfg.acceleration,
                                 layout, counters)
        gsum += grad
        obj += o
    t_n = len(batch)
    gamma = stepsize(cfg, h)
    w_new = WeightVector(
        w.values + gamma * (scale * gsum / t_n - cfg.lam * w.values), layout)
    w_new = project_supermodular(w_new)
    est = scale * obj / t_n - 0.5 * cfg.lam * float(w.values @ w.values)
    return w_new, est


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def _supervised_step_fn(cfg: TrainConfig):
    if cfg.loss.kind == ZERO_ONE:
        return sgd_loglik_step
    return sgd_marginal_step


class _TailAverager:
    """Running mean of the iterates from start_at (1-based) onward."""

    def __init__(self, start_at: int, layout: WeightLayout):
        self.start_at = start_at
        self.layout = layout
        self._sum = np.zeros(layout.total_size)
        self._n = 0

    def add(self, h: int, w: WeightVector) -> None:
        if h >= self.start_at:
            self._sum += w.values
            self._n += 1

    def result(self, fallback: WeightVector) -> WeightVector:
        if self._n == 0:
            return fallback.copy()
        return WeightVector(self._sum / self._n, self.layout)


def train(dataset: list[FeatureInstance], cfg: TrainConfig) -> TrainReport:
    """Supervised training from w = 0 with the loss-appropriate step."""
    if not dataset:
        raise StructuralError("dataset is empty")
    step = _supervised_step_fn(cfg)
    w = WeightVector(np.zeros(cfg.layout.total_size), cfg.layout)
    counters = TrainCounters()
    objs = np.zeros(cfg.iters)
    avg = _TailAverager(cfg.iters // 2 + 1, cfg.layout)
    skipped_series: list[tuple[int, float]] = []
    t0 = _time.perf_counter()
    for h in range(1, cfg.iters + 1):
        idx = _batch_indices(len(dataset), cfg.batch, cfg.seed,
                             PHASE_SUPERVISED, h)
        batch = [dataset[int(i)] for i in idx]
        w, objs[h - 1] = step(w, batch, h, cfg, counters, PHASE_SUPERVISED)
        avg.add(h, w)
        if h % 100 == 0 or h == cfg.iters:
            budget = counters.clamp_solves + counters.clamp_skipped
            frac = counters.clamp_skipped / budget if budget else 0.0
            skipped_series.append((h, frac))
    return TrainReport(
        weights=w, averaged=avg.result(w), objective_estimates=objs,
        counters=counters,
        phase_seconds={"supervised": _time.perf_counter() - t0},
        skipped_fraction_series=skipped_series)


def _unsup_theta_table(x: FeatureInstance, q: MarginalTable,
                       cfg: TrainConfig) -> np.ndarray | None:
    """Frozen per-label weights for the weighted unlabeled objective, with
    foreground/background volumes approximated from the marginals."""
    if cfg.loss.kind != WEIGHTED_HAMMING:
        return None
    if x.model.max_labels != 2:
        raise StructuralError("weighted loss requires binary labels")
    vols = x.volumes()
    v_fg = float((q.probs[:, 1] * vols).sum())
    v_bg = float((q.probs[:, 0] * vols).sum())
    eps = 1e-6 * float(vols.sum())
    v_fg = max(v_fg, eps)
    v_bg = max(v_bg, eps)
    table = np.zeros((x.model.num_vars, 2))
    table[:, 1] = vols / (2.0 * v_fg)
    table[:, 0] = vols / (2.0 * v_bg)
    return table


def train_semisupervised(d1: list[FeatureInstance],
                         d2: list[FeatureInstance],
                         cfg: TrainConfig) -> TrainReport:
    """Three phases: supervised training of w1; marginal tables for the
    unlabeled data under w1; mixed updates combining a labeled batch with a
    kappa-scaled unlabeled batch.

    The mixed phase restarts the stepsize sequence at h = 1.  With the
    1/(lam h) rule the first mixed step replaces w1 by the bare gradient
    over lam, so w1 survives only through the frozen marginal tables; the
    mixed phase is a fresh run on labeled plus pseudo-labeled data.
    """
    if not d1:
        raise StructuralError("the labeled dataset is empty")
    counters = TrainCounters()
    h_total = cfg.iters
    objs = np.zeros(2 * h_total)
    timings: dict[str, float] = {}

    t0 = _time.perf_counter()
    step = sgd_marginal_step
    w = WeightVector(np.zeros(cfg.layout.total_size), cfg.layout)
    for h in range(1, h_total + 1):
        idx = _batch_indices(len(d1), cfg.batch, cfg.seed, PHASE_SUPERVISED, h)
        batch = [d1[int(i)] for i in idx]
        w, objs[h - 1] = step(w, batch, h, cfg, counters, PHASE_SUPERVISED)
    timings["supervised"] = _time.perf_counter() - t0

    t0 = _time.perf_counter()
    enriched: list[tuple[FeatureInstance, MarginalTable, np.ndarray | None]] = []
    for i, x in enumerate(d2):
        p = compile_potentials(w, x)
        est = EstimatorConfig(cfg.inference_samples, cfg.seed, cfg.solver,
                              stream_context=i + 1)
        given = x.given_labels()
        if given:
            q = conditional_counting_marginals(p, given, est)
        else:
            q = counting_marginals(p, est)
        enriched.append((x, q, _unsup_theta_table(x, q, cfg)))
    timings["marginals"] = _time.perf_counter() - t0

    t0 = _time.perf_counter()
    avg = _TailAverager(h_total // 2 + 1, cfg.layout)
    use_unsup = cfg.kappa > 0.0 and len(enriched) > 0
    skipped_series: list[tuple[int, float]] = []
    for h in range(1, h_total + 1):
        gamma = stepsize(cfg, h)
        idx1 = _batch_indices(len(d1), cfg.batch, cfg.seed, PHASE_MIXED, h, 0)
        gsum = np.zeros(cfg.layout.total_size)
        obj = 0.0
        for t, i in enumerate(idx1):
            x = d1[int(i)]
            y = x.labels
            theta = loss_weights(cfg.loss, y, x.volumes())
            p = compile_potentials(w, x)
            z = _noise_for(x.model, cfg.seed, PHASE_MIXED, h, t + 1)
            g, o = _marginal_element(x, y, theta, p, z, cfg.solver,
                                     cfg.dynamic_cuts, cfg.acceleration,
                                     cfg.layout, counters)
            gsum += g
            obj += o
        grad = gsum / cfg.batch
        if use_unsup:
            idx2 = _batch_indices(len(enriched), cfg.batch, cfg.seed,
                                  PHASE_MIXED, h, 1)
            g2sum = np.zeros(cfg.layout.total_size)
            for t, i in enumerate(idx2):
                x, q, theta_table = enriched[int(i)]
                p = compile_potentials(w, x)
                z = _noise_for(x.model, cfg.seed, PHASE_MIXED, h,
                               cfg.batch + t + 1)
                g, o = _unsup_element(x, q, theta_table, p, z, cfg.solver,
                                      cfg.dynamic_cuts, cfg.acceleration,
                                      cfg.layout, counters)
                g2sum += g
                obj += cfg.kappa * o
            grad = grad + cfg.kappa * (g2sum / cfg.batch)
        w = WeightVector(w.values + gamma * (grad - cfg.lam * w.values),
                         cfg.layout)
        w = project_supermodular(w)
        objs[h_total + h - 1] = (obj / cfg.batch
                                 - 0.5 * cfg.lam * float(w.values @ w.values))
        avg.add(h, w)
        if h % 100 == 0 or h == h_total:
            budget = counters.clamp_solves + counters.clamp_skipped
            frac = counters.clamp_skipped / budget if budget else 0.0
            skipped_series.append((h_total + h, frac))
    timings["mixed"] = _time.perf_counter() - t0

    return TrainReport(weights=w, averaged=avg.result(w),
                       objective_estimates=objs, counters=counters,
                       phase_seconds=timings,
                       skipped_fraction_series=skipped_series)


# ---------------------------------------------------------------------------
# Prediction and the frozen-noise objective
# ---------------------------------------------------------------------------


def predict(w: WeightVector, x: FeatureInstance, mode: str,
            cfg: TrainConfig, instance_index: int = 0) -> np.ndarray:
    """MAP decoding or per-variable argmax of counting marginals (ties to
    the smallest label)."""
    p = compile_potentials(w, x)
    if mode == PREDICT_MAP:
        y, _ = _solve_map(p, cfg.solver)
        return y
    if mode == PREDICT_MARGINAL:
        est = EstimatorConfig(cfg.inference_samples, cfg.seed, cfg.solver,
                              stream_context=instance_index + 1)
        return counting_marginals(p, est).argmax_labeling()
    raise StructuralError(f"unknown prediction mode {mode!r}")


def frozen_noise_objective(w: WeightVector, x: FeatureInstance,
                           y: np.ndarray, z: GumbelNoise, loss_spec: LossSpec,
                           solver: str) -> tuple[float, np.ndarray]:
    """Value and analytic gradient of the per-element marginal objective at
    one fixed noise realization: piecewise linear in w, so away from
    argmax-switch boundaries the gradient matches finite differences."""
    theta = loss_weights(loss_spec, y, x.volumes())
    p = compile_potentials(w, x)
    counters = TrainCounters()
    grad, obj = _marginal_element(x, y, theta, p, z, solver, False, True,
                                  w.layout, counters)
    return obj, grad

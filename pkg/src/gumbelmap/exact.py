"""Exact inference: brute-force enumeration and chain dynamic programming.

Everything here runs in log-space with max-shift stabilization.  Ties are
broken toward lexicographically smallest labelings (brute force) or the
smallest label index at each backtracking step (Viterbi), so comparisons
between solvers should use objective values, not labelings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, StructuralError
from .model import (
    CompiledPotentials,
    FeatureInstance,
    MarginalTable,
    PairwiseModel,
    WeightVector,
    check_labeling,
    compile_potentials,
    evaluate_potential,
    feature_map,
)

BRUTE_FORCE_GUARD = 2 ** 20


@dataclass
class ExactInferenceResult:
    log_partition: float
    map_labeling: np.ndarray
    map_value: float
    marginals: MarginalTable


# ---------------------------------------------------------------------------
# Brute force
# ---------------------------------------------------------------------------

_STATE_TABLE_CACHE: dict[tuple[int, ...], np.ndarray] = {}


def state_table(label_counts: tuple[int, ...]) -> np.ndarray:
    """(N, D) array of all joint labelings in lexicographic order
    (variable 0 most significant)."""
    key = tuple(label_counts)
    cached = _STATE_TABLE_CACHE.get(key)
    if cached is not None:
        return cached
    n = 1
    for k in key:
        n *= k
        if n > BRUTE_FORCE_GUARD:
            raise CapacityError(f"state space exceeds {BRUTE_FORCE_GUARD}")
    d = len(key)
    states = np.zeros((n, d), dtype=np.int64)
    rep = n
    for i, k in enumerate(key):
        rep //= k
        tile = n // (rep * k)
        states[:, i] = np.tile(np.repeat(np.arange(k), rep), tile)
    _STATE_TABLE_CACHE[key] = states
    return states


def all_state_values(p: CompiledPotentials) -> tuple[np.ndarray, np.ndarray]:
    """(states, f-values) over the full joint space."""
    states = state_table(p.model.label_counts)
    vals = np.zeros(states.shape[0])
    for d in range(p.model.num_vars):
        vals += p.unary[d, states[:, d]]
    for e, (i, j) in enumerate(p.model.edges):
        vals += p.pairwise[e, states[:, i], states[:, j]]
    return states, vals


def brute_force(p: CompiledPotentials) -> ExactInferenceResult:
    """Exact enumeration of A(f), the MAP, and all unary marginals."""
    states, vals = all_state_values(p)
    log_z = float(logsumexp(vals))
    best = int(np.argmax(vals))  # first occurrence = lexicographically smallest
    probs = np.exp(vals - log_z)
    kmax = p.model.max_labels
    q = np.zeros((p.model.num_vars, kmax))
    for d in range(p.model.num_vars):
        q[d, : p.model.label_counts[d]] = np.bincount(
            states[:, d], weights=probs, minlength=p.model.label_counts[d]
        )[: p.model.label_counts[d]]
    y_map = states[best].copy()
    return ExactInferenceResult(
        log_partition=log_z,
        map_labeling=y_map,
        # re-evaluated in the canonical summation order so it is
        # bit-identical to evaluate_potential on the same labeling
        map_value=evaluate_potential(p, y_map),
        marginals=MarginalTable(q, p.model.label_counts),
    )


def brute_force_clamped(p: CompiledPotentials, d: int, k: int
                        ) -> tuple[float, float, np.ndarray]:
    """(log-partition, max value, argmax labeling) over states with y_d = k.

    The log-partition is B(f, y_d = k); the max is the conditional MAP value
    max_{y_{-d}} f(y_{-d} | y_d = k) including u_d(k).
    """
    if not 0 <= k < p.model.label_counts[d]:
        raise StructuralError(f"label {k} out of range at variable {d}")
    states, vals = all_state_values(p)
    mask = states[:, d] == k
    sub = vals[mask]
    best = int(np.argmax(sub))
    return float(logsumexp(sub)), float(sub[best]), states[mask][best].copy()


# ---------------------------------------------------------------------------
# Chain dynamic programming
# ---------------------------------------------------------------------------


def _require_chain(model: PairwiseModel) -> None:
    if model.structure_kind != "chain":
        raise StructuralError("operation requires chain structure")


def viterbi_map(p: CompiledPotentials) -> np.ndarray:
    """Exact MAP for a chain; ties toward the smallest label index at each
    backtracking step."""
    _require_chain(p.model)
    model = p.model
    d_n = model.num_vars
    msg = p.unary[0, : model.label_counts[0]].copy()
    backptr = []
    for d in range(1, d_n):
        kd = model.label_counts[d]
        # scores[l, k] = msg[l] + pairwise[d-1][l, k]
        scores = msg[:, None] + p.pairwise[d - 1, : model.label_counts[d - 1], :kd]
        bp = np.argmax(scores, axis=0)
        backptr.append(bp)
        msg = p.unary[d, :kd] + scores[bp, np.arange(kd)]
    y = np.zeros(d_n, dtype=np.int64)
    y[d_n - 1] = int(np.argmax(msg))
    for d in range(d_n - 1, 0, -1):
        y[d - 1] = backptr[d - 1][y[d]]
    return y


def forward_log_partition(p: CompiledPotentials) -> float:
    """Exact A(f) for a chain via the log-space forward recursion."""
    _require_chain(p.model)
    model = p.model
    alpha = p.unary[0, : model.label_counts[0]].copy()
    for d in range(1, model.num_vars):
        kd = model.label_counts[d]
        trans = alpha[:, None] + p.pairwise[d - 1, : model.label_counts[d - 1], :kd]
        alpha = p.unary[d, :kd] + logsumexp(trans, axis=0)
    return float(logsumexp(alpha))


def _forward_backward(p: CompiledPotentials):
    model = p.model
    d_n = model.num_vars
    alphas = []
    alpha = p.unary[0, : model.label_counts[0]].copy()
    alphas.append(alpha)
    for d in range(1, d_n):
        kd = model.label_counts[d]
        trans = alpha[:, None] + p.pairwise[d - 1, : model.label_counts[d - 1], :kd]
        alpha = p.unary[d, :kd] + logsumexp(trans, axis=0)
        alphas.append(alpha)
    log_z = float(logsumexp(alphas[-1]))
    betas = [None] * d_n
    beta = np.zeros(model.label_counts[d_n - 1])
    betas[d_n - 1] = beta
    for d in range(d_n - 2, -1, -1):
        kd = model.label_counts[d]
        kn = model.label_counts[d + 1]
        trans = (p.pairwise[d, :kd, :kn] + p.unary[d + 1, :kn][None, :]
                 + beta[None, :])
        beta = logsumexp(trans, axis=1)
        betas[d] = beta
    return alphas, betas, log_z


def forward_backward_marginals(p: CompiledPotentials) -> MarginalTable:
    """Exact unary marginals for a chain."""
    _require_chain(p.model)
    alphas, betas, log_z = _forward_backward(p)
    model = p.model
    q = np.zeros((model.num_vars, model.max_labels))
    for d in range(model.num_vars):
        kd = model.label_counts[d]
        row = np.exp(alphas[d] + betas[d] - log_z)
        q[d, :kd] = row / row.sum()
    return MarginalTable(q, model.label_counts)


def chain_edge_marginals(p: CompiledPotentials) -> list[np.ndarray]:
    """Exact pairwise marginals xi_d(k, l) = P(y_d = k, y_{d+1} = l) for each
    chain edge."""
    _require_chain(p.model)
    alphas, betas, log_z = _forward_backward(p)
    model = p.model
    out = []
    for d in range(model.num_vars - 1):
        kd = model.label_counts[d]
        kn = model.label_counts[d + 1]
        logxi = (alphas[d][:, None] + p.pairwise[d, :kd, :kn]
                 + p.unary[d + 1, :kn][None, :] + betas[d + 1][None, :] - log_z)
        xi = np.exp(logxi)
        out.append(xi / xi.sum())
    return out


def chain_log_likelihood(w: WeightVector, x: FeatureInstance,
                         y: np.ndarray) -> float:
    """log P(y | x, w) = f(y|x) - A(f, x), exact for chains."""
    p = compile_potentials(w, x)
    return evaluate_potential(p, y) - forward_log_partition(p)


def crf_exact_gradient(w: WeightVector, x: FeatureInstance,
                       y: np.ndarray) -> np.ndarray:
    """Gradient of log P(y|x,w): Psi(x, y) minus the model expectation of
    Psi, from exact forward-backward unary and edge marginals."""
    _require_chain(x.model)
    y = check_labeling(x.model, y)
    if np.any(y < 0):
        raise StructuralError("crf_exact_gradient requires full labels")
    p = compile_potentials(w, x)
    q = forward_backward_marginals(p)
    layout = w.layout
    grad = feature_map(x, y, layout).copy()
    # unary expectation
    uview = grad[: layout.unary_size].reshape(layout.num_labels,
                                              layout.node_feat_dim)
    for d in range(x.model.num_vars):
        kd = x.model.label_counts[d]
        uview[:kd] -= q.row(d)[:, None] * x.node_features[d][None, :]
    # pairwise expectation
    xis = chain_edge_marginals(p)
    if layout.pairwise_form == "potts":
        pview = grad[layout.unary_size:]
        for e, xi in enumerate(xis):
            p_disagree = 1.0 - np.trace(xi)
            pview -= p_disagree * x.edge_features[e]
    else:
        pview = grad[layout.unary_size:].reshape(
            layout.num_labels, layout.num_labels, layout.edge_feat_dim)
        for e, xi in enumerate(xis):
            kd, kn = xi.shape
            pview[:kd, :kn] -= xi[:, :, None] * x.edge_features[e][None, None, :]
    return grad


# ---------------------------------------------------------------------------
# Batched chain solvers (vectorized over noise realizations)
# ---------------------------------------------------------------------------

_NEG_SENTINEL = -1e30  # masks padded labels; also dominates any real score


def viterbi_map_batch(unary: np.ndarray, pairwise: np.ndarray,
                      label_counts: tuple[int, ...]) -> np.ndarray:
    """Viterbi over a batch: ``unary`` is (M, D, Kmax), ``pairwise`` is
    (D-1, Kmax, Kmax) shared across the batch.  Returns (M, D) labelings
    with the same tie-break rule as viterbi_map."""
    m, d_n, kmax = unary.shape
    u = unary.copy()
    for d, kd in enumerate(label_counts):
        u[:, d, kd:] = _NEG_SENTINEL
    msg = u[:, 0, :]  # (M, K)
    backptr = np.zeros((d_n - 1, m, kmax), dtype=np.int64) if d_n > 1 else None
    for d in range(1, d_n):
        scores = msg[:, :, None] + pairwise[d - 1][None, :, :]  # (M, K, K)
        bp = np.argmax(scores, axis=1)  # (M, K)
        backptr[d - 1] = bp
        msg = u[:, d, :] + np.take_along_axis(scores, bp[:, None, :], axis=1)[:, 0, :]
    y = np.zeros((m, d_n), dtype=np.int64)
    y[:, d_n - 1] = np.argmax(msg, axis=1)
    for d in range(d_n - 1, 0, -1):
        y[:, d - 1] = backptr[d - 1][np.arange(m), y[:, d]]
    return y

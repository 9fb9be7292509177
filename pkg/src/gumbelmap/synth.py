"""Synthetic teacher-generated datasets.

Chain data is labeled by exact sampling from the teacher distribution
(forward filter, backward sample).  Grid data is labeled by a single
perturb-and-MAP draw, which is approximate but adequate for the paired
trend experiments this generator serves.
"""

from __future__ import annotations

import numpy as np

from .errors import StructuralError
from .exact import _forward_backward
from .gumbel import TAG_DATA, gumbel_from_uniform, stream, _U_LO, _U_HI
from .cuts import build_cut_problem
from .model import (
    FeatureInstance,
    PAIRWISE_FULL,
    PAIRWISE_POTTS,
    WeightLayout,
    WeightVector,
    chain_model,
    compile_potentials,
    grid_model,
)


def sample_teacher(layout: WeightLayout, seed: int,
                   scale: float = 1.0) -> WeightVector:
    """Gaussian teacher weights with the pairwise block clamped <= 0 so the
    model stays cut-solvable (with non-negative edge features)."""
    rng = stream(seed, 0, 0, TAG_DATA)
    values = rng.normal(size=layout.total_size) * scale
    w = WeightVector(values, layout)
    block = w.pairwise_block
    w.values[block] = np.minimum(w.values[block], 0.0)
    return w


def _ffbs_sample(p, rng: np.random.Generator) -> np.ndarray:
    """Exact joint draw from the chain Gibbs distribution."""
    model = p.model
    alphas, _, _ = _forward_backward(p)
    d_n = model.num_vars
    y = np.zeros(d_n, dtype=np.int64)
    last = alphas[-1] - alphas[-1].max()
    prob = np.exp(last)
    prob /= prob.sum()
    y[d_n - 1] = rng.choice(len(prob), p=prob)
    for d in range(d_n - 2, -1, -1):
        kd = model.label_counts[d]
        sc = alphas[d] + p.pairwise[d, :kd, y[d + 1]]
        sc -= sc.max()
        prob = np.exp(sc)
        prob /= prob.sum()
        y[d] = rng.choice(kd, p=prob)
    return y


def _apply_label_noise(y: np.ndarray, counts, noise: float,
                       rng: np.random.Generator) -> np.ndarray:
    if noise <= 0:
        return y
    out = y.copy()
    flips = rng.random(y.shape[0]) < noise
    for d in np.nonzero(flips)[0]:
        k = counts[d]
        shift = rng.integers(1, k)
        out[d] = (out[d] + shift) % k
    return out


def gen_chain_dataset(num: int, num_vars: int, num_labels: int,
                      feat_dim: int, seed: int,
                      teacher: WeightVector | None = None,
                      teacher_seed: int | None = None,
                      teacher_scale: float = 1.0,
                      label_noise: float = 0.0
                      ) -> tuple[list[FeatureInstance], WeightVector]:
    """Chains with Gaussian node features, a constant scalar edge feature,
    full label-pair transition weights, and exactly sampled labels."""
    layout = WeightLayout(num_labels, feat_dim, 1, PAIRWISE_FULL)
    if teacher is None:
        teacher = sample_teacher(layout, teacher_seed if teacher_seed is not None
                                 else seed, teacher_scale)
    model = chain_model(num_vars, num_labels)
    out = []
    for i in range(num):
        rng = stream(seed, i + 1, 0, TAG_DATA)
        nf = rng.normal(size=(num_vars, feat_dim))
        ef = np.ones((model.num_edges, 1))
        x = FeatureInstance(model, nf, ef)
        p = compile_potentials(teacher, x)
        y = _ffbs_sample(p, rng)
        y = _apply_label_noise(y, model.label_counts, label_noise, rng)
        out.append(FeatureInstance(model, nf, ef, y))
    return out, teacher


def gen_grid_dataset(num: int, side: int, feat_dim: int, seed: int,
                     teacher: WeightVector | None = None,
                     teacher_seed: int | None = None,
                     teacher_scale: float = 1.0,
                     label_noise: float = 0.0,
                     cluster_sep: float = 0.0,
                     require_nondegenerate: bool = True
                     ) -> tuple[list[FeatureInstance], WeightVector]:
    """Binary grids with the disagreement pairwise form.  Labels come from
    one perturbed-MAP draw per instance (approximate sampler); one-sided
    labelings are redrawn so the volume-balanced loss stays defined.

    ``cluster_sep > 0`` shifts each node's features by +-cluster_sep along
    the teacher's unary discriminant, giving the feature space a bimodal
    (segmentation-like) structure; 0 keeps plain standard-normal features.
    """
    layout = WeightLayout(2, feat_dim, 1, PAIRWISE_POTTS)
    if teacher is None:
        teacher = sample_teacher(layout, teacher_seed if teacher_seed is not None
                                 else seed, teacher_scale)
    model = grid_model(side, side)
    direction = None
    if cluster_sep > 0.0:
        wu = teacher.unary_weights()
        diff = wu[1] - wu[0]
        norm = float(np.linalg.norm(diff))
        direction = diff / norm if norm > 0 else None
    out = []
    for i in range(num):
        rng = stream(seed, i + 1, 0, TAG_DATA)
        nf = rng.normal(size=(model.num_vars, feat_dim))
        if direction is not None:
            signs = rng.integers(0, 2, size=model.num_vars) * 2 - 1
            nf = nf + cluster_sep * signs[:, None] * direction[None, :]
        ef = np.ones((model.num_edges, 1))
        x = FeatureInstance(model, nf, ef)
        p = compile_potentials(teacher, x)
        y = None
        for attempt in range(100):
            u = np.clip(rng.random((model.num_vars, 2)), _U_LO, _U_HI)
            z = gumbel_from_uniform(u)
            cand, _ = build_cut_problem(p.with_unary(p.unary + z)).solve()
            cand = _apply_label_noise(cand, model.label_counts, label_noise, rng)
            if not require_nondegenerate or 0 < cand.sum() < model.num_vars:
                y = cand
                break
        if y is None:
            raise StructuralError(
                "teacher produces one-sided grids; rescale the teacher")
        out.append(FeatureInstance(model, nf, ef, y))
    return out, teacher

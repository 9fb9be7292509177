"""Core data types: graph structure, potentials, weights, losses.

A pairwise model assigns the score

    f(y) = sum_d u_d(y_d) + sum_e p_e(y_i, y_j)

to each joint labeling ``y`` of ``D`` discrete variables.  Unary and
pairwise tables are stored padded to the largest label count; entries at
``k >= label_counts[d]`` are never read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInstanceError, StructuralError

Labeling = np.ndarray  # int array of shape (D,)

PAIRWISE_FULL = "full"
PAIRWISE_POTTS = "potts"


# ---------------------------------------------------------------------------
# Graph structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairwiseModel:
    """Variable count, per-variable label counts, and the edge list.

    Edges are unordered pairs ``(i, j)`` with ``i < j``, sorted and
    duplicate-free.  ``structure_kind`` is one of ``chain``, ``grid``,
    ``general``; chain structure requires edges exactly
    ``{(d, d+1)}``.
    """

    num_vars: int
    label_counts: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    structure_kind: str = "general"
    _edge_arr: np.ndarray = field(init=False, repr=False, compare=False)
    _count_arr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_vars < 1:
            raise StructuralError("num_vars must be >= 1")
        if len(self.label_counts) != self.num_vars:
            raise StructuralError("label_counts length must equal num_vars")
        if any(k < 2 for k in self.label_counts):
            raise StructuralError("every label count must be >= 2")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < j < self.num_vars):
                raise StructuralError(f"bad edge ({i}, {j})")
            if (i, j) in seen:
                raise StructuralError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
        if list(self.edges) != sorted(self.edges):
            raise StructuralError("edge list must be sorted")
        if self.structure_kind not in ("chain", "grid", "general"):
            raise StructuralError(f"unknown structure_kind {self.structure_kind!r}")
        if self.structure_kind == "chain":
            expected = tuple((d, d + 1) for d in range(self.num_vars - 1))
            if self.edges != expected:
                raise StructuralError("chain structure requires edges {(d, d+1)}")
        if self.edges:
            ea = np.asarray(self.edges, dtype=np.int64)
        else:
            ea = np.zeros((0, 2), dtype=np.int64)
        object.__setattr__(self, "_edge_arr", ea)
        object.__setattr__(self, "_count_arr",
                           np.asarray(self.label_counts, dtype=np.int64))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def max_labels(self) -> int:
        return max(self.label_counts)

    @property
    def is_binary(self) -> bool:
        return all(k == 2 for k in self.label_counts)

    def edge_array(self) -> np.ndarray:
        """Edges as an (E, 2) int array (empty -> shape (0, 2))."""
        return self._edge_arr

    def neighbors(self, d: int) -> list[tuple[int, int]]:
        """(edge_index, other_endpoint) pairs incident to variable d."""
        out = []
        for e, (i, j) in enumerate(self.edges):
            if i == d:
                out.append((e, j))
            elif j == d:
                out.append((e, i))
        return out


def chain_model(num_vars: int, num_labels: int | list[int]) -> PairwiseModel:
    if isinstance(num_labels, int):
        counts = (num_labels,) * num_vars
    else:
        counts = tuple(num_labels)
    edges = tuple((d, d + 1) for d in range(num_vars - 1))
    return PairwiseModel(num_vars, counts, edges, structure_kind="chain")


def grid_model(rows: int, cols: int, num_labels: int = 2) -> PairwiseModel:
    """4-connected rows x cols lattice, variables in row-major order."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            d = r * cols + c
            if c + 1 < cols:
                edges.append((d, d + 1))
            if r + 1 < rows:
                edges.append((d, d + cols))
    edges.sort()
    num_vars = rows * cols
    return PairwiseModel(num_vars, (num_labels,) * num_vars, tuple(edges),
                         structure_kind="grid")


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompiledPotentials:
    """Numeric tables realizing f(y) for one instance.

    ``unary`` has shape (D, Kmax); ``pairwise`` has shape (E, Kmax, Kmax).
    Rows are padded with zeros beyond each variable's label count.
    """

    model: PairwiseModel
    unary: np.ndarray
    pairwise: np.ndarray

    def __post_init__(self):
        kmax = self.model.max_labels
        if self.unary.shape != (self.model.num_vars, kmax):
            raise StructuralError(
                f"unary shape {self.unary.shape} != {(self.model.num_vars, kmax)}")
        if self.pairwise.shape != (self.model.num_edges, kmax, kmax):
            raise StructuralError(
                f"pairwise shape {self.pairwise.shape} != "
                f"{(self.model.num_edges, kmax, kmax)}")

    def with_unary(self, unary: np.ndarray) -> "CompiledPotentials":
        return CompiledPotentials(self.model, unary, self.pairwise)

    def is_supermodular_binary(self, tol: float = 1e-12) -> bool:
        """True when all variables are binary and every pairwise table
        satisfies p(0,0) + p(1,1) >= p(0,1) + p(1,0) - tol."""
        if not self.model.is_binary:
            return False
        if self.model.num_edges == 0:
            return True
        p = self.pairwise
        gap = p[:, 0, 0] + p[:, 1, 1] - p[:, 0, 1] - p[:, 1, 0]
        return bool(np.all(gap >= -tol))


def zero_potentials(model: PairwiseModel) -> CompiledPotentials:
    kmax = model.max_labels
    return CompiledPotentials(
        model,
        np.zeros((model.num_vars, kmax)),
        np.zeros((model.num_edges, kmax, kmax)),
    )


def check_labeling(model: PairwiseModel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (model.num_vars,):
        raise StructuralError(f"labeling shape {y.shape} != ({model.num_vars},)")
    if np.any(y < 0) or np.any(y >= model._count_arr):
        bad = int(np.argmax((y < 0) | (y >= model._count_arr)))
        raise StructuralError(f"label {y[bad]} out of range at variable {bad}")
    return y


def evaluate_potential(p: CompiledPotentials, y: np.ndarray) -> float:
    """f(y), accumulated in a fixed order: variables ascending, then edges
    ascending.  The fixed order makes repeated evaluations bit-identical."""
    y = check_labeling(p.model, y)
    model = p.model
    s = 0.0
    for v in p.unary[np.arange(model.num_vars), y].tolist():
        s += v
    if model.num_edges:
        ea = model._edge_arr
        terms = p.pairwise[np.arange(model.num_edges), y[ea[:, 0]], y[ea[:, 1]]]
        for v in terms.tolist():
            s += v
    return s


# ---------------------------------------------------------------------------
# Weights and the linear feature parameterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightLayout:
    """Block layout of the learnable weight vector.

    Unary weights are one row of length ``node_feat_dim`` per label.  The
    pairwise block is either one row per ordered label pair (``full``) or a
    single row applied to disagreeing label pairs (``potts``).
    """

    num_labels: int
    node_feat_dim: int
    edge_feat_dim: int
    pairwise_form: str = PAIRWISE_FULL

    def __post_init__(self):
        if self.pairwise_form not in (PAIRWISE_FULL, PAIRWISE_POTTS):
            raise StructuralError(f"unknown pairwise_form {self.pairwise_form!r}")
        if self.num_labels < 2 or self.node_feat_dim < 1 or self.edge_feat_dim < 1:
            raise StructuralError("layout dimensions out of range")

    @property
    def unary_size(self) -> int:
        return self.num_labels * self.node_feat_dim

    @property
    def pairwise_size(self) -> int:
        if self.pairwise_form == PAIRWISE_POTTS:
            return self.edge_feat_dim
        return self.num_labels * self.num_labels * self.edge_feat_dim

    @property
    def total_size(self) -> int:
        return self.unary_size + self.pairwise_size


@dataclass
class WeightVector:
    """A flat weight vector with designated unary and pairwise blocks."""

    values: np.ndarray
    layout: WeightLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total_size,):
            raise StructuralError(
                f"weight length {self.values.shape} != ({self.layout.total_size},)")

    @property
    def unary_block(self) -> slice:
        return slice(0, self.layout.unary_size)

    @property
    def pairwise_block(self) -> slice:
        return slice(self.layout.unary_size, self.layout.total_size)

    def unary_weights(self) -> np.ndarray:
        """(K, Fn) view."""
        return self.values[self.unary_block].reshape(
            self.layout.num_labels, self.layout.node_feat_dim)

    def pairwise_weights(self) -> np.ndarray:
        """(K, K, Fe) view for 'full', (Fe,) view for 'potts'."""
        block = self.values[self.pairwise_block]
        if self.layout.pairwise_form == PAIRWISE_POTTS:
            return block
        k = self.layout.num_labels
        return block.reshape(k, k, self.layout.edge_feat_dim)

    def copy(self) -> "WeightVector":
        return WeightVector(self.values.copy(), self.layout)


def zero_weights(layout: WeightLayout) -> WeightVector:
    return WeightVector(np.zeros(layout.total_size), layout)


@dataclass(frozen=True)
class FeatureInstance:
    """One data point: structure, features, and (possibly partial) labels.

    ``labels`` entries use -1 for unobserved variables.  ``node_volumes``
    are the positive per-variable sizes used by volume-balanced weights.
    """

    model: PairwiseModel
    node_features: np.ndarray  # (D, Fn)
    edge_features: np.ndarray  # (E, Fe)
    labels: np.ndarray | None = None  # (D,) int, -1 = unobserved
    node_volumes: np.ndarray | None = None  # (D,) positive

    def __post_init__(self):
        d, e = self.model.num_vars, self.model.num_edges
        if self.node_features.ndim != 2 or self.node_features.shape[0] != d:
            raise StructuralError("node_features must be (D, Fn)")
        if self.edge_features.ndim != 2 or self.edge_features.shape[0] != e:
            raise StructuralError("edge_features must be (E, Fe)")
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (d,):
                raise StructuralError("labels must be length D")
            for i in range(d):
                if lab[i] != -1 and not 0 <= lab[i] < self.model.label_counts[i]:
                    raise StructuralError(f"label {lab[i]} out of range at {i}")
            object.__setattr__(self, "labels", lab)
        if self.node_volumes is not None:
            vol = np.asarray(self.node_volumes, dtype=np.float64)
            if vol.shape != (d,):
                raise StructuralError("node_volumes must be length D")
            if np.any(vol <= 0):
                raise StructuralError("node volumes must be positive")
            object.__setattr__(self, "node_volumes", vol)

    @property
    def fully_labeled(self) -> bool:
        return self.labels is not None and bool(np.all(self.labels >= 0))

    @property
    def partially_labeled(self) -> bool:
        return self.labels is not None and bool(np.any(self.labels >= 0)) \
            and not self.fully_labeled

    def volumes(self) -> np.ndarray:
        if self.node_volumes is None:
            return np.ones(self.model.num_vars)
        return self.node_volumes

    def given_labels(self) -> dict[int, int]:
        """Observed (variable -> label) pairs."""
        if self.labels is None:
            return {}
        return {d: int(k) for d, k in enumerate(self.labels) if k >= 0}


def _check_layout_compat(layout: WeightLayout, x: FeatureInstance) -> None:
    if x.node_features.shape[1] != layout.node_feat_dim:
        raise StructuralError(
            f"node feature dim {x.node_features.shape[1]} != {layout.node_feat_dim}")
    if x.model.num_edges and x.edge_features.shape[1] != layout.edge_feat_dim:
        raise StructuralError(
            f"edge feature dim {x.edge_features.shape[1]} != {layout.edge_feat_dim}")
    if x.model.max_labels > layout.num_labels:
        raise StructuralError(
            f"instance needs {x.model.max_labels} labels, layout has "
            f"{layout.num_labels}")


def compile_potentials(w: WeightVector, x: FeatureInstance) -> CompiledPotentials:
    """u_d(k) = <w_unary[k], node_features[d]>;
    p_e(k,l) = <w_pair[k,l], edge_features[e]> (full) or
    [k != l] * <w_pair, edge_features[e]> (potts)."""
    _check_layout_compat(w.layout, x)
    model = x.model
    kmax = model.max_labels
    unary = x.node_features @ w.unary_weights()[:kmax].T  # (D, kmax)
    unary = np.ascontiguousarray(unary, dtype=np.float64)
    for d, kd in enumerate(model.label_counts):
        unary[d, kd:] = 0.0
    e = model.num_edges
    if e == 0:
        pairwise = np.zeros((0, kmax, kmax))
    elif w.layout.pairwise_form == PAIRWISE_POTTS:
        strength = x.edge_features @ w.pairwise_weights()  # (E,)
        pairwise = np.zeros((e, kmax, kmax))
        off = ~np.eye(kmax, dtype=bool)
        pairwise[:, off] = strength[:, None]
    else:
        wp = w.pairwise_weights()[:kmax, :kmax]  # (kmax, kmax, Fe)
        pairwise = np.einsum("klf,ef->ekl", wp, x.edge_features)
        pairwise = np.ascontiguousarray(pairwise, dtype=np.float64)
    return CompiledPotentials(model, unary, pairwise)


def feature_map(x: FeatureInstance, y: np.ndarray,
                layout: WeightLayout) -> np.ndarray:
    """The structured feature vector: gradient of f(y|x) with respect to w."""
    _check_layout_compat(layout, x)
    y = check_labeling(x.model, y)
    psi = np.zeros(layout.total_size)
    uview = psi[: layout.unary_size].reshape(layout.num_labels,
                                             layout.node_feat_dim)
    np.add.at(uview, y, x.node_features)
    if x.model.num_edges:
        ea = x.model.edge_array()
        yi, yj = y[ea[:, 0]], y[ea[:, 1]]
        if layout.pairwise_form == PAIRWISE_POTTS:
            mask = yi != yj
            psi[layout.unary_size:] = x.edge_features[mask].sum(axis=0)
        else:
            pview = psi[layout.unary_size:].reshape(
                layout.num_labels, layout.num_labels, layout.edge_feat_dim)
            np.add.at(pview, (yi, yj), x.edge_features)
    return psi


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

ZERO_ONE = "zero_one"
HAMMING = "hamming"
WEIGHTED_HAMMING = "weighted_hamming"

VOLUME_BALANCED = "volume_balanced"
UNIT_WEIGHTS = "unit"


@dataclass(frozen=True)
class LossSpec:
    """Loss selector.  For weighted Hamming, ``weight_rule`` is either the
    string 'volume_balanced' or an explicit (D, Kmax) table of weights."""

    kind: str
    weight_rule: object = None

    def __post_init__(self):
        if self.kind not in (ZERO_ONE, HAMMING, WEIGHTED_HAMMING):
            raise StructuralError(f"unknown loss kind {self.kind!r}")
        if self.kind == WEIGHTED_HAMMING:
            if self.weight_rule is None:
                raise StructuralError("weighted_hamming requires a weight_rule")
        elif self.weight_rule is not None:
            raise StructuralError("weight_rule only valid for weighted_hamming")


def volume_weights(y_true: np.ndarray, volumes: np.ndarray,
                   floor: float = 0.0) -> np.ndarray:
    """Volume-balanced per-variable weights for binary ground truth:

        theta_d = V_d / (2 V_fg)  if y_d = 1,   V_d / (2 V_bg)  if y_d = 0.

    ``floor`` optionally clamps V_fg and V_bg from below; with floor = 0 a
    one-sided ground truth raises DegenerateInstanceError.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    volumes = np.asarray(volumes, dtype=np.float64)
    if np.any((y_true != 0) & (y_true != 1)):
        raise StructuralError("volume-balanced weights require binary labels")
    v_fg = float(volumes[y_true == 1].sum())
    v_bg = float(volumes[y_true == 0].sum())
    if floor > 0.0:
        v_fg = max(v_fg, floor)
        v_bg = max(v_bg, floor)
    if v_fg == 0.0 or v_bg == 0.0:
        raise DegenerateInstanceError(
            "all-foreground or all-background ground truth")
    return np.where(y_true == 1, volumes / (2.0 * v_fg), volumes / (2.0 * v_bg))


def loss(spec: LossSpec, y_true: np.ndarray, y_pred: np.ndarray,
         volumes: np.ndarray | None = None) -> float:
    """Evaluate the configured loss; weights are taken at the true labels."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise StructuralError("labelings must have equal length")
    d = y_true.shape[0]
    mism = y_true != y_pred
    if spec.kind == ZERO_ONE:
        return float(np.any(mism))
    if spec.kind == HAMMING:
        return float(mism.sum()) / d
    theta = loss_weights(spec, y_true, volumes)
    return float((theta * mism).sum()) / d


def loss_weights(spec: LossSpec, y_true: np.ndarray,
                 volumes: np.ndarray | None = None) -> np.ndarray:
    """Per-variable theta_d(y_d) for Hamming-family losses (ones for plain
    Hamming)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    d = y_true.shape[0]
    if spec.kind in (ZERO_ONE, HAMMING):
        return np.ones(d)
    if isinstance(spec.weight_rule, str):
        if spec.weight_rule == UNIT_WEIGHTS:
            return np.ones(d)
        if spec.weight_rule != VOLUME_BALANCED:
            raise StructuralError(f"unknown weight rule {spec.weight_rule!r}")
        if volumes is None:
            volumes = np.ones(d)
        return volume_weights(y_true, volumes)
    table = np.asarray(spec.weight_rule, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != d:
        raise StructuralError("explicit weight table must be (D, K)")
    return table[np.arange(d), y_true]


# ---------------------------------------------------------------------------
# Marginal tables
# ---------------------------------------------------------------------------


@dataclass
class MarginalTable:
    """Per-variable probability rows, padded to Kmax with zeros."""

    probs: np.ndarray  # (D, Kmax)
    label_counts: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if not self.label_counts:
            self.label_counts = (self.probs.shape[1],) * self.probs.shape[0]

    @property
    def num_vars(self) -> int:
        return self.probs.shape[0]

    def row(self, d: int) -> np.ndarray:
        return self.probs[d, : self.label_counts[d]]

    def rows(self) -> list[np.ndarray]:
        return [self.row(d) for d in range(self.num_vars)]

    def argmax_labeling(self) -> np.ndarray:
        """Per-variable argmax with ties to the smallest label."""
        out = np.zeros(self.num_vars, dtype=np.int64)
        for d in range(self.num_vars):
            out[d] = int(np.argmax(self.row(d)))
        return out


def exact_row_normalize(counts: np.ndarray, total: int,
                        label_counts: tuple[int, ...]) -> np.ndarray:
    """counts / total with each valid row nudged by a sub-ulp correction
    so that it sums to exactly 1.0."""
    q = counts.astype(np.float64) / float(total)
    for d in range(q.shape[0]):
        kd = label_counts[d]
        row = q[d, :kd]
        for _ in range(4):
            s = row.sum()
            if s == 1.0:
                break
            # the residual is sub-ulp at the largest entry: try candidates
            # in order of increasing magnitude (finest granularity first)
            fixed = False
            for i in np.argsort(row, kind="stable"):
                trial = row[i] + (1.0 - s)
                if trial < 0.0:
                    continue
                old = row[i]
                row[i] = trial
                if row.sum() == 1.0:
                    fixed = True
                    break
                row[i] = old
            if not fixed:
                row[int(np.argmax(row))] += 1.0 - s
        q[d, kd:] = 0.0
    return q

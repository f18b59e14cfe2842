"""Region graphs, counting numbers, per-sample potential tables.

A model is a directed region graph over discrete variables plus, per training
sample, dense loss and feature tables indexed by region labels.  A region's
joint label is a single flat index, laid out row-major over the region's
sorted variable list (first variable varies slowest).  All structures are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelError",
    "Region",
    "RegionGraph",
    "CountingNumbers",
    "Sample",
    "ValidationReport",
    "validate_model",
    "theta_table",
    "feature_count",
]


class ModelError(ValueError):
    """Fatal structural problem in a region graph or its tables."""


@dataclass(frozen=True)
class Region:
    """A subset of variables with a flat joint-label space."""

    id: int
    variables: tuple[int, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        if len(self.variables) != len(self.cardinalities):
            raise ModelError(f"region {self.id}: variable/cardinality length mismatch")
        if len(self.variables) == 0:
            raise ModelError(f"region {self.id}: empty variable set")
        if list(self.variables) != sorted(set(self.variables)):
            raise ModelError(f"region {self.id}: variables must be sorted and unique")
        if any(c < 1 for c in self.cardinalities):
            raise ModelError(f"region {self.id}: cardinalities must be >= 1")

    @property
    def label_count(self) -> int:
        return math.prod(self.cardinalities)

    def strides(self) -> np.ndarray:
        """Row-major strides: flat = sum(y[j] * stride[j])."""
        s = np.ones(len(self.cardinalities), dtype=np.int64)
        for j in range(len(self.cardinalities) - 2, -1, -1):
            s[j] = s[j + 1] * self.cardinalities[j + 1]
        return s

    def unflatten(self, flat: int) -> tuple[int, ...]:
        out = []
        for c in reversed(self.cardinalities):
            out.append(flat % c)
            flat //= c
        return tuple(reversed(out))


class RegionGraph:
    """Regions plus parent->child containment edges.

    Edges are stored sorted by (parent, child) so that the edge order, and
    everything derived from it (message layout, file output), is canonical.
    An edge (p, r) requires vars(r) to be a strict subset of vars(p); since
    the variable count strictly decreases along every edge the graph is
    automatically a DAG.
    """

    def __init__(self, regions: list[Region], edges: list[tuple[int, int]], variable_count: int):
        if variable_count < 1:
            raise ModelError("variable_count must be positive")
        ids = [r.id for r in regions]
        if ids != list(range(len(regions))):
            raise ModelError("region ids must be dense 0-based indices in order")
        self.regions = list(regions)
        self.variable_count = variable_count
        n_regions = len(regions)
        seen = set()
        for p, r in edges:
            if not (0 <= p < n_regions and 0 <= r < n_regions):
                raise ModelError(f"edge ({p}, {r}) references a missing region")
            if (p, r) in seen:
                raise ModelError(f"duplicate edge ({p}, {r})")
            seen.add((p, r))
        self.edges = sorted(edges)
        self.parents = [[] for _ in range(n_regions)]
        self.children = [[] for _ in range(n_regions)]
        for p, r in self.edges:
            self.parents[r].append(p)
            self.children[p].append(r)
        # global per-variable cardinalities; conflicting duplicates are fatal
        card = {}
        for reg in self.regions:
            for v, c in zip(reg.variables, reg.cardinalities):
                if not (0 <= v < variable_count):
                    raise ModelError(f"region {reg.id}: variable {v} out of range")
                if card.setdefault(v, c) != c:
                    raise ModelError(f"variable {v}: inconsistent cardinality across regions")
        self.cardinalities = np.array(
            [card.get(v, 0) for v in range(variable_count)], dtype=np.int64
        )
        self._projections: dict[tuple[int, int], np.ndarray] = {}
        self._layout = None

    @property
    def region_count(self) -> int:
        return len(self.regions)

    def label_counts(self) -> np.ndarray:
        return np.array([r.label_count for r in self.regions], dtype=np.int64)

    def check_structure(self) -> None:
        """Raise ModelError on containment or coverage violations."""
        for p, r in self.edges:
            pv, rv = set(self.regions[p].variables), set(self.regions[r].variables)
            if not (rv < pv):
                raise ModelError(f"edge ({p}, {r}): containment violated")
        covered = set()
        for reg in self.regions:
            covered.update(reg.variables)
        missing = set(range(self.variable_count)) - covered
        if missing:
            raise ModelError(f"variables not covered by any region: {sorted(missing)}")
        if (self.cardinalities <= 0).any():
            raise ModelError("some variable has no cardinality (uncovered)")

    def projection(self, parent: int, child: int) -> np.ndarray:
        """Map each flat parent label to the flat child label it restricts to."""
        key = (parent, child)
        if key not in self._projections:
            p, r = self.regions[parent], self.regions[child]
            if not (set(r.variables) < set(p.variables)):
                raise ModelError(f"edge ({parent}, {child}): containment violated")
            p_strides = p.strides()
            r_strides = r.strides()
            idx = np.arange(p.label_count, dtype=np.int64)
            proj = np.zeros(p.label_count, dtype=np.int64)
            for j, v in enumerate(r.variables):
                pos = p.variables.index(v)
                digit = (idx // p_strides[pos]) % p.cardinalities[pos]
                proj += digit * r_strides[j]
            self._projections[key] = proj
        return self._projections[key]

    def layout(self) -> "GraphLayout":
        if self._layout is None:
            self._layout = GraphLayout(self)
        return self._layout


class GraphLayout:
    """Flattened index arrays for vectorized table operations.

    All region tables of one sample are concatenated into a single vector of
    length ``total``; region r occupies slots [offsets[r], offsets[r+1]).
    Message tables are concatenated the same way in edge order.
    """

    def __init__(self, graph: RegionGraph):
        self.graph = graph
        sizes = graph.label_counts()
        self.sizes = sizes
        self.offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.total = int(self.offsets[-1])
        self.starts = self.offsets[:-1]
        self.segment = np.repeat(np.arange(graph.region_count), sizes)

        edges = graph.edges
        self.edge_child = np.array([r for _, r in edges], dtype=np.int64)
        self.edge_parent = np.array([p for p, _ in edges], dtype=np.int64)
        esizes = sizes[self.edge_child] if edges else np.zeros(0, dtype=np.int64)
        self.edge_offsets = np.concatenate(([0], np.cumsum(esizes)))
        self.message_total = int(self.edge_offsets[-1])

        self.proj = [graph.projection(p, r) for p, r in edges]
        # per-edge grouping of parent labels by projected child label
        self.perm = [np.argsort(pr, kind="stable") for pr in self.proj]
        self.group_starts = []
        self.group_of = []
        for e, (p, r) in enumerate(edges):
            counts = np.bincount(self.proj[e], minlength=sizes[r])
            self.group_starts.append(np.concatenate(([0], np.cumsum(counts)[:-1])))
            self.group_of.append(np.repeat(np.arange(sizes[r], dtype=np.int64), counts))

        self.parent_edges = [[] for _ in range(graph.region_count)]
        self.child_edges = [[] for _ in range(graph.region_count)]
        for e, (p, r) in enumerate(edges):
            self.parent_edges[r].append(e)
            self.child_edges[p].append(e)
        self.regions_with_parents = [
            r for r in range(graph.region_count) if self.parent_edges[r]
        ]
        self.region_slices = [
            slice(int(self.offsets[r]), int(self.offsets[r + 1]))
            for r in range(graph.region_count)
        ]
        self.edge_slices = [
            slice(int(self.edge_offsets[e]), int(self.edge_offsets[e + 1]))
            for e in range(len(edges))
        ]
        # absolute gather indices of a child message evaluated at parent labels
        self.lam_in_idx = [self.edge_offsets[e] + self.proj[e] for e in range(len(edges))]

        # scatter indices mapping the message vector into the table vector:
        # incoming child messages add onto parent slots (through projections),
        # outgoing messages subtract directly from child slots.
        in_tgt, in_src, out_tgt = [], [], []
        for e, (p, r) in enumerate(edges):
            in_tgt.append(self.offsets[p] + np.arange(sizes[p], dtype=np.int64))
            in_src.append(self.edge_offsets[e] + self.proj[e])
            out_tgt.append(self.offsets[r] + np.arange(sizes[r], dtype=np.int64))
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
        self.in_target = cat(in_tgt)
        self.in_source = cat(in_src)
        # message slots are contiguous in edge order, so the source of an
        # outgoing subtraction is the slot position itself
        self.out_target = cat(out_tgt)
        self.out_source = np.arange(self.message_total, dtype=np.int64)

    def region_slice(self, r: int) -> slice:
        return self.region_slices[r]

    def edge_slice(self, e: int) -> slice:
        return self.edge_slices[e]

    def scatter_messages(self, messages: np.ndarray, out: np.ndarray) -> np.ndarray:
        """Add incoming-child minus outgoing-parent messages onto a table vector."""
        if self.message_total:
            np.add.at(out, self.in_target, messages[self.in_source])
            np.subtract.at(out, self.out_target, messages[self.out_source])
        return out


@dataclass(frozen=True)
class CountingNumbers:
    """Per-region entropy weights c_r."""

    values: np.ndarray
    scheme: str = "file"

    @classmethod
    def ones(cls, graph: RegionGraph) -> "CountingNumbers":
        return cls(np.ones(graph.region_count), "ones")

    @classmethod
    def bethe(cls, graph: RegionGraph) -> "CountingNumbers":
        c = np.array([1.0 - len(graph.parents[r]) for r in range(graph.region_count)])
        return cls(c, "bethe")

    @classmethod
    def from_values(cls, values, scheme: str = "file") -> "CountingNumbers":
        return cls(np.asarray(values, dtype=float), scheme)

    def fractional_cover(self, graph: RegionGraph) -> bool:
        """True iff every variable i has sum of c_r over regions containing i >= 1."""
        total = np.zeros(graph.variable_count)
        for reg in graph.regions:
            for v in reg.variables:
                total[v] += self.values[reg.id]
        return bool((total >= 1.0 - 1e-12).all())


class Sample:
    """Per-sample loss tables, feature tables and true labels.

    ``loss`` maps region id to a table over that region's labels (missing
    regions mean zero loss).  ``features`` maps region id to {feature id:
    table}.  ``true_labels`` maps region id to the flat index of the observed
    label; it may be omitted for inference-only samples.
    """

    def __init__(
        self,
        graph: RegionGraph,
        sample_id: int,
        loss: dict[int, np.ndarray] | None = None,
        features: dict[int, dict[int, np.ndarray]] | None = None,
        true_labels: dict[int, int] | None = None,
    ):
        self.graph = graph
        self.id = sample_id
        self.loss = {r: np.asarray(t, dtype=float) for r, t in (loss or {}).items()}
        self.features = {
            r: {k: np.asarray(t, dtype=float) for k, t in fk.items()}
            for r, fk in (features or {}).items()
        }
        self.true_labels = dict(true_labels) if true_labels is not None else None
        if self.true_labels is not None and len(self.true_labels) != graph.region_count:
            raise ModelError(
                f"sample {sample_id}: true labels must cover all regions when given"
            )
        sizes = graph.label_counts()
        for r, t in self.loss.items():
            if t.shape != (sizes[r],):
                raise ModelError(f"sample {sample_id}: loss table for region {r} has wrong size")
        for r, fk in self.features.items():
            for k, t in fk.items():
                if t.shape != (sizes[r],):
                    raise ModelError(
                        f"sample {sample_id}: feature table ({k}, {r}) has wrong size"
                    )
        self._compiled = None

    @property
    def max_feature_id(self) -> int:
        m = -1
        for fk in self.features.values():
            if fk:
                m = max(m, max(fk))
        return m

    def true_assignment(self) -> np.ndarray:
        """Per-variable true labels reconstructed from the per-region indices."""
        if self.true_labels is None:
            raise ModelError(f"sample {self.id}: no true labels")
        assign = np.full(self.graph.variable_count, -1, dtype=np.int64)
        for r, flat in self.true_labels.items():
            reg = self.graph.regions[r]
            for v, y in zip(reg.variables, reg.unflatten(int(flat))):
                if assign[v] >= 0 and assign[v] != y:
                    raise ModelError(
                        f"sample {self.id}: regions disagree on true label of variable {v}"
                    )
                assign[v] = y
        return assign

    def empirical_features(self, num_features: int | None = None) -> np.ndarray:
        """Sum of feature values at the true labels, per feature id."""
        if self.true_labels is None:
            raise ModelError(f"sample {self.id}: no true labels")
        k_max = self.max_feature_id
        size = (k_max + 1) if num_features is None else num_features
        out = np.zeros(size)
        for r, fk in self.features.items():
            y = int(self.true_labels[r])
            for k, t in fk.items():
                out[k] += t[y]
        return out

    def compiled(self) -> "CompiledSample":
        if self._compiled is None:
            self._compiled = CompiledSample(self)
        return self._compiled


class CompiledSample:
    """Concatenated-vector view of a sample against its graph layout."""

    def __init__(self, sample: Sample):
        layout = sample.graph.layout()
        self.layout = layout
        self.loss_vec = np.zeros(layout.total)
        for r, t in sample.loss.items():
            self.loss_vec[layout.region_slice(r)] = t
        rows, cols, vals = [], [], []
        for r, fk in sorted(sample.features.items()):
            base = layout.offsets[r]
            for k, t in sorted(fk.items()):
                rows.append(base + np.arange(layout.sizes[r], dtype=np.int64))
                cols.append(np.full(layout.sizes[r], k, dtype=np.int64))
                vals.append(t)
        cat = lambda xs, d: np.concatenate(xs) if xs else np.zeros(0, dtype=d)
        self.feat_rows = cat(rows, np.int64)
        self.feat_cols = cat(cols, np.int64)
        self.feat_vals = cat(vals, float)
        if sample.true_labels is not None:
            self.true_slots = np.array(
                [layout.offsets[r] + int(y) for r, y in sorted(sample.true_labels.items())],
                dtype=np.int64,
            )
        else:
            self.true_slots = None

    def theta_vec(self, w: np.ndarray, include_loss: bool = True) -> np.ndarray:
        """Concatenated theta tables: optional loss plus weighted features."""
        out = self.loss_vec.copy() if include_loss else np.zeros(self.layout.total)
        if self.feat_rows.size:
            out += np.bincount(
                self.feat_rows,
                weights=self.feat_vals * w[self.feat_cols],
                minlength=self.layout.total,
            )
        return out

    def feature_expectation(self, belief_vec: np.ndarray, num_features: int) -> np.ndarray:
        """Belief-weighted feature sums per feature id."""
        if not self.feat_rows.size:
            return np.zeros(num_features)
        return np.bincount(
            self.feat_cols,
            weights=self.feat_vals * belief_vec[self.feat_rows],
            minlength=num_features,
        )


def feature_count(samples) -> int:
    """Weight-vector length implied by a collection of samples."""
    m = -1
    for s in samples:
        m = max(m, s.max_feature_id)
    return m + 1


def theta_table(
    sample: Sample, region_id: int, w: np.ndarray, include_loss: bool = True
) -> np.ndarray:
    """Potential table of one region: loss (optional) plus weighted features."""
    size = sample.graph.regions[region_id].label_count
    out = np.zeros(size)
    if include_loss and region_id in sample.loss:
        out += sample.loss[region_id]
    for k, t in sample.features.get(region_id, {}).items():
        if k >= len(w):
            raise ModelError(f"feature id {k} exceeds weight vector length {len(w)}")
        out += w[k] * t
    return out


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_model(
    graph: RegionGraph,
    samples: list[Sample],
    counting: CountingNumbers | None = None,
) -> ValidationReport:
    """Check structural and per-sample invariants.

    Structural violations (containment, coverage, dangling edges) raise
    ModelError.  Per-sample table inconsistencies are collected as report
    errors.  Counting-number configurations that void the upper-bound
    guarantee (negative c_r, or no fractional cover) are warnings only.
    """
    graph.check_structure()
    report = ValidationReport()
    for sample in samples:
        for r in sample.loss:
            if not (0 <= r < graph.region_count):
                report.errors.append(f"sample {sample.id}: loss table for unknown region {r}")
        for r in sample.features:
            if not (0 <= r < graph.region_count):
                report.errors.append(f"sample {sample.id}: features for unknown region {r}")
        if sample.true_labels is None:
            continue
        for r, y in sample.true_labels.items():
            if not (0 <= y < graph.regions[r].label_count):
                report.errors.append(
                    f"sample {sample.id}: true label {y} out of range for region {r}"
                )
        try:
            sample.true_assignment()
        except ModelError as exc:
            report.errors.append(str(exc))
            continue
        for r, t in sample.loss.items():
            if t[int(sample.true_labels[r])] != 0.0:
                report.errors.append(
                    f"sample {sample.id}: loss of the true label must be zero (region {r})"
                )
        emp = sample.empirical_features()
        recomputed = np.zeros_like(emp)
        for r, fk in sample.features.items():
            y = int(sample.true_labels[r])
            for k, t in fk.items():
                recomputed[k] += t[y]
        if not np.allclose(emp, recomputed, rtol=0, atol=1e-12):
            report.errors.append(f"sample {sample.id}: empirical feature sums inconsistent")
    if counting is not None:
        if len(counting.values) != graph.region_count:
            report.errors.append("counting numbers length mismatch")
        else:
            if (counting.values < 0).any():
                report.warnings.append(
                    "negative counting numbers: upper bound not guaranteed"
                )
            if not counting.fractional_cover(graph):
                report.warnings.append(
                    "counting numbers do not fractionally cover the variables: "
                    "upper bound not guaranteed"
                )
    return report

"""Blended learning and inference: message sweeps interleaved with weight steps.

One outer iteration runs a configurable number of per-sample inference sweeps
followed by a single gradient step on the weights with Armijo backtracking on
the primal (messages frozen).  The weights may move while beliefs are still
marginally inconsistent; convexity guarantees the blend converges for eps >= 0
and nonnegative counting numbers, with every step monotonically decreasing
the primal.

Samples are independent: the trainer stores all message vectors as rows of
one matrix and sweeps them together, optionally splitting the rows into
contiguous blocks handled by a thread pool.  Per-row arithmetic is identical
no matter how rows are grouped, and gradient contributions are reduced in
sample-id order, so training results are bitwise independent of the worker
count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .inference import (
    MessageState,
    belief_vec,
    counting_values,
    residual_rows,
    segmented_lse,
    sweep_vec,
    theta_hat_vec,
)
from .model import CountingNumbers, RegionGraph, Sample, feature_count
from .objective import (
    CERTIFY_RESIDUAL,
    ObjectiveReport,
    entropy_loss_value,
    moment_penalty,
)

__all__ = [
    "TrainerConfig",
    "TrainState",
    "IterationRecord",
    "StepResult",
    "PredictResult",
    "w_gradient",
    "w_step",
    "train",
    "predict",
]

logger = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    eps: float = 1.0
    C: float = 1.0
    c_scheme: str = "ones"  # ones | bethe | file
    c_values: np.ndarray | None = None
    sweeps_per_step: int = 1
    max_outer_iters: int = 1000
    primal_rel_tol: float = 1e-8
    residual_tol: float = 1e-6
    grad_norm_tol: float = 1e-6
    eta0: float = 1.0
    backtrack: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 50
    worker_count: int = 1
    seed: int = 0

    def counting(self, graph: RegionGraph) -> CountingNumbers:
        if self.c_scheme == "ones":
            return CountingNumbers.ones(graph)
        if self.c_scheme == "bethe":
            return CountingNumbers.bethe(graph)
        if self.c_scheme == "file":
            if self.c_values is None:
                raise ValueError("c_scheme 'file' requires c_values")
            if len(self.c_values) != graph.region_count:
                raise ValueError("c_values length does not match the region count")
            return CountingNumbers.from_values(self.c_values)
        raise ValueError(f"unknown counting scheme {self.c_scheme!r}")

    def convex_mode(self, counting: CountingNumbers) -> bool:
        return self.eps >= 0 and bool((counting.values >= 0).all())


@dataclass
class IterationRecord:
    iteration: int
    primal: float
    dual: float
    gap: float
    residual: float
    grad_norm: float
    eta: float

    def format_line(self) -> str:
        return (
            f"{self.iteration} {self.primal:.12g} {self.dual:.12g} {self.gap:.12g} "
            f"{self.residual:.12g} {self.grad_norm:.12g} {self.eta:.12g}"
        )


@dataclass
class TrainState:
    w: np.ndarray
    states: list[MessageState]
    iteration: int = 0
    history: list[float] = field(default_factory=list)
    report: ObjectiveReport | None = None
    converged: bool = False
    stalled: bool = False


@dataclass
class StepResult:
    w: np.ndarray
    eta: float
    stalled: bool
    objective: float


@dataclass
class PredictResult:
    labels: np.ndarray
    residual: float
    sweeps: int


def w_gradient(
    graph: RegionGraph,
    samples: list[Sample],
    states: list[MessageState],
    w: np.ndarray,
    eps: float,
    counting=None,
    C: float = 0.0,
    num_features: int | None = None,
) -> np.ndarray:
    """Gradient of the primal in the weights at frozen messages.

    Per feature: belief-weighted feature expectation minus the empirical
    value, summed over samples in id order, plus C * w.
    """
    w = np.asarray(w, dtype=float)
    if num_features is None:
        num_features = max(feature_count(samples), len(w))
    layout = graph.layout()
    cvals = counting_values(counting, graph)
    g = np.zeros(num_features)
    for sample, state in zip(samples, states):
        compiled = sample.compiled()
        theta = compiled.theta_vec(w, include_loss=True)
        bvec = belief_vec(layout, state.vec[None, :], theta[None, :], eps, cvals)[0]
        g += compiled.feature_expectation(bvec, num_features)
        g -= sample.empirical_features(num_features)
    return g + C * w


def _frozen_objective(layout, compiled, lam_part, t_regions, w, C):
    """Primal at frozen messages; lam_part is the scattered message matrix."""
    total = 0.5 * C * float(w @ w)
    if not compiled:
        return total
    th = np.stack([cs.theta_vec(w, include_loss=True) for cs in compiled]) + lam_part
    lse = segmented_lse(layout, th, t_regions)
    total += float(lse.sum())
    total -= float(sum(th[i, cs.true_slots].sum() for i, cs in enumerate(compiled)))
    return total


def _line_search(layout, compiled, lam_part, t_regions, w, gradient, C, cfg):
    g = np.asarray(gradient, dtype=float)
    if not np.isfinite(g).all():
        raise ValueError("gradient must be finite")
    f0 = _frozen_objective(layout, compiled, lam_part, t_regions, w, C)
    gg = float(g @ g)
    eta = cfg.eta0
    for _ in range(cfg.max_backtracks + 1):
        w_try = w - eta * g
        f_try = _frozen_objective(layout, compiled, lam_part, t_regions, w_try, C)
        if np.isfinite(f_try) and f_try <= f0 - cfg.sufficient_decrease * eta * gg:
            return StepResult(w=w_try, eta=eta, stalled=False, objective=f_try)
        eta *= cfg.backtrack
    return StepResult(w=w.copy(), eta=0.0, stalled=True, objective=f0)


def w_step(
    graph: RegionGraph,
    samples: list[Sample],
    states: list[MessageState],
    w: np.ndarray,
    gradient: np.ndarray,
    eps: float,
    counting=None,
    C: float = 0.0,
    config: TrainerConfig | None = None,
) -> StepResult:
    """Backtracking line search along the negative gradient, messages frozen.

    Accepts the largest eta = eta0 * beta^m with sufficient decrease
    f(w - eta g) <= f(w) - sigma * eta * ||g||^2.  Exhausting the backtracks
    keeps w and flags a stall (not fatal); non-finite trial values shrink and
    continue.
    """
    cfg = config or TrainerConfig(eps=eps, C=C)
    layout = graph.layout()
    cvals = counting_values(counting, graph)
    compiled = [s.compiled() for s in samples]
    lam = (
        np.stack([st.vec for st in states])
        if states
        else np.zeros((0, layout.message_total))
    )
    lam_part = theta_hat_vec(layout, np.zeros((len(samples), layout.total)), lam)
    return _line_search(
        layout, compiled, lam_part, eps * cvals, np.asarray(w, dtype=float), gradient, C, cfg
    )


class _Batch:
    """Row-chunked views over the stacked per-sample message matrix."""

    def __init__(self, n: int, layout, workers: int):
        self.n = n
        self.layout = layout
        self.lam = np.zeros((n, layout.message_total))
        chunk_count = max(1, min(workers, n))
        bounds = np.linspace(0, n, chunk_count + 1, dtype=int)
        self.chunks = [
            (int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a
        ]
        self.pool = ThreadPoolExecutor(max_workers=chunk_count) if chunk_count > 1 else None

    def run(self, fn, *arrays):
        """Apply fn to matching row-chunks of lam and the given matrices."""
        if self.pool is None:
            for a, b in self.chunks:
                fn(self.lam[a:b], *(m[a:b] for m in arrays))
        else:
            futures = [
                self.pool.submit(fn, self.lam[a:b], *(m[a:b] for m in arrays))
                for a, b in self.chunks
            ]
            for f in futures:
                f.result()

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def train(
    graph: RegionGraph,
    samples: list[Sample],
    config: TrainerConfig,
    num_features: int | None = None,
    w0: np.ndarray | None = None,
    log_fn=None,
) -> TrainState:
    """Run the blended loop until the primal, residual and gradient criteria
    are all met, or the iteration budget runs out."""
    if num_features is None:
        num_features = feature_count(samples)
    samples = sorted(samples, key=lambda s: s.id)
    n = len(samples)
    layout = graph.layout()
    counting = config.counting(graph)
    cvals = counting.values
    t_regions = config.eps * cvals
    eps, C = config.eps, config.C
    if not config.convex_mode(counting):
        logger.warning(
            "non-convex mode (eps or some c_r negative): monotone descent and "
            "gap certification are not guaranteed"
        )
    w = np.zeros(num_features) if w0 is None else np.asarray(w0, dtype=float).copy()
    compiled = [s.compiled() for s in samples]
    empirical = np.zeros(num_features)
    for s in samples:
        empirical += s.empirical_features(num_features)
    loss_mat = (
        np.stack([cs.loss_vec for cs in compiled])
        if n
        else np.zeros((0, layout.total))
    )
    t_slot = t_regions[layout.segment]

    batch = _Batch(n, layout, config.worker_count)
    state = TrainState(
        w=w, states=[MessageState.from_view(graph, batch.lam[i]) for i in range(n)]
    )

    def stack_thetas(weights):
        if not n:
            return np.zeros((0, layout.total))
        return np.stack([cs.theta_vec(weights, include_loss=True) for cs in compiled])

    thetas = stack_thetas(state.w)

    def run_sweeps(count):
        def job(lam_rows, theta_rows):
            for _ in range(count):
                sweep_vec(layout, lam_rows, theta_rows, eps, cvals)

        batch.run(job, thetas)

    def belief_pass():
        out = np.zeros((n, layout.total))

        def job(lam_rows, theta_rows, out_rows):
            out_rows[:] = belief_vec(layout, lam_rows, theta_rows, eps, cvals)

        batch.run(job, thetas, out)
        return out

    def expectations(bmat):
        expect = np.zeros(num_features)
        for i, cs in enumerate(compiled):
            expect += cs.feature_expectation(bmat[i], num_features)
        return expect

    try:
        prev_primal = None
        for it in range(1, config.max_outer_iters + 1):
            state.iteration = it
            run_sweeps(config.sweeps_per_step)
            lam_part = theta_hat_vec(layout, np.zeros((n, layout.total)), batch.lam)

            bmat = belief_pass()
            g_pre = expectations(bmat) - empirical + C * state.w

            step = _line_search(
                layout, compiled, lam_part, t_regions, state.w, g_pre, C, config
            )
            state.stalled = step.stalled
            eta = step.eta
            if not step.stalled:
                state.w = step.w
                thetas = stack_thetas(state.w)

            # post-step diagnostics; the moment mismatch doubles as the gradient
            bmat = belief_pass()
            residual = float(residual_rows(layout, bmat).max()) if n else 0.0
            th = thetas + lam_part
            lse = segmented_lse(layout, th, t_regions)
            per_sample = [
                float(lse[i].sum() - th[i, cs.true_slots].sum())
                for i, cs in enumerate(compiled)
            ]
            reg = 0.5 * C * float(state.w @ state.w)
            primal = sum(per_sample) + reg
            z = expectations(bmat) - empirical
            dual = entropy_loss_value(bmat, loss_mat, t_slot) - moment_penalty(z, C)
            g_post = z + C * state.w
            grad_norm = float(np.linalg.norm(g_post))
            certified = (
                residual <= CERTIFY_RESIDUAL and eps > 0 and bool((cvals > 0).all())
            )
            state.report = ObjectiveReport(
                primal=primal,
                dual=dual,
                gap=primal - dual,
                marginal_residual=residual,
                certified=certified,
                per_sample_loss=per_sample,
                regularizer=reg,
            )
            state.history.append(primal)
            if log_fn is not None:
                log_fn(
                    IterationRecord(
                        iteration=it,
                        primal=primal,
                        dual=dual,
                        gap=primal - dual,
                        residual=residual,
                        grad_norm=grad_norm,
                        eta=eta,
                    )
                )

            rel = (
                0.0
                if prev_primal is None
                else (prev_primal - primal) / max(1.0, abs(prev_primal))
            )
            prev_primal = primal
            if (
                abs(rel) < config.primal_rel_tol
                and residual < config.residual_tol
                and grad_norm < config.grad_norm_tol
            ):
                state.converged = True
                break

            # a stalled weight step with inconsistent beliefs: keep sweeping,
            # the inference block cannot increase the objective
            if step.stalled and residual > config.residual_tol:
                extra = 0
                while residual > config.residual_tol and extra < 50:
                    run_sweeps(1)
                    extra += 1
                    residual = float(residual_rows(layout, belief_pass()).max())
    finally:
        batch.close()
    return state


def _smallest_containing_region(graph: RegionGraph) -> list[int]:
    """Per variable, the containing region with the fewest variables
    (ties to the lowest region id)."""
    best = [-1] * graph.variable_count
    for reg in graph.regions:
        for v in reg.variables:
            if best[v] < 0 or len(reg.variables) < len(graph.regions[best[v]].variables):
                best[v] = reg.id
    return best


def predict(
    graph: RegionGraph,
    sample: Sample,
    w: np.ndarray,
    eps_infer: float,
    counting=None,
    max_sweeps: int = 100,
    residual_tol: float = 1e-8,
) -> PredictResult:
    """Loss-free inference sweeps followed by per-variable decoding.

    Each variable takes the argmax (ties to the lowest label) of its marginal
    under the belief of its smallest containing region.  The returned
    residual measures how consistent the final beliefs are; a large value
    means the decode rests on disagreeing regions.
    """
    w = np.asarray(w, dtype=float)
    layout = graph.layout()
    cvals = counting_values(counting, graph)
    theta = sample.compiled().theta_vec(w, include_loss=False)[None, :]
    lam = np.zeros((1, layout.message_total))
    bvec = belief_vec(layout, lam, theta, eps_infer, cvals)
    residual = float(residual_rows(layout, bvec)[0])
    sweeps = 0
    while sweeps < max_sweeps and residual > residual_tol:
        sweep_vec(layout, lam, theta, eps_infer, cvals)
        sweeps += 1
        bvec = belief_vec(layout, lam, theta, eps_infer, cvals)
        residual = float(residual_rows(layout, bvec)[0])
    b = bvec[0]
    owners = _smallest_containing_region(graph)
    labels = np.zeros(graph.variable_count, dtype=np.int64)
    for v in range(graph.variable_count):
        reg = graph.regions[owners[v]]
        table = b[layout.region_slices[reg.id]]
        pos = reg.variables.index(v)
        stride = int(reg.strides()[pos])
        card = reg.cardinalities[pos]
        digits = (np.arange(reg.label_count, dtype=np.int64) // stride) % card
        marg = np.bincount(digits, weights=table, minlength=card)
        labels[v] = int(np.argmax(marg))
    return PredictResult(labels=labels, residual=residual, sweeps=sweeps)

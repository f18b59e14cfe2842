"""Batch command line: generate corpora, train, infer, evaluate, report gaps.

Every subcommand is a pure function of its input files, flags and seed, and
prints the seed it ran with.  Exit codes: 0 success (or converged), 1 usage
or input error, 2 non-convergence within the iteration budget.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import DenoiseSpec, make_denoise_dataset, pixel_error
from .fileio import (
    ModelError,
    ParseError,
    ParsedModel,
    parse_bitmap,
    parse_labels,
    parse_model,
    parse_weights,
    write_labels,
    write_model,
    write_weights,
)
from .inference import MessageState, belief_vec, residual_rows, sweep_vec
from .learner import TrainerConfig, predict, train
from .model import CountingNumbers
from .objective import duality_report

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_CONVERGED = 2


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="blendsp", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-denoise", help="generate a synthetic denoising corpus")
    g.add_argument("--width", type=int, required=True)
    g.add_argument("--height", type=int, required=True)
    noise = g.add_mutually_exclusive_group(required=True)
    noise.add_argument("--flip-prob", type=float)
    noise.add_argument("--gaussian-sigma", type=float)
    noise.add_argument("--bimodal", action="store_true")
    g.add_argument("--num-train", type=int, required=True)
    g.add_argument("--num-test", type=int, required=True)
    g.add_argument("--tying", choices=("shared", "full"), default="shared")
    g.add_argument("--base-image", type=Path, default=None, help="text bitmap of 0/1 rows")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train weights on a model file")
    t.add_argument("--model", type=Path, required=True)
    t.add_argument("--eps", type=float, default=1.0)
    t.add_argument("--C", type=float, default=1.0)
    t.add_argument("--c-scheme", choices=("ones", "bethe", "file"), default="ones")
    t.add_argument("--c-file", type=Path, default=None)
    t.add_argument("--sweeps-per-step", type=int, default=1)
    t.add_argument("--max-iters", type=int, default=1000)
    t.add_argument("--tol", type=float, default=1e-8, help="relative primal decrease")
    t.add_argument("--residual-tol", type=float, default=1e-6)
    t.add_argument("--grad-tol", type=float, default=1e-6)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, required=True, help="weights file")
    t.add_argument("--log", type=Path, default=None, help="per-iteration progress log")

    i = sub.add_parser("infer", help="predict labels for every sample in a model file")
    i.add_argument("--model", type=Path, required=True)
    i.add_argument("--weights", type=Path, required=True)
    i.add_argument("--eps-infer", type=float, default=1.0)
    i.add_argument("--c-scheme", choices=("ones", "bethe", "file"), default="ones")
    i.add_argument("--c-file", type=Path, default=None)
    i.add_argument("--max-sweeps", type=int, default=200)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", type=Path, required=True, help="labels file")

    e = sub.add_parser("eval", help="pixel error between two labels files")
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--truth", type=Path, required=True)
    e.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("gap", help="duality report for a model and weights")
    d.add_argument("--model", type=Path, required=True)
    d.add_argument("--weights", type=Path, required=True)
    d.add_argument("--eps", type=float, default=1.0)
    d.add_argument("--C", type=float, default=1.0)
    d.add_argument("--c-scheme", choices=("ones", "bethe", "file"), default="ones")
    d.add_argument("--c-file", type=Path, default=None)
    d.add_argument("--max-sweeps", type=int, default=200)
    d.add_argument("--residual-tol", type=float, default=1e-8)
    d.add_argument("--seed", type=int, default=0)
    return parser


def _read_counts(path: Path, region_count: int) -> np.ndarray:
    values = {}
    for no, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        toks = text.split()
        if len(toks) != 2:
            raise ParseError(no, "count line needs: region value")
        values[int(toks[0])] = float(toks[1])
    if sorted(values) != list(range(region_count)):
        raise ModelError("counting file must cover exactly the model's regions")
    return np.array([values[r] for r in range(region_count)])


def _counting_for(args, parsed: ParsedModel) -> CountingNumbers:
    if args.c_scheme == "ones":
        return CountingNumbers.ones(parsed.graph)
    if args.c_scheme == "bethe":
        return CountingNumbers.bethe(parsed.graph)
    if args.c_file is None:
        raise ModelError("--c-scheme file requires --c-file")
    return CountingNumbers.from_values(_read_counts(args.c_file, parsed.graph.region_count))


def _load_model(path: Path) -> ParsedModel:
    with open(path) as fh:
        return parse_model(fh)


def _load_weights(path: Path, parsed: ParsedModel) -> np.ndarray:
    with open(path) as fh:
        w, _ = parse_weights(fh)
    if len(w) != parsed.num_features:
        raise ModelError(
            f"feature count mismatch: weights have {len(w)}, model has "
            f"{parsed.num_features}"
        )
    return w


def _cmd_gen_denoise(args) -> int:
    base = None
    if args.base_image is not None:
        with open(args.base_image) as fh:
            base = parse_bitmap(fh)
    spec = DenoiseSpec(
        width=args.width,
        height=args.height,
        num_train=args.num_train,
        num_test=args.num_test,
        flip_prob=args.flip_prob,
        gaussian_sigma=args.gaussian_sigma,
        bimodal=args.bimodal,
        tying=args.tying,
        seed=args.seed,
        base_image=base,
    )
    ds = make_denoise_dataset(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    counting = None
    for name, samples in (("train", ds.train), ("test", ds.test)):
        parsed = ParsedModel(ds.graph, samples, counting, ds.num_features)
        with open(args.out / f"{name}.bsp", "w") as fh:
            write_model(parsed, fh)
    truth = {s.id: ds.base_image.ravel() for s in ds.test}
    with open(args.out / "truth.labels", "w") as fh:
        write_labels(truth, fh)
    n = args.width * args.height
    pairwise = ds.graph.region_count - n
    print(f"seed={args.seed}")
    print(
        f"regions={ds.graph.region_count} ({n} singleton + {pairwise} pairwise) "
        f"edges={len(ds.graph.edges)} features={ds.num_features} "
        f"train={len(ds.train)} test={len(ds.test)}"
    )
    print(f"wrote {args.out}/train.bsp {args.out}/test.bsp {args.out}/truth.labels")
    return EXIT_OK


def _cmd_train(args) -> int:
    parsed = _load_model(args.model)
    counting = _counting_for(args, parsed)
    config = TrainerConfig(
        eps=args.eps,
        C=args.C,
        c_scheme="file",
        c_values=counting.values,
        sweeps_per_step=args.sweeps_per_step,
        max_outer_iters=args.max_iters,
        primal_rel_tol=args.tol,
        residual_tol=args.residual_tol,
        grad_norm_tol=args.grad_tol,
        worker_count=args.threads,
        seed=args.seed,
    )
    print(f"seed={args.seed}")
    if not config.convex_mode(counting):
        print("warning: non-convex counting numbers; bounds and certification disabled")
    log_handle = open(args.log, "w") if args.log is not None else None
    try:
        log_fn = (
            (lambda rec: log_handle.write(rec.format_line() + "\n")) if log_handle else None
        )
        state = train(
            parsed.graph,
            parsed.samples,
            config,
            num_features=parsed.num_features,
            log_fn=log_fn,
        )
    finally:
        if log_handle:
            log_handle.close()
    with open(args.out, "w") as fh:
        write_weights(
            state.w,
            fh,
            {"eps": repr(args.eps), "C": repr(args.C), "scheme": args.c_scheme},
        )
    if state.report is not None:
        print(state.report.to_text())
        if args.eps == 0:
            print("note: eps=0, gap uncertified (non-smooth mode)")
    print(f"iterations={state.iteration} converged={'yes' if state.converged else 'no'}")
    return EXIT_OK if state.converged else EXIT_NOT_CONVERGED


def _cmd_infer(args) -> int:
    parsed = _load_model(args.model)
    counting = _counting_for(args, parsed)
    w = _load_weights(args.weights, parsed)
    print(f"seed={args.seed}")
    labels = {}
    for sample in parsed.samples:
        result = predict(
            parsed.graph,
            sample,
            w,
            args.eps_infer,
            counting,
            max_sweeps=args.max_sweeps,
        )
        labels[sample.id] = result.labels
        print(
            f"sample={sample.id} residual={result.residual:.6g} sweeps={result.sweeps}"
        )
    with open(args.out, "w") as fh:
        write_labels(labels, fh)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    with open(args.pred) as fh:
        pred = parse_labels(fh)
    with open(args.truth) as fh:
        truth = parse_labels(fh)
    if set(pred) != set(truth):
        raise ModelError("prediction and truth files cover different sample ids")
    ids = sorted(pred)
    wrong, pct = pixel_error([pred[i] for i in ids], [truth[i] for i in ids])
    print(f"seed={args.seed}")
    print(f"samples={len(ids)} errors={wrong} percent={pct:.6g}")
    return EXIT_OK


def _cmd_gap(args) -> int:
    parsed = _load_model(args.model)
    counting = _counting_for(args, parsed)
    w = _load_weights(args.weights, parsed)
    print(f"seed={args.seed}")
    layout = parsed.graph.layout()
    states = [MessageState(parsed.graph) for _ in parsed.samples]
    for sample, state in zip(parsed.samples, states):
        theta = sample.compiled().theta_vec(w, include_loss=True)[None, :]
        lam = state.vec[None, :]
        for _ in range(args.max_sweeps):
            sweep_vec(layout, lam, theta, args.eps, counting.values)
            bvec = belief_vec(layout, lam, theta, args.eps, counting.values)
            if residual_rows(layout, bvec)[0] <= args.residual_tol:
                break
    report = duality_report(
        parsed.graph,
        parsed.samples,
        states,
        w,
        args.eps,
        counting,
        args.C,
        parsed.num_features,
    )
    print(report.to_text())
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "gen-denoise": _cmd_gen_denoise,
        "train": _cmd_train,
        "infer": _cmd_infer,
        "eval": _cmd_eval,
        "gap": _cmd_gap,
    }
    try:
        return handlers[args.command](args)
    except (ParseError, ModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

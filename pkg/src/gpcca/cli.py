"""Command-line interface.

Subcommands: fit, select-d, transform, impute, simulate, evaluate.
Exit codes: 0 success, 1 input/validation error, 2 numerical failure,
3 fit stopped at the iteration cap without converging. Every command is
deterministic given --seed; without --seed one is drawn from entropy and
printed. GPCCA_THREADS serves as the fallback for --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys

import numpy as np

from . import __version__
from .cluster import Partition, adjusted_rand_index
from .em import EmConfig, fit, impute, transform
from .errors import DataError, GpccaError, NumericalError
from .io import (
    load_modalities,
    load_model,
    read_labels,
    save_model,
    write_labels,
    write_matrix,
)
from .selection import select_latent_dim
from .simulate import SimSpec, generate

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2
EXIT_NO_CONVERGENCE = 3


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve_seed(args) -> int:
    if args.seed is None:
        seed = secrets.randbits(32)
        print(f"seed: {seed}")
        return seed
    return args.seed


def _resolve_threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("GPCCA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"GPCCA_THREADS is not an integer: {env!r}") from None
    return 1


def _em_config(args, seed: int) -> EmConfig:
    return EmConfig(
        max_iterations=args.max_iterations,
        rel_tolerance=args.tolerance,
        ridge_lambda=args.ridge_lambda,
        seed=seed,
        init_strategy=args.init,
    )


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--modality", action="append", required=True, metavar="CSV",
                   help="per-modality matrix file; repeat once per modality")
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=0.5,
                   help="ridge shrinkage weight in (0, 1] (default 0.5)")
    p.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=1e-6,
                   help="relative log-likelihood change for convergence")
    p.add_argument("--init", choices=["random-orthonormal", "mean-imputed-svd"],
                   default="random-orthonormal")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, metavar="DIR")


def _common_cluster_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--knn", type=int, default=20, help="neighbor count (default 20)")
    p.add_argument("--resolution", type=float, default=0.8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpcca",
        description="Joint dimensionality reduction of multi-modal data "
        "with missing values.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap for independent fits "
                        "(default: GPCCA_THREADS or 1)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force sequential execution of independent fits")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate the model at a fixed latent dimension")
    _add_fit_flags(p)
    p.add_argument("--d", type=int, required=True, help="latent dimension")

    p = sub.add_parser("select-d", help="pick the latent dimension by consensus")
    _add_fit_flags(p)
    p.add_argument("--candidates", default="2,3,4,6,8,10",
                   help="comma-separated increasing candidate dimensions")
    p.add_argument("--inits", type=int, default=10,
                   help="number of seeded initializations per candidate (B)")
    _common_cluster_flags(p)

    p = sub.add_parser("transform", help="embed data with a fitted model")
    p.add_argument("--model", required=True, metavar="DIR")
    p.add_argument("--modality", action="append", required=True, metavar="CSV")
    p.add_argument("--out", required=True, metavar="CSV")

    p = sub.add_parser("impute", help="fill missing entries with a fitted model")
    p.add_argument("--model", required=True, metavar="DIR")
    p.add_argument("--modality", action="append", required=True, metavar="CSV")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("simulate", help="generate a synthetic 3-modality dataset")
    p.add_argument("--case", required=True, choices=["A", "B", "C", "D"])
    p.add_argument("--rho", type=float, required=True,
                   help="AR(1) feature correlation in [0, 1)")
    p.add_argument("--missing", type=float, default=None,
                   help="entry-wise missing rate (Cases A, B, D)")
    p.add_argument("--p", type=float, default=None,
                   help="baseline modality-missing probability (Case C)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("evaluate", help="Adjusted Rand Index of two labelings")
    p.add_argument("--pred", required=True, metavar="CSV")
    p.add_argument("--truth", required=True, metavar="CSV")
    return parser


def cmd_fit(args) -> int:
    seed = _resolve_seed(args)
    if args.d < 1:
        raise DataError("d must be >= 1")
    data, sample_ids, feature_names = load_modalities(args.modality)
    config = _em_config(args, seed)
    report = fit(data, args.d, config)
    save_model(
        args.out,
        report.final_params,
        sample_ids=sample_ids,
        feature_names=feature_names,
        embeddings=report.posterior.means,
        loglik_trace=report.loglik_trace,
        loglik_trace_unpenalized=report.loglik_trace_unpenalized,
        meta={
            "seed": seed,
            "iterations": report.iterations,
            "converged": report.converged,
            "final_loglik": report.final_loglik,
            "final_loglik_unpenalized": float(report.loglik_trace_unpenalized[-1]),
            "modality_files": [os.path.basename(p) for p in args.modality],
        },
    )
    print(
        f"fit: d={args.d} lambda={args.ridge_lambda} iterations={report.iterations} "
        f"converged={report.converged} loglik={report.final_loglik:.6f}"
    )
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def cmd_select_d(args) -> int:
    seed = _resolve_seed(args)
    try:
        candidates = [int(tok) for tok in args.candidates.split(",") if tok.strip()]
    except ValueError:
        raise DataError(f"cannot parse --candidates {args.candidates!r}") from None
    if args.inits < 2:
        raise DataError("B >= 2 required: need at least two initializations")
    data, sample_ids, feature_names = load_modalities(args.modality)
    config = _em_config(args, seed)
    workers = 1 if args.deterministic else _resolve_threads(args)
    chosen_d, chosen_init, results = select_latent_dim(
        data,
        candidates,
        args.inits,
        config,
        neighbors=args.knn,
        resolution=args.resolution,
        workers=workers,
    )

    os.makedirs(args.out, exist_ok=True)
    score_rows = np.array(
        [
            [r.d, r.score, len(r.init_indices), int(r.disqualified)]
            for r in results
        ]
    )
    write_matrix(
        os.path.join(args.out, "scores.csv"),
        [str(r.d) for r in results],
        ["d", "consensus_score", "successful_fits", "disqualified"],
        score_rows,
    )
    winner = next(r for r in results if r.d == chosen_d)
    pos = winner.init_indices.index(chosen_init)
    selection = {
        "chosen_d": chosen_d,
        "chosen_init": chosen_init,
        "seed": seed,
        "inits": args.inits,
        "candidates": candidates,
        "rmse": {str(b): float(v) for b, v in zip(winner.init_indices, winner.rmse)},
        "scores": {str(r.d): (None if r.disqualified else r.score) for r in results},
    }
    with open(os.path.join(args.out, "selection.json"), "w") as fh:
        json.dump(selection, fh, indent=2)
        fh.write("\n")

    best = winner.fits[chosen_init]
    save_model(
        os.path.join(args.out, "model"),
        best.final_params,
        sample_ids=sample_ids,
        feature_names=feature_names,
        embeddings=best.posterior.means,
        loglik_trace=best.loglik_trace,
        loglik_trace_unpenalized=best.loglik_trace_unpenalized,
        meta={
            "seed": seed,
            "iterations": best.iterations,
            "converged": best.converged,
            "chosen_d": chosen_d,
            "chosen_init": chosen_init,
        },
    )
    write_labels(
        os.path.join(args.out, "labels.csv"),
        sample_ids,
        winner.labels[:, pos].tolist(),
    )
    print(f"select-d: chosen d={chosen_d} init={chosen_init}")
    return EXIT_OK


def _load_for_model(args):
    params, manifest = load_model(args.model)
    data, sample_ids, feature_names = load_modalities(args.modality)
    if tuple(data.layout.sizes) != tuple(params.layout.sizes):
        raise DataError(
            f"modality layout {list(data.layout.sizes)} does not match "
            f"the model layout {list(params.layout.sizes)}"
        )
    return params, manifest, data, sample_ids, feature_names


def cmd_transform(args) -> int:
    params, _, data, sample_ids, _ = _load_for_model(args)
    emb = transform(params, data)
    write_matrix(
        args.out,
        sample_ids,
        [f"factor_{j+1}" for j in range(params.d)],
        emb.T,
    )
    print(f"transform: wrote {emb.shape[1]} embeddings to {args.out}")
    return EXIT_OK


def cmd_impute(args) -> int:
    params, _, data, sample_ids, feature_names = _load_for_model(args)
    completed = impute(params, data)
    os.makedirs(args.out, exist_ok=True)
    for path, names, sl in zip(
        args.modality, feature_names, data.layout.block_slices()
    ):
        base = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out, f"{base}_imputed.csv")
        write_matrix(out_path, sample_ids, names, completed[sl].T)
    print(f"impute: wrote {len(args.modality)} completed matrices to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = _resolve_seed(args)
    if args.case == "C":
        if args.missing is not None:
            raise DataError("Case C takes --p, not --missing")
        if args.p is None:
            raise DataError("Case C takes --p")
        spec = SimSpec(case="C", rho=args.rho, p=args.p, seed=seed)
    else:
        if args.p is not None:
            raise DataError(f"Case {args.case} takes --missing, not --p")
        spec = SimSpec(
            case=args.case,
            rho=args.rho,
            missing_rate=args.missing if args.missing is not None else 0.0,
            seed=seed,
        )
    out = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    sample_ids = [f"s{k+1}" for k in range(out.dataset.n)]
    values = np.where(out.dataset.mask, out.dataset.values, np.nan)
    for r, sl in enumerate(out.dataset.layout.block_slices(), start=1):
        names = [f"m{r}_f{j+1}" for j in range(sl.stop - sl.start)]
        write_matrix(
            os.path.join(args.out, f"modality_{r}.csv"),
            sample_ids,
            names,
            values[sl].T,
        )
    write_labels(
        os.path.join(args.out, "truth.csv"), sample_ids, out.truth.labels.tolist()
    )
    manifest = {
        "case": spec.case,
        "rho": spec.rho,
        "missing_rate": None if spec.case == "C" else spec.missing_rate,
        "p": spec.p,
        "dims": list(spec.dims),
        "cluster_size": spec.cluster_size,
        "clusters": spec.clusters,
        "seed": seed,
        "n_redraws": out.n_redraws,
    }
    with open(os.path.join(args.out, "sim_spec.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    if out.hidden is not None:
        write_matrix(
            os.path.join(args.out, "hidden.csv"),
            sample_ids,
            ["H"],
            out.hidden[:, None],
        )
    print(f"simulate: case {spec.case} written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = read_labels(args.pred)
    truth = read_labels(args.truth)
    if set(pred) != set(truth):
        missing = len(set(pred) ^ set(truth))
        raise DataError(
            f"sample IDs disagree between {args.pred} and {args.truth} "
            f"({missing} unmatched)"
        )
    ids = list(pred)
    a = Partition.from_labels([pred[i] for i in ids])
    b = Partition.from_labels([truth[i] for i in ids])
    print(f"{adjusted_rand_index(a, b):.4f}")
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "select-d": cmd_select_d,
    "transform": cmd_transform,
    "impute": cmd_impute,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        return _fail(str(exc), EXIT_INPUT)
    except FileNotFoundError as exc:
        return _fail(f"{exc.filename}: not found", EXIT_INPUT)
    except NumericalError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except GpccaError as exc:
        return _fail(str(exc), EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())

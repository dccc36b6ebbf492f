"""Command-line surface: train / predict / select / ensemble / eval.

Every run writes its primary artifact plus a manifest recording the
configuration, seed, package versions and wall time.  Exit codes: 0 on
success, 2 for bad flags or unreadable files, 3 for numerical aborts.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np
import scipy

from . import __version__
from .cavi import CaviOptions, NumericalAbort, fit_cavi
from .data import ParseError, load_dataset, metrics
from .ensemble import fit_ensemble, load_ensemble, save_ensemble, combine_summaries
from .predict import predict, sparse_predict
from .sparsify import load_mask, mask_to_dot, save_mask, select_nodes
from .state import (
    NetworkConfig,
    atomic_write_text,
    config_to_json,
    load_model,
    save_model,
)
from .svi import SviOptions, fit_svi


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--data", required=True, help="delimited text file with header row")
        p.add_argument("--target", required=True, nargs="+", help="target column name(s)")
        p.add_argument("--delimiter", default=",")

    def add_model_flags(p):
        p.add_argument("--hidden", type=int, default=20, help="hidden units per layer")
        p.add_argument("--depth", type=int, default=1, help="number of hidden layers")
        p.add_argument("--prior", choices=["ig", "gamma", "igauss"], default="ig")
        p.add_argument("--temperature", type=float, default=0.1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--train-tol", type=float, default=1e-5)
        p.add_argument("--max-sweeps", type=int, default=500)
        p.add_argument("--no-em", action="store_true", help="disable the EM hyperparameter step")
        p.add_argument("--svi", action="store_true", help="train with minibatch updates")
        p.add_argument("--batch-size", type=int, default=10)
        p.add_argument("--forgetting-rate", type=float, default=0.7)

    p = sub.add_parser("train", help="fit one model and write it as JSON")
    add_data_flags(p)
    add_model_flags(p)
    p.add_argument("--out", default="model.json")

    p = sub.add_parser("predict", help="write per-point predictive summaries")
    p.add_argument("--model", required=True, help="model or ensemble JSON")
    add_data_flags(p)
    p.add_argument("--sparse", action="store_true", help="use a sparse mask")
    p.add_argument("--mask", default=None, help="mask JSON (required with --sparse)")
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--predict-tol", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=0, help="also draw this many samples per point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="predictions.csv")

    p = sub.add_parser("select", help="node selection by Bayesian FDR control")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--out", default="mask.json")

    p = sub.add_parser("ensemble", help="fit K models and combine by tempered ELBO")
    add_data_flags(p)
    add_model_flags(p)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--zeta", type=float, default=0.05)
    p.add_argument("--out", default="ensemble.json")

    p = sub.add_parser("eval", help="score a predictions file against targets")
    add_data_flags(p)
    p.add_argument("--pred", required=True, help="predictions CSV from the predict command")
    p.add_argument("--ci-level", type=float, nargs="+", default=[0.95])
    p.add_argument("--out", default="metrics.json")
    return parser


def _write_manifest(out_path: str, command: str, args_dict: dict, extra: dict,
                    wall_time: float) -> None:
    manifest = {
        "command": command,
        "args": {k: v for k, v in args_dict.items() if k != "command"},
        "versions": {
            "vbnn": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_s": wall_time,
        **extra,
    }
    atomic_write_text(out_path + ".manifest.json", json.dumps(manifest, indent=2))


def _config_from_args(args, d0: int, dy: int) -> NetworkConfig:
    dims = (d0,) + (args.hidden,) * args.depth + (dy,)
    return NetworkConfig(
        dims=dims,
        temperature=args.temperature,
        prior_family=args.prior,
        seed=args.seed,
    )


def _normalization_doc(data) -> dict:
    return {
        "x_mean": data.x_mean.tolist(),
        "x_sd": data.x_sd.tolist(),
        "feature_names": list(data.feature_names),
        "target_names": list(data.target_names),
    }


def _cmd_train(args) -> int:
    start = time.time()
    data = load_dataset(args.data, args.target, args.delimiter)
    config = _config_from_args(args, data.x.shape[1], data.y.shape[1])
    if args.svi:
        fit = fit_svi(
            config, data,
            SviOptions(batch_size=args.batch_size, forgetting_rate=args.forgetting_rate,
                       max_iters=args.max_sweeps, elbo_tol=args.train_tol),
            CaviOptions(elbo_tol_train=args.train_tol, em_enabled=not args.no_em),
        )
    else:
        fit = fit_cavi(
            config, data,
            CaviOptions(elbo_tol_train=args.train_tol, max_sweeps=args.max_sweeps,
                        em_enabled=not args.no_em),
        )
    save_model(args.out, fit, _normalization_doc(data))
    _write_manifest(
        args.out, "train", vars(args),
        {"config": config_to_json(config), "seed": args.seed,
         "converged": fit.converged, "final_elbo": fit.elbo_trace[-1],
         "outputs": {"model": args.out}},
        time.time() - start,
    )
    print(f"trained: elbo={fit.elbo_trace[-1]:.6f} sweeps={len(fit.elbo_trace) - 1} "
          f"converged={fit.converged} -> {args.out}")
    return 0


def _load_features(args, normalization):
    """Feature matrix for prediction, normalized with the training statistics."""
    import csv as _csv

    feature_names = normalization["feature_names"]
    with open(args.data, newline="") as f:
        reader = _csv.reader(f, delimiter=args.delimiter)
        header = [h.strip() for h in next(reader)]
        missing = [c for c in feature_names if c not in header]
        if missing:
            raise ParseError(f"{args.data}: missing feature columns {missing}")
        cols = [header.index(c) for c in feature_names]
        rows = []
        for r, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError):
                raise ParseError(f"{args.data}:{r}: bad feature row") from None
    x_raw = np.array(rows, dtype=float)
    mean = np.asarray(normalization["x_mean"])
    sd = np.asarray(normalization["x_sd"])
    return (x_raw - mean) / sd


def _cmd_predict(args) -> int:
    from scipy.special import ndtri

    start = time.time()
    options = CaviOptions(elbo_tol_predict=args.predict_tol)
    with open(args.model) as f:
        head = json.load(f)
    is_ensemble = head.get("kind") == "ensemble"
    if is_ensemble:
        model, normalization = load_ensemble(args.model)
        x = _load_features(args, normalization)
        per_member = [
            predict(fit.global_, fit.config, x, options) for fit in model.members
        ]
        summaries = [
            combine_summaries(model.weights, [pm[i] for pm in per_member])
            for i in range(x.shape[0])
        ]
    else:
        loaded = load_model(args.model)
        x = _load_features(args, loaded.normalization)
        if args.sparse:
            if not args.mask:
                raise ParseError("--sparse requires --mask")
            mask = load_mask(args.mask)
            summaries = sparse_predict(loaded.global_, loaded.config, mask, x, options)
        else:
            rng = np.random.default_rng(args.seed)
            summaries = predict(loaded.global_, loaded.config, x, options,
                                n_samples=args.samples, rng=rng)

    z = ndtri(0.5 + args.ci_level / 2.0)
    dy = summaries[0].mean.shape[0]
    cols = ["index"]
    for d in range(1, dy + 1):
        cols += [f"mean_{d}", f"sd_{d}", f"lo_{d}", f"hi_{d}"]
    lines = [",".join(cols)]
    for i, s in enumerate(summaries):
        sd = np.sqrt(s.variance)
        vals = [str(i)]
        for d in range(dy):
            vals += [repr(s.mean[d]), repr(sd[d]), repr(s.mean[d] - z * sd[d]),
                     repr(s.mean[d] + z * sd[d])]
        lines.append(",".join(vals))
    atomic_write_text(args.out, "\n".join(lines) + "\n")

    outputs = {"predictions": args.out}
    if args.samples and not is_ensemble and not args.sparse:
        sample_path = args.out + ".samples.csv"
        slines = ["index,draw," + ",".join(f"y_{d + 1}" for d in range(dy))]
        for i, s in enumerate(summaries):
            for j, draw in enumerate(s.samples):
                slines.append(",".join([str(i), str(j)] + [repr(v) for v in draw]))
        atomic_write_text(sample_path, "\n".join(slines) + "\n")
        outputs["samples"] = sample_path
    _write_manifest(args.out, "predict", vars(args),
                    {"outputs": outputs, "n_points": len(summaries)},
                    time.time() - start)
    print(f"predicted {len(summaries)} points -> {args.out}")
    return 0


def _cmd_select(args) -> int:
    start = time.time()
    loaded = load_model(args.model)
    mask = select_nodes(loaded.global_, args.alpha)
    save_mask(args.out, mask)
    dot_path = args.out + ".dot"
    norm = loaded.normalization
    atomic_write_text(
        dot_path,
        mask_to_dot(mask, norm.get("feature_names"), norm.get("target_names")),
    )
    _write_manifest(args.out, "select", vars(args),
                    {"outputs": {"mask": args.out, "dot": dot_path},
                     "kept": mask.n_kept(), "total": mask.n_total(),
                     "kappa_hat": mask.kappa_hat},
                    time.time() - start)
    print(f"kept {mask.n_kept()}/{mask.n_total()} weights at kappa={mask.kappa_hat:.6f} "
          f"-> {args.out}")
    return 0


def _cmd_ensemble(args) -> int:
    start = time.time()
    data = load_dataset(args.data, args.target, args.delimiter)
    config = _config_from_args(args, data.x.shape[1], data.y.shape[1])
    options = CaviOptions(elbo_tol_train=args.train_tol, max_sweeps=args.max_sweeps,
                          em_enabled=not args.no_em)
    model = fit_ensemble(config, data, k=args.k, zeta=args.zeta, options=options)
    save_ensemble(args.out, model, _normalization_doc(data))
    _write_manifest(args.out, "ensemble", vars(args),
                    {"config": config_to_json(config),
                     "weights": model.weights.tolist(),
                     "outputs": {"ensemble": args.out}},
                    time.time() - start)
    print(f"ensemble of {args.k}: weights={np.round(model.weights, 4).tolist()} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .predict import PredictiveSummary

    start = time.time()
    data = load_dataset(args.data, args.target, args.delimiter)
    with open(args.pred, newline="") as f:
        import csv as _csv

        reader = _csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    arr = np.array(rows, dtype=float)
    dy = data.y.shape[1]
    if arr.shape[0] != data.n_obs:
        raise ParseError(
            f"{args.pred}: {arr.shape[0]} predictions for {data.n_obs} rows in {args.data}"
        )
    summaries = []
    for row in arr:
        mean = np.array([row[1 + 4 * d] for d in range(dy)])
        sd = np.array([row[2 + 4 * d] for d in range(dy)])
        summaries.append(PredictiveSummary(mean=mean, variance=sd**2,
                                           signal_variance=np.zeros(dy)))
    report = metrics(data.y, summaries, tuple(args.ci_level))
    atomic_write_text(args.out, json.dumps(report.to_json(), indent=2))
    _write_manifest(args.out, "eval", vars(args),
                    {"outputs": {"metrics": args.out}, **report.to_json()},
                    time.time() - start)
    print(f"rmse={report.rmse:.6f} nll={report.nll:.6f} "
          f"ec={ {k: round(v, 4) for k, v in report.ec.items()} } -> {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "predict": _cmd_predict,
    "select": _cmd_select,
    "ensemble": _cmd_ensemble,
    "eval": _cmd_eval,
}


def run_command(argv) -> int:
    """Parse argv and execute one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return _COMMANDS[args.command](args)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except (ParseError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()

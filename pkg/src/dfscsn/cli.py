"""Command-line interface: ``simulate``, ``fit``, ``predict``, ``evaluate``, ``sim-study``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .errors import DataValidationError, DfsCsnError
from .gibbs import run_chains
from .metrics import energy_score, flmpl, frmse, lmpl, parameter_rmse, predict_future
from .model import ModelParams, PanelData, default_design, simulate
from .simstudy import aggregate, enumerate_cases, run_study
from .spatial import build_grid_graph

log = logging.getLogger("dfscsn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides config)")
    parser.add_argument("--threads", type=int, default=default, help="worker threads for chains/replications")
    parser.add_argument("--out", type=Path, default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfscsn", description=__doc__)
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic panel from the config's truth")
    _global_flags(p, suppress=True)
    p.add_argument("--T", type=int, help="number of time points")
    p.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))

    p = sub.add_parser("fit", help="run Gibbs chains and write draws and summaries")
    _global_flags(p, suppress=True)
    p.add_argument("--model", choices=["dfscsn", "dcar"], help="model kind (overrides config)")
    p.add_argument("--save-theta", action="store_true", help="include theta columns in draws.csv")

    p = sub.add_parser("predict", help="forward-simulate future observations from saved draws")
    _global_flags(p, suppress=True)
    p.add_argument("--posterior", type=Path, required=True, help="posterior.npz written by fit")
    p.add_argument("--x-future", type=Path, required=True, help="long-format features for the future block")

    p = sub.add_parser("evaluate", help="LMPL/FLMPL/FES/FRMSE for saved draws")
    _global_flags(p, suppress=True)
    p.add_argument("--posterior", type=Path, required=True)
    p.add_argument("--truth", type=Path, help="truth.json for parameter RMSE")

    p = sub.add_parser("sim-study", help="paired D-FS-CSN / D-CAR simulation study")
    _global_flags(p, suppress=True)
    p.add_argument("--cases", type=str, help="comma-separated case ids (1-4)")
    p.add_argument("--seeds", type=int, help="replications per case and rhoS")
    p.add_argument("--rhoS", type=str, help="comma-separated rhoS values")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burnin", type=int)

    sub.add_parser("default-config", help="print the default configuration")
    return parser


def _settings(args):
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg["chain"]["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = str(args.out)
    cfg["threads"] = args.threads or 1
    return cfg


def _load_data(cfg) -> tuple[PanelData, PanelData | None]:
    d = cfg["data"]
    data = io.load_panel(d["y"], d["x"], d["w"])
    tf = int(cfg["T_future"])
    if tf <= 0:
        return data, None
    return data.split(data.T - tf)


def cmd_simulate(args, cfg):
    sim = cfg["simulate"]
    T = args.T or sim["T"]
    rows, cols = args.grid or sim["grid"]
    truth = ModelParams.from_dict(sim["truth"])
    graph = build_grid_graph(rows, cols)
    rng = np.random.default_rng(cfg["chain"]["seed"])
    X = default_design(T, graph.K, rng)
    if X.shape[2] != len(truth.beta):
        raise DataValidationError(f"truth beta has {len(truth.beta)} entries; the generated design has 2 columns")
    state, y = simulate(truth, X, graph, T, rng)
    out = Path(cfg["out"])
    io.write_panel(PanelData(y, X, graph), out)
    (out / "truth.json").write_text(json.dumps(truth.as_dict(), indent=2) + "\n")
    np.savetxt(out / "theta.csv", state.theta, delimiter=",", fmt="%.17g")
    log.info("wrote T=%d K=%d panel to %s", T, graph.K, out)
    return EXIT_OK


def cmd_fit(args, cfg):
    if args.model:
        cfg["model_kind"] = args.model
    train, _ = _load_data(cfg)
    chains = run_chains(train, io.priors_from(cfg), io.chain_config(cfg), cfg["chain"]["chains"], cfg["threads"])
    out = Path(cfg["out"])
    summary = io.summarize(chains)
    io.write_outputs(chains, summary, None, out, include_theta=args.save_theta)
    io.save_posterior(chains, out / "posterior.npz", train.graph.W, {"T_train": train.T})
    log.info("wrote %d draws to %s", sum(len(c) for c in chains), out)
    return EXIT_OK


def cmd_predict(args, cfg):
    draws, _ = io.load_posterior(args.posterior)
    X_future = io.load_features(args.x_future, draws.theta.shape[2])
    rng = np.random.default_rng(np.random.SeedSequence([cfg["chain"]["seed"], 2]))
    pred = predict_future(draws, X_future, X_future.shape[0], rng)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    Tf, K = pred.samples.shape[1:]
    with (out / "predictive.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", *(f"y_{t}_{k}" for t in range(Tf) for k in range(K))])
        for i, row in enumerate(pred.flat):
            w.writerow([i, *(io.fmt(v) for v in row)])
    return EXIT_OK


def cmd_evaluate(args, cfg):
    draws, meta = io.load_posterior(args.posterior)
    train, future = _load_data(cfg)
    if train.T != meta.get("T_train", train.T):
        raise DataValidationError(f"posterior was fit on T={meta['T_train']} but the config yields T={train.T}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg["chain"]["seed"], 3]))
    metrics = {"lmpl": lmpl(draws, train)}
    if future is not None:
        pred = predict_future(draws, future.X, future.T, rng)
        y_flat = future.y.reshape(-1)
        metrics["flmpl"] = flmpl(draws, future.y, future.X, int(cfg["flmpl_inner"]), rng)
        metrics["fes"] = energy_score(y_flat, pred.flat)
        metrics["frmse"] = frmse(y_flat, pred.flat)
    if args.truth:
        truth = ModelParams.from_dict(json.loads(Path(args.truth).read_text()))
        metrics.update({f"rmse_{k}": v for k, v in parameter_rmse(draws, truth).items()})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sim_study(args, cfg):
    study = cfg["study"]
    cases = [int(c) for c in _floats(args.cases)] if args.cases else study["cases"]
    rhos = _floats(args.rhoS) if args.rhoS else study["rhoS"]
    n_seeds = args.seeds or study["seeds"]
    if any(c not in (1, 2, 3, 4) for c in cases):
        raise DataValidationError(f"case ids must be in 1..4, got {cases}")
    chain = io.chain_config(cfg)
    if args.iterations or args.burnin:
        its = args.iterations or chain.iterations
        chain = replace(chain, iterations=its, burnin=args.burnin if args.burnin is not None else its // 2)
    base = cfg["chain"]["seed"]
    seeds = [base + s for s in range(n_seeds)]
    results = run_study(enumerate_cases(cases, rhos), seeds, chain, io.priors_from(cfg),
                        int(cfg["flmpl_inner"]), cfg["threads"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for pair in results for r in pair]
    fields = list(dict.fromkeys(k for row in rows for k in row))
    with (out / "simstudy_results.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: io.fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    summary = {"cases": cases, "rhoS": rhos, "seeds": seeds,
               "chain": {"iterations": chain.iterations, "burnin": chain.burnin, "thin": chain.thin},
               "differences": aggregate(results)}
    (out / "simstudy_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("wrote %d result rows to %s", len(rows), out)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "sim-study": cmd_sim_study}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "default-config":
        print(json.dumps(io.default_config(), indent=2))
        return EXIT_OK
    try:
        cfg = _settings(args)
        return COMMANDS[args.command](args, cfg)
    except DfsCsnError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [IOError]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

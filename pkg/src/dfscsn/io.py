"""File formats: long-format panel CSVs, adjacency files, run configs, and fit outputs.

Panel files::

    y.csv   t,k,y            one row per (time, area)
    x.csv   t,k,f1,...,fr    one row per (time, area)
    w.csv   i,j              undirected edge list (0-based, each edge once)
            or a headerless dense K x K 0/1 matrix

Time labels may be any integers; they are sorted and mapped to 0..T-1.  Area
labels must be 0..K-1.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DataValidationError
from .gibbs import ChainConfig, PosteriorDraws, Priors, effective_sample_size
from .model import DFSCSN, PanelData
from .spatial import AdjacencyGraph, eigendecompose_laplacian

QUANTILES = {"p05": 0.05, "p50": 0.5, "p95": 0.95}


def fmt(x: float) -> str:
    """Round-trip float formatting (17 significant digits)."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# panel ingestion


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"{path}: file not found")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(n + 1, r) for n, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataValidationError(f"{path}: empty file")
    return rows


def _parse_long(path, value_names=None):
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0][1]]
    if header[:2] != ["t", "k"] or len(header) < 3:
        raise DataValidationError(f"{path}: line 1: header must start with 't,k' followed by value columns")
    if value_names is not None and header[2:] != value_names:
        raise DataValidationError(f"{path}: line 1: expected columns {value_names}, got {header[2:]}")
    cells = {}
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise DataValidationError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            t, k = int(row[0]), int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise DataValidationError(f"{path}: line {lineno}: {exc}") from exc
        if (t, k) in cells:
            raise DataValidationError(f"{path}: line {lineno}: duplicate row for (t={t}, k={k})")
        cells[(t, k)] = vals
    return header[2:], cells


def _assemble(path, cells, times, K, width):
    out = np.empty((len(times), K, width))
    index = {t: i for i, t in enumerate(times)}
    for (t, k), vals in cells.items():
        if not 0 <= k < K:
            raise DataValidationError(f"{path}: area k={k} outside 0..{K - 1}")
        out[index[t], k] = vals
    for t in times:
        for k in range(K):
            if (t, k) not in cells:
                raise DataValidationError(f"{path}: missing row for (t={t}, k={k})")
    return out


def load_adjacency(path, K: int | None = None) -> AdjacencyGraph:
    rows = _read_rows(path)
    first = [c.strip() for c in rows[0][1]]
    if first == ["i", "j"]:
        edges = []
        for lineno, row in rows[1:]:
            try:
                i, j = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise DataValidationError(f"{path}: line {lineno}: bad edge {row}") from exc
            edges.append((i, j))
        if K is None:
            K = 1 + max((max(e) for e in edges), default=0)
        return AdjacencyGraph.from_edges(edges, K)
    try:
        W = np.array([[float(c) for c in row] for _, row in rows])
    except ValueError as exc:
        raise DataValidationError(f"{path}: dense adjacency must be numeric: {exc}") from exc
    if K is not None and W.shape != (K, K):
        raise DataValidationError(f"{path}: dense adjacency has shape {W.shape}, expected ({K}, {K})")
    return AdjacencyGraph(W)


def load_panel(y_path, x_path, w_path) -> PanelData:
    _, ycells = _parse_long(y_path)
    xnames, xcells = _parse_long(x_path)
    times = sorted({t for t, _ in ycells})
    K = 1 + max(k for _, k in ycells)
    graph = load_adjacency(w_path, K)
    if graph.K != K:
        raise DataValidationError(f"adjacency has {graph.K} areas but y has {K}")
    y = _assemble(y_path, ycells, times, K, 1)[:, :, 0]
    if set(xcells) != set(ycells):
        extra = sorted(set(xcells) ^ set(ycells))[0]
        raise DataValidationError(f"{x_path}: (t={extra[0]}, k={extra[1]}) present in only one of y/x")
    X = _assemble(x_path, xcells, times, K, len(xnames))
    return PanelData(y, X, graph)


def load_features(x_path, K: int) -> np.ndarray:
    _, cells = _parse_long(x_path)
    times = sorted({t for t, _ in cells})
    width = len(next(iter(cells.values())))
    return _assemble(x_path, cells, times, K, width)


def write_panel(data: PanelData, out_dir, t0: int = 0, feature_names=None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = feature_names or [f"f{j + 1}" for j in range(data.r)]
    paths = {"y": out_dir / "y.csv", "x": out_dir / "x.csv", "w": out_dir / "w.csv"}
    with paths["y"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "k", "y"])
        for t in range(data.T):
            for k in range(data.K):
                w.writerow([t + t0, k, fmt(data.y[t, k])])
    with paths["x"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "k", *names])
        for t in range(data.T):
            for k in range(data.K):
                w.writerow([t + t0, k, *(fmt(v) for v in data.X[t, k])])
    with paths["w"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j"])
        w.writerows(data.graph.edges())
    return paths


# ---------------------------------------------------------------------------
# run configuration

DEFAULT_CONFIG = {
    "model_kind": DFSCSN,
    "priors": asdict(Priors()),
    "chain": {
        "iterations": 2000,
        "burnin": 1000,
        "thin": 1,
        "chains": 1,
        "seed": 0,
        "step_log_tau2": 0.3,
        "step_logit_rhoS": 0.5,
        "step_lambda": 0.5,
        "adapt": True,
    },
    "data": {"y": "y.csv", "x": "x.csv", "w": "w.csv"},
    "T_future": 0,
    "flmpl_inner": 100,
    "out": "out",
    "simulate": {
        "truth": {"beta": [1.0, 0.5], "sigma2": 0.01, "tau2": 1.0, "rhoS": 0.5, "rhoT": 0.5, "lambda": 2.5},
        "grid": [5, 5],
        "T": 12,
    },
    "study": {"cases": [1, 2, 3, 4], "rhoS": [0.25, 0.5, 0.75], "seeds": 10},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path=None) -> dict:
    """Defaults overlaid with a JSON config file; relative data paths resolve against the file."""
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"{path}: config file not found")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise DataValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    _merge(cfg, user)
    for key in ("y", "x", "w"):
        p = Path(cfg["data"][key])
        if not p.is_absolute():
            cfg["data"][key] = str(path.parent / p)
    return cfg


def chain_config(cfg: dict) -> ChainConfig:
    ch = {k: v for k, v in cfg["chain"].items() if k != "chains"}
    return ChainConfig(model_kind=cfg["model_kind"], **ch)


def priors_from(cfg: dict) -> Priors:
    return Priors(**cfg["priors"])


# ---------------------------------------------------------------------------
# fit outputs


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def draws_header(draws: PosteriorDraws, include_theta: bool) -> list[str]:
    names = list(draws.scalar_traces())
    head = ["chain", "iteration", *names]
    if include_theta:
        T, K = draws.theta.shape[1:]
        head += [f"theta_{t}_{k}" for t in range(T) for k in range(K)]
    return head


def summarize(chains: list[PosteriorDraws]) -> dict:
    """Per-parameter 5/50/95% quantiles, mean, sd and ESS pooled over chains."""
    pooled = PosteriorDraws.concatenate(chains)
    out = {"model_kind": pooled.model_kind, "n_draws": len(pooled), "chains": len(chains), "parameters": {}}
    for name, trace in pooled.scalar_traces().items():
        entry = {key: float(np.quantile(trace, q)) for key, q in QUANTILES.items()}
        entry["mean"] = float(np.mean(trace))
        entry["sd"] = float(np.std(trace))
        entry["ess"] = float(sum(effective_sample_size(c.scalar_traces()[name]) for c in chains)) \
            if all(len(c) >= 10 for c in chains) else float("nan")
        out["parameters"][name] = entry
    out["acceptance"] = [c.acceptance for c in chains]
    return out


def write_outputs(chains: list[PosteriorDraws], summaries: dict | None, metrics: dict | None, out_dir,
                  include_theta: bool = False) -> dict:
    """Write ``draws.csv``, ``summary.json``, ``metrics.json`` and ``manifest.json`` atomically.

    Files are staged in a temporary directory and moved into place only after
    every one has been written.  Returns the manifest.
    """
    if not chains or any(len(c) == 0 for c in chains):
        raise DataValidationError("no posterior draws to write")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    with tempfile.TemporaryDirectory(dir=out_dir, prefix=".staging-") as tmp:
        tmp = Path(tmp)
        with (tmp / "draws.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(draws_header(chains[0], include_theta))
            for c in chains:
                traces = list(c.scalar_traces().values())
                for i in range(len(c)):
                    row = [c.chain, int(c.iteration[i]), *(fmt(tr[i]) for tr in traces)]
                    if include_theta:
                        row += [fmt(v) for v in c.theta[i].reshape(-1)]
                    w.writerow(row)
        files["draws.csv"] = tmp / "draws.csv"
        if summaries is not None:
            (tmp / "summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")
            files["summary.json"] = tmp / "summary.json"
        if metrics is not None:
            (tmp / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
            files["metrics.json"] = tmp / "metrics.json"
        manifest = {"files": {name: _sha256(p) for name, p in sorted(files.items())}}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for name, p in files.items():
            os.replace(p, out_dir / name)
        os.replace(tmp / "manifest.json", out_dir / "manifest.json")
    return manifest


def save_posterior(chains: list[PosteriorDraws], path, W: np.ndarray, extra: dict | None = None):
    pooled = PosteriorDraws.concatenate(chains)
    meta = {"model_kind": pooled.model_kind, "chains": [c.chain for c in chains],
            "lengths": [len(c) for c in chains], "acceptance": [c.acceptance for c in chains], **(extra or {})}
    np.savez_compressed(
        path, iteration=pooled.iteration, beta=pooled.beta, sigma2=pooled.sigma2, tau2=pooled.tau2,
        rhoS=pooled.rhoS, rhoT=pooled.rhoT, lam=pooled.lam, theta=pooled.theta, alpha=pooled.alpha,
        W=W, meta=np.array(json.dumps(meta)))


def load_posterior(path) -> tuple[PosteriorDraws, dict]:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"{path}: posterior file not found")
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        cache = eigendecompose_laplacian(AdjacencyGraph(z["W"]))
        draws = PosteriorDraws(meta["model_kind"], cache=cache,
                               **{k: z[k] for k in ("iteration", "beta", "sigma2", "tau2", "rhoS", "rhoT",
                                                   "lam", "theta", "alpha")})
    return draws, meta

"""Paired simulation study: D-FS-CSN versus D-CAR on data simulated from D-FS-CSN."""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DfsCsnError
from .gibbs import ChainConfig, Priors, effective_sample_size, run_chain
from .metrics import forecast_metrics, parameter_rmse
from .model import DCAR, DFSCSN, ModelParams, PanelData, default_design, simulate
from .spatial import build_grid_graph, eigendecompose_laplacian

log = logging.getLogger(__name__)

CASE_TABLE = {1: (0.01, 2.5), 2: (0.25, 2.5), 3: (0.01, 7.0), 4: (0.25, 7.0)}
RHO_S_VALUES = (0.25, 0.5, 0.75)
METRICS = ("lmpl", "flmpl", "fes", "frmse")


@dataclass(frozen=True)
class SimStudyCase:
    case_id: int
    sigma2: float
    lam: float
    rhoS: float
    beta: tuple = (1.0, 0.5)
    tau2: float = 1.0
    rhoT: float = 0.5
    T: int = 10
    grid: tuple = (5, 5)
    T_future: int = 2

    def truth(self) -> ModelParams:
        return ModelParams(np.array(self.beta), self.sigma2, self.tau2, self.rhoS, self.rhoT, self.lam)


def enumerate_cases(case_ids=None, rhoS_values=None) -> list[SimStudyCase]:
    ids = sorted(CASE_TABLE) if case_ids is None else list(case_ids)
    rhos = RHO_S_VALUES if rhoS_values is None else tuple(rhoS_values)
    out = []
    for cid in ids:
        sigma2, lam = CASE_TABLE[cid]
        for rho in rhos:
            out.append(SimStudyCase(cid, sigma2, lam, rho))
    return out


@dataclass
class ReplicationResult:
    case: int
    rhoS: float
    seed: int
    model_kind: str
    dataset_hash: str
    metrics: dict = field(default_factory=dict)
    rmse: dict = field(default_factory=dict)
    min_ess: float = float("nan")
    acceptance: dict = field(default_factory=dict)
    wall_time: float = 0.0
    failed: bool = False
    error: str = ""

    def row(self) -> dict:
        row = {"case": self.case, "rhoS": self.rhoS, "seed": self.seed, "model_kind": self.model_kind,
               "dataset_hash": self.dataset_hash, "failed": int(self.failed), "error": self.error}
        for name in METRICS:
            row[name] = self.metrics.get(name, float("nan"))
        for name, v in self.rmse.items():
            row[f"rmse_{name}"] = v
        row["min_ess"] = self.min_ess
        row["wall_time"] = self.wall_time
        return row


def simulate_dataset(case: SimStudyCase, seed: int) -> tuple[PanelData, PanelData]:
    """Training and held-out panels drawn from the case's D-FS-CSN truth."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, case.case_id, int(round(case.rhoS * 100))]))
    graph = build_grid_graph(*case.grid)
    T = case.T + case.T_future
    X = default_design(T, graph.K, rng)
    _, y = simulate(case.truth(), X, graph, T, rng)
    return PanelData(y, X, graph).split(case.T)


def dataset_hash(data: PanelData) -> str:
    h = hashlib.sha256()
    for arr in (data.y, data.X, data.graph.W):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def _fit_and_score(kind, case, seed, train, future, chain_config, priors, M, digest):
    cfg = replace(chain_config, model_kind=kind)
    stream = np.random.SeedSequence([seed, case.case_id, int(round(case.rhoS * 100)), int(kind == DCAR), 1])
    fit_rng, eval_rng = [np.random.default_rng(s) for s in stream.spawn(2)]
    res = ReplicationResult(case.case_id, case.rhoS, seed, kind, digest)
    t0 = time.perf_counter()
    try:
        draws = run_chain(train, priors, cfg, fit_rng, cache=eigendecompose_laplacian(train.graph))
        res.metrics = forecast_metrics(draws, train, future, eval_rng, M)
        res.rmse = parameter_rmse(draws, case.truth())
        res.min_ess = min(effective_sample_size(v) for v in draws.scalar_traces().values())
        res.acceptance = draws.acceptance
    except (DfsCsnError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("case %d rhoS %.2f seed %d %s failed: %s", case.case_id, case.rhoS, seed, kind, exc)
        res.failed = True
        res.error = str(exc)
    res.wall_time = time.perf_counter() - t0
    return res


def run_replication(case: SimStudyCase, seed: int, chain_config: ChainConfig, priors: Priors | None = None,
                    M: int = 100) -> tuple[ReplicationResult, ReplicationResult]:
    """Fit both models to the same simulated dataset; returns ``(dfscsn, dcar)`` results."""
    priors = Priors() if priors is None else priors
    train, future = simulate_dataset(case, seed)
    digest = dataset_hash(train)
    return tuple(_fit_and_score(kind, case, seed, train, future, chain_config, priors, M, digest)
                 for kind in (DFSCSN, DCAR))


def run_study(cases, seeds, chain_config: ChainConfig, priors: Priors | None = None, M: int = 100,
              threads: int = 1) -> list[tuple[ReplicationResult, ReplicationResult]]:
    tasks = [(c, s) for c in cases for s in seeds]

    def work(task):
        return run_replication(task[0], task[1], chain_config, priors, M)

    if threads <= 1:
        pairs = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(work, tasks))
    return sorted(pairs, key=lambda p: (p[0].case, p[0].rhoS, p[0].seed))


def paired_differences(pair) -> dict[str, float]:
    """``dfscsn - dcar`` for every metric and shared parameter RMSE."""
    fs, car = pair
    out = {}
    if fs.failed or car.failed:
        return out
    for name in METRICS:
        out[name] = fs.metrics[name] - car.metrics[name]
    for name, v in fs.rmse.items():
        if name in car.rmse:
            out[f"rmse_{name}"] = v - car.rmse[name]
    return out


def aggregate(results) -> list[dict]:
    """Median and quartiles of paired differences per ``(case, rhoS, metric)``."""
    groups: dict = {}
    for pair in results:
        key = (pair[0].case, pair[0].rhoS)
        for metric, diff in paired_differences(pair).items():
            groups.setdefault(key, {}).setdefault(metric, []).append(diff)
    rows = []
    for (case, rho), metrics in sorted(groups.items()):
        for metric in sorted(metrics):
            vals = np.asarray(metrics[metric])
            q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
            rows.append({"case": case, "rhoS": rho, "metric": metric, "median": float(med),
                         "q1": float(q1), "q3": float(q3), "n": int(vals.size)})
    return rows


def case_asdict(case: SimStudyCase) -> dict:
    return asdict(case)

"""Synthetic instances, metrics and Monte Carlo trial orchestration."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import irs
from .kron import FactorChain, KroneckerDictionary, decompose_chain, kron_vectors
from .solvers import SolverConfig, dsr, krosbl, omp, sbl, support_of

ALGORITHMS = ("cSBL", "OMP", "AM-KroSBL", "SVD-KroSBL", "dOMP", "dSBL")
DENOISE_ALGORITHM = "rank-one"
SCENARIOS = ("synthetic", "channel", "denoise-table")

CSV_SCHEMA = "kronsr/trial-records@1"
SUMMARY_SCHEMA = "kronsr/summary@1"
CSV_HEADER = ("scenario", "algorithm", "snr_db", "m", "S", "trial", "seed", "rmse", "srr", "ser",
              "denoise_before_db", "denoise_after_db", "wall_time_s", "status")

DEFAULT_GRIDS = {
    "snr": (5.0, 10.0, 15.0, 20.0, 25.0, 30.0),
    "m": (2, 4, 6, 8, 10, 12, 14),
    "S": (2, 3, 4, 5, 6),
}
DB_FLOOR = -300.0


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class SyntheticConfig:
    """Three-factor synthetic problem with ``H_1: m x 15``, ``H_2: 12 x 15``, ``H_3: 15 x 15``."""

    I: int = 3
    N: int = 15
    m: int = 12
    S: int = 3
    snr_db: float = 20.0
    n_trials: int = 100
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.I != 3:
            raise ValueError("the synthetic setup has exactly three factors")
        if self.m < 1 or self.N < 1:
            raise ValueError("m and N must be positive")
        if not 1 <= self.S <= self.N:
            raise ValueError(f"S must lie in [1, N={self.N}]")
        if self.n_trials < 1:
            raise ValueError("n_trials must be positive")

    @property
    def row_dims(self):
        return (self.m, 12, self.N)

    @property
    def measurement_count(self) -> int:
        return int(np.prod(self.row_dims))

    @property
    def coefficient_count(self) -> int:
        return self.N ** self.I


@dataclass(frozen=True)
class ChannelConfig:
    geometry: irs.SystemGeometry = field(default_factory=irs.SystemGeometry)
    K_I: int = 10
    K_P: int = 4
    snr_db: float = 30.0
    n_trials: int = 50
    seed: int = 0
    irs_amplitude: Optional[float] = None
    ser_symbols: int = 100_000
    omp_noise_margin: float = 1.1
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.K_I < 1 or self.K_P < 1 or self.n_trials < 1:
            raise ValueError("K_I, K_P and n_trials must be positive")
        if self.ser_symbols < 0:
            raise ValueError("ser_symbols must be non-negative")

    @property
    def measurement_count(self) -> int:
        return self.geometry.R * self.K_I * self.K_P

    @property
    def coefficient_count(self) -> int:
        return self.geometry.coefficient_count

    @property
    def undersampling_ratio(self) -> float:
        return self.measurement_count / self.coefficient_count


# ---------------------------------------------------------------- instances


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class SyntheticInstance:
    dictionary: KroneckerDictionary
    x_true_factors: FactorChain
    y_clean: np.ndarray
    y_noisy: np.ndarray
    sigma2: float

    @property
    def x_true(self) -> np.ndarray:
        return self.x_true_factors.assemble()

    @property
    def instance_hash(self) -> str:
        return _hash_arrays(*self.dictionary.factors, *self.x_true_factors.factors, self.y_noisy)


def gen_synthetic(cfg: SyntheticConfig, rng: np.random.Generator) -> SyntheticInstance:
    """Draw dictionaries, ``S``-sparse unit-norm factors and noise at the exact target SNR.

    Nonzero values and dictionary entries are standard normal.  Each ``x_i``
    is normalized to unit norm, and the noise vector is rescaled so that
    ``||y_clean||^2 / ||n||^2`` equals the configured SNR on this instance.
    """
    factors = [rng.standard_normal((r, cfg.N)) for r in cfg.row_dims]
    xs = []
    for _ in range(cfg.I):
        v = np.zeros(cfg.N)
        v[rng.choice(cfg.N, size=cfg.S, replace=False)] = rng.standard_normal(cfg.S)
        xs.append(v / np.linalg.norm(v))
    d = KroneckerDictionary(factors)
    chain = FactorChain(tuple(xs))
    y0 = d.matvec(kron_vectors(xs))
    n = rng.standard_normal(y0.size)
    n *= np.linalg.norm(y0) / np.linalg.norm(n) / 10.0 ** (cfg.snr_db / 20.0)
    return SyntheticInstance(d, chain, y0, y0 + n, float(n @ n / n.size))


@dataclass(frozen=True)
class ChannelInstance:
    channel: irs.ChannelRealization
    protocol: irs.PilotProtocol
    model: irs.MeasurementModel
    truth: list
    x_true: np.ndarray

    @property
    def instance_hash(self) -> str:
        return _hash_arrays(self.channel.H_MS, self.channel.H_BS, self.protocol.X,
                            self.protocol.Theta, self.model.y_tilde)


def gen_channel(cfg: ChannelConfig, rng: np.random.Generator) -> ChannelInstance:
    g = cfg.geometry
    ch = irs.draw_channel(g, rng)
    pr = irs.make_protocol(g, cfg.K_I, cfg.K_P, rng=rng, irs_amplitude=cfg.irs_amplitude)
    s2 = irs.noise_variance_for_snr(ch, pr, cfg.snr_db)
    model = irs.build_measurement_model(pr, g, irs.received_pilots(ch, pr, s2, rng), s2)
    truth = [irs.cascaded_channel(ch, pr.Theta[:, k]) for k in range(pr.K_I)]
    return ChannelInstance(ch, pr, model, truth, irs.ground_truth_factors(ch).vector())


# ---------------------------------------------------------------- metrics


def rmse(x_hat, x_true) -> float:
    """Relative error ``||x_hat - x_true|| / ||x_true||``."""
    x_hat = np.ravel(np.asarray(x_hat))
    x_true = np.ravel(np.asarray(x_true))
    if x_hat.shape != x_true.shape:
        raise ValueError(f"length mismatch: {x_hat.size} vs {x_true.size}")
    den = np.linalg.norm(x_true)
    if den == 0:
        raise ValueError("ground truth is zero")
    return float(np.linalg.norm(x_hat - x_true) / den)


def srr(support_hat: Iterable[int], support_true: Iterable[int]) -> float:
    """Jaccard index of two supports; two empty supports score 1."""
    a = {int(i) for i in support_hat}
    b = {int(i) for i in support_true}
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def channel_rmse(true_channels, est_channels) -> float:
    """Mean over configurations of the relative Frobenius error."""
    if len(true_channels) != len(est_channels) or not true_channels:
        raise ValueError("need matching, non-empty channel lists")
    errs = []
    for H, Hh in zip(true_channels, est_channels):
        den = np.linalg.norm(H)
        if den == 0:
            raise ValueError("true channel is zero")
        errs.append(np.linalg.norm(np.asarray(Hh) - H) / den)
    return float(np.mean(errs))


def _db(x: float) -> float:
    return DB_FLOOR if x <= 0 else max(DB_FLOOR, 20.0 * math.log10(x))


def denoise_gain(y_noisy, y_reassembled, y_clean) -> tuple[float, float]:
    """Residual noise level in dB before and after the Kronecker reassembly."""
    y_noisy, y_reassembled, y_clean = (np.ravel(np.asarray(v)) for v in (y_noisy, y_reassembled, y_clean))
    if not y_noisy.shape == y_reassembled.shape == y_clean.shape:
        raise ValueError("vectors must have matching lengths")
    return _db(np.linalg.norm(y_noisy - y_clean)), _db(np.linalg.norm(y_reassembled - y_clean))


def reassemble(y, dims) -> np.ndarray:
    """Project ``y`` onto a Kronecker product via the rank-one chain."""
    return decompose_chain(y, dims).assemble()


# ---------------------------------------------------------------- records


@dataclass
class TrialRecord:
    scenario: str
    algorithm: str
    snr_db: float
    m: Optional[int]
    S: Optional[int]
    trial: int
    seed: int
    rmse: Optional[float] = None
    srr: Optional[float] = None
    ser: Optional[float] = None
    denoise_before_db: Optional[float] = None
    denoise_after_db: Optional[float] = None
    wall_time_s: Optional[float] = None
    status: str = "ok"
    instance_hash: str = ""
    error: str = ""
    config: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def csv_row(self) -> list:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)
        return [fmt(getattr(self, k)) for k in CSV_HEADER]


def _solve(algorithm: str, d: KroneckerDictionary, dense, y, sigma2: float, base: SolverConfig,
           sparsity: Optional[int], margin: Optional[float]):
    cfg = replace(base, noise_variance=sigma2)
    if algorithm == "cSBL":
        # same iterates as the dense form; the Kronecker path only changes the cost
        return sbl(d, y, cfg)
    if algorithm == "OMP":
        if sparsity is not None:
            c = replace(cfg, omp_sparsity=sparsity ** len(d))
        else:
            c = replace(cfg, omp_noise_margin=margin)
        return omp(dense, y, c)
    if algorithm == "AM-KroSBL":
        return krosbl(d, y, cfg, mode="am")
    if algorithm == "SVD-KroSBL":
        return krosbl(d, y, cfg, mode="svd")
    if algorithm == "dOMP":
        if sparsity is not None:
            c = replace(cfg, omp_sparsity=sparsity)
        else:
            c = replace(cfg, omp_noise_margin=margin)
        return dsr(d, y, "omp", c)
    if algorithm == "dSBL":
        return dsr(d, y, "sbl", cfg)
    raise ValueError(f"unknown algorithm {algorithm!r}; choose from {list(ALGORITHMS)}")


def check_algorithms(algorithms: Sequence[str]) -> list:
    algorithms = list(algorithms)
    if not algorithms:
        raise ValueError("no algorithms selected")
    bad = [a for a in algorithms if a not in ALGORITHMS]
    if bad:
        raise ValueError(f"unknown algorithm {bad[0]!r}; choose from {list(ALGORITHMS)}")
    return algorithms


def _snapshot(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))


def run_synthetic_trial(cfg: SyntheticConfig, trial: int, algorithms: Sequence[str]) -> list:
    """All algorithms on the instance drawn from seed ``cfg.seed + trial``."""
    seed = cfg.seed + trial
    inst = gen_synthetic(cfg, np.random.default_rng(seed))
    x_true = inst.x_true
    true_support = np.flatnonzero(x_true)
    dense = inst.dictionary.to_dense() if "OMP" in algorithms else None
    snap = _snapshot(cfg)
    out = []
    for alg in algorithms:
        rec = TrialRecord("synthetic", alg, cfg.snr_db, cfg.m, cfg.S, trial, seed,
                          instance_hash=inst.instance_hash, config=snap)
        try:
            t0 = time.perf_counter()
            est = _solve(alg, inst.dictionary, dense, inst.y_noisy, inst.sigma2, cfg.solver, cfg.S, None)
            rec.wall_time_s = time.perf_counter() - t0
            rec.rmse = rmse(est.x_full, x_true)
            rec.srr = srr(est.support, true_support)
        except Exception as exc:  # recorded, never dropped
            rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        out.append(rec)
    return out


def run_channel_trial(cfg: ChannelConfig, trial: int, algorithms: Sequence[str]) -> list:
    seed = cfg.seed + trial
    inst = gen_channel(cfg, np.random.default_rng(seed))
    d = inst.model.dictionary
    dense = d.to_dense() if "OMP" in algorithms else None
    true_support = np.flatnonzero(inst.x_true)
    snap = _snapshot(cfg)
    out = []
    for alg in algorithms:
        rec = TrialRecord("channel", alg, cfg.snr_db, None, None, trial, seed,
                          instance_hash=inst.instance_hash, config=snap)
        try:
            t0 = time.perf_counter()
            est = _solve(alg, d, dense, inst.model.y_tilde, inst.model.sigma2, cfg.solver, None,
                         cfg.omp_noise_margin)
            rec.wall_time_s = time.perf_counter() - t0
            H_hat = irs.reconstruct_cascaded(est, cfg.geometry, inst.protocol)
            rec.rmse = channel_rmse(inst.truth, H_hat)
            rec.srr = srr(est.support, true_support)
            if cfg.ser_symbols:
                ser_rng = np.random.default_rng([seed, ALGORITHMS.index(alg)])
                diag = {}
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    rec.ser = irs.simulate_ser(inst.truth, H_hat, cfg.snr_db, cfg.ser_symbols, ser_rng, diag)
        except Exception as exc:
            rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        out.append(rec)
    return out


def run_denoise_trial(cfg: SyntheticConfig, trial: int) -> list:
    seed = cfg.seed + trial
    inst = gen_synthetic(cfg, np.random.default_rng(seed))
    rec = TrialRecord("denoise-table", DENOISE_ALGORITHM, cfg.snr_db, cfg.m, cfg.S, trial, seed,
                      instance_hash=inst.instance_hash, config=_snapshot(cfg))
    try:
        t0 = time.perf_counter()
        y_hat = reassemble(inst.y_noisy, inst.dictionary.row_dims)
        rec.wall_time_s = time.perf_counter() - t0
        rec.denoise_before_db, rec.denoise_after_db = denoise_gain(inst.y_noisy, y_hat, inst.y_clean)
    except Exception as exc:
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
    return [rec]


def _trial_job(args):
    scenario, cfg, trial, algorithms = args
    if scenario == "synthetic":
        return run_synthetic_trial(cfg, trial, algorithms)
    if scenario == "channel":
        return run_channel_trial(cfg, trial, algorithms)
    return run_denoise_trial(cfg, trial)


_SWEEP_FIELDS = {"snr": "snr_db", "m": "m", "S": "S"}


def run_sweep(scenario: str, sweep_variable: str, algorithms: Sequence[str], cfg,
              values: Optional[Sequence] = None, workers: int = 1,
              progress: Optional[Callable[[int, int], None]] = None) -> list:
    """Run ``cfg.n_trials`` trials at every grid point of ``sweep_variable``.

    Trial ``t`` always uses seed ``cfg.seed + t``, so every algorithm sees the
    same instance at a given grid point.  Records come back sorted by grid
    point, seed and algorithm order.

    Parameters
    ----------
    scenario : {"synthetic", "channel", "denoise-table"}
    sweep_variable : {"snr", "m", "S"}
        Only ``"snr"`` applies to the channel and denoise scenarios.
    algorithms : sequence of str
        Ignored by ``"denoise-table"``.
    cfg : SyntheticConfig or ChannelConfig
    values : sequence, optional
        Grid values; defaults to :data:`DEFAULT_GRIDS`.
    workers : int
        Trials run on a process pool when greater than one.  Each solver call
        stays single-threaded within its process.
    progress : callable, optional
        Called as ``progress(done, total)`` after each trial.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {list(SCENARIOS)}")
    if sweep_variable not in _SWEEP_FIELDS:
        raise ValueError(f"unknown sweep variable {sweep_variable!r}")
    if scenario != "synthetic" and sweep_variable != "snr":
        raise ValueError(f"scenario {scenario!r} only sweeps snr")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    expected = ChannelConfig if scenario == "channel" else SyntheticConfig
    if not isinstance(cfg, expected):
        raise TypeError(f"scenario {scenario!r} needs a {expected.__name__}")
    algorithms = [] if scenario == "denoise-table" else check_algorithms(algorithms)
    grid = list(DEFAULT_GRIDS[sweep_variable] if values is None else values)
    if not grid:
        raise ValueError("empty sweep grid")
    fname = _SWEEP_FIELDS[sweep_variable]
    cast = float if fname == "snr_db" else int
    jobs = [(scenario, replace(cfg, **{fname: cast(v)}), t, algorithms)
            for v in grid for t in range(cfg.n_trials)]
    results = []
    if workers == 1:
        for i, job in enumerate(jobs, 1):
            results.append(_trial_job(job))
            if progress:
                progress(i, len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in enumerate(pool.map(_trial_job, jobs), 1):
                results.append(res)
                if progress:
                    progress(i, len(jobs))
    return [r for block in results for r in block]


# ---------------------------------------------------------------- aggregation

METRICS = ("rmse", "srr", "ser", "denoise_before_db", "denoise_after_db")
GROUP_KEYS = ("scenario", "algorithm", "snr_db", "m", "S")


def aggregate(records: Sequence[TrialRecord]) -> list:
    """Mean and standard error of each metric per (algorithm, grid point), plus median wall time.

    Failed trials are counted in ``n_failed`` and left out of the statistics.
    """
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in GROUP_KEYS), []).append(r)
    rows = []
    for key, recs in groups.items():
        ok = [r for r in recs if r.ok]
        row = dict(zip(GROUP_KEYS, key))
        row["n"] = len(ok)
        row["n_failed"] = len(recs) - len(ok)
        for metric in METRICS:
            vals = np.array([getattr(r, metric) for r in ok if getattr(r, metric) is not None], dtype=float)
            if vals.size:
                row[f"{metric}_mean"] = float(vals.mean())
                row[f"{metric}_stderr"] = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
            else:
                row[f"{metric}_mean"] = row[f"{metric}_stderr"] = None
        times = [r.wall_time_s for r in ok if r.wall_time_s is not None]
        row["wall_time_median_s"] = float(np.median(times)) if times else None
        rows.append(row)
    return rows


# ---------------------------------------------------------------- output


def write_csv(records: Sequence[TrialRecord], path, config_hash: str = "") -> None:
    """One row per record under :data:`CSV_HEADER`, after a ``#`` provenance line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={CSV_SCHEMA} config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.csv_row())


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_summary(rows: list, path, config_hash: str = "", extra: Optional[dict] = None) -> None:
    payload = {"schema": SUMMARY_SCHEMA, "config_hash": config_hash, "rows": rows}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")

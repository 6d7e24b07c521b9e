"""
Seeded Monte Carlo harness: synthesizes truth and measurement streams, runs
every filter variant on the same streams (common random numbers) and reduces
per-step position errors into RMSE summaries.
"""
import asyncio
import dataclasses
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import partial

import numpy as np
import numpy.typing as npt
from loguru import logger

from btl import FilterState, primary_step, run_primary, run_source
from config import DIVERGENCE_LIMIT_M, MAX_DIVERGENCE_FRACTION, RUNS_PER_TASK
from core import GaussianBelief, as_cov, as_vector, matrix_sqrt_psd
from errors import BtlTrackError
from fusion import MvfNoise, mvf_step
from models import (
    CT_STATE_DIM,
    BEARING,
    CtModelConfig,
    SensorModel,
    coordinated_turn_process,
    ct_process_cov,
    ct_transition,
    meas_cov,
    range_bearing,
    range_bearing_sensor,
    wrap_angle,
)
from rules import RuleSpec, create_rule

POSITION = (0, 2)


class FilterMode(str, Enum):
    ISOLATED = "isolated"
    BTLF = "btlf"
    MVF = "mvf"


class InitMode(str, Enum):
    EXACT = "exact"  # x_hat_0 = x0
    SAMPLED = "sampled"  # x_hat_0 ~ N(x0, P0)


class Stream(IntEnum):
    """Substream ids; a replica's stream is keyed by (run index, stream id) under the root seed."""

    TRUTH = 0
    SOURCE_MEAS = 1
    PRIMARY_MEAS = 2
    INIT = 3


@dataclass(frozen=True)
class FilterVariant:
    rule: RuleSpec
    mode: FilterMode

    def __post_init__(self):
        object.__setattr__(self, "mode", FilterMode(self.mode))

    @property
    def name(self) -> str:
        return f"{self.rule.label}/{self.mode.value}"


@dataclass(frozen=True)
class ExperimentConfig:
    model: CtModelConfig
    x0: tuple[float, ...]
    p0_diag: tuple[float, ...]
    k_steps: int
    mc_runs: int
    seed: int
    source_sensor: SensorModel
    primary_sensor: SensorModel
    variants: tuple[FilterVariant, ...]
    init_mode: InitMode = InitMode.SAMPLED
    mvf_noise: MvfNoise = MvfNoise.FUSED
    max_divergence_fraction: float = MAX_DIVERGENCE_FRACTION

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in as_vector(self.x0, CT_STATE_DIM, "x0")))
        object.__setattr__(self, "p0_diag", tuple(float(v) for v in as_vector(self.p0_diag, CT_STATE_DIM, "p0_diag")))
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "init_mode", InitMode(self.init_mode))
        object.__setattr__(self, "mvf_noise", MvfNoise(self.mvf_noise))
        if min(self.p0_diag) < 0:
            raise ValueError(f"p0_diag entries must be nonnegative, got {self.p0_diag}.")
        if self.k_steps < 1:
            raise ValueError(f"k_steps must be at least 1, got {self.k_steps}.")
        if self.mc_runs < 1:
            raise ValueError(f"mc runs must be at least 1, got {self.mc_runs}.")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}.")
        if not self.variants:
            raise ValueError("At least one filter variant is required.")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError(f"Filter variants must be distinct, got {names}.")
        if not 0.0 <= self.max_divergence_fraction <= 1.0:
            raise ValueError(f"max_divergence_fraction must lie in [0, 1], got {self.max_divergence_fraction}.")

    @property
    def P0(self) -> npt.NDArray[np.float64]:
        return np.diag(self.p0_diag)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        """Plain JSON-able echo of the configuration (enums by value)."""

        def plain(value):
            if isinstance(value, Enum):
                return value.value
            if dataclasses.is_dataclass(value):
                return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
            if isinstance(value, (tuple, list)):
                return [plain(v) for v in value]
            return value

        return plain(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class VariantSummary:
    variant: FilterVariant
    rmse_curve: npt.NDArray[np.float64]  # k = 1..K
    time_avg_rmse: float
    pooled_rmse: float
    diverged_runs: int
    repairs: int
    runtime: float = 0.0


@dataclass
class McReport:
    config_hash: str
    seed: int
    mc_runs: int
    k_steps: int
    streams_digest: str
    summaries: dict[str, VariantSummary] = field(default_factory=dict)
    runtime: float = 0.0

    def divergence_fraction(self) -> float:
        return max(s.diverged_runs for s in self.summaries.values()) / self.mc_runs


@dataclass
class ReplicaResult:
    run_index: int
    digest: str
    sq_errors: dict[str, npt.NDArray[np.float64] | None]  # None when the replica diverged
    repairs: dict[str, int]
    runtimes: dict[str, float]


def substream(root_seed: int, run_index: int, stream: Stream) -> np.random.Generator:
    """Independent generator per (run, stream); adding variants or streams never shifts existing ones."""
    return np.random.default_rng(np.random.SeedSequence(entropy=root_seed, spawn_key=(run_index, int(stream))))


def gen_truth(cfg: ExperimentConfig, rng: np.random.Generator) -> npt.NDArray[np.float64]:
    """Rows x_0..x_K; x_0 is cfg.x0 exactly. Q_v is singular, so noise goes through its PSD square root."""
    noise_sqrt = matrix_sqrt_psd(ct_process_cov(cfg.model))
    noise = rng.standard_normal((cfg.k_steps, CT_STATE_DIM)) @ noise_sqrt.T
    truth = np.empty((cfg.k_steps + 1, CT_STATE_DIM))
    truth[0] = cfg.x0
    for k in range(1, cfg.k_steps + 1):
        truth[k] = ct_transition(truth[k - 1], cfg.model) + noise[k - 1]
    return truth


def gen_measurements(truth: npt.NDArray[np.float64], sensor: SensorModel, rng: np.random.Generator) -> npt.NDArray[np.float64]:
    """z_k = h(x_k) + noise for k = 1..K (row 0 of truth is not measured); bearings wrapped."""
    states = truth[1:]
    noise = rng.standard_normal((states.shape[0], 2)) @ np.sqrt(meas_cov(sensor))
    z = range_bearing(states) + noise
    z[:, BEARING] = wrap_angle(z[:, BEARING])
    return z


def streams_digest(*streams: npt.NDArray[np.float64]) -> str:
    digest = hashlib.blake2b(digest_size=16)
    for stream in streams:
        digest.update(np.ascontiguousarray(stream, dtype=np.float64).tobytes())
    return digest.hexdigest()


def _initial_mean(cfg: ExperimentConfig, run_index: int) -> npt.NDArray[np.float64]:
    x0 = np.asarray(cfg.x0)
    if cfg.init_mode is InitMode.EXACT:
        return x0
    rng = substream(cfg.seed, run_index, Stream.INIT)
    return x0 + np.sqrt(np.asarray(cfg.p0_diag)) * rng.standard_normal(CT_STATE_DIM)


def _position_sq_errors(beliefs: list[GaussianBelief], truth: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    estimates = np.array([b.mean for b in beliefs])[:, POSITION]
    return np.sum((estimates - truth[1:, POSITION]) ** 2, axis=1)


def run_replica(cfg: ExperimentConfig, run_index: int) -> ReplicaResult:
    """One truth, one source stream and one primary stream, shared by every variant."""
    truth = gen_truth(cfg, substream(cfg.seed, run_index, Stream.TRUTH))
    z_star = gen_measurements(truth, cfg.source_sensor, substream(cfg.seed, run_index, Stream.SOURCE_MEAS))
    z = gen_measurements(truth, cfg.primary_sensor, substream(cfg.seed, run_index, Stream.PRIMARY_MEAS))
    digest = streams_digest(truth, z_star, z)
    logger.debug(f"Replica {run_index}: streams digest {digest}")

    prior = GaussianBelief(_initial_mean(cfg, run_index), as_cov(cfg.P0, CT_STATE_DIM, "P0"))
    process = coordinated_turn_process(cfg.model)
    source_meas = range_bearing_sensor(cfg.source_sensor)
    primary_meas = range_bearing_sensor(cfg.primary_sensor)
    steps = {
        FilterMode.BTLF: primary_step,
        FilterMode.MVF: partial(mvf_step, noise=cfg.mvf_noise),
    }

    # Source runs are shared by every transfer variant using the same rule.
    source_runs: dict[RuleSpec, tuple[int, list] | BtlTrackError] = {}
    result = ReplicaResult(run_index, digest, {}, {}, {})
    for variant in cfg.variants:
        started = time.perf_counter()
        repairs = 0
        try:
            rule = create_rule(variant.rule)
            state = FilterState(prior, rule, process, primary_meas)
            if variant.mode is FilterMode.ISOLATED:
                beliefs = run_primary(state, z, packets=())
            else:
                if variant.rule not in source_runs:
                    try:
                        source_beliefs, packets = run_source(FilterState(prior, rule, process, source_meas), z_star)
                        source_repairs = source_beliefs[-1].repairs + sum(p.repairs for p in packets)
                        source_runs[variant.rule] = (source_repairs, packets)
                    except BtlTrackError as e:
                        source_runs[variant.rule] = e
                cached = source_runs[variant.rule]
                if isinstance(cached, BtlTrackError):
                    raise cached
                repairs, packets = cached
                beliefs = run_primary(state, z, packets, steps[variant.mode])
            repairs += beliefs[-1].repairs
            sq_errors = _position_sq_errors(beliefs, truth)
            if not np.all(np.isfinite(sq_errors)) or sq_errors.max() > DIVERGENCE_LIMIT_M**2:
                logger.debug(f"Replica {run_index}, {variant.name}: position error above {DIVERGENCE_LIMIT_M:g} m")
                sq_errors = None
        except BtlTrackError as e:
            logger.debug(f"Replica {run_index}, {variant.name} failed: {type(e).__name__}: {e}")
            sq_errors = None
        result.sq_errors[variant.name] = sq_errors
        result.repairs[variant.name] = repairs
        result.runtimes[variant.name] = time.perf_counter() - started
    return result


def run_replicas(cfg: ExperimentConfig, start: int, stop: int) -> list[ReplicaResult]:
    return [run_replica(cfg, r) for r in range(start, stop)]


async def _run_parallel(cfg: ExperimentConfig, threads: int) -> list[ReplicaResult]:
    """Fans chunks of replicas out to a process pool; gather keeps run-index order."""
    semaphore = asyncio.Semaphore(threads)
    loop = asyncio.get_running_loop()
    chunks = [(s, min(s + RUNS_PER_TASK, cfg.mc_runs)) for s in range(0, cfg.mc_runs, RUNS_PER_TASK)]

    with ProcessPoolExecutor(max_workers=threads) as pool:

        async def run_chunk(start: int, stop: int) -> list[ReplicaResult]:
            async with semaphore:
                logger.debug(f"Dispatching replicas {start}..{stop - 1}")
                return await loop.run_in_executor(pool, run_replicas, cfg, start, stop)

        chunk_results = await asyncio.gather(*(run_chunk(start, stop) for start, stop in chunks))
    return [r for chunk in chunk_results for r in chunk]


def _summarize(cfg: ExperimentConfig, results: list[ReplicaResult]) -> dict[str, VariantSummary]:
    summaries = {}
    for variant in cfg.variants:
        name = variant.name
        total = np.zeros(cfg.k_steps)
        ok_runs = 0
        for r in results:
            if r.sq_errors[name] is not None:
                total += r.sq_errors[name]
                ok_runs += 1
        diverged = len(results) - ok_runs
        if ok_runs:
            curve = np.sqrt(total / ok_runs)
            time_avg = float(np.mean(curve))
            pooled = float(np.sqrt(total.sum() / (ok_runs * cfg.k_steps)))
        else:
            curve = np.full(cfg.k_steps, np.nan)
            time_avg = pooled = float("nan")
        repairs = sum(r.repairs[name] for r in results)
        runtime = sum(r.runtimes[name] for r in results)
        summaries[name] = VariantSummary(variant, curve, time_avg, pooled, diverged, repairs, runtime)

        if repairs:
            logger.warning(f"{name}: {repairs} covariance repairs over {len(results)} replicas")
        if diverged:
            logger.warning(f"{name}: {diverged}/{len(results)} replicas diverged and are excluded from the RMSE")
    return summaries


def run_mc(cfg: ExperimentConfig, threads: int = 1) -> McReport:
    """
    Runs cfg.mc_runs replicas and reduces them in run-index order, so the report
    does not depend on the number of workers.
    """
    if cfg.source_sensor.sigma_r != cfg.primary_sensor.sigma_r or cfg.source_sensor.sigma_zeta != cfg.primary_sensor.sigma_zeta:
        logger.warning("Source and primary sensors use different base covariances; only intensities usually differ.")

    threads = max(1, min(threads, -(-cfg.mc_runs // RUNS_PER_TASK)))
    logger.info(
        f"Running {cfg.mc_runs} replicas x {len(cfg.variants)} variants, K={cfg.k_steps}, "
        f"seed={cfg.seed}, workers={threads}"
    )
    started = time.perf_counter()
    if threads == 1:
        results = run_replicas(cfg, 0, cfg.mc_runs)
    else:
        results = asyncio.run(_run_parallel(cfg, threads))

    digest = hashlib.blake2b(digest_size=16)
    for r in results:
        digest.update(r.digest.encode("ascii"))
    report = McReport(
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        mc_runs=cfg.mc_runs,
        k_steps=cfg.k_steps,
        streams_digest=digest.hexdigest(),
        summaries=_summarize(cfg, results),
        runtime=time.perf_counter() - started,
    )
    logger.success(f"Monte Carlo finished in {report.runtime:.1f}s (streams digest {report.streams_digest})")
    return report

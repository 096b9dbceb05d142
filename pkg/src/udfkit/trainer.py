"""Fitting one field to one point cloud."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
import torch

from . import diffengine as de
from .errors import ConfigError, DegenerateInputError, NumericFailure
from .field import FieldCheckpoint, UdfField, evaluate_with_gradient, init_field, make_checkpoint
from .geometry import PointCloud
from .losses import LossOptions, LossWeights, loss_total
from .sampler import sample_queries

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 40000
    step_size: float = 1e-3
    optimizer: str = "adam"            # "adam" | "sgd"
    lr_schedule: str = "constant"      # "constant" | "cosine"
    lr_final_ratio: float = 0.01       # cosine: final step as a fraction of step_size
    alpha1: float = 0.002
    alpha2: float = 0.1
    alpha3: float = 0.01
    lam: float = 10.0
    adaptive_weight: bool = True
    detach_gamma: bool = True
    proj_full_chain: bool = False
    squared_cd: bool = False
    queries_per_point: int = 20
    batch_size: int = 5000
    dist_subsample: int = 5000
    resample_every: int = 1000
    knn_k: int = 50
    uniform_fraction: float = 0.1
    seed: int = 0
    precision: str = "double"          # "double" | "single"
    width: int = 256
    depth: int = 8
    skip_at: int = 4                   # -1 disables the skip connection
    activation: str = "relu"
    pe_freqs: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1", key="iterations")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0", key="step_size")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", key="optimizer")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}", key="lr_schedule")
        if not 0 <= self.lr_final_ratio <= 1:
            raise ConfigError("lr_final_ratio must lie in [0, 1]", key="lr_final_ratio")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"unknown precision {self.precision!r}", key="precision")
        for key in ("queries_per_point", "batch_size", "dist_subsample", "resample_every", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        try:
            self.weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2, self.alpha3, self.lam)

    @property
    def options(self) -> LossOptions:
        return LossOptions(adaptive=self.adaptive_weight, detach_gamma=self.detach_gamma,
                           proj_full_chain=self.proj_full_chain, squared_cd=self.squared_cd)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}", key=key) from None


_FIELD_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type]
                for f in dataclasses.fields(TrainConfig)}


def config_from_mapping(values: dict, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Build a config from string (or typed) values; unknown keys raise ConfigError."""
    base = base or TrainConfig()
    kwargs = base.to_dict()
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        kind = _FIELD_TYPES[key]
        kwargs[key] = _coerce(key, raw, kind) if isinstance(raw, str) else kind(raw)
    return TrainConfig(**kwargs)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    with open(path) as fh:
        values = parse_config_text(fh.read())
    values.update(overrides or {})
    return config_from_mapping(values)


TRACE_COLUMNS = ("iteration", "cd", "proj", "dist", "orth", "total",
                 "degenerate", "cd_skipped", "proj_skipped", "orth_skipped")


@dataclass
class TrainTrace:
    rows: list = dc_field(default_factory=list)         # thinned breakdowns
    totals: list = dc_field(default_factory=list)       # every iteration
    skipped: dict = dc_field(default_factory=dict)      # cumulative counters
    log_every: int = 100
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None

    def record(self, it: int, bd):
        self.totals.append(bd.total)
        for k, v in bd.skipped.items():
            self.skipped[k] = self.skipped.get(k, 0) + v
        if it % self.log_every == 0:
            self.rows.append({
                "iteration": it, "cd": bd.cd, "proj": bd.proj, "dist": bd.dist,
                "orth": bd.orth, "total": bd.total,
                **{k: bd.skipped.get(k, 0) for k in TRACE_COLUMNS[6:]},
            })

    def write(self, path, delimiter: str = "\t"):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, delimiter=delimiter)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def smoothed_total(self, at: int, window: int = 200) -> float:
        t = np.asarray(self.totals)
        lo = max(0, at - window // 2)
        return float(t[lo:lo + window].mean())


class TrainingAborted(NumericFailure):
    """Non-finite loss; carries the last finite state and the trace so far."""

    def __init__(self, message, last_good: FieldCheckpoint, trace: TrainTrace, iteration: int):
        super().__init__(message, node="loss")
        self.last_good = last_good
        self.trace = trace
        self.iteration = iteration


def build_field(cfg: TrainConfig) -> UdfField:
    return init_field(cfg.seed, width=cfg.width, depth=cfg.depth,
                      skip_at=None if cfg.skip_at < 0 else (cfg.skip_at if cfg.skip_at < cfg.depth else None),
                      activation=cfg.activation, pe_freqs=cfg.pe_freqs, precision=cfg.precision)


def fit(cloud: PointCloud, cfg: TrainConfig, field: Optional[UdfField] = None,
        callback: Optional[Callable[[int, object], None]] = None):
    """Minimise the combined loss for ``cfg.iterations`` steps.

    Deterministic for a given ``(cloud, cfg)`` in single-threaded mode.
    Returns ``(field, trace)``.
    """
    if not cloud.is_normalized():
        raise DegenerateInputError("fit expects a cloud inside [-0.5, 0.5]^3; normalize it first")
    start = time.perf_counter()
    net = field if field is not None else build_field(cfg)
    params = list(net.parameters())
    names = net.param_names()
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.step_size)
    else:
        opt = torch.optim.SGD(params, lr=cfg.step_size)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=cfg.iterations, eta_min=cfg.step_size * cfg.lr_final_ratio)
    rng = np.random.default_rng(cfg.seed)
    n = len(cloud)
    trace = TrainTrace(log_every=cfg.log_every)
    weights, options = cfg.weights, cfg.options
    pool = None
    good = net.get_flat()      # parameters whose loss was last seen finite
    meta = {"iterations": cfg.iterations, "seed": cfg.seed, "weights": dataclasses.asdict(weights)}
    for it in range(cfg.iterations):
        if it % cfg.resample_every == 0:
            pool = sample_queries(cloud, cfg.queries_per_point, seed=int(rng.integers(2**31)),
                                  k=cfg.knn_k, uniform_fraction=cfg.uniform_fraction,
                                  sigma=None if pool is None else pool.sigma)
        m = len(pool)
        pick = rng.choice(m, size=min(cfg.batch_size, m), replace=False)
        batch = pool.subset(np.sort(pick))
        targets = cloud.points[np.unique(batch.target_index())]
        if cfg.dist_subsample < n:
            dist_pts = cloud.points[np.sort(rng.choice(n, cfg.dist_subsample, replace=False))]
        else:
            dist_pts = cloud.points
        try:
            total, bd = loss_total(net, batch, cloud, weights, targets=targets,
                                   dist_points=dist_pts, options=options)
            opt.zero_grad(set_to_none=True)
            de.backward(total, params, names)
        except NumericFailure as exc:
            net.set_flat(good)
            trace.wall_clock = time.perf_counter() - start
            ckpt = make_checkpoint(net, cloud.center, cloud.scale, dict(meta, aborted_at=it))
            raise TrainingAborted(f"iteration {it}: {exc}", ckpt, trace, it) from exc
        good = net.get_flat()
        opt.step()
        if sched is not None:
            sched.step()
        trace.record(it, bd)
        if callback is not None:
            callback(it, bd)
        if it % max(cfg.log_every * 10, 1) == 0:
            log.info("it %d total %.6g cd %.6g proj %.4g dist %.4g orth %.4g",
                     it, bd.total, bd.cd, bd.proj, bd.dist, bd.orth)
    trace.wall_clock = time.perf_counter() - start
    return net, trace


def checkpoint_for(net: UdfField, cloud: PointCloud, cfg: TrainConfig) -> FieldCheckpoint:
    meta = {"iterations": cfg.iterations, "seed": cfg.seed,
            "weights": dataclasses.asdict(cfg.weights), "config": cfg.to_dict()}
    return make_checkpoint(net, cloud.center, cloud.scale, meta)


def gradient_parallelism(field, cloud: PointCloud, near: float = 0.02, cos_min: float = 0.95,
                         per_point: int = 4, seed: int = 0):
    """Fraction of near-surface queries whose gradient is (anti)parallel to the
    gradient at their pulled location: ``(fraction, |cos| values)``."""
    batch = sample_queries(cloud, per_point, seed=seed, uniform_fraction=0.0)
    f, g = evaluate_with_gradient(field, batch.queries)
    gn = np.linalg.norm(g, axis=1)
    keep = (f < near) & (gn >= 1e-12)
    if not keep.any():
        return float("nan"), np.zeros(0)
    q = batch.queries[keep]
    q_hat = q - (f[keep] / gn[keep])[:, None] * g[keep]
    _, g2 = evaluate_with_gradient(field, q_hat)
    n2 = np.linalg.norm(g2, axis=1)
    ok = n2 >= 1e-12
    cos = np.zeros(len(q))
    cos[ok] = np.abs(np.sum(g[keep][ok] * g2[ok], axis=1)) / (gn[keep][ok] * n2[ok])
    return float(np.mean(cos > cos_min)), cos


def training_diagnostics(trace: TrainTrace, field=None, cloud: Optional[PointCloud] = None) -> dict:
    """Loss curves, skip counters and (given a field and cloud) the gradient-parallelism histogram."""
    curves = {k: [row[k] for row in trace.rows] for k in ("iteration", "cd", "proj", "dist", "orth", "total")}
    report = {"curves": curves, "skipped": dict(trace.skipped), "rows": len(trace.rows),
              "iterations": len(trace.totals), "wall_clock": trace.wall_clock}
    if field is not None and cloud is not None:
        frac, cos = gradient_parallelism(field, cloud)
        hist, edges = np.histogram(cos, bins=10, range=(0.0, 1.0))
        report["parallel_fraction"] = frac
        report["parallel_histogram"] = {"counts": hist.tolist(), "edges": edges.tolist()}
    return report

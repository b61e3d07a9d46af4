"""Iterative mixture reweighting driver plus baseline strategies.

Strategy "ideal" runs the influence-guided loop: train from scratch on the
current mixture, measure reference loss, compute the per-domain sensitivity
alpha, rescale it to beta with the cap m, resample, repeat. Baselines are
"joint" (train once on the union), "random" (one uniform random beta in
[-m, m], then train) and "specific" (train on one named domain).

Each iteration retrains from the same seeded initialization, so a trained
model is a pure function of (train seed, current mixture). Per-purpose
random streams are derived from the root seed and the iteration number.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import influence as infl
from . import model as mo
from .errors import ConfigError, InvalidInputError, NumericalFailureError
from .linalg import seeded_rng
from .mixture import MixtureState, apply_beta

STRATEGIES = ("ideal", "joint", "random", "specific")

# purpose codes for deriving per-iteration random streams from the root seed
_PURPOSE_INFLUENCE = 1
_PURPOSE_RESAMPLE = 2
_PURPOSE_RANDOM_BETA = 3


@dataclass(frozen=True)
class ModelSettings:
    """Model family used by runs: hidden dims, activation, l2, bias mode."""

    hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    l2_reg: float = 1e-2
    bias: str = "fold"

    def build_spec(self, n_features: int, n_classes: int) -> mo.ModelSpec:
        if self.hidden:
            return mo.mlp_spec(n_features, self.hidden, n_classes,
                               activation=self.activation, l2_reg=self.l2_reg,
                               bias=self.bias)
        return mo.logistic_spec(n_features, n_classes, l2_reg=self.l2_reg,
                                bias=self.bias)


@dataclass(frozen=True)
class RunConfig:
    m: float = 0.15
    sigma: float = 0.5
    method: str = "kfac"
    rho: float = 1.0
    T: int = 3
    stop_tol: float = 1e-3
    train: mo.TrainConfig = field(default_factory=mo.TrainConfig)
    seed: int = 0
    strategy: str = "ideal"
    domain: str | None = None  # target for strategy="specific"
    model: ModelSettings = field(default_factory=ModelSettings)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not (0.0 < self.sigma <= 1.0):
            raise ConfigError("sigma must be in (0, 1]")
        if not self.m > 0:
            raise ConfigError("m must be positive")
        if self.stop_tol < 0:
            raise ConfigError("stop_tol must be >= 0")
        if self.method not in infl.METHODS:
            raise ConfigError(f"method must be one of {infl.METHODS}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if not (0.0 < self.rho <= 1.0):
            raise ConfigError("rho must be in (0, 1]")
        if self.strategy == "specific" and not self.domain:
            raise ConfigError("strategy 'specific' needs a 'domain'")


_CONFIG_SCALARS = {"m": float, "sigma": float, "method": str, "rho": float,
                   "T": int, "stop_tol": float, "seed": int, "strategy": str,
                   "domain": (str, type(None))}
_TRAIN_SCALARS = {"learning_rate": float, "max_iters": int, "tol": float,
                  "seed": int}
_MODEL_SCALARS = {"hidden": list, "activation": str, "l2_reg": float,
                  "bias": str}


def _check_section(raw: dict, schema: dict, section: str) -> dict:
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    out = {}
    for key, value in raw.items():
        want = schema[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if want is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{section} key {key!r} must be an int")
        elif not isinstance(value, want):
            raise ConfigError(f"{section} key {key!r} has the wrong type")
        out[key] = value
    return out


def config_from_dict(raw: dict) -> RunConfig:
    """Strict schema validation: unknown keys are errors, types checked."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    train_raw = raw.pop("train", {})
    model_raw = raw.pop("model", {})
    if not isinstance(train_raw, dict) or not isinstance(model_raw, dict):
        raise ConfigError("'train' and 'model' must be objects")
    fields = _check_section(raw, _CONFIG_SCALARS, "config")
    tf = _check_section(train_raw, _TRAIN_SCALARS, "train")
    mf = _check_section(model_raw, _MODEL_SCALARS, "model")
    if "hidden" in mf:
        if not all(isinstance(h, int) and not isinstance(h, bool) and h > 0
                   for h in mf["hidden"]):
            raise ConfigError("model.hidden must be a list of positive ints")
        mf["hidden"] = tuple(mf["hidden"])
    try:
        return RunConfig(train=mo.TrainConfig(**tf), model=ModelSettings(**mf),
                         **fields)
    except InvalidInputError as e:
        raise ConfigError(str(e)) from e


def config_to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["model"]["hidden"] = list(cfg.model.hidden)
    return doc


@dataclass
class IterationRecord:
    t: int
    sizes_before: dict[str, int]
    sizes_after: dict[str, int]
    beta: dict[str, float]
    gamma: float
    degenerate: bool
    q: float
    ref_slices: dict[str, float]
    train_meta: dict
    wall_time_sec: float

    def to_json_dict(self, include_wall_time: bool = False) -> dict:
        doc = {
            "t": self.t,
            "sizes_before": self.sizes_before,
            "sizes_after": self.sizes_after,
            "beta": self.beta,
            "gamma": self.gamma,
            "degenerate": self.degenerate,
            "q": self.q,
            "ref_slices": self.ref_slices,
            "train_meta": self.train_meta,
        }
        if include_wall_time:
            doc["wall_time_sec"] = self.wall_time_sec
        return doc


@dataclass
class RunResult:
    records: list[IterationRecord]
    models: list[mo.ModelState]
    influence_reports: list[infl.InfluenceReport | None]
    final_state: MixtureState
    best_index: int
    aborted: str | None = None

    @property
    def best_model(self) -> mo.ModelState:
        return self.models[self.best_index]


def _iteration_rng(root_seed: int, t: int, purpose: int) -> np.random.Generator:
    return seeded_rng(np.random.SeedSequence(root_seed, spawn_key=(t, purpose)))


def _train_mixture(state: MixtureState, cfg: RunConfig,
                   examples: mo.Examples | None = None) -> mo.ModelState:
    spec = cfg.model.build_spec(state.feature_dim, state.n_classes)
    return mo.train_to_convergence(spec, examples or state.union(), cfg.train)


def evaluate_reference(trained: mo.ModelState, state: MixtureState):
    """Reference loss (mean cross-entropy, no regularizer) plus origin slices."""
    ref = state.reference
    q = mo.loss(trained, ref.examples, include_reg=False)
    slices: dict[str, float] = {}
    if ref.origins is not None:
        for tag in sorted(set(ref.origins.tolist())):
            idx = np.flatnonzero(ref.origins == tag)
            slices[str(tag)] = mo.loss(trained, ref.examples.subset(idx),
                                       include_reg=False)
    return q, slices


def _meta_dict(trained: mo.ModelState) -> dict:
    return {"grad_norm": trained.train_meta.grad_norm,
            "iterations": trained.train_meta.iterations,
            "converged": trained.train_meta.converged}


def stopping(records: list[IterationRecord], T: int, stop_tol: float) -> bool:
    """Stop at the iteration cap, on a degenerate beta, or when the relative
    reference-loss improvement falls below stop_tol."""
    if not records:
        raise InvalidInputError("no records yet")
    last = records[-1]
    if last.t >= T or last.degenerate:
        return True
    if len(records) >= 2:
        q_prev = records[-2].q
        if q_prev <= 0.0:
            return True
        if (q_prev - last.q) / q_prev < stop_tol:
            return True
    return False


def run_ideal(state: MixtureState, cfg: RunConfig) -> RunResult:
    """The influence-guided reweighting loop.

    Per iteration: retrain from scratch, record reference loss, compute
    alpha -> beta, resample. A numerical failure during training aborts the
    run but keeps the records gathered so far.
    """
    if cfg.strategy != "ideal":
        raise InvalidInputError(f"run_ideal called with strategy {cfg.strategy!r}")
    records: list[IterationRecord] = []
    models: list[mo.ModelState] = []
    reports: list[infl.InfluenceReport | None] = []
    aborted = None
    for t in range(1, cfg.T + 1):
        started = time.perf_counter()
        try:
            trained = _train_mixture(state, cfg)
        except NumericalFailureError as e:
            aborted = f"iteration {t}: {e}"
            break
        q, slices = evaluate_reference(trained, state)
        comp = infl.dq_dbeta(trained, state.reference.examples,
                             [d.examples for d in state.domains],
                             cfg.method, cfg.sigma,
                             _iteration_rng(cfg.seed, t, _PURPOSE_INFLUENCE),
                             rho=cfg.rho)
        scaled = infl.scale_beta(comp.alpha, cfg.m)
        sizes_before = dict(zip(state.domain_names, state.sizes))
        new_state = apply_beta(state, scaled.beta,
                               _iteration_rng(cfg.seed, t, _PURPOSE_RESAMPLE))
        records.append(IterationRecord(
            t=t, sizes_before=sizes_before,
            sizes_after=dict(zip(new_state.domain_names, new_state.sizes)),
            beta=dict(zip(state.domain_names, scaled.beta.tolist())),
            gamma=scaled.gamma, degenerate=scaled.degenerate, q=q,
            ref_slices=slices, train_meta=_meta_dict(trained),
            wall_time_sec=time.perf_counter() - started))
        models.append(trained)
        reports.append(infl.make_report(comp, scaled, cfg.m))
        state = new_state
        if stopping(records, cfg.T, cfg.stop_tol):
            break
    if not records and aborted:
        raise NumericalFailureError(aborted)
    best = int(np.argmin([r.q for r in records]))
    return RunResult(records=records, models=models, influence_reports=reports,
                     final_state=state, best_index=best, aborted=aborted)


def run_baseline(state: MixtureState, cfg: RunConfig) -> RunResult:
    """joint / random / specific baselines, one training each."""
    if cfg.strategy not in ("joint", "random", "specific"):
        raise InvalidInputError(f"unknown baseline strategy {cfg.strategy!r}")
    started = time.perf_counter()
    names = state.domain_names
    sizes_before = dict(zip(names, state.sizes))
    beta = np.zeros(len(names))
    gamma = 0.0
    if cfg.strategy == "random":
        rng = _iteration_rng(cfg.seed, 1, _PURPOSE_RANDOM_BETA)
        beta = rng.uniform(-cfg.m, cfg.m, size=len(names))
        state = apply_beta(state, beta,
                           _iteration_rng(cfg.seed, 1, _PURPOSE_RESAMPLE))
    if cfg.strategy == "specific":
        matches = [d for d in state.domains if d.name == cfg.domain]
        if not matches:
            raise InvalidInputError(
                f"no domain named {cfg.domain!r}; have {names}")
        trained = _train_mixture(state, cfg, examples=matches[0].examples)
    else:
        trained = _train_mixture(state, cfg)
    q, slices = evaluate_reference(trained, state)
    record = IterationRecord(
        t=1, sizes_before=sizes_before,
        sizes_after=dict(zip(state.domain_names, state.sizes)),
        beta=dict(zip(names, beta.tolist())), gamma=gamma, degenerate=False,
        q=q, ref_slices=slices, train_meta=_meta_dict(trained),
        wall_time_sec=time.perf_counter() - started)
    return RunResult(records=[record], models=[trained],
                     influence_reports=[None], final_state=state, best_index=0)


def run(state: MixtureState, cfg: RunConfig) -> RunResult:
    if cfg.strategy == "ideal":
        return run_ideal(state, cfg)
    return run_baseline(state, cfg)

"""Run configuration: a TOML file with one table per component.

Every key has a default (the dataclass defaults below and in each module);
unknown tables or keys are rejected. ``resolve`` returns the fully populated
configuration, which the CLI echoes to ``<run dir>/config.toml`` so a run can
be repeated from that file alone.

Reference (defaults in brackets)::

    seed = 0                      # model init + training stream

    [data]      name ["two_moons"], noise [0.05], components [4], seed [0],
                n_train [20000], n_test [5000]
    [schedule]  omega [1], nu [1], t_max [1 - 1e-5], t_end [1], kappa [1.5],
                eta [1e-4], t_floor [1e-4]
    [model]     hidden [[128, 128, 128, 128]], activation ["gelu"],
                time_embedding ["linear"], n_frequencies [4],
                conditional [false], class_embed_dim [8]
    [loss]      objective ["vpfb"], use_covariance, alignment ["cosine"],
                use_grad_norm, use_time_grad, use_poincare [true],
                centering ["innovation"], covariance_scale [1], eps_norm [1e-8]
    [train]     batch_size [256], iterations [10000], lr [1e-3],
                optimizer ["adam"], betas, weight_decay [0], momentum [0.9],
                checkpoint_every [0], eval_every [1000], eval_samples [1024],
                log_every [1]
    [sampler.ode]   method ["rk4"], t_start [0], horizon [1.575], steps [200],
                    rtol [1e-5], atol [1e-6], max_steps, record_trajectory,
                    record_every
    [sampler.sgld]  step_size [1e-7], steps [5000], temperature [0.35],
                    init ["prior"], max_radius [1e3], record_every [0],
                    chains [512]
    [eval]      bounds [[-3, 3, -3, 3]], resolution [120], top_fraction [0.1],
                n_samples [4096], bins [50], box [4.0]
    [paths]     out_dir [""]  (empty: $VPFB_OUT_ROOT/<dataset>-seed<seed>, root defaults to ./runs)

The SGLD step size and temperature are coupled: with t_max = 1 - 1e-5 the
Boltzmann energy carries a 1/g_inf^2 = 5e4 factor, so its gradient near the
data is O(1e4-1e5) and the explicit update is only stable for step sizes well
below 1e-5. The defaults were checked on the zero-network energy
f_inf |x|^2 / g_inf^2, whose gradient -2 |f_inf| x / g_inf^2 ~ -1e5 x makes
1e-7 a contraction factor of 0.99 per step.
"""

from __future__ import annotations

import copy
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

from .autodiff import Architecture
from .data import Dataset2D
from .loss import LossConfig
from .samplers import OdeConfig, SgldConfig
from .schedule import ScheduleParams
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "EvalConfig", "default_dict", "resolve", "load", "dump", "OUT_ROOT_ENV"]

OUT_ROOT_ENV = "VPFB_OUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    bounds: tuple[float, float, float, float] = (-3.0, 3.0, -3.0, 3.0)
    resolution: int = 120
    top_fraction: float = 0.1
    n_samples: int = 4096
    bins: int = 50
    box: float = 4.0  # half-width of the uniform OOD box


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: Dataset2D
    schedule: ScheduleParams
    arch: Architecture
    conditional: bool
    loss: LossConfig
    train: TrainConfig
    ode: OdeConfig
    sgld: SgldConfig
    sgld_chains: int
    eval: EvalConfig
    out_dir: Path
    raw: dict = field(repr=False, default_factory=dict)


_TRAIN_KEYS = ("batch_size", "iterations", "lr", "optimizer", "betas", "weight_decay", "momentum",
               "checkpoint_every", "eval_every", "eval_samples", "log_every")


def _defaults_of(cls, **overrides) -> dict:
    obj = cls(**overrides)
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_dict() -> dict:
    """Every configurable key with its default value."""
    train = TrainConfig(eval_every=1000)
    model = _defaults_of(Architecture)
    del model["dim"], model["num_classes"]
    model["conditional"] = False
    return {
        "seed": 0,
        "data": _defaults_of(Dataset2D),
        "schedule": _defaults_of(ScheduleParams),
        "model": model,
        "loss": _defaults_of(LossConfig),
        "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in ((k, getattr(train, k)) for k in _TRAIN_KEYS)},
        "sampler": {
            "ode": _defaults_of(OdeConfig, method="rk4"),
            "sgld": {**_defaults_of(SgldConfig), "chains": 512},
        },
        "eval": _defaults_of(EvalConfig),
        "paths": {"out_dir": ""},
    }


def _merge(base: dict, user: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in user.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path!r} must be a table")
            out[key] = _merge(base[key], val, path)
        else:
            if isinstance(val, dict):
                raise ConfigError(f"{path!r} must be a value, not a table")
            out[key] = val
    return out


def _build(cls, values: dict, section: str, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def resolve(user: dict | None = None, seed_override: int | None = None) -> RunConfig:
    raw = _merge(default_dict(), user or {})
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    seed = raw["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    data = _build(Dataset2D, raw["data"], "data")
    schedule = _build(ScheduleParams, raw["schedule"], "schedule")
    model = dict(raw["model"])
    conditional = bool(model.pop("conditional"))
    model["hidden"] = tuple(model["hidden"])
    arch = _build(Architecture, model, "model", dim=2, num_classes=-1 if conditional else 0)
    loss = _build(LossConfig, raw["loss"], "loss")
    ode = _build(OdeConfig, raw["sampler"]["ode"], "sampler.ode")
    sgld_vals = dict(raw["sampler"]["sgld"])
    chains = int(sgld_vals.pop("chains"))
    if chains < 1:
        raise ConfigError("[sampler.sgld] chains must be >= 1")
    sgld = _build(SgldConfig, sgld_vals, "sampler.sgld")
    ev = dict(raw["eval"])
    ev["bounds"] = tuple(float(b) for b in ev["bounds"])
    if len(ev["bounds"]) != 4:
        raise ConfigError("[eval] bounds must list x_min, x_max, y_min, y_max")
    evc = _build(EvalConfig, ev, "eval")
    out_dir = raw["paths"]["out_dir"] or str(
        Path(os.environ.get(OUT_ROOT_ENV, "runs")) / f"{data.name}-seed{seed}"
    )
    raw["paths"]["out_dir"] = out_dir
    tr = dict(raw["train"])
    tr["betas"] = tuple(tr["betas"])
    train = _build(TrainConfig, tr, "train", dataset=data, arch=arch, schedule=schedule, loss=loss, seed=seed,
                   out_dir=out_dir)
    return RunConfig(seed, data, schedule, arch, conditional, loss, train, ode, sgld, chains, evc, Path(out_dir), raw)


def load(path, seed_override: int | None = None) -> RunConfig:
    """Parse a TOML file; missing file is an OSError, bad content a ConfigError."""
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return resolve(user, seed_override)


def dump(cfg: RunConfig, path) -> Path:
    """Write the fully resolved configuration as TOML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.raw, fh)
    return path

"""Training loop: batch assembly, time sampling, optimization and checkpointing.

One iteration draws B data points, B times t ~ U(0, t_end) clamped into
[t_floor, t_max], and B standard-normal noises, builds the perturbed batch and
takes one optimizer step on the configured loss.

Checkpoints carry the optimizer moments and the numpy RNG state, so a resumed
run continues bit-for-bit (under a fixed torch thread count).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autodiff import Architecture, EnergyModel, load_checkpoint, save_checkpoint
from .data import Dataset2D, DataSplits, generate, prior_sample
from .evaluation import energy_distance
from .loss import LossBreakdown, LossConfig, batch_loss
from .perturbation import perturb
from .samplers import OdeConfig, flow_sample
from .schedule import ScheduleParams

__all__ = ["TrainConfig", "TrainState", "FitResult", "init_state", "train_step", "fit", "resume", "METRIC_COLUMNS"]

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "total", *LossBreakdown.TERMS, "poincare_ratio", "wall_time")
OPTIMIZERS = ("adam", "adamw", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    dataset: Dataset2D = field(default_factory=Dataset2D)
    arch: Architecture = field(default_factory=Architecture)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 256
    iterations: int = 10000
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    momentum: float = 0.9  # sgd only
    seed: int = 0
    out_dir: str | None = None
    checkpoint_every: int = 0  # 0: only the final checkpoint
    eval_every: int = 0  # 0: no held-out evaluation
    eval_samples: int = 1024
    eval_ode: OdeConfig = field(default_factory=lambda: OdeConfig(method="rk4", steps=100))
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if min(self.checkpoint_every, self.eval_every) < 0 or self.log_every < 1:
            raise ValueError("cadences must be non-negative (log_every >= 1)")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass
class TrainState:
    step: int
    model: EnergyModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    data: DataSplits
    best_metric: float = float("inf")
    best_step: int = -1
    last: dict | None = None  # LossBreakdown of the latest step as floats


@dataclass
class FitResult:
    model: EnergyModel
    state: TrainState
    metrics: list[dict]
    evals: list[tuple[int, float]]
    out_dir: Path | None


def _make_optimizer(model: EnergyModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _model_arch(cfg: TrainConfig, data: DataSplits) -> Architecture:
    """The configured architecture; ``num_classes=-1`` means "take it from the dataset"."""
    if cfg.arch.num_classes == -1:
        values = cfg.arch.to_dict()
        values["num_classes"] = data.num_classes
        return Architecture(**values)
    return cfg.arch


def init_state(cfg: TrainConfig) -> TrainState:
    data = generate(cfg.dataset)
    model = EnergyModel(_model_arch(cfg, data), seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    return TrainState(0, model, _make_optimizer(model, cfg), rng, data)


def sample_batch(state: TrainState, cfg: TrainConfig):
    p = cfg.schedule
    B = cfg.batch_size
    idx = state.rng.integers(0, len(state.data.train), size=B)
    t = np.clip(state.rng.uniform(0.0, p.t_end, size=B), p.t_floor, p.t_max)
    eps = state.rng.standard_normal((B, state.data.train.shape[1]))
    labels = state.data.train_labels[idx] if state.model.arch.num_classes else None
    return perturb(state.data.train[idx], eps, t, p, labels=labels)


def train_step(state: TrainState, cfg: TrainConfig) -> TrainState:
    """One optimizer update; raises loss.NumericalError on a non-finite term."""
    batch = sample_batch(state, cfg)
    out = batch_loss(state.model, batch, cfg.loss, cfg.schedule)
    state.optimizer.zero_grad(set_to_none=True)
    out.total.backward()
    state.optimizer.step()
    state.step += 1
    state.last = out.as_floats()
    return state


def evaluate(state: TrainState, cfg: TrainConfig) -> float:
    """Energy distance between ODE samples and the held-out split (fixed prior draws)."""
    n = min(cfg.eval_samples, len(state.data.test))
    prior = prior_sample(state.data.train.shape[1], n, cfg.schedule.omega, cfg.seed + 7919)
    classes = None
    if state.model.arch.num_classes:
        classes = tuple(range(state.model.arch.num_classes))
    samples = flow_sample(state.model, prior, cfg.eval_ode, cfg.schedule, classes).samples
    return energy_distance(samples, state.data.test[:n])


# -- checkpoints -----------------------------------------------------------------


def _optimizer_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for i, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            arrays[f"opt/{i}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return arrays


def _restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for name, val in arrays.items():
        if not name.startswith("opt/"):
            continue
        _, i, key = name.split("/", 2)
        state.setdefault(int(i), {})[key] = torch.from_numpy(np.array(val))
    sd["state"] = state
    opt.load_state_dict(sd)


def save_state(path, state: TrainState, cfg: TrainConfig, config_dict: dict | None = None) -> Path:
    meta = {
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "best_metric": state.best_metric if np.isfinite(state.best_metric) else None,
        "best_step": state.best_step,
        "config": config_dict or {},
    }
    return save_checkpoint(path, state.model, cfg.schedule.to_dict(), meta, _optimizer_arrays(state.optimizer))


def resume(path, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from a checkpoint written by ``save_state``."""
    ck = load_checkpoint(path)
    if ck.model.arch != _model_arch(cfg, generate(cfg.dataset)):
        raise ValueError(f"{path}: checkpoint architecture does not match the configuration")
    data = generate(cfg.dataset)
    opt = _make_optimizer(ck.model, cfg)
    _restore_optimizer(opt, ck.arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.meta["rng_state"]
    best = ck.meta.get("best_metric")
    return TrainState(
        step=int(ck.meta["step"]),
        model=ck.model,
        optimizer=opt,
        rng=rng,
        data=data,
        best_metric=float("inf") if best is None else float(best),
        best_step=int(ck.meta.get("best_step", -1)),
    )


# -- loop ------------------------------------------------------------------------


def _open_metrics(path: Path, append: bool):
    new = not (append and path.exists())
    fh = open(path, "a" if not new else "w", newline="")
    writer = csv.writer(fh)
    if new:
        writer.writerow(METRIC_COLUMNS)
    return fh, writer


def fit(cfg: TrainConfig, state: TrainState | None = None, config_dict: dict | None = None) -> FitResult:
    """Run ``cfg.iterations`` total steps (continuing ``state`` if given).

    With ``out_dir`` set, writes ``metrics.csv``, ``evals.csv``,
    ``final.npz``, ``best.npz`` (when evaluation is enabled) and periodic
    ``step_NNNNNN.npz`` checkpoints.
    """
    resumed = state is not None
    state = state or init_state(cfg)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    metrics: list[dict] = []
    evals: list[tuple[int, float]] = []
    fh = writer = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            fh, writer = _open_metrics(out / "metrics.csv", append=resumed)
        except OSError as exc:
            raise OSError(f"cannot write training outputs under {out}: {exc}") from exc
    t0 = time.perf_counter()
    try:
        while state.step < cfg.iterations:
            train_step(state, cfg)
            row = {"step": state.step, **state.last, "wall_time": time.perf_counter() - t0}
            if state.step % cfg.log_every == 0 or state.step == cfg.iterations:
                metrics.append(row)
                if writer is not None:
                    writer.writerow([repr(float(row[c])) if c != "step" else row[c] for c in METRIC_COLUMNS])
            final = state.step == cfg.iterations
            if cfg.eval_every and (state.step % cfg.eval_every == 0 or final):
                value = evaluate(state, cfg)
                evals.append((state.step, value))
                log.info("step %d energy distance %.5f", state.step, value)
                if value < state.best_metric:
                    state.best_metric, state.best_step = value, state.step
                    if out is not None:
                        save_state(out / "best.npz", state, cfg, config_dict)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and not final:
                save_state(out / f"step_{state.step:06d}.npz", state, cfg, config_dict)
        if out is not None:
            save_state(out / "final.npz", state, cfg, config_dict)
            if evals:
                with open(out / "evals.csv", "a" if resumed else "w", newline="") as efh:
                    ew = csv.writer(efh)
                    if not resumed:
                        ew.writerow(["step", "energy_distance"])
                    ew.writerows([s, repr(v)] for s, v in evals)
    finally:
        if fh is not None:
            fh.close()
    return FitResult(state.model, state, metrics, evals, out)


def summarize(result: FitResult) -> str:
    last = result.metrics[-1] if result.metrics else {}
    return json.dumps({"step": result.state.step, "total": last.get("total"), "best_step": result.state.best_step,
                       "best_energy_distance": result.state.best_metric if result.evals else None})

"""Energy network and the differentiation contract built on torch autograd.

The training loss contains grad_x Phi and dPhi/dt, and must itself be
differentiated with respect to the parameters. ``input_grad`` therefore
builds its gradients with ``create_graph=True`` so they stay part of the
graph (reverse-over-reverse).

Checkpoints are ``.npz`` containers; see ``save_checkpoint``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

__all__ = [
    "Architecture",
    "EnergyModel",
    "energy",
    "input_grad",
    "param_grad",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
DTYPE = torch.float64

_ACTIVATIONS = {
    "gelu": nn.GELU,
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
}


@dataclass(frozen=True)
class Architecture:
    """Layer layout of the energy MLP.

    time_embedding: "linear" feeds [t]; "sinusoidal" feeds
    [t, sin(pi k t), cos(pi k t)] for k = 1..n_frequencies; "none" builds an
    autonomous model Phi(x).
    """

    dim: int = 2
    hidden: tuple[int, ...] = (128, 128, 128, 128)
    activation: str = "gelu"
    time_embedding: str = "linear"
    n_frequencies: int = 4
    num_classes: int = 0
    class_embed_dim: int = 8

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)} (smooth only)")
        if self.time_embedding not in ("linear", "sinusoidal", "none"):
            raise ValueError(f"unknown time embedding {self.time_embedding!r}")
        if self.num_classes < -1:
            raise ValueError("num_classes must be >= 0 (or -1: take it from the dataset)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def time_features(self) -> int:
        return {"linear": 1, "sinusoidal": 1 + 2 * self.n_frequencies, "none": 0}[self.time_embedding]

    @property
    def input_features(self) -> int:
        extra = self.class_embed_dim if self.num_classes else 0
        return self.dim + self.time_features + extra

    def param_count(self) -> int:
        widths = [self.input_features, *self.hidden, 1]
        n = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        if self.num_classes:
            n += self.num_classes * self.class_embed_dim
        return n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class EnergyModel(nn.Module):
    """Scalar potential Phi(x, t[, c]) as a smooth MLP in float64."""

    def __init__(self, arch: Architecture, seed: int = 0, zero_init_output: bool = False):
        super().__init__()
        self.arch = arch
        self.seed = seed
        widths = [arch.input_features, *arch.hidden, 1]
        self.linears = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        self.act = _ACTIVATIONS[arch.activation]()
        self.class_embedding = (
            nn.Embedding(arch.num_classes, arch.class_embed_dim, dtype=DTYPE) if arch.num_classes else None
        )
        self.reset_parameters(seed, zero_init_output)

    def reset_parameters(self, seed: int, zero_init_output: bool = False):
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for lin in self.linears:
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            if zero_init_output:
                self.linears[-1].weight.zero_()
                self.linears[-1].bias.zero_()
            if self.class_embedding is not None:
                self.class_embedding.weight.normal_(0.0, 1.0, generator=gen)

    def features(self, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor | None) -> torch.Tensor:
        parts = [x]
        t = t.reshape(-1, 1)
        if self.arch.time_embedding == "linear":
            parts.append(t)
        elif self.arch.time_embedding == "sinusoidal":
            k = torch.arange(1, self.arch.n_frequencies + 1, dtype=x.dtype)
            parts += [t, torch.sin(math.pi * k * t), torch.cos(math.pi * k * t)]
        if self.class_embedding is not None:
            if c is None:
                raise ValueError("conditional model needs class indices")
            parts.append(self.class_embedding(c))
        return torch.cat(parts, dim=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        h = self.features(x, t, c)
        for lin in self.linears[:-1]:
            h = self.act(lin(h))
        return self.linears[-1](h).squeeze(-1)

    def flat_params(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def set_flat_params(self, vec) -> None:
        vec = torch.as_tensor(np.asarray(vec), dtype=DTYPE)
        if vec.numel() != self.arch.param_count():
            raise ValueError(f"expected {self.arch.param_count()} parameters, got {vec.numel()}")
        with torch.no_grad():
            nn.utils.vector_to_parameters(vec, self.parameters())


def _as_inputs(model: EnergyModel, x, t, c):
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x.unsqueeze(0)
    if x.shape[-1] != model.arch.dim:
        raise ValueError(f"model expects dimension {model.arch.dim}, got {x.shape[-1]}")
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    if c is not None:
        if not model.arch.num_classes:
            raise ValueError("class index given to an unconditional model")
        c = torch.as_tensor(c, dtype=torch.long)
        if c.ndim == 0:
            c = c.expand(x.shape[0])
        if c.min() < 0 or c.max() >= model.arch.num_classes:
            raise ValueError(f"class index out of range [0, {model.arch.num_classes})")
    elif model.arch.num_classes:
        raise ValueError("conditional model needs class indices")
    return x, t, c


def energy(model: EnergyModel, x, t, c=None) -> torch.Tensor:
    """Phi at a batch of points; returns shape (B,)."""
    x, t, c = _as_inputs(model, x, t, c)
    return model(x, t, c)


def input_grad(model: EnergyModel, x, t, c=None, create_graph: bool = True):
    """Return (phi, grad_x, grad_t) with gradients kept differentiable.

    With ``create_graph=False`` the outputs are detached, which is what the
    samplers want.
    """
    x, t, c = _as_inputs(model, x, t, c)
    x = x.detach().requires_grad_(True)
    t = t.detach().requires_grad_(True)
    phi = model(x, t, c)
    gx, gt = torch.autograd.grad(phi.sum(), (x, t), create_graph=create_graph, allow_unused=True)
    if gt is None:
        gt = torch.zeros_like(t)
    if not create_graph:
        return phi.detach(), gx.detach(), gt.detach()
    return phi, gx, gt


def param_grad(loss: torch.Tensor, model: EnergyModel) -> torch.Tensor:
    """Flat gradient of a scalar loss with respect to all model parameters."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    params = list(model.parameters())
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return torch.cat(
        [(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)]
    )


# -- checkpoints -------------------------------------------------------------
#
# Layout of the .npz container:
#   header   JSON string: format_version, arch, seed, schedule, extra metadata
#   params   float64 flat parameter vector (module parameter order)
#   any further arrays passed via ``arrays`` (optimizer moments etc.)


def save_checkpoint(
    path,
    model: EnergyModel,
    schedule: dict | None = None,
    meta: dict | None = None,
    arrays: dict[str, np.ndarray] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "schedule": schedule or {},
        "meta": meta or {},
    }
    payload = {"header": np.array(json.dumps(header)), "params": model.flat_params().numpy()}
    for key, val in (arrays or {}).items():
        if key in payload:
            raise ValueError(f"reserved checkpoint key {key!r}")
        payload[key] = np.asarray(val)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    model: EnergyModel
    schedule: dict
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        arch = Architecture(**header["arch"])
        model = EnergyModel(arch, seed=header["seed"])
        model.set_flat_params(data["params"])
        arrays = {k: data[k].copy() for k in data.files if k not in ("header", "params")}
    return Checkpoint(model=model, schedule=header["schedule"], meta=header["meta"], arrays=arrays)

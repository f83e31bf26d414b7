"""Tensor substrate: checked primitives, reverse-mode gradients, SGD, seeded sampling.

Tensors are ``torch.Tensor`` (float32 by default) and gradients come from
torch's tape-based autograd. Everything random (parameter init, shuffles,
negatives, dropout masks) is drawn from :class:`Rng`, a PCG64 stream from
numpy, so a seed fully determines a run on any platform.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float32


class ShapeError(ValueError):
    def __init__(self, primitive: str, a, b):
        super().__init__(f"{primitive}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.primitive = primitive
        self.shapes = (tuple(a), tuple(b))


class Rng:
    """PCG64 stream (128-bit LCG state, XSL-RR output; O'Neill 2014 constants).

    Wraps :class:`numpy.random.PCG64`, whose output is specified bit-for-bit
    and does not depend on the platform.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key: int) -> "Rng":
        """Independent stream derived from (seed, key)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        r = Rng.__new__(Rng)
        r.seed = self.seed
        r.gen = np.random.Generator(np.random.PCG64(ss))
        return r

    def state(self) -> dict:
        st = self.gen.bit_generator.state
        return {"seed": self.seed, "state": {k: (str(v) if isinstance(v, int) else v) for k, v in st["state"].items()},
                "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        r = cls(state["seed"])
        r.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {k: int(v) for k, v in state["state"].items()},
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return r

    def normal(self, shape, std=1.0) -> torch.Tensor:
        return torch.from_numpy((self.gen.standard_normal(shape) * std).astype(np.float32))

    def uniform(self, shape, bound) -> torch.Tensor:
        return torch.from_numpy(self.gen.uniform(-bound, bound, size=shape).astype(np.float32))

    def permutation(self, n) -> np.ndarray:
        return self.gen.permutation(n)


# -- checked primitives --------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    return a + b


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, other)) if i != dim % len(ref)):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    return torch.cat(list(tensors), dim=dim)


def embedding_gather(table: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding_gather: id out of range for table of {table.shape[0]} rows")
    return table[ids]


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def conv1d_causal(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Causal 1-d convolution over (batch, time, channels); output at t sees t-k+1..t."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    k = weight.shape[2]
    h = F.pad(x.transpose(1, 2), (k - 1, 0))
    return F.conv1d(h, weight, bias).transpose(1, 2)


sigmoid = torch.sigmoid
tanh = torch.tanh


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def mean(x: torch.Tensor, dim: int) -> torch.Tensor:
    return x.mean(dim=dim)


class Dropout(nn.Module):
    """Inverted dropout whose masks come from an attached :class:`Rng`.

    Without an attached stream (inference) or in eval mode it is the identity.
    """

    def __init__(self, rate: float = 0.0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng: Rng | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.rate == 0.0 or self.rng is None:
            return x
        keep = self.rng.gen.random(tuple(x.shape)) >= self.rate
        mask = torch.from_numpy(keep.astype(np.float32) / (1.0 - self.rate))
        return x * mask.to(x.dtype)


def attach_dropout_rng(module: nn.Module, rng: Rng | None) -> None:
    for m in module.modules():
        if isinstance(m, Dropout):
            m.rng = rng


# -- parameters, gradients, optimizer -----------------------------------------


@dataclass
class Parameter:
    name: str
    tensor: torch.Tensor
    weight_decay_exempt: bool = False


def parameters_of(module: nn.Module) -> list[Parameter]:
    """Named trainable parameters; biases and normalization gains skip weight decay."""
    out = []
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        exempt = name.endswith("bias") or ".norm" in name or name.startswith("norm")
        out.append(Parameter(name, p, exempt))
    return out


def forward_backward(computation: Callable[..., torch.Tensor], inputs: dict[str, torch.Tensor]):
    """Evaluate ``computation(**inputs)`` and the gradient of its (summed) output.

    Gradients are returned for every input with ``requires_grad`` set.
    """
    out = computation(**inputs)
    wrt = {k: v for k, v in inputs.items() if isinstance(v, torch.Tensor) and v.requires_grad}
    if not wrt:
        return out, {}
    grads = torch.autograd.grad(out.sum(), list(wrt.values()), allow_unused=True)
    return out, {k: (torch.zeros_like(v) if g is None else g) for (k, v), g in zip(wrt.items(), grads)}


@torch.no_grad()
def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    total = float(torch.sqrt(sum((g.detach().float() ** 2).sum() for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


@torch.no_grad()
def sgd_step(params: Iterable[Parameter], grads: dict[str, torch.Tensor], lr: float, weight_decay: float = 0.0):
    """In-place ``p <- p - lr * (grad + weight_decay * p)``; exempt parameters skip the decay."""
    params = list(params)
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    names = {p.name for p in params}
    if names != set(grads):
        missing = sorted(names ^ set(grads))
        raise ValueError(f"parameter/gradient sets differ: {missing[:5]}")
    for p in params:
        g = grads[p.name]
        if g.shape != p.tensor.shape:
            raise ShapeError("sgd_step", p.tensor.shape, g.shape)
        step = g if (p.weight_decay_exempt or weight_decay == 0.0) else g + weight_decay * p.tensor
        p.tensor.sub_(lr * step)
    return params


def sample_negatives(catalog_size: int, exclude, count: int, rng: Rng) -> np.ndarray:
    """Draw ``count`` distinct ids uniformly from ``[0, catalog_size)`` minus ``exclude``."""
    excl = np.unique(np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64))
    excl = excl[(excl >= 0) & (excl < catalog_size)]
    available = catalog_size - len(excl)
    if count < 0 or count > available:
        raise ValueError(f"cannot draw {count} negatives from {available} available songs")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if available <= 4 * count or catalog_size <= 100_000:
        pool = np.setdiff1d(np.arange(catalog_size, dtype=np.int64), excl, assume_unique=True)
        return rng.gen.choice(pool, size=count, replace=False)
    # sparse exclusion over a large catalog: rejection keeps it O(count)
    out: list[int] = []
    taken = set(excl.tolist())
    while len(out) < count:
        for s in rng.gen.integers(0, catalog_size, size=2 * (count - len(out))).tolist():
            if s not in taken:
                taken.add(s)
                out.append(s)
                if len(out) == count:
                    break
    return np.asarray(out, dtype=np.int64)


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], epsilon: float = 1e-3) -> float:
    """Max relative gap between autograd and central finite differences.

    ``loss_fn`` must map the current values of ``params`` to a scalar. The gap
    is normwise per tensor: ``max|analytic - numeric| / max(|analytic| + |numeric|)``.
    A float32 difference quotient carries absolute noise near ``ulp(loss) / epsilon``,
    so a ratio taken entry by entry is meaningless where the true gradient is ~0.
    """
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise FloatingPointError("loss is not finite at the checked point")
    analytic = torch.autograd.grad(loss, list(params), allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            af = a.reshape(-1).double()
            num = torch.empty_like(af)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + epsilon
                up = float(loss_fn())
                flat[j] = orig - epsilon
                down = float(loss_fn())
                flat[j] = orig
                num[j] = (up - down) / (2 * epsilon)
            scale = float((af.abs() + num.abs()).max())
            gap = float((af - num).abs().max())
            worst = max(worst, gap / max(scale, 1e-8))
    return worst


def grad_check_module(
    module: nn.Module,
    loss_of: Callable[[nn.Module, torch.dtype], torch.Tensor],
    epsilon: float = 1e-3,
    skip: Sequence[str] = (),
) -> float:
    """Check the float32 autograd gradient of ``module`` against a float64 reference.

    ``loss_of(m, dtype)`` builds the scalar loss for module ``m`` with inputs
    cast to ``dtype``. The analytic gradient comes from ``module`` as is; the
    central differences run on a float64 copy, so the reported gap is the
    error of the 32-bit gradient rather than rounding noise in the quotient.
    Parameters named in ``skip`` are left out. Same normwise gap as :func:`grad_check`.
    """
    names = [n for n, _ in module.named_parameters() if n not in skip]
    own = dict(module.named_parameters())
    loss = loss_of(module, own[names[0]].dtype)
    if not torch.isfinite(loss).all():
        raise FloatingPointError("loss is not finite at the checked point")
    analytic = torch.autograd.grad(loss, [own[n] for n in names], allow_unused=True)
    twin = copy.deepcopy(module).double()
    ref = dict(twin.named_parameters())
    worst = 0.0
    with torch.no_grad():
        for n, a in zip(names, analytic):
            p = ref[n]
            a = torch.zeros_like(p) if a is None else a.double()
            flat = p.view(-1)
            num = torch.empty(flat.numel(), dtype=torch.float64)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + epsilon
                up = float(loss_of(twin, torch.float64))
                flat[j] = orig - epsilon
                down = float(loss_of(twin, torch.float64))
                flat[j] = orig
                num[j] = (up - down) / (2 * epsilon)
            af = a.reshape(-1)
            scale = float((af.abs() + num.abs()).max())
            worst = max(worst, float((af - num).abs().max()) / max(scale, 1e-12))
    return worst


def init_linear(layer: nn.Linear, rng: Rng, std: float | None = None) -> None:
    with torch.no_grad():
        fan_in = layer.weight.shape[1]
        bound = 1.0 / math.sqrt(fan_in)
        layer.weight.copy_(rng.normal(tuple(layer.weight.shape), std) if std is not None else rng.uniform(tuple(layer.weight.shape), bound))
        if layer.bias is not None:
            layer.bias.zero_()

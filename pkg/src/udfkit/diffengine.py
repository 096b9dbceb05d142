"""Differentiation helpers on top of torch autograd.

Everything that needs a parameter gradient of an objective that itself contains
an input gradient of the field goes through :func:`value_and_input_gradient`,
which records the first reverse pass (``create_graph=True``) so a second
reverse pass over the parameters is exact.

The primitives below (affine, activations, norms, ...) are the only operations
the field and the losses are built from; each has a derivative rule that the
test suite checks against central finite differences, including at second
order.  Kinks follow one convention: the derivative of a piecewise-linear
function at exactly zero is zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericFailure


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def affine(x, weight, bias):
    return F.linear(x, weight, bias)


def relu(x):
    return torch.relu(x)


def softplus(x, beta: float = 100.0):
    return F.softplus(x, beta=beta)


def absolute(x):
    return torch.abs(x)


def exp(x):
    return torch.exp(x)


def dot(a, b):
    """Row-wise dot product of ``(..., 3)`` tensors."""
    return torch.sum(a * b, dim=-1)


def norm(x):
    """Row-wise Euclidean norm with a zero (sub)gradient at the origin.

    ``torch.linalg.norm`` produces NaN in its second derivative at 0, which a
    coincident query/point pair would otherwise hit.
    """
    sq = torch.sum(x * x, dim=-1)
    pos = sq > 0
    safe = torch.where(pos, sq, torch.ones_like(sq))
    return torch.where(pos, torch.sqrt(safe), torch.zeros_like(sq))


def mean(x):
    return torch.mean(x)


def stop_gradient(x):
    """Pass the value through and block all derivative flow."""
    return x.detach()


ACTIVATIONS = {"relu": relu, "softplus": softplus}


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def value_and_input_gradient(field, q, create_graph: bool = True):
    """Evaluate ``field`` at ``q`` and return ``(values, grad_q)``.

    ``q`` is an ``(M, 3)`` tensor.  If it is not already part of a graph a
    fresh leaf is made for it.  With ``create_graph`` (the default) the returned
    gradient is itself differentiable with respect to the field parameters.
    """
    if not q.requires_grad:
        q = q.detach().clone().requires_grad_(True)
    values = field(q)
    (grad,) = torch.autograd.grad(
        values.sum(), q, create_graph=create_graph, allow_unused=True
    )
    if grad is None:
        grad = torch.zeros_like(q)
    if not create_graph:
        values = values.detach()
    return values, grad


def input_gradient(field, q, create_graph: bool = True):
    """``grad_q field(q)`` for an ``(M, 3)`` batch (or a single ``(3,)`` point)."""
    single = q.dim() == 1
    if single:
        q = q.reshape(1, 3)
    _, grad = value_and_input_gradient(field, q, create_graph=create_graph)
    return grad[0] if single else grad


@dataclass
class GradReport:
    wrt_params: np.ndarray
    wrt_inputs: Optional[np.ndarray] = None

    def __add__(self, other: "GradReport") -> "GradReport":
        inputs = None
        if self.wrt_inputs is not None and other.wrt_inputs is not None:
            inputs = np.concatenate([self.wrt_inputs, other.wrt_inputs])
        return GradReport(self.wrt_params + other.wrt_params, inputs)


def _check_objective(objective):
    if objective.numel() != 1:
        raise ValueError(f"objective must be a scalar, got shape {tuple(objective.shape)}")
    if not torch.isfinite(objective).all():
        raise NumericFailure(f"objective is non-finite ({objective.item()})", node="objective")


def parameter_gradients(objective, params: Sequence[torch.Tensor], inputs=None,
                        names: Optional[Sequence[str]] = None) -> GradReport:
    """Reverse accumulation of ``d objective / d params`` as a flat float64 vector.

    Parameters the objective does not depend on get zero gradient.  A
    non-finite entry raises :class:`NumericFailure` naming the offending tensor.
    """
    _check_objective(objective)
    params = list(params)
    targets = params + ([inputs] if inputs is not None else [])
    if objective.requires_grad:
        grads = torch.autograd.grad(objective, targets, allow_unused=True, retain_graph=True)
    else:
        grads = [None] * len(targets)
    flat = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            label = names[k] if names is not None else f"param[{k}]"
            raise NumericFailure(f"non-finite gradient for {label}", node=label)
        flat.append(g.detach().reshape(-1).to(torch.float64))
    vec = torch.cat(flat).numpy() if flat else np.zeros(0)
    wrt_inputs = None
    if inputs is not None:
        gi = grads[-1]
        wrt_inputs = (torch.zeros_like(inputs) if gi is None else gi).detach().numpy()
    return GradReport(vec, wrt_inputs)


def backward(objective, params: Iterable[torch.Tensor], names=None):
    """Write parameter gradients into ``p.grad`` (overwriting), with finiteness checks."""
    params = list(params)
    _check_objective(objective)
    if objective.requires_grad:
        grads = torch.autograd.grad(objective, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            label = names[k] if names is not None else f"param[{k}]"
            raise NumericFailure(f"non-finite gradient for {label}", node=label)
        p.grad = g.detach()


def sum_reports(reports: Sequence[GradReport]) -> GradReport:
    """Sum shard reports in the given (shard-index) order."""
    if not reports:
        raise ValueError("no reports to sum")
    total = reports[0]
    for r in reports[1:]:
        total = total + r
    return total

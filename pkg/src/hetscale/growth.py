"""Neuron growth by paired opposite-polarity branches.

Each selected neuron ``i`` of a host layer gains two added neurons whose
outputs ``o_plus`` and ``o_minus`` feed back into it:

    out[i] = base[i] + gelu(o_plus + o_minus) + o_plus + o_minus

The added neurons start as ``+a * W[i], +a * b[i]`` and exactly the
negation, so their sum vanishes and the network computes the same function
right after growth. The identity term keeps gradients flowing into both
new neurons even though the GeLU path cancels at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from hetscale import tensor as T
from hetscale.tensor import Tensor

if TYPE_CHECKING:
    from hetscale.cache import SharedInputCache
    from hetscale.model import GrowableLinear, Model

DEFAULT_SCALING_FACTOR = 0.2


@dataclass
class GrowthBranch:
    selected: np.ndarray
    w_plus: Tensor
    b_plus: Tensor
    w_minus: Tensor
    b_minus: Tensor
    created_at: int = 0
    scaling_factor: float = DEFAULT_SCALING_FACTOR
    active: bool = field(default=True, repr=False)

    @property
    def in_dim(self) -> int:
        return self.w_plus.shape[1]

    def named_parameters(self):
        yield "w_plus", self.w_plus
        yield "b_plus", self.b_plus
        yield "w_minus", self.w_minus
        yield "b_minus", self.b_minus

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


@dataclass
class GrowthEvent:
    epoch: int
    layer: str
    indices: list[int]
    scaling_factor: float
    param_delta: int

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "layer": self.layer, "indices": list(self.indices),
                "scaling_factor": self.scaling_factor, "param_delta": self.param_delta}


def branch_forward(branch: GrowthBranch, x: Tensor, base_out: Tensor,
                   cache: "SharedInputCache | None" = None) -> Tensor:
    """Add the branch contribution to the selected columns of ``base_out``."""
    if x.shape[-1] != branch.in_dim:
        raise ValueError(f"branch expects input width {branch.in_dim}, got {x.shape[-1]}")
    if branch.selected.size and branch.selected.max() >= base_out.shape[-1]:
        raise ValueError("branch selects neurons outside the host output")
    o_plus = T.linear(x, branch.w_plus, branch.b_plus, cache)
    o_minus = T.linear(x, branch.w_minus, branch.b_minus, cache)
    s = o_plus + o_minus
    return T.scatter_add(base_out, branch.selected, T.gelu(s) + s)


def _check_indices(indices: Iterable[int], out_dim: int) -> np.ndarray:
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("growth needs a non-empty 1-D index set")
    if np.any(idx < 0) or np.any(idx >= out_dim):
        raise ValueError(f"neuron indices out of range [0, {out_dim})")
    if np.unique(idx).size != idx.size:
        raise ValueError("duplicate neuron indices in one growth call")
    return np.sort(idx)


def grow(layer: "GrowableLinear", indices: Sequence[int],
         scaling_factor: float = DEFAULT_SCALING_FACTOR, epoch: int = 0) -> GrowthBranch:
    """Attach a freshly initialized branch over ``indices`` to ``layer``.

    The host weights, bias and earlier branches are left untouched.
    """
    if not scaling_factor > 0:
        raise ValueError("scaling_factor must be positive")
    idx = _check_indices(indices, layer.out_dim)
    dtype = layer.weight.dtype
    w = (layer.weight.data[idx] * dtype.type(scaling_factor)).astype(dtype)
    b = (layer.bias.data[idx] * dtype.type(scaling_factor)).astype(dtype)
    branch = GrowthBranch(
        selected=idx,
        w_plus=Tensor(w.copy(), requires_grad=True, dtype=dtype),
        b_plus=Tensor(b.copy(), requires_grad=True, dtype=dtype),
        w_minus=Tensor(np.negative(w), requires_grad=True, dtype=dtype),
        b_minus=Tensor(np.negative(b), requires_grad=True, dtype=dtype),
        created_at=int(epoch),
        scaling_factor=float(scaling_factor),
    )
    layer.branches.append(branch)
    return branch


def growth_cost(in_dim: int, n_neurons: int) -> int:
    """Parameters added by growing ``n_neurons`` neurons of fan-in ``in_dim``."""
    return 2 * n_neurons * (in_dim + 1)


def _max_logit_gap(model: "Model", branch: GrowthBranch, probes: Sequence[np.ndarray]) -> float:
    worst = 0.0
    with T.no_grad():
        for x in probes:
            branch.active = False
            try:
                before = model(x).data
            finally:
                branch.active = True
            after = model(x).data
            worst = max(worst, float(np.max(np.abs(after.astype(np.float64) - before))))
    return worst


def _find_branch(model: "Model", branch: GrowthBranch) -> tuple[str, int]:
    for lay in model.linear_layers():
        for k, br in enumerate(lay.branches):
            if br is branch:
                return lay.name, k
    raise ValueError("branch is not attached to this model")


def verify_function_preservation(model: "Model", branch: GrowthBranch,
                                 probe_batches: Sequence[np.ndarray],
                                 shadow: bool = False) -> float:
    """Max |logits with branch - logits without branch| over the probes.

    With ``shadow=True`` the comparison runs on a float64 copy of the
    model, which separates float32 rounding from a real defect.
    """
    if not shadow:
        return _max_logit_gap(model, branch, probe_batches)
    name, k = _find_branch(model, branch)
    twin = model.astype(np.float64)
    twin_branch = twin.layer(name).branches[k]
    return _max_logit_gap(twin, twin_branch, [np.asarray(p, dtype=np.float64) for p in probe_batches])

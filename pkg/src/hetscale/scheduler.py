"""When to grow, which neurons, and how many.

Growth events fire after an initial warmup and then every
``scaling_interval`` epochs. At an event, layers with fewer than
``layer_threshold`` saddle-eligible neurons are dropped, the remaining
eligible neurons are pooled across layers and ranked by eigenvalue, and
the longest ranked prefix whose growth cost fits the budget is selected.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from hetscale.growth import GrowthBranch, GrowthEvent, growth_cost, grow
from hetscale.hessian import SADDLE_TOL, SplittingSpectrum
from hetscale.model import GROWABLE_ROLES, Model, param_count

log = logging.getLogger(__name__)

SELECTIONS = ("most_negative", "nearest_zero")


@dataclass
class ScheduleConfig:
    initial_warmup: int = 50
    scaling_interval: int = 30
    parameter_budget: int | None = None
    layer_threshold: int = 60
    target_params: int | None = None
    target_tolerance: int = 0
    scaling_factor: float = 0.2
    selection: str = "most_negative"
    spectrum_batches: int = 4
    spectrum_samples: int = 8
    curvature_mode: str = "auto"
    eigensolver: str = "lapack"
    eligible_roles: list[str] = field(default_factory=lambda: list(GROWABLE_ROLES))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("initial_warmup", "scaling_interval", "layer_threshold",
                     "spectrum_batches", "spectrum_samples"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.parameter_budget is not None and self.parameter_budget <= 0:
            raise ValueError("parameter_budget must be positive")
        if self.target_params is not None and self.target_params <= 0:
            raise ValueError("target_params must be positive")
        if self.target_tolerance < 0:
            raise ValueError("target_tolerance must be >= 0")
        if not self.scaling_factor > 0:
            raise ValueError("scaling_factor must be positive")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.curvature_mode not in ("auto", "strict", "hessian"):
            raise ValueError("curvature_mode must be auto, strict or hessian")
        if self.eigensolver not in ("lapack", "jacobi"):
            raise ValueError("eigensolver must be lapack or jacobi")
        bad = set(self.eligible_roles) - set(GROWABLE_ROLES)
        if bad:
            raise ValueError(f"roles {sorted(bad)} are not growth-eligible")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown schedule keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class PlanEntry:
    layer_id: str
    indices: list[int]
    eigenvalues: list[float]
    in_dim: int

    @property
    def cost(self) -> int:
        return growth_cost(self.in_dim, len(self.indices))


@dataclass
class GrowthPlan:
    event_epoch: int
    entries: list[PlanEntry] = field(default_factory=list)
    projected_param_delta: int = 0
    budget: int = 0

    @property
    def empty(self) -> bool:
        return not self.entries

    def neuron_count(self) -> int:
        return sum(len(e.indices) for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "epoch": self.event_epoch,
            "budget": self.budget,
            "projected_param_delta": self.projected_param_delta,
            "entries": [{"layer_id": e.layer_id, "indices": list(map(int, e.indices)),
                         "eigenvalues": [float(v) for v in e.eigenvalues], "in_dim": e.in_dim}
                        for e in self.entries],
        }


def event_epochs(cfg: ScheduleConfig, total_epochs: int) -> list[int]:
    """Epochs in ``[0, total_epochs)`` at which a growth event may fire."""
    return list(range(cfg.initial_warmup, total_epochs, cfg.scaling_interval))


def should_scale(epoch: int, cfg: ScheduleConfig, current_params: int | None = None) -> bool:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.initial_warmup or (epoch - cfg.initial_warmup) % cfg.scaling_interval:
        return False
    if cfg.target_params is None or current_params is None:
        return True
    return current_params < cfg.target_params - cfg.target_tolerance


def event_budget(cfg: ScheduleConfig, epoch: int, current_params: int, total_epochs: int) -> int:
    """Parameter budget for the event at ``epoch``.

    An explicit ``parameter_budget`` wins. Otherwise the distance to the
    target is split evenly over the events still to come, which equals
    ``(target - base) / events`` whenever earlier events spent their share.
    """
    if cfg.parameter_budget is not None:
        budget = cfg.parameter_budget
        if cfg.target_params is not None:
            budget = min(budget, cfg.target_params + cfg.target_tolerance - current_params)
        return max(0, int(budget))
    if cfg.target_params is None:
        raise ValueError("either parameter_budget or target_params must be set")
    remaining = [e for e in event_epochs(cfg, total_epochs) if e >= epoch]
    if not remaining:
        return 0
    return max(0, (cfg.target_params - current_params) // len(remaining))


def _rank_key(selection: str):
    if selection == "most_negative":
        return lambda c: (c[0], c[1], c[2])
    return lambda c: (-c[0], c[1], c[2])


def eligible_layers(spectra: Sequence[SplittingSpectrum], threshold: int,
                    tol: float = SADDLE_TOL) -> list[SplittingSpectrum]:
    return [s for s in spectra if s.eligible(tol).size >= threshold]


def build_plan(spectra: Sequence[SplittingSpectrum], cfg: ScheduleConfig, budget: int | None = None,
               epoch: int | None = None) -> GrowthPlan:
    """Select the longest ranked prefix of eligible neurons within budget."""
    epochs = {s.epoch for s in spectra}
    if len(epochs) > 1:
        raise ValueError(f"spectra come from different epochs: {sorted(epochs)}")
    if epoch is None:
        epoch = epochs.pop() if epochs else 0
    if budget is None:
        if cfg.parameter_budget is None:
            raise ValueError("no budget given and parameter_budget unset")
        budget = cfg.parameter_budget

    pool = []
    for spec in eligible_layers(spectra, cfg.layer_threshold):
        if spec.in_dim <= 0:
            raise ValueError(f"spectrum of {spec.layer_id} lacks in_dim; growth cost is unknown")
        cost = growth_cost(spec.in_dim, 1)
        for i in spec.eligible():
            pool.append((float(spec.min_eigvals[i]), spec.layer_id, int(i), cost, spec.in_dim))
    pool.sort(key=_rank_key(cfg.selection))

    chosen: dict[str, list[tuple[int, float]]] = {}
    in_dims: dict[str, int] = {}
    delta = 0
    for lam, lid, i, cost, in_dim in pool:
        if delta + cost > budget:
            break
        delta += cost
        chosen.setdefault(lid, []).append((i, lam))
        in_dims[lid] = in_dim

    entries = []
    for lid in sorted(chosen):
        picks = sorted(chosen[lid])
        entries.append(PlanEntry(lid, [i for i, _ in picks], [lam for _, lam in picks], in_dims[lid]))
    return GrowthPlan(event_epoch=int(epoch), entries=entries, projected_param_delta=delta,
                      budget=int(budget))


@dataclass
class ApplyReport:
    events: list[GrowthEvent]
    branches: list[GrowthBranch]
    actual_param_delta: int
    max_deviation: float | None = None


def apply_plan(model: Model, plan: GrowthPlan, cfg: ScheduleConfig,
               probes: Sequence[np.ndarray] | None = None) -> ApplyReport:
    """Grow every entry of ``plan``; the model is untouched if any entry is invalid."""
    layers = {}
    for entry in plan.entries:
        layer = model.layer(entry.layer_id)
        if not layer.growable:
            raise ValueError(f"layer {entry.layer_id} is not growth-eligible")
        idx = np.asarray(entry.indices)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= layer.out_dim or np.unique(idx).size != idx.size:
            raise ValueError(f"invalid indices for {entry.layer_id}")
        if layer.in_dim != entry.in_dim:
            raise ValueError(f"plan in_dim {entry.in_dim} != layer in_dim {layer.in_dim}")
        layers[entry.layer_id] = layer

    before_logits = None
    if probes:
        from hetscale import tensor as T
        with T.no_grad():
            before_logits = [model(x).data.copy() for x in probes]

    start = param_count(model)
    events, branches = [], []
    for entry in plan.entries:
        layer = layers[entry.layer_id]
        n0 = layer.param_count()
        br = grow(layer, entry.indices, cfg.scaling_factor, plan.event_epoch)
        branches.append(br)
        events.append(GrowthEvent(plan.event_epoch, entry.layer_id, list(map(int, br.selected)),
                                  cfg.scaling_factor, layer.param_count() - n0))
    actual = param_count(model) - start
    if actual != plan.projected_param_delta:
        raise AssertionError(f"realized delta {actual} != projected {plan.projected_param_delta}")

    deviation = None
    if probes:
        from hetscale import tensor as T
        with T.no_grad():
            deviation = max(float(np.max(np.abs(model(x).data.astype(np.float64) - b)))
                            for x, b in zip(probes, before_logits))
        log.info("event %d: grew %d neurons (+%d params), max logit deviation %.3g",
                 plan.event_epoch, plan.neuron_count(), actual, deviation)
    return ApplyReport(events, branches, actual, deviation)


def plan_log_line(plan: GrowthPlan, actual_delta: int | None, cumulative: int) -> str:
    rec = plan.to_dict()
    rec["actual_param_delta"] = actual_delta
    rec["cumulative_params"] = cumulative
    return json.dumps(rec, sort_keys=True)


def accounting_replay(layers: Sequence[tuple[str, int, int]], base_params: int,
                      cfg: ScheduleConfig, total_epochs: int, seed: int = 0) -> list[dict]:
    """Replay the budget arithmetic without a model or training.

    ``layers`` lists (layer_id, in_dim, out_dim) of growth-eligible layers.
    Every event draws fresh all-negative spectra, so selection is limited
    only by the budget. Returns one record per event that fired.
    """
    rng = np.random.default_rng(seed)
    params = base_params
    history = []
    for epoch in event_epochs(cfg, total_epochs):
        if not should_scale(epoch, cfg, params):
            continue
        spectra = [SplittingSpectrum(lid, epoch, -rng.uniform(0.01, 1.0, size=out), 0.0, 1, in_dim)
                   for lid, in_dim, out in layers]
        budget = event_budget(cfg, epoch, params, total_epochs)
        plan = build_plan(spectra, cfg, budget, epoch)
        params += plan.projected_param_delta
        history.append({"epoch": epoch, "budget": budget, "delta": plan.projected_param_delta,
                        "params": params, "neurons": plan.neuron_count()})
    return history

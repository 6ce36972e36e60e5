"""Grow-while-training experiment driver.

Each epoch trains on every batch once, then evaluates. At a growth epoch
the model is frozen before training starts: per-neuron spectra are
estimated on the last few batches of that epoch's order (which are still
trained on afterwards), a plan is built and applied, the growth is
verified, and the new parameters join the optimizer with zero moments.
Growth never adds iterations: a run always takes ``epochs * batches``
optimizer steps.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from hetscale import tensor as T
from hetscale.checkpoint import save_checkpoint
from hetscale.config import RunConfig, save_config
from hetscale.data import Dataset, Split, eval_batches, load_dataset, num_batches, train_batches
from hetscale.hessian import export_spectrum, model_spectra, negative_magnitude_median
from hetscale.model import Model, VisionTransformer, build_model, flop_estimate, param_count
from hetscale.optim import AdamW, clip_grad_norm, cosine_lr
from hetscale.scheduler import (ScheduleConfig, apply_plan, build_plan, event_budget,
                                plan_log_line, should_scale)

log = logging.getLogger(__name__)

PRESERVATION_TOL = 1e-5
LOSS_CONTINUITY_TOL = 1e-4
GRAD_FLOW_MIN = 1e-8
SHRINKAGE_RATIO = 0.5


class GrowthVerificationError(RuntimeError):
    """A growth event broke function preservation, loss continuity or gradient flow."""


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    eval_loss: float
    eval_top1: float
    eval_top5: float
    param_count: int
    flops_estimate: int
    iterations: int
    growth_event: dict | None = None
    wall_time_s: float = 0.0

    def __post_init__(self):
        if self.eval_top1 > self.eval_top5:
            raise ValueError("top-1 accuracy cannot exceed top-5")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunResult:
    model: VisionTransformer
    metrics: list[MetricsRecord]
    events: list[dict]
    base_params: int
    target_params: int | None
    iterations: int
    output_dir: Path
    shrinkage: dict | None = None
    checkpoint: Path | None = None

    @property
    def final(self) -> MetricsRecord:
        return self.metrics[-1]


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    k = min(k, logits.shape[1])
    top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    return int(np.sum(np.any(top == labels[:, None], axis=1)))


def evaluate(model: Model, split: Split, batch_size: int = 256) -> tuple[float, float, float]:
    """Mean cross-entropy, top-1 and top-5 accuracy over a split."""
    loss_sum, c1, c5 = 0.0, 0, 0
    with T.no_grad():
        for x, y in eval_batches(split, batch_size):
            logits = model(x)
            loss_sum += float(T.cross_entropy(logits, y, reduction="sum").data)
            c1 += topk_correct(logits.data, y, 1)
            c5 += topk_correct(logits.data, y, 5)
    n = len(split)
    return loss_sum / n, c1 / n, c5 / n


def batch_loss(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    with T.no_grad():
        return float(T.cross_entropy(model(x), y).data)


class Trainer:
    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.data = dataset if dataset is not None else load_dataset(cfg.dataset)
        self.model = build_model(cfg.model, seed=cfg.seed)
        self.base_params = param_count(self.model)

        sched = cfg.schedule
        if cfg.target_multiple is not None:
            sched = replace(sched, target_params=int(round(cfg.target_multiple * self.base_params)))
        self.schedule: ScheduleConfig = sched

        self.batches_per_epoch = num_batches(len(self.data.train), cfg.batch_size)
        if self.batches_per_epoch == 0:
            raise ValueError("training split is smaller than one batch")
        self.total_steps = cfg.epochs * self.batches_per_epoch
        self.warmup_steps = cfg.lr_schedule.warmup_epochs * self.batches_per_epoch
        self.base_lr = cfg.optimizer.base_lr(cfg.batch_size)
        opt = cfg.optimizer
        self.optimizer = AdamW(self.model.named_parameters(), lr=self.base_lr, betas=opt.betas,
                               eps=opt.eps, weight_decay=opt.weight_decay)
        self.iterations = 0
        self.events: list[dict] = []
        self.saddle_medians: list[tuple[int, float]] = []

    # -- training ------------------------------------------------------------

    def train_step(self, x: np.ndarray, y: np.ndarray) -> float:
        self.optimizer.lr = cosine_lr(self.iterations, self.total_steps, self.warmup_steps,
                                      self.base_lr, self.cfg.lr_schedule.min_lr)
        self.model.zero_grad()
        loss = T.cross_entropy(self.model(x), y)
        T.backward(loss)
        if self.cfg.grad_clip is not None:
            clip_grad_norm(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.iterations += 1
        return float(loss.data)

    def _growth_enabled(self) -> bool:
        s = self.schedule
        return self.cfg.growth_enabled and (s.parameter_budget is not None or s.target_params is not None)

    # -- growth --------------------------------------------------------------

    def _dump_failure(self, epoch: int, info: dict) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"growth_failure_epoch{epoch}.json"
        path.write_text(json.dumps(info, indent=2, sort_keys=True, default=str))
        return path

    def growth_event(self, epoch: int, batches: list[tuple[np.ndarray, np.ndarray]]) -> dict:
        s = self.schedule
        held = batches[-s.spectrum_batches:]
        probe_x, probe_y = held[0]
        loss_before = batch_loss(self.model, probe_x, probe_y)

        layer_ids = [lay.name for lay in self.model.growable_layers() if lay.role in s.eligible_roles]
        t0 = time.perf_counter()
        spectra = model_spectra(self.model, held, epoch, layer_ids=layer_ids,
                                max_batches=len(held), mode=s.curvature_mode, solver=s.eigensolver,
                                fallback_samples=s.spectrum_samples)
        spectra_time = time.perf_counter() - t0
        median = negative_magnitude_median(spectra)
        self.saddle_medians.append((epoch, median))
        if self.cfg.export_spectra and spectra:
            export_spectrum(spectra, self.out)

        current = param_count(self.model)
        budget = event_budget(s, epoch, current, self.cfg.epochs)
        plan = build_plan(spectra, s, budget, epoch)
        summary = {"epoch": epoch, "budget": budget, "neurons": plan.neuron_count(),
                   "layers": [e.layer_id for e in plan.entries],
                   "projected_param_delta": plan.projected_param_delta,
                   "median_negative_eigval": median}
        log.info("epoch %d: spectra for %d layers took %.1f s", epoch, len(spectra), spectra_time)
        if plan.empty:
            log.info("epoch %d: empty growth plan (budget %d)", epoch, budget)
            summary.update(actual_param_delta=0, loss_before=loss_before, loss_after=loss_before)
            self._log_plan(plan, 0)
            return summary

        report = apply_plan(self.model, plan, s, probes=[probe_x])
        loss_after = batch_loss(self.model, probe_x, probe_y)

        self.model.zero_grad()
        T.backward(T.cross_entropy(self.model(probe_x), probe_y))
        grad_norms = [min(float(np.linalg.norm(br.w_plus.grad)), float(np.linalg.norm(br.w_minus.grad)))
                      for br in report.branches]
        self.model.zero_grad()

        summary.update(actual_param_delta=report.actual_param_delta, loss_before=loss_before,
                       loss_after=loss_after, max_logit_deviation=report.max_deviation,
                       min_branch_grad_norm=min(grad_norms))
        problems = []
        if report.max_deviation > PRESERVATION_TOL:
            problems.append(f"logit deviation {report.max_deviation:.3g} > {PRESERVATION_TOL}")
        if abs(loss_after - loss_before) > LOSS_CONTINUITY_TOL:
            problems.append(f"loss jump {abs(loss_after - loss_before):.3g} > {LOSS_CONTINUITY_TOL}")
        if min(grad_norms) <= GRAD_FLOW_MIN:
            problems.append(f"branch gradient norm {min(grad_norms):.3g} <= {GRAD_FLOW_MIN}")
        if problems:
            dump = self._dump_failure(epoch, {**summary, "problems": problems, "plan": plan.to_dict()})
            raise GrowthVerificationError(f"growth at epoch {epoch} failed: {'; '.join(problems)} "
                                          f"(diagnostics in {dump})")

        self.optimizer.add_params(self.model.named_parameters())
        self._log_plan(plan, report.actual_param_delta)
        return summary

    def _log_plan(self, plan, actual: int) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "plans.jsonl", "a") as fh:
            fh.write(plan_log_line(plan, actual, param_count(self.model)) + "\n")

    def _shrinkage_report(self) -> dict | None:
        if len(self.saddle_medians) < 2:
            return None
        (e0, first), (e1, last) = self.saddle_medians[0], self.saddle_medians[-1]
        ratio = last / first if first > 0 else float("nan")
        report = {"first_event": e0, "first_median": first, "final_event": e1, "final_median": last,
                  "ratio": ratio, "threshold": SHRINKAGE_RATIO,
                  "shrunk": bool(np.isfinite(ratio) and ratio <= SHRINKAGE_RATIO),
                  "medians": [{"epoch": e, "median": m} for e, m in self.saddle_medians]}
        (self.out / "saddle_shrinkage.json").write_text(json.dumps(report, indent=2))
        if not report["shrunk"]:
            msg = (f"median |negative eigenvalue| went from {first:.4g} (epoch {e0}) to {last:.4g} "
                   f"(epoch {e1}); ratio {ratio:.3g} exceeds {SHRINKAGE_RATIO}")
            (self.out / "saddle_shrinkage_WARNING.txt").write_text(msg + "\n")
            log.warning(msg)
        return report

    # -- driver --------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self.out / "config.yaml")
        for stale in ("metrics.jsonl", "plans.jsonl"):
            (self.out / stale).unlink(missing_ok=True)
        metrics: list[MetricsRecord] = []
        start = time.perf_counter()
        for epoch in range(cfg.epochs):
            batches = list(train_batches(self.data.train, cfg.batch_size, cfg.seed, epoch,
                                         cfg.dataset.hflip))
            event = None
            if self._growth_enabled() and should_scale(epoch, self.schedule, param_count(self.model)):
                event = self.growth_event(epoch, batches)
                self.events.append(event)
            losses = [self.train_step(x, y) for x, y in batches]
            eval_loss, top1, top5 = evaluate(self.model, self.data.eval, cfg.eval_batch_size)
            rec = MetricsRecord(
                epoch=epoch, train_loss=float(np.mean(losses)), eval_loss=eval_loss,
                eval_top1=top1, eval_top5=top5, param_count=param_count(self.model),
                flops_estimate=flop_estimate(self.model), iterations=self.iterations,
                growth_event=event, wall_time_s=round(time.perf_counter() - start, 3))
            metrics.append(rec)
            with open(self.out / "metrics.jsonl", "a") as fh:
                fh.write(rec.to_json() + "\n")
            log.info("epoch %d loss %.4f top1 %.3f params %d", epoch, rec.train_loss, top1,
                     rec.param_count)

        expected = cfg.epochs * self.batches_per_epoch
        if self.iterations != expected:
            raise AssertionError(f"ran {self.iterations} iterations, expected {expected}")
        shrink = self._shrinkage_report()
        ckpt = save_checkpoint(self.out / "final.ckpt", self.model, epoch=cfg.epochs,
                               run_config=cfg.to_dict(), growth_history=self.events,
                               optimizer=self.optimizer)
        return RunResult(self.model, metrics, self.events, self.base_params,
                         self.schedule.target_params, self.iterations, self.out, shrink, ckpt)


def train(cfg: RunConfig, dataset: Dataset | None = None) -> RunResult:
    return Trainer(cfg, dataset).run()

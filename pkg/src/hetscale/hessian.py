"""Per-neuron curvature of the loss with respect to a neuron's fan-in weights.

For a neuron followed by a GeLU, ``sigma = gelu(w.x + b)``, the splitting
matrix keeps only the curvature of the activation itself:

    S = (1/N) sum_n  dL/dsigma_n * gelu''(z_n) * x_n x_n^T

summed over every token the neuron fires on. Neurons without an
elementwise nonlinearity (QKV, projection, FC2) have ``sigma'' = 0``, so
that matrix is identically zero. For them the default is the exact
fan-in block of the loss Hessian, ``d^2 L / dw_i^2``, which carries the
curvature coming through softmax, GeLU and the loss downstream.

The block Hessian is assembled in activation space: a central-difference
Hessian-vector product on an additive probe at the layer output gives the
token-by-token curvature ``A_n`` of each sample's loss with respect to one
neuron's outputs, and because ``o = W x + b`` is linear in the weight row,
``d^2 L / dw_i^2 = sum_n X_n^T A_n[i] X_n``. Each probe row carries one
(sample, neuron, token) direction, so a single batched HVP yields many
rows at once.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hetscale import tensor as T
from hetscale.eigen import jacobi_eigh
from hetscale.model import GrowableLinear, LayerTrace, Model
from hetscale.tensor import Tensor, gelu_second_np

SADDLE_TOL = 1e-6

Batch = tuple[np.ndarray, np.ndarray]


@dataclass
class SplittingSpectrum:
    """Smallest splitting-matrix eigenvalue of every neuron in one layer."""

    layer_id: str
    epoch: int
    min_eigvals: np.ndarray
    negative_mass: float
    batch_count: int
    in_dim: int = 0
    role: str = ""
    source: str = "splitting"

    def __post_init__(self):
        self.min_eigvals = np.asarray(self.min_eigvals, dtype=np.float32)

    @property
    def out_dim(self) -> int:
        return int(self.min_eigvals.size)

    def eligible(self, tol: float = SADDLE_TOL) -> np.ndarray:
        """Indices of neurons carrying a saddle signal (min eigenvalue < -tol)."""
        return np.nonzero(self.min_eigvals < -tol)[0]

    def scaled(self, c: float) -> "SplittingSpectrum":
        return SplittingSpectrum(self.layer_id, self.epoch, self.min_eigvals * np.float32(c),
                                 self.negative_mass * c, self.batch_count, self.in_dim,
                                 self.role, self.source)


# ---------------------------------------------------------------------------
# GeLU-fronted neurons
# ---------------------------------------------------------------------------


def gelu_splitting_matrices(x: np.ndarray, z: np.ndarray, g: np.ndarray,
                            neurons: Sequence[int] | None = None) -> np.ndarray:
    """Unnormalized ``sum_r g[r,i] gelu''(z[r,i]) x[r] x[r]^T`` per neuron.

    ``x`` is (rows, in_dim); ``z`` and ``g`` are (rows, out_dim). Returns
    (len(neurons), in_dim, in_dim) in float64.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
    z = np.asarray(z, dtype=np.float64).reshape(x.shape[0], -1)
    g = np.asarray(g, dtype=np.float64).reshape(x.shape[0], -1)
    idx = np.arange(z.shape[1]) if neurons is None else np.asarray(neurons)
    coef = g[:, idx] * gelu_second_np(z[:, idx])
    out = np.empty((idx.size, x.shape[1], x.shape[1]))
    step = max(1, int(2 ** 22 // max(1, x.size)))
    for s in range(0, idx.size, step):
        c = coef[:, s:s + step]
        out[s:s + step] = np.einsum("rk,ra,rb->kab", c, x, x, optimize=True)
    return out


def _traced_pass(model: Model, layer: GrowableLinear, images, labels, loss_scale: float):
    layer.trace = LayerTrace()
    try:
        logits = model(images)
        loss = T.cross_entropy(logits, labels, reduction="sum") * loss_scale
        T.backward(loss)
        return layer.trace
    finally:
        layer.trace = None


def _strict_matrices(model: Model, layer: GrowableLinear, batches: Sequence[Batch],
                     loss_scale: float, neurons) -> tuple[np.ndarray, int]:
    total = None
    n = 0
    for images, labels in batches:
        if layer.activation == "gelu":
            tr = _traced_pass(model, layer, images, labels, loss_scale)
            mats = gelu_splitting_matrices(tr.x, tr.z, tr.post.grad, neurons)
        else:
            k = layer.out_dim if neurons is None else len(neurons)
            mats = np.zeros((k, layer.in_dim, layer.in_dim))
        total = mats if total is None else total + mats
        n += len(labels)
    model.zero_grad()
    return total / n, n


# ---------------------------------------------------------------------------
# Linear-output neurons: exact fan-in block Hessian
# ---------------------------------------------------------------------------


def activation_curvature(model: Model, layer: GrowableLinear, images: np.ndarray,
                         labels: np.ndarray, neurons: Sequence[int] | None = None,
                         loss_scale: float = 1.0, chunk_rows: int = 2048) -> np.ndarray:
    """Second derivatives of each sample's loss w.r.t. one neuron's outputs.

    Returns ``A`` of shape (samples, len(neurons), tokens, tokens) with
    ``A[n, k, t, s] = d^2 loss_n / d o[n, t, i_k] d o[n, s, i_k]``.
    """
    probe_shape = _output_shape(model, layer, images[:1])[1:]
    tokens = probe_shape[0] if len(probe_shape) == 2 else 1
    idx = np.arange(layer.out_dim) if neurons is None else np.asarray(neurons)
    n_samples = len(labels)
    combos = idx.size * tokens
    curv = np.zeros((n_samples, idx.size, tokens, tokens), dtype=np.float64)
    total_rows = n_samples * combos
    stages = model.stages_for(layer)
    if stages is not None:
        prefix, run = stages
        inputs = prefix(images)
    else:
        inputs, run = images, model

    for r0 in range(0, total_rows, chunk_rows):
        rows = np.arange(r0, min(total_rows, r0 + chunk_rows))
        sample = rows // combos
        combo = rows % combos
        k = combo // tokens
        tok = combo % tokens
        batch_x = inputs[sample]
        batch_y = labels[sample]
        shape = (rows.size, tokens, layer.out_dim)
        v = np.zeros(shape, dtype=model.dtype)
        v[np.arange(rows.size), tok, idx[k]] = 1.0

        def loss_fn(p: Tensor) -> Tensor:
            layer.probe = p.reshape((rows.size,) + probe_shape)
            try:
                logits = run(batch_x)
            finally:
                layer.probe = None
            return T.cross_entropy(logits, batch_y, reduction="sum") * loss_scale

        hv = T.hvp(loss_fn, np.zeros(v.size, dtype=model.dtype), v.reshape(-1)).reshape(shape)
        col = hv[np.arange(rows.size), :, idx[k]]  # (rows, tokens)
        curv[sample, k, :, tok] = col
    model.zero_grad()
    return 0.5 * (curv + np.swapaxes(curv, -1, -2))


def _output_shape(model: Model, layer: GrowableLinear, images) -> tuple[int, ...]:
    layer.trace = LayerTrace()
    try:
        with T.no_grad():
            model(images)
        return layer.trace.z.shape
    finally:
        layer.trace = None


def _layer_inputs(model: Model, layer: GrowableLinear, images) -> np.ndarray:
    layer.trace = LayerTrace()
    try:
        with T.no_grad():
            model(images)
        x = layer.trace.x
    finally:
        layer.trace = None
    return x.reshape(x.shape[0], -1, x.shape[-1]).astype(np.float64)


def block_hessian_matrices(model: Model, layer: GrowableLinear, images: np.ndarray,
                           labels: np.ndarray, neurons: Sequence[int] | None = None,
                           loss_scale: float = 1.0) -> np.ndarray:
    """Unnormalized ``sum_n d^2 loss_n / dw_i^2`` for each neuron ``i``."""
    curv = activation_curvature(model, layer, images, labels, neurons, loss_scale)
    x = _layer_inputs(model, layer, images)  # (n, tokens, in)
    y = np.einsum("nkts,nsb->nktb", curv, x)
    return np.einsum("nta,nktb->kab", x, y, optimize=True)


def _fallback_matrices(model: Model, layer: GrowableLinear, batches: Sequence[Batch],
                       loss_scale: float, neurons, max_samples: int | None) -> tuple[np.ndarray, int]:
    xs = np.concatenate([b[0] for b in batches])
    ys = np.concatenate([b[1] for b in batches])
    if max_samples is not None:
        xs, ys = xs[:max_samples], ys[:max_samples]
    mats = block_hessian_matrices(model, layer, xs, ys, neurons, loss_scale)
    return mats / len(ys), len(ys)


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def _shadow(model: Model) -> Model:
    return model if model.dtype == np.float64 else model.astype(np.float64)


def _select_batches(batches: Sequence[Batch], max_batches: int | None) -> list[Batch]:
    batches = list(batches)
    if max_batches is not None:
        if max_batches > len(batches):
            raise ValueError(f"requested {max_batches} batches but only {len(batches)} available")
        batches = batches[:max_batches]
    if not batches:
        raise ValueError("no batches supplied")
    return [(np.asarray(x, dtype=np.float64), np.asarray(y)) for x, y in batches]


def uses_fallback(layer: GrowableLinear, mode: str) -> bool:
    if mode not in ("auto", "strict", "hessian"):
        raise ValueError(f"unknown curvature mode {mode!r}")
    if mode == "strict":
        return False
    if mode == "hessian":
        return True
    return layer.activation != "gelu"


def splitting_matrices(model: Model, layer_id: str, batches: Sequence[Batch],
                       max_batches: int | None = None, mode: str = "auto",
                       neurons: Sequence[int] | None = None, loss_scale: float = 1.0,
                       fallback_samples: int | None = None) -> np.ndarray:
    """Per-neuron curvature matrices (k, in_dim, in_dim) for one layer.

    ``mode``: ``"auto"`` uses the splitting matrix for GeLU-fronted
    neurons and the fan-in block Hessian otherwise; ``"strict"`` always
    uses the splitting matrix (zero for linear neurons); ``"hessian"``
    always uses the block Hessian.
    """
    shadow = _shadow(model)
    layer = shadow.layer(layer_id)
    if neurons is not None:
        neurons = np.asarray(neurons)
        if neurons.size and (neurons.min() < 0 or neurons.max() >= layer.out_dim):
            raise ValueError(f"neuron index out of range [0, {layer.out_dim})")
    chosen = _select_batches(batches, max_batches)
    if uses_fallback(layer, mode):
        mats, _ = _fallback_matrices(shadow, layer, chosen, loss_scale, neurons, fallback_samples)
    else:
        mats, _ = _strict_matrices(shadow, layer, chosen, loss_scale, neurons)
    if not np.all(np.isfinite(mats)):
        raise FloatingPointError(f"non-finite curvature accumulated for {layer_id}")
    return 0.5 * (mats + np.swapaxes(mats, -1, -2))


def splitting_matrix(model: Model, layer_id: str, neuron: int, batches: Sequence[Batch],
                     **kwargs) -> np.ndarray:
    return splitting_matrices(model, layer_id, batches, neurons=[neuron], **kwargs)[0]


def _eigvals(mats: np.ndarray, solver: str) -> np.ndarray:
    if solver == "lapack":
        return np.linalg.eigvalsh(mats)
    if solver == "jacobi":
        return jacobi_eigh(mats)
    raise ValueError(f"unknown eigensolver {solver!r}")


def layer_spectrum(model: Model, layer_id: str, batches: Sequence[Batch], epoch: int = 0,
                   max_batches: int | None = 4, mode: str = "auto", solver: str = "lapack",
                   loss_scale: float = 1.0, fallback_samples: int | None = 8) -> SplittingSpectrum:
    """Smallest eigenvalue of every neuron's curvature matrix in a layer."""
    shadow = _shadow(model)
    chosen = _select_batches(batches, max_batches)
    mats = splitting_matrices(shadow, layer_id, chosen, None, mode=mode, loss_scale=loss_scale,
                              fallback_samples=fallback_samples)
    evals = _eigvals(mats, solver)
    layer = shadow.layer(layer_id)
    neg = evals[evals < 0]
    return SplittingSpectrum(
        layer_id=layer_id, epoch=int(epoch), min_eigvals=evals[:, 0],
        negative_mass=float(-neg.sum()), batch_count=len(chosen),
        in_dim=layer.in_dim, role=layer.role,
        source="block_hessian" if uses_fallback(layer, mode) else "splitting",
    )


def model_spectra(model: Model, batches: Sequence[Batch], epoch: int = 0,
                  layer_ids: Iterable[str] | None = None, **kwargs) -> list[SplittingSpectrum]:
    """Spectra for every growth-eligible layer (or the given ones)."""
    shadow = _shadow(model)
    if layer_ids is None:
        layer_ids = [lay.name for lay in shadow.growable_layers()]
    return [layer_spectrum(shadow, lid, batches, epoch, **kwargs) for lid in layer_ids]


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

CSV_FIELDS = ("epoch", "layer_id", "neuron_index", "min_eigval", "source", "in_dim")


def _safe_name(layer_id: str) -> str:
    return layer_id.replace(os.sep, "_")


def write_spectrum_csv(spec: SplittingSpectrum, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for i, lam in enumerate(spec.min_eigvals):
            w.writerow([spec.epoch, spec.layer_id, i, f"{float(lam):.9g}", spec.source, spec.in_dim])


def read_spectrum_csv(path: str | os.PathLike) -> list[SplittingSpectrum]:
    """Parse a spectrum CSV back into one spectrum per (epoch, layer)."""
    groups: dict[tuple[int, str], dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["epoch"]), row["layer_id"])
            g = groups.setdefault(key, {"vals": {}, "source": row.get("source") or "splitting",
                                        "in_dim": int(row.get("in_dim") or 0)})
            if int(row["neuron_index"]) in g["vals"]:
                raise ValueError(f"{path}: duplicate neuron {row['neuron_index']} for {key}")
            g["vals"][int(row["neuron_index"])] = np.float32(float(row["min_eigval"]))
    out = []
    for (epoch, lid), g in groups.items():
        n = max(g["vals"]) + 1
        if len(g["vals"]) != n:
            raise ValueError(f"{path}: neuron indices of {lid} are not contiguous from 0")
        vals = np.array([g["vals"][i] for i in range(n)], dtype=np.float32)
        neg = vals[vals < 0]
        out.append(SplittingSpectrum(lid, epoch, vals, float(-neg.astype(np.float64).sum()), 0,
                                     in_dim=g["in_dim"], source=g["source"]))
    return out


def spectrum_svg(spec: SplittingSpectrum, width: int = 640, height: int = 360) -> str:
    """Scatter of |eigenvalue| against neuron index for negative neurons."""
    margin_l, margin_r, margin_t, margin_b = 70, 20, 40, 45
    pw, ph = width - margin_l - margin_r, height - margin_t - margin_b
    idx = np.nonzero(spec.min_eigvals < 0)[0]
    mags = -spec.min_eigvals[idx].astype(np.float64)
    n = max(1, spec.out_dim - 1)
    top = float(mags.max()) if mags.size else 1.0
    top = top if top > 0 else 1.0
    x0, y0 = margin_l, margin_t + ph
    note = " (block Hessian)" if spec.source == "block_hessian" else ""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{spec.layer_id}, epoch {spec.epoch}{note}</text>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{margin_t}" stroke="black"/>',
        f'<text x="{x0}" y="{y0 + 18}" font-family="sans-serif" font-size="11">0</text>',
        f'<text x="{x0 + pw}" y="{y0 + 18}" text-anchor="end" font-family="sans-serif" '
        f'font-size="11">{spec.out_dim - 1}</text>',
        f'<text x="{x0 + pw / 2}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">neuron index</text>',
        f'<text x="{x0 - 6}" y="{margin_t + 4}" text-anchor="end" font-family="sans-serif" '
        f'font-size="11">{top:.3g}</text>',
        f'<text x="{x0 - 6}" y="{y0}" text-anchor="end" font-family="sans-serif" '
        f'font-size="11">0</text>',
        f'<text x="16" y="{margin_t + ph / 2}" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {margin_t + ph / 2})" text-anchor="middle">'
        f'|negative eigenvalue|</text>',
    ]
    for i, m in zip(idx, mags):
        cx = x0 + pw * (i / n)
        cy = y0 - ph * (m / top)
        parts.append(f'<circle class="point" cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" fill="#1f77b4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_spectrum(spectra: Sequence[SplittingSpectrum], path: str | os.PathLike) -> list[Path]:
    """Write ``{path}/spectra/{epoch}/{layer_id}.csv`` and ``.svg`` per spectrum."""
    if not spectra:
        raise ValueError("no spectra to export")
    written = []
    for spec in spectra:
        d = Path(path) / "spectra" / str(spec.epoch)
        d.mkdir(parents=True, exist_ok=True)
        base = d / _safe_name(spec.layer_id)
        csv_path = base.with_name(base.name + ".csv")
        svg_path = base.with_name(base.name + ".svg")
        write_spectrum_csv(spec, csv_path)
        svg_path.write_text(spectrum_svg(spec))
        written += [csv_path, svg_path]
    return written


def negative_magnitude_median(spectra: Sequence[SplittingSpectrum]) -> float:
    """Median |min eigenvalue| over negative neurons of all given layers."""
    vals = np.concatenate([-s.min_eigvals[s.min_eigvals < 0] for s in spectra] or [np.zeros(0)])
    return float(np.median(vals)) if vals.size else 0.0

"""Corpus- and model-level Ske-score reports, sweeps, and ablation runners."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import torch

from . import data
from .generator import CoupledGenerator, generate_batch
from .strokes import Sketch, SketchDataset, is_degenerate_score, ske_score, sketch_polylines, svg_polyline
from .errors import EmptyDatasetError

#: A sampler draws ``count`` unconditional sketches at temperature ``tau``.
SketchSampler = Callable[[int, float, torch.Generator], list[Sketch]]


@dataclass
class SkeScoreReport:
    mean: float
    std: float
    n: int
    degenerate_count: int = 0

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f} (n={self.n}, degenerate={self.degenerate_count})"


def score_sketches(sketches: Sequence[Sketch]) -> SkeScoreReport:
    """Mean/population-std of per-sketch scores; degenerates are counted but
    excluded from the statistics."""
    scores = []
    degenerate = 0
    for sketch in sketches:
        if is_degenerate_score(sketch):
            degenerate += 1
        else:
            scores.append(ske_score(sketch))
    if not scores:
        raise EmptyDatasetError("every sketch is degenerate (no on-paper points)")
    mean = sum(scores) / len(scores)
    var = sum((s - mean) ** 2 for s in scores) / len(scores)
    return SkeScoreReport(mean=mean, std=math.sqrt(var), n=len(scores), degenerate_count=degenerate)


def dataset_ske_score(dataset: SketchDataset) -> SkeScoreReport:
    if not dataset.sketches:
        raise EmptyDatasetError("cannot score an empty dataset")
    return score_sketches(dataset.sketches)


def model_ske_score(
    sampler: SketchSampler, n_samples: int, tau: float, rng: torch.Generator
) -> SkeScoreReport:
    return score_sketches(sampler(n_samples, tau, rng))


def goodness(report_d: SkeScoreReport, report_m: SkeScoreReport, epsilon: float = 0.05) -> bool:
    """True when the model's mean Ske-score is within epsilon of the data's."""
    return abs(report_d.mean - report_m.mean) < epsilon


def skegan_sampler(model: CoupledGenerator, n_max: int) -> SketchSampler:
    def sample(count: int, tau: float, rng: torch.Generator) -> list[Sketch]:
        rows = generate_batch(model, count, tau, n_max, rng)
        return [data.tensor_to_sketch(rows[i]) for i in range(count)]

    return sample


def vaskegan_sampler(state) -> SketchSampler:
    """Unconditional sampler for the VAE-GAN model: prior z, free-run decode."""
    from .vaskegan import free_run_decode

    def sample(count: int, tau: float, rng: torch.Generator) -> list[Sketch]:
        z = torch.randn(count, state.cfg.n_z, generator=rng, dtype=state.model.dtype)
        with torch.no_grad():
            rows = free_run_decode(state.model, z, state.n_max, rng=rng, tau=tau)
        return [data.tensor_to_sketch(rows[i]) for i in range(count)]

    return sample


def render_grid_svg(
    grid: list[list[Sketch]], cell_size: float = 120.0, stroke_width: float = 1.5
) -> str:
    """One SVG document laying sketches out row by row, polylines only."""
    n_rows = len(grid)
    n_cols = max((len(row) for row in grid), default=0)
    width, height = n_cols * cell_size, n_rows * cell_size
    margin = 0.08 * cell_size
    lines = []
    for r, row in enumerate(grid):
        for c, sketch in enumerate(row):
            polys = _fit_cell(sketch_polylines(sketch), cell_size, margin)
            for poly in polys:
                shifted = [(x + c * cell_size, y + r * cell_size) for x, y in poly]
                lines.append(svg_polyline(shifted, stroke_width))
    header = (
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'viewBox="0 0 {width:g} {height:g}" width="{width:g}" height="{height:g}">'
    )
    if not lines:
        return header + "</svg>\n"
    return header + "\n" + "\n".join(lines) + "\n</svg>\n"


def _fit_cell(polylines, cell: float, margin: float):
    if not polylines:
        return []
    xs = [x for line in polylines for x, _ in line]
    ys = [y for line in polylines for _, y in line]
    min_x, max_x, min_y, max_y = min(xs), max(xs), min(ys), max(ys)
    extent = max(max_x - min_x, max_y - min_y)
    avail = cell - 2 * margin
    scale = avail / extent if extent > 0 else 1.0
    off_x = margin + (avail - (max_x - min_x) * scale) / 2 - min_x * scale
    off_y = margin + (avail - (max_y - min_y) * scale) / 2 - min_y * scale
    return [[(x * scale + off_x, y * scale + off_y) for x, y in line] for line in polylines]


def temperature_sweep(
    sampler: SketchSampler,
    taus: Sequence[float],
    count: int,
    rng: torch.Generator,
) -> tuple[str, dict[float, SkeScoreReport]]:
    """One grid row of samples per temperature, plus a report per temperature."""
    if any(t <= 0 for t in taus):
        raise ValueError("temperatures must be positive")
    grid = []
    reports = {}
    for tau in taus:
        sketches = sampler(count, tau, rng)
        grid.append(sketches)
        reports[tau] = score_sketches(sketches)
    return render_grid_svg(grid), reports


def format_report_table(rows: dict[str, SkeScoreReport]) -> str:
    name_width = max((len(k) for k in rows), default=5)
    out = [f"{'model':<{name_width}}  ske-score"]
    for name, report in rows.items():
        out.append(f"{name:<{name_width}}  {report}")
    return "\n".join(out)


def pg_weight_ablation(
    dataset: SketchDataset,
    weights: Sequence[float],
    cfg,
    seed: int = 0,
    n_samples: int = 200,
    tau: float = 1.0,
) -> dict[float, SkeScoreReport]:
    """Train one model per policy-gradient weight and score each."""
    from .training import init_skegan, train_skegan

    results = {}
    for weight in weights:
        run_cfg = replace(cfg, pg_loss_weight=weight)
        state = init_skegan(dataset, run_cfg, seed=seed)
        train_skegan(state)
        sampler = skegan_sampler(state.generator, state.n_max)
        rng = torch.Generator().manual_seed(seed + 97)
        results[weight] = model_ske_score(sampler, n_samples, tau, rng)
    return results

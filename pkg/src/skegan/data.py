"""Tensor views of sketch datasets and batch assembly for training."""

from __future__ import annotations

from typing import Optional

import torch

from .strokes import END_TOKEN, START_TOKEN, Sketch, SketchDataset, StrokePoint5

Tensor = torch.Tensor


def start_token(dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.tensor(list(START_TOKEN), dtype=dtype)


def end_token(dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.tensor(list(END_TOKEN), dtype=dtype)


def dataset_to_tensor(dataset: SketchDataset, dtype: torch.dtype = torch.float32) -> Tensor:
    """(N, n_max+1, 5) tensor of the padded stroke-5 sequences."""
    if not dataset.sketches:
        return torch.zeros(0, dataset.n_max + 1, 5, dtype=dtype)
    rows = [[list(pt) for pt in sketch.points] for sketch in dataset.sketches]
    return torch.tensor(rows, dtype=dtype)


def sketch_to_tensor(sketch: Sketch, dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.tensor([list(pt) for pt in sketch.points], dtype=dtype)


def tensor_to_sketch(seq: Tensor, label: str = "") -> Sketch:
    """Inverse of sketch_to_tensor; rounds the one-hot columns to ints."""
    points = tuple(
        StrokePoint5(float(r[0]), float(r[1]), int(round(float(r[2]))), int(round(float(r[3]))), int(round(float(r[4]))))
        for r in seq.detach().cpu().tolist()
    )
    return Sketch(points=points, label=label)


def pad_points_tensor(points: Tensor, total_len: int) -> Tensor:
    """Pad (or truncate) a (T, 5) point tensor to ``total_len`` with end tokens."""
    t = points.shape[0]
    if t >= total_len:
        return points[:total_len]
    pad = end_token(points.dtype).expand(total_len - t, 5)
    return torch.cat([points, pad], dim=0)


def prepend_start(batch: Tensor) -> Tensor:
    """Prepend the start token along time: (B, T, 5) -> (B, T+1, 5)."""
    s0 = start_token(batch.dtype).expand(batch.shape[0], 1, 5)
    return torch.cat([s0, batch], dim=1)


def sample_batch(
    data: Tensor, batch_size: int, generator: Optional[torch.Generator] = None
) -> Tensor:
    """Sample ``batch_size`` rows with replacement."""
    idx = torch.randint(0, data.shape[0], (batch_size,), generator=generator)
    return data[idx]


def real_point_counts(batch: Tensor) -> Tensor:
    """Number of pre-end points per sequence in a (B, T, 5) batch."""
    ended = batch[:, :, 4] > 0.5
    any_end = ended.any(dim=1)
    first_end = torch.argmax(ended.to(torch.int64), dim=1)
    return torch.where(any_end, first_end, torch.full_like(first_end, batch.shape[1]))


def teacher_forcing_views(batch: Tensor, n_max: int) -> tuple[Tensor, Tensor]:
    """Inputs and targets for likelihood training.

    Targets are the first ``n_max`` positions of the padded sequence; inputs
    are the start token followed by the first ``n_max - 1`` targets, so the
    model sees the true previous tuple at every step.
    """
    targets = batch[:, :n_max]
    inputs = prepend_start(targets[:, : n_max - 1])
    return inputs, targets

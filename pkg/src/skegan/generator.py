"""Coupled sketch generator: offset LSTM, gated pen-state path, output heads.

The generator is a pair: an LSTM that consumes the previous 5-tuple and
models offsets through a bivariate-GMM head, and a pen-state path whose
hidden/cell state is updated purely by learned sigmoid blend gates mixing
the offset LSTM's fresh state into the previous pen state. The pen head
reads the blended hidden state. Parameter names are split into the
``offsets.`` group (trained adversarially / by likelihood) and the ``pen.``
group (trained by policy gradients / by likelihood).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from . import data
from .errors import NonFiniteError
from .strokes import END_TOKEN, Sketch, StrokePoint5
from .substrate import LSTMCell, ParamStore, Tensor, assert_finite

LOG_DENSITY_FLOOR = 1e-20

# tanh saturates to exactly +-1.0 in float32 for |x| > ~9, which would zero
# the bivariate density denominator; keep rho strictly inside (-1, 1).
RHO_LIMIT = 1.0 - 1e-6


@dataclass
class CoupledGenState:
    """Recurrent state of both generator halves. All four are (B, H)."""

    offsets_h: Tensor
    offsets_c: Tensor
    pen_h: Tensor
    pen_c: Tensor

    def detach(self) -> "CoupledGenState":
        return CoupledGenState(
            self.offsets_h.detach().clone(),
            self.offsets_c.detach().clone(),
            self.pen_h.detach().clone(),
            self.pen_c.detach().clone(),
        )

    def expand(self, n: int) -> "CoupledGenState":
        """Replicate a batch-of-one state n times (for rollout branching)."""
        return CoupledGenState(
            self.offsets_h.expand(n, -1).clone(),
            self.offsets_c.expand(n, -1).clone(),
            self.pen_h.expand(n, -1).clone(),
            self.pen_c.expand(n, -1).clone(),
        )


@dataclass
class GmmParams:
    """Bivariate-GMM head output; every field is (B, M)."""

    weights: Tensor
    mu_x: Tensor
    mu_y: Tensor
    sigma_x: Tensor
    sigma_y: Tensor
    rho: Tensor


@dataclass
class PenStateProbs:
    """Categorical pen-state probabilities, (B, 3)."""

    probs: Tensor


class CoupledGenerator:
    def __init__(
        self,
        hidden_size: int,
        n_mixtures: int,
        store: Optional[ParamStore] = None,
        dtype: torch.dtype = torch.float32,
        generator: Optional[torch.Generator] = None,
        dropout: float = 0.0,
    ):
        self.hidden_size = hidden_size
        self.n_mixtures = n_mixtures
        self.dropout = dropout
        self.store = store if store is not None else ParamStore(dtype)
        g = generator
        k = 1.0 / math.sqrt(hidden_size)
        self.offsets_lstm = LSTMCell(self.store, "offsets.lstm", 5, hidden_size, g)
        self.offsets_head_w = self.store.new_param(
            "offsets.head.w", (6 * n_mixtures, hidden_size), k, g
        )
        self.offsets_head_b = self.store.new_param("offsets.head.b", (6 * n_mixtures,), k, g)
        self.gate_h_w = self.store.new_param("pen.gate_h.w", (hidden_size, 2 * hidden_size), k, g)
        self.gate_h_b = self.store.new_param("pen.gate_h.b", (hidden_size,), k, g)
        self.gate_c_w = self.store.new_param("pen.gate_c.w", (hidden_size, 2 * hidden_size), k, g)
        self.gate_c_b = self.store.new_param("pen.gate_c.b", (hidden_size,), k, g)
        self.pen_head_w = self.store.new_param("pen.head.w", (3, hidden_size), k, g)
        self.pen_head_b = self.store.new_param("pen.head.b", (3,), k, g)

    @property
    def dtype(self) -> torch.dtype:
        return self.store.dtype

    def offset_param_names(self) -> list[str]:
        return self.store.select("offsets.")

    def pen_param_names(self) -> list[str]:
        return self.store.select("pen.")

    def init_state(self, batch_size: int) -> CoupledGenState:
        z = torch.zeros(batch_size, self.hidden_size, dtype=self.dtype)
        return CoupledGenState(z, z.clone(), z.clone(), z.clone())

    def step(
        self,
        x: Tensor,
        state: CoupledGenState,
        h_mask: Optional[Tensor] = None,
        pen_params: Optional[dict[str, Tensor]] = None,
    ) -> tuple[Tensor, Tensor, CoupledGenState]:
        """One coupled step: (B, 5) input -> offset logits (B, 6M), pen logits (B, 3).

        ``pen_params`` substitutes the pen-side parameter group (used for the
        rollout policy, which is a soft-updated copy of the pen parameters).
        """
        p = pen_params if pen_params is not None else {
            "pen.gate_h.w": self.gate_h_w,
            "pen.gate_h.b": self.gate_h_b,
            "pen.gate_c.w": self.gate_c_w,
            "pen.gate_c.b": self.gate_c_b,
            "pen.head.w": self.pen_head_w,
            "pen.head.b": self.pen_head_b,
        }
        h_off, c_off = self.offsets_lstm.step(x, state.offsets_h, state.offsets_c, h_mask)
        blend_h = torch.sigmoid(
            torch.cat([h_off, state.pen_h], dim=-1) @ p["pen.gate_h.w"].T + p["pen.gate_h.b"]
        )
        pen_h = blend_h * h_off + (1 - blend_h) * state.pen_h
        blend_c = torch.sigmoid(
            torch.cat([c_off, state.pen_c], dim=-1) @ p["pen.gate_c.w"].T + p["pen.gate_c.b"]
        )
        pen_c = blend_c * c_off + (1 - blend_c) * state.pen_c
        y_offsets = h_off @ self.offsets_head_w.T + self.offsets_head_b
        y_pen = pen_h @ p["pen.head.w"].T + p["pen.head.b"]
        return y_offsets, y_pen, CoupledGenState(h_off, c_off, pen_h, pen_c)


def coupled_step(
    model: CoupledGenerator, x_t: Tensor, state: CoupledGenState, **kw
) -> tuple[Tensor, Tensor, CoupledGenState]:
    return model.step(x_t, state, **kw)


def gmm_params_from(y_offsets: Tensor, tau: float = 1.0) -> GmmParams:
    """Split (B, 6M) head output into tempered GMM parameters.

    Mixture logits are divided by tau before the softmax; variances are
    scaled by tau, i.e. sigma <- sigma * sqrt(tau).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    assert_finite(y_offsets, "gmm_params_from input")
    b = y_offsets.shape[0]
    parts = y_offsets.view(b, -1, 6)
    logits, mu_x, mu_y, s_x, s_y, rho_raw = parts.unbind(dim=-1)
    weights = torch.softmax(logits / tau, dim=-1)
    sqrt_tau = math.sqrt(tau)
    return GmmParams(
        weights=weights,
        mu_x=mu_x,
        mu_y=mu_y,
        sigma_x=torch.exp(s_x) * sqrt_tau,
        sigma_y=torch.exp(s_y) * sqrt_tau,
        rho=torch.tanh(rho_raw).clamp(-RHO_LIMIT, RHO_LIMIT),
    )


def pen_probs_from(y_pen: Tensor, tau: float = 1.0) -> PenStateProbs:
    """Softmax of the pen logits divided by tau."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    assert_finite(y_pen, "pen_probs_from input")
    return PenStateProbs(probs=torch.softmax(y_pen / tau, dim=-1))


def bivariate_normal_pdf(
    dx: Tensor, dy: Tensor, mu_x: Tensor, mu_y: Tensor, sigma_x: Tensor, sigma_y: Tensor, rho: Tensor
) -> Tensor:
    """Density of a correlated bivariate normal, broadcasting over mixtures."""
    zx = (dx - mu_x) / sigma_x
    zy = (dy - mu_y) / sigma_y
    z = zx**2 + zy**2 - 2 * rho * zx * zy
    one_minus_r2 = 1 - rho**2
    return torch.exp(-z / (2 * one_minus_r2)) / (
        2 * math.pi * sigma_x * sigma_y * torch.sqrt(one_minus_r2)
    )


def gmm_log_density(gmm: GmmParams, dx: Tensor, dy: Tensor) -> Tensor:
    """Log mixture density of true offsets; (B,) from (B,)-shaped dx, dy."""
    pdf = bivariate_normal_pdf(
        dx.unsqueeze(-1), dy.unsqueeze(-1), gmm.mu_x, gmm.mu_y, gmm.sigma_x, gmm.sigma_y, gmm.rho
    )
    mixture = (gmm.weights * pdf).sum(dim=-1)
    return torch.log(torch.clamp(mixture, min=LOG_DENSITY_FLOOR))


def sample_point(
    gmm: GmmParams, pen: PenStateProbs, rng: torch.Generator
) -> StrokePoint5:
    """Draw one 5-tuple: mixture component, correlated offsets, pen state."""
    w = gmm.weights[0]
    j = int(torch.multinomial(w, 1, generator=rng).item())
    mu = torch.stack([gmm.mu_x[0, j], gmm.mu_y[0, j]])
    sx, sy, r = gmm.sigma_x[0, j], gmm.sigma_y[0, j], gmm.rho[0, j]
    eps = torch.randn(2, generator=rng, dtype=mu.dtype)
    # Cholesky factor of [[sx^2, r sx sy], [r sx sy, sy^2]].
    dx = mu[0] + sx * eps[0]
    dy = mu[1] + sy * (r * eps[0] + torch.sqrt(torch.clamp(1 - r**2, min=0.0)) * eps[1])
    k = int(torch.multinomial(pen.probs[0], 1, generator=rng).item())
    onehot = [0, 0, 0]
    onehot[k] = 1
    pt = StrokePoint5(float(dx), float(dy), *onehot)
    if not (math.isfinite(pt.dx) and math.isfinite(pt.dy)):
        raise NonFiniteError("sample_point produced a non-finite offset")
    return pt


def sample_points_batch(
    gmm: GmmParams, pen: PenStateProbs, rng: torch.Generator
) -> tuple[Tensor, Tensor]:
    """Vectorized sampling: (B, 5) point rows plus the (B,) pen-state index."""
    b = gmm.weights.shape[0]
    j = torch.multinomial(gmm.weights, 1, generator=rng)
    mu_x = gmm.mu_x.gather(1, j).squeeze(1)
    mu_y = gmm.mu_y.gather(1, j).squeeze(1)
    sx = gmm.sigma_x.gather(1, j).squeeze(1)
    sy = gmm.sigma_y.gather(1, j).squeeze(1)
    rho = gmm.rho.gather(1, j).squeeze(1)
    eps = torch.randn(b, 2, generator=rng, dtype=mu_x.dtype)
    dx = mu_x + sx * eps[:, 0]
    dy = mu_y + sy * (rho * eps[:, 0] + torch.sqrt(torch.clamp(1 - rho**2, min=0.0)) * eps[:, 1])
    pen_idx = torch.multinomial(pen.probs, 1, generator=rng).squeeze(1)
    onehot = torch.nn.functional.one_hot(pen_idx, 3).to(dx.dtype)
    points = torch.cat([dx.unsqueeze(1), dy.unsqueeze(1), onehot], dim=1)
    assert_finite(points, "sample_points_batch")
    return points, pen_idx


def generate_batch(
    model: CoupledGenerator,
    count: int,
    tau: float,
    n_max: int,
    rng: torch.Generator,
    pen_params: Optional[dict[str, Tensor]] = None,
    init_state: Optional[CoupledGenState] = None,
    first_input: Optional[Tensor] = None,
    max_new: Optional[int] = None,
) -> Tensor:
    """Free-running batched generation, padded to (count, n_max+1, 5).

    ``init_state``/``first_input`` let callers continue from a conditioned
    state (rollouts); ``max_new`` caps the number of sampled tuples.
    """
    budget = n_max if max_new is None else min(max_new, n_max)
    with torch.no_grad():
        state = init_state if init_state is not None else model.init_state(count)
        x = (
            first_input
            if first_input is not None
            else data.start_token(model.dtype).expand(count, 5)
        )
        end_row = data.end_token(model.dtype).expand(count, 5)
        alive = torch.ones(count, dtype=torch.bool)
        rows = []
        for _ in range(budget):
            y_off, y_pen, state = model.step(x, state, pen_params=pen_params)
            pts, pen_idx = sample_points_batch(
                gmm_params_from(y_off, tau), pen_probs_from(y_pen, tau), rng
            )
            is_end = pen_idx == 2
            row = torch.where((alive & ~is_end).unsqueeze(1), pts, end_row)
            rows.append(row)
            alive = alive & ~is_end
            x = row
            if not alive.any():
                break
        seq = torch.stack(rows, dim=1) if rows else end_row.unsqueeze(1)[:, :0]
        pad = n_max + 1 - seq.shape[1]
        if pad > 0:
            seq = torch.cat([seq, end_row.unsqueeze(1).expand(count, pad, 5)], dim=1)
    return seq


def generate(
    model: CoupledGenerator, tau: float, n_max: int, rng: torch.Generator, label: str = ""
) -> Sketch:
    """Unconditional generation: feed the start token, sample tuple by tuple
    until the end state is drawn or ``n_max`` tuples exist."""
    points: list[StrokePoint5] = []
    with torch.no_grad():
        state = model.init_state(1)
        x = data.start_token(model.dtype).unsqueeze(0)
        for _ in range(n_max):
            y_off, y_pen, state = model.step(x, state)
            pt = sample_point(gmm_params_from(y_off, tau), pen_probs_from(y_pen, tau), rng)
            if pt.q3 == 1:
                points.append(END_TOKEN)
                break
            points.append(pt)
            x = torch.tensor([list(pt)], dtype=model.dtype)
    return Sketch(points=tuple(points), label=label)


def complete(
    model: CoupledGenerator,
    partial: Sketch,
    tau: float,
    n_max: int,
    rng: torch.Generator,
) -> Sketch:
    """Condition on a partial sketch, then sample the remaining tuples.

    The conditioning pass feeds the ground-truth prefix (no sampling); the
    continuation free-runs from the resulting hidden state. The returned
    sketch is the prefix followed by the sampled continuation.
    """
    if len(partial.points) == 0:
        raise ValueError("partial sketch must be non-empty")
    if len(partial.points) > n_max:
        raise ValueError("partial sketch is longer than n_max")
    prefix = list(partial.points)
    if len(prefix) == n_max or prefix[-1].q3 == 1:
        return partial
    points = list(prefix)
    with torch.no_grad():
        state = model.init_state(1)
        x = data.start_token(model.dtype).unsqueeze(0)
        y_off, y_pen, state = model.step(x, state)
        for pt in prefix:
            x = torch.tensor([list(pt)], dtype=model.dtype)
            y_off, y_pen, state = model.step(x, state)
        while len(points) < n_max:
            pt = sample_point(gmm_params_from(y_off, tau), pen_probs_from(y_pen, tau), rng)
            if pt.q3 == 1:
                points.append(END_TOKEN)
                break
            points.append(pt)
            x = torch.tensor([list(pt)], dtype=model.dtype)
            y_off, y_pen, state = model.step(x, state)
    return Sketch(points=tuple(points), label=partial.label)


def reconstruction_loss(
    model: CoupledGenerator,
    batch: Tensor,
    n_max: int,
    h_mask: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Teacher-forced likelihood loss over a (B, >=n_max, 5) batch.

    Returns (offset NLL, pen cross-entropy, their sum). The offset term
    counts only pre-end positions; the pen term counts every one of the
    first n_max positions. Both are normalized by n_max.
    """
    inputs, targets = data.teacher_forcing_views(batch, n_max)
    b = batch.shape[0]
    state = model.init_state(b)
    n_real = data.real_point_counts(targets)
    steps = torch.arange(n_max)
    offset_mask = (steps.unsqueeze(0) < n_real.unsqueeze(1)).to(batch.dtype)

    loss_s = batch.new_zeros(())
    loss_p = batch.new_zeros(())
    for t in range(n_max):
        y_off, y_pen, state = model.step(inputs[:, t], state, h_mask=h_mask)
        gmm = gmm_params_from(y_off, tau=1.0)
        log_density = gmm_log_density(gmm, targets[:, t, 0], targets[:, t, 1])
        loss_s = loss_s - (log_density * offset_mask[:, t]).sum()
        log_q = torch.log_softmax(y_pen, dim=-1)
        loss_p = loss_p - (targets[:, t, 2:5] * log_q).sum()
    loss_s = loss_s / (n_max * b)
    loss_p = loss_p / (n_max * b)
    total = loss_s + loss_p
    assert_finite(total, "reconstruction_loss")
    return loss_s, loss_p, total

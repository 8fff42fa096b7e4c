"""Differentiable numeric substrate: recurrent cells, optimizers, grad checks.

Tensors are torch CPU tensors (float32 by default, float64 for verification
runs) and analytic gradients come from reverse-mode autograd. The recurrent
cells and optimizer updates are written out explicitly against named
parameter tensors held in a :class:`ParamStore`, which keeps checkpointing
and per-parameter-group updates (the two generators train under different
rules) straightforward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import torch

from .errors import NonFiniteError

Tensor = torch.Tensor


def assert_finite(value: Tensor, op: str) -> Tensor:
    """Raise NonFiniteError naming ``op`` if ``value`` contains NaN/Inf."""
    if not torch.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return value


@dataclass(frozen=True)
class RecurrentCellSpec:
    kind: str  # "lstm" | "gru" | "bidirectional-lstm"
    input_size: int
    hidden_size: int

    def __post_init__(self):
        if self.input_size <= 0 or self.hidden_size <= 0:
            raise ValueError("cell sizes must be positive")
        if self.kind not in ("lstm", "gru", "bidirectional-lstm"):
            raise ValueError(f"unknown cell kind {self.kind!r}")


class ParamStore:
    """Named parameter tensors with gradients and per-name Adam moments."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._params: dict[str, Tensor] = {}
        self.adam_m: dict[str, Tensor] = {}
        self.adam_v: dict[str, Tensor] = {}
        self.adam_t: dict[str, int] = {}

    def new_param(
        self,
        name: str,
        shape: Sequence[int],
        scale: float,
        generator: Optional[torch.Generator] = None,
    ) -> Tensor:
        """Register a fresh parameter, uniform in [-scale, scale]."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = torch.empty(*shape, dtype=self.dtype)
        if scale == 0.0:
            t.zero_()
        else:
            t.uniform_(-scale, scale, generator=generator)
        t.requires_grad_(True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def select(self, prefix: str) -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self, names: Optional[Iterable[str]] = None) -> None:
        for n in names if names is not None else self._params:
            p = self._params[n]
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    def copy_values(self, names: Optional[Iterable[str]] = None) -> dict[str, Tensor]:
        """Detached clones, e.g. for a rollout-policy snapshot."""
        return {
            n: self._params[n].detach().clone()
            for n in (names if names is not None else self._params)
        }

    def load_values(self, values: dict[str, Tensor]) -> None:
        with torch.no_grad():
            for n, v in values.items():
                p = self._params[n]
                if tuple(p.shape) != tuple(v.shape):
                    raise ValueError(
                        f"shape mismatch for {n!r}: store {tuple(p.shape)} vs value {tuple(v.shape)}"
                    )
                p.copy_(v.to(p.dtype))


# --- recurrent cells -----------------------------------------------------


class LSTMCell:
    """Single-layer LSTM cell over explicit parameter tensors.

    Gate layout along the first axis of ``w_ih``/``w_hh``/``b`` is
    (input, forget, candidate, output).
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        input_size: int,
        hidden_size: int,
        generator: Optional[torch.Generator] = None,
    ):
        self.spec = RecurrentCellSpec("lstm", input_size, hidden_size)
        k = 1.0 / math.sqrt(hidden_size)
        self.w_ih = store.new_param(f"{prefix}.w_ih", (4 * hidden_size, input_size), k, generator)
        self.w_hh = store.new_param(f"{prefix}.w_hh", (4 * hidden_size, hidden_size), k, generator)
        self.b = store.new_param(f"{prefix}.b", (4 * hidden_size,), k, generator)

    @property
    def hidden_size(self) -> int:
        return self.spec.hidden_size

    def step(
        self, x: Tensor, h: Tensor, c: Tensor, h_mask: Optional[Tensor] = None
    ) -> tuple[Tensor, Tensor]:
        h_in = h * h_mask if h_mask is not None else h
        gates = x @ self.w_ih.T + h_in @ self.w_hh.T + self.b
        i, f, g, o = gates.chunk(4, dim=-1)
        c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_next = torch.sigmoid(o) * torch.tanh(c_next)
        return h_next, c_next


class GRUCell:
    """Single-layer GRU cell; gate layout (reset, update, candidate)."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        input_size: int,
        hidden_size: int,
        generator: Optional[torch.Generator] = None,
    ):
        self.spec = RecurrentCellSpec("gru", input_size, hidden_size)
        k = 1.0 / math.sqrt(hidden_size)
        self.w_ih = store.new_param(f"{prefix}.w_ih", (3 * hidden_size, input_size), k, generator)
        self.w_hh = store.new_param(f"{prefix}.w_hh", (3 * hidden_size, hidden_size), k, generator)
        self.b_ih = store.new_param(f"{prefix}.b_ih", (3 * hidden_size,), k, generator)
        self.b_hh = store.new_param(f"{prefix}.b_hh", (3 * hidden_size,), k, generator)

    @property
    def hidden_size(self) -> int:
        return self.spec.hidden_size

    def step(self, x: Tensor, h: Tensor, h_mask: Optional[Tensor] = None) -> Tensor:
        h_in = h * h_mask if h_mask is not None else h
        gi = x @ self.w_ih.T + self.b_ih
        gh = h_in @ self.w_hh.T + self.b_hh
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        return (1 - z) * n + z * h


def lstm_step(
    cell: LSTMCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor, h_mask: Optional[Tensor] = None
) -> tuple[Tensor, Tensor]:
    return cell.step(x_t, h_prev, c_prev, h_mask)


def gru_step(cell: GRUCell, x_t: Tensor, h_prev: Tensor, h_mask: Optional[Tensor] = None) -> Tensor:
    return cell.step(x_t, h_prev, h_mask)


class BiLSTMEncoder:
    """Forward and backward LSTM passes over a full sequence."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        input_size: int,
        hidden_size: int,
        generator: Optional[torch.Generator] = None,
    ):
        self.spec = RecurrentCellSpec("bidirectional-lstm", input_size, hidden_size)
        self.fwd = LSTMCell(store, f"{prefix}.fwd", input_size, hidden_size, generator)
        self.bwd = LSTMCell(store, f"{prefix}.bwd", input_size, hidden_size, generator)

    def encode(
        self,
        sequence: Tensor,
        fwd_mask: Optional[Tensor] = None,
        bwd_mask: Optional[Tensor] = None,
    ) -> tuple[Tensor, Tensor]:
        """sequence: (T, B, input) -> last hidden of each direction, (B, H) twice."""
        if sequence.shape[0] == 0:
            raise ValueError("cannot encode an empty sequence")
        batch = sequence.shape[1]
        h = c = sequence.new_zeros(batch, self.fwd.hidden_size)
        for t in range(sequence.shape[0]):
            h, c = self.fwd.step(sequence[t], h, c, fwd_mask)
        h_fwd = h
        h = c = sequence.new_zeros(batch, self.bwd.hidden_size)
        for t in reversed(range(sequence.shape[0])):
            h, c = self.bwd.step(sequence[t], h, c, bwd_mask)
        assert_finite(h_fwd, "bilstm_encode")
        assert_finite(h, "bilstm_encode")
        return h_fwd, h


def bilstm_encode(
    encoder: BiLSTMEncoder, sequence: Tensor, **masks
) -> tuple[Tensor, Tensor]:
    return encoder.encode(sequence, **masks)


def dropout_mask(
    shape: Sequence[int],
    drop_prob: float,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> Optional[Tensor]:
    """Per-sequence inverted dropout mask; None when dropout is off."""
    if drop_prob <= 0.0:
        return None
    keep = 1.0 - drop_prob
    mask = (torch.rand(*shape, generator=generator, dtype=dtype) < keep).to(dtype)
    return mask / keep


# --- optimizers -----------------------------------------------------------


def clip_gradients(store: ParamStore, lo: float, hi: float, names: Optional[Iterable[str]] = None) -> None:
    """Clamp every gradient component elementwise into [lo, hi]."""
    if lo >= hi:
        raise ValueError("need lo < hi")
    with torch.no_grad():
        for n in names if names is not None else store.names():
            g = store[n].grad
            if g is not None:
                g.clamp_(lo, hi)


def sgd_step(store: ParamStore, lr: float, names: Optional[Iterable[str]] = None) -> None:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    with torch.no_grad():
        for n in names if names is not None else store.names():
            p = store[n]
            if p.grad is None:
                continue
            assert_finite(p.grad, f"sgd_step gradient of {n}")
            p.add_(p.grad, alpha=-lr)
            assert_finite(p, f"sgd_step update of {n}")


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Optional[Iterable[str]] = None,
) -> None:
    """Adam update with bias correction; moment buffers live on the store."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    with torch.no_grad():
        for n in names if names is not None else store.names():
            p = store[n]
            if p.grad is None:
                continue
            assert_finite(p.grad, f"adam_step gradient of {n}")
            if n not in store.adam_m:
                store.adam_m[n] = torch.zeros_like(p)
                store.adam_v[n] = torch.zeros_like(p)
                store.adam_t[n] = 0
            store.adam_t[n] += 1
            t = store.adam_t[n]
            m, v = store.adam_m[n], store.adam_v[n]
            m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
            assert_finite(p, f"adam_step update of {n}")


def ascent_step(store: ParamStore, lr: float, names: Optional[Iterable[str]] = None) -> None:
    """Plain gradient ascent (used by the policy-gradient update)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    with torch.no_grad():
        for n in names if names is not None else store.names():
            p = store[n]
            if p.grad is None:
                continue
            assert_finite(p.grad, f"ascent_step gradient of {n}")
            p.add_(p.grad, alpha=lr)
            assert_finite(p, f"ascent_step update of {n}")


def scheduled_lr(iteration: int, lr0: float, decay: float, period: int, floor: float) -> float:
    """Step-decay schedule: lr0 * decay^(iteration // period), floored."""
    return max(floor, lr0 * decay ** (iteration // period))


# --- gradient verification ------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] max rel err {self.max_rel_err:.3e} at {self.worst_param}"


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    store: ParamStore,
    delta: float = 1e-5,
    tolerance: float = 1e-4,
    names: Optional[Iterable[str]] = None,
    max_entries_per_param: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild its graph on every call and be deterministic
    under its own frozen randomness (this is verified by evaluating it
    twice). Relative error per component is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    names = list(names if names is not None else store.names())
    base = loss_fn()
    again = loss_fn()
    if base.item() != again.item():
        raise ValueError("loss_fn is not deterministic under a fixed seed")

    store.zero_grad(names)
    loss = loss_fn()
    loss.backward()
    analytic = {
        n: (store[n].grad.detach().clone() if store[n].grad is not None else torch.zeros_like(store[n]))
        for n in names
    }

    rng = torch.Generator().manual_seed(seed)
    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    for n in names:
        p = store[n]
        flat = p.detach().view(-1)
        n_entries = flat.numel()
        if max_entries_per_param is not None and n_entries > max_entries_per_param:
            idx = torch.randperm(n_entries, generator=rng)[:max_entries_per_param]
        else:
            idx = torch.arange(n_entries)
        a_flat = analytic[n].view(-1)
        worst_here = 0.0
        with torch.no_grad():
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + delta
                up = loss_fn().item()
                flat[i] = orig - delta
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * delta)
                a = a_flat[i].item()
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst_here = max(worst_here, rel)
        per_param[n] = worst_here
        if worst_here >= worst[1]:
            worst = (n, worst_here)
    return GradCheckReport(
        max_rel_err=worst[1],
        worst_param=worst[0],
        per_param=per_param,
        passed=worst[1] < tolerance,
    )

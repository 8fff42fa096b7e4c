"""Sequence discriminators and adversarial batch assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from . import data
from .generator import CoupledGenerator, generate_batch
from .substrate import BiLSTMEncoder, GRUCell, LSTMCell, ParamStore, Tensor, assert_finite


@dataclass
class DiscriminatorOutput:
    """Per-sequence class probabilities; both fields are (B,)."""

    p_real: Tensor
    p_fake: Tensor


class SkeganDiscriminator:
    """Bidirectional LSTM over stroke-5 sequences, two-way softmax head."""

    def __init__(
        self,
        hidden_size: int,
        store: Optional[ParamStore] = None,
        dtype: torch.dtype = torch.float32,
        generator: Optional[torch.Generator] = None,
    ):
        self.hidden_size = hidden_size
        self.store = store if store is not None else ParamStore(dtype)
        k = 1.0 / math.sqrt(2 * hidden_size)
        self.encoder = BiLSTMEncoder(self.store, "disc.bilstm", 5, hidden_size, generator)
        self.head_w = self.store.new_param("disc.head.w", (2, 2 * hidden_size), k, generator)
        self.head_b = self.store.new_param("disc.head.b", (2,), k, generator)

    @property
    def dtype(self) -> torch.dtype:
        return self.store.dtype

    def logits(self, batch: Tensor, h_mask: Optional[Tensor] = None) -> Tensor:
        """(B, T, 5) -> (B, 2) class logits (real, fake)."""
        if batch.shape[0] == 0:
            raise ValueError("empty batch")
        h_fwd, h_bwd = self.encoder.encode(
            batch.transpose(0, 1), fwd_mask=h_mask, bwd_mask=h_mask
        )
        features = torch.cat([h_fwd, h_bwd], dim=-1)
        return features @ self.head_w.T + self.head_b

    def __call__(self, batch: Tensor, h_mask: Optional[Tensor] = None) -> DiscriminatorOutput:
        probs = torch.softmax(self.logits(batch, h_mask), dim=-1)
        assert_finite(probs, "discriminate_skegan")
        return DiscriminatorOutput(p_real=probs[:, 0], p_fake=probs[:, 1])


class VaskeganDiscriminator:
    """Unidirectional GRU or LSTM; the last hidden state feeds the head."""

    def __init__(
        self,
        hidden_size: int,
        kind: str = "gru",
        store: Optional[ParamStore] = None,
        dtype: torch.dtype = torch.float32,
        generator: Optional[torch.Generator] = None,
    ):
        if kind not in ("gru", "lstm"):
            raise ValueError(f"unknown discriminator kind {kind!r}")
        self.kind = kind
        self.hidden_size = hidden_size
        self.store = store if store is not None else ParamStore(dtype)
        k = 1.0 / math.sqrt(hidden_size)
        if kind == "gru":
            self.cell = GRUCell(self.store, "disc.gru", 5, hidden_size, generator)
        else:
            self.cell = LSTMCell(self.store, "disc.lstm", 5, hidden_size, generator)
        self.head_w = self.store.new_param("disc.head.w", (2, hidden_size), k, generator)
        self.head_b = self.store.new_param("disc.head.b", (2,), k, generator)

    @property
    def dtype(self) -> torch.dtype:
        return self.store.dtype

    def logits(self, batch: Tensor, h_mask: Optional[Tensor] = None) -> Tensor:
        if batch.shape[0] == 0:
            raise ValueError("empty batch")
        b = batch.shape[0]
        h = torch.zeros(b, self.hidden_size, dtype=batch.dtype)
        if self.kind == "lstm":
            c = torch.zeros_like(h)
            for t in range(batch.shape[1]):
                h, c = self.cell.step(batch[:, t], h, c, h_mask)
        else:
            for t in range(batch.shape[1]):
                h = self.cell.step(batch[:, t], h, h_mask)
        assert_finite(h, "discriminate_vaskegan")
        return h @ self.head_w.T + self.head_b

    def __call__(self, batch: Tensor, h_mask: Optional[Tensor] = None) -> DiscriminatorOutput:
        probs = torch.softmax(self.logits(batch, h_mask), dim=-1)
        return DiscriminatorOutput(p_real=probs[:, 0], p_fake=probs[:, 1])


def discriminate_skegan(disc: SkeganDiscriminator, batch: Tensor) -> DiscriminatorOutput:
    return disc(batch)


def discriminate_vaskegan(disc: VaskeganDiscriminator, batch: Tensor) -> DiscriminatorOutput:
    return disc(batch)


def fake_batch_tensor(
    model: CoupledGenerator, count: int, n_max: int, rng: torch.Generator
) -> Tensor:
    """Generate ``count`` sketches padded to the (count, n_max+1, 5) layout."""
    return generate_batch(model, count, tau=1.0, n_max=n_max, rng=rng)


def make_adversarial_batch(
    dataset_tensor: Tensor,
    model: CoupledGenerator,
    batch_size: int,
    rng: torch.Generator,
) -> tuple[Tensor, Tensor]:
    """Assemble a shuffled half-real half-generated batch.

    ``dataset_tensor`` is the (N, n_max+1, 5) view of the real data. Returns
    (sequences with the start token prepended, labels) where label 1 marks a
    real sequence. Fakes are drawn from the generator's current parameters.
    """
    if batch_size % 2 != 0:
        raise ValueError("batch size must be even for a 50/50 split")
    half = batch_size // 2
    n_max = dataset_tensor.shape[1] - 1
    real = data.sample_batch(dataset_tensor, half, rng)
    fake = fake_batch_tensor(model, half, n_max, rng)
    batch = torch.cat([real.to(fake.dtype), fake], dim=0)
    labels = torch.cat([torch.ones(half), torch.zeros(half)]).to(fake.dtype)
    perm = torch.randperm(batch_size, generator=rng)
    return data.prepend_start(batch[perm]), labels[perm]


def nll_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-likelihood of labels under the 2-way softmax.

    Class 0 of the logits is "real"; labels are 1 for real, 0 for fake.
    """
    log_probs = torch.log_softmax(logits, dim=-1)
    class_idx = (1 - labels.long()).clamp(0, 1)
    picked = log_probs.gather(1, class_idx.unsqueeze(1)).squeeze(1)
    loss = -picked.mean()
    assert_finite(loss, "discriminator nll_loss")
    return loss


def accuracy(output: DiscriminatorOutput, labels: Tensor) -> float:
    pred_real = (output.p_real >= 0.5).to(labels.dtype)
    return float((pred_real == labels).to(torch.float64).mean())

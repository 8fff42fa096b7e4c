"""VAE-GAN sketch model: bidirectional encoder, latent-conditioned decoder,
KL-annealed composite loss, adversarial training against a GRU/LSTM critic.

The decoder doubles as the GAN generator. Offsets are a single diagonal
Gaussian per axis (no mixture, no correlation); sampling is reparameterized
(mean + sigma * noise), so adversarial gradients reach the decoder and,
through z, the encoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch

from . import data
from .checkpoint import Checkpoint, load_store_from_tensors, store_to_tensors
from .discriminator import VaskeganDiscriminator
from .errors import NonFiniteError, TrainingDivergedError
from .generator import LOG_DENSITY_FLOOR
from .strokes import Sketch, SketchDataset
from .substrate import (
    BiLSTMEncoder,
    LSTMCell,
    ParamStore,
    Tensor,
    adam_step,
    assert_finite,
    clip_gradients,
    dropout_mask,
    scheduled_lr,
    sgd_step,
)
from .training import MetricsLogger


@dataclass
class VaskeganTrainConfig:
    w_kl: float = 0.5
    kl_min: float = 0.2
    eta_min: float = 0.01
    anneal_r: float = 0.9999
    batch_size: int = 100
    lr0: float = 0.001
    lr_decay: float = 0.9999
    lr_decay_every: int = 100
    lr_min: float = 0.00001
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    total_iters: int = 2000
    enc_hidden: int = 64
    dec_hidden: int = 128
    n_z: int = 32
    disc_hidden: int = 64
    disc_kind: str = "gru"
    dropout: float = 0.1
    use_encoder: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "VaskeganTrainConfig":
        if self.w_kl < 0:
            raise ValueError("w_kl must be nonnegative")
        if not (0 < self.anneal_r < 1):
            raise ValueError("anneal_r must be in (0, 1)")
        if not (0 <= self.eta_min <= 1):
            raise ValueError("eta_min must be in [0, 1]")
        if self.batch_size <= 0 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be positive and even")
        return self


@dataclass
class LatentCode:
    mu: Tensor
    sigma_hat: Tensor
    z: Tensor


@dataclass
class DecoderStepOutput:
    """Activated per-step distributions; sigma and pen probs are tempered."""

    mu_x: Tensor
    mu_y: Tensor
    sigma_x: Tensor
    sigma_y: Tensor
    pen_probs: Tensor
    pen_logits: Tensor


class VaskeganModel:
    def __init__(
        self,
        cfg: VaskeganTrainConfig,
        store: Optional[ParamStore] = None,
        dtype: torch.dtype = torch.float32,
        generator: Optional[torch.Generator] = None,
    ):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(dtype)
        g = generator
        self.encoder = BiLSTMEncoder(self.store, "enc.bilstm", 5, cfg.enc_hidden, g)
        k_enc = 1.0 / math.sqrt(2 * cfg.enc_hidden)
        self.fc_mu_w = self.store.new_param("enc.mu.w", (cfg.n_z, 2 * cfg.enc_hidden), k_enc, g)
        self.fc_mu_b = self.store.new_param("enc.mu.b", (cfg.n_z,), k_enc, g)
        self.fc_sigma_w = self.store.new_param("enc.sigma.w", (cfg.n_z, 2 * cfg.enc_hidden), k_enc, g)
        self.fc_sigma_b = self.store.new_param("enc.sigma.b", (cfg.n_z,), k_enc, g)
        k_z = 1.0 / math.sqrt(cfg.n_z)
        self.init_w = self.store.new_param("dec.init.w", (2 * cfg.dec_hidden, cfg.n_z), k_z, g)
        self.init_b = self.store.new_param("dec.init.b", (2 * cfg.dec_hidden,), k_z, g)
        self.dec_lstm = LSTMCell(self.store, "dec.lstm", 5 + cfg.n_z, cfg.dec_hidden, g)
        k_dec = 1.0 / math.sqrt(cfg.dec_hidden)
        self.head_w = self.store.new_param("dec.head.w", (7, cfg.dec_hidden), k_dec, g)
        self.head_b = self.store.new_param("dec.head.b", (7,), k_dec, g)

    @property
    def dtype(self) -> torch.dtype:
        return self.store.dtype


def encode(
    model: VaskeganModel,
    batch: Tensor,
    rng: Optional[torch.Generator] = None,
    noise: Optional[Tensor] = None,
    h_mask: Optional[Tensor] = None,
) -> LatentCode:
    """Bidirectional encoding of (B, T, 5) to a reparameterized latent code.

    ``noise`` substitutes the standard-normal draw (frozen-noise gradient
    checks); otherwise it is drawn from ``rng``.
    """
    if batch.shape[1] == 0:
        raise ValueError("cannot encode an empty sketch")
    h_fwd, h_bwd = model.encoder.encode(batch.transpose(0, 1), fwd_mask=h_mask, bwd_mask=h_mask)
    features = torch.cat([h_fwd, h_bwd], dim=-1)
    mu = features @ model.fc_mu_w.T + model.fc_mu_b
    sigma_hat = features @ model.fc_sigma_w.T + model.fc_sigma_b
    sigma = torch.exp(sigma_hat / 2)
    if noise is None:
        noise = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
    z = mu + sigma * noise
    assert_finite(z, "encode")
    return LatentCode(mu=mu, sigma_hat=sigma_hat, z=z)


def decoder_init(model: VaskeganModel, z: Tensor) -> tuple[Tensor, Tensor]:
    """Initial decoder state [h0; c0] = tanh(W z + b), split in half."""
    if z.shape[-1] != model.cfg.n_z:
        raise ValueError(f"z has size {z.shape[-1]}, expected {model.cfg.n_z}")
    hc = torch.tanh(z @ model.init_w.T + model.init_b)
    return hc.chunk(2, dim=-1)


def decode_step(
    model: VaskeganModel,
    prev: Tensor,
    z: Tensor,
    state: tuple[Tensor, Tensor],
    tau: float = 1.0,
    h_mask: Optional[Tensor] = None,
) -> tuple[DecoderStepOutput, tuple[Tensor, Tensor]]:
    """One decoder step on the previous point concatenated with z."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    h, c = model.dec_lstm.step(torch.cat([prev, z], dim=-1), state[0], state[1], h_mask)
    y = h @ model.head_w.T + model.head_b
    assert_finite(y, "decode_step")
    sqrt_tau = math.sqrt(tau)
    out = DecoderStepOutput(
        mu_x=y[:, 0],
        mu_y=y[:, 1],
        sigma_x=torch.exp(y[:, 2]) * sqrt_tau,
        sigma_y=torch.exp(y[:, 3]) * sqrt_tau,
        pen_probs=torch.softmax(y[:, 4:7] / tau, dim=-1),
        pen_logits=y[:, 4:7],
    )
    return out, (h, c)


def sample_decoder_point(
    out: DecoderStepOutput, rng: Optional[torch.Generator] = None, noise: Optional[Tensor] = None
) -> tuple[Tensor, Tensor]:
    """Reparameterized offsets plus a categorical pen draw: (B, 5) rows."""
    b = out.mu_x.shape[0]
    if noise is None:
        noise = torch.randn(b, 2, generator=rng, dtype=out.mu_x.dtype)
    dx = out.mu_x + out.sigma_x * noise[:, 0]
    dy = out.mu_y + out.sigma_y * noise[:, 1]
    pen_idx = torch.multinomial(out.pen_probs.detach(), 1, generator=rng).squeeze(1)
    onehot = torch.nn.functional.one_hot(pen_idx, 3).to(dx.dtype)
    return torch.cat([dx.unsqueeze(1), dy.unsqueeze(1), onehot], dim=1), pen_idx


def kl_loss(mu: Tensor, sigma_hat: Tensor) -> Tensor:
    """Gaussian KL to the standard-normal prior, averaged per latent dim."""
    n_z = mu.shape[-1]
    per_item = -(1 + sigma_hat - mu**2 - torch.exp(sigma_hat)).sum(dim=-1) / (2 * n_z)
    return per_item.mean()


def kl_anneal(t: int, eta_min: float, r: float) -> float:
    """Annealing weight 1 - (1 - eta_min) * r^t, rising from eta_min to 1."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return 1.0 - (1.0 - eta_min) * r**t


def vae_total_loss(
    l_r: Tensor, l_kl: Tensor, l_adv_g: Tensor, t: int, cfg: VaskeganTrainConfig
) -> Tensor:
    """L_R + w_kl * eta_t * max(L_KL, kl_min) + adversarial generator loss."""
    eta = kl_anneal(t, cfg.eta_min, cfg.anneal_r)
    kl_term = torch.clamp(l_kl, min=cfg.kl_min)
    return l_r + cfg.w_kl * eta * kl_term + l_adv_g


def bce_real_prob(p_real: Tensor, label: float) -> Tensor:
    """Binary cross-entropy of a real-probability vector against a label."""
    p = torch.clamp(p_real, LOG_DENSITY_FLOOR, 1 - LOG_DENSITY_FLOOR)
    if label >= 0.5:
        return -torch.log(p).mean()
    return -torch.log(1 - p).mean()


def disc_loss(disc: VaskeganDiscriminator, real: Tensor, fake: Tensor) -> Tensor:
    """BCE(D(fake), 0) + BCE(D(real), 1)."""
    if real.shape[0] != fake.shape[0]:
        raise ValueError("real and fake batches must have the same size")
    return bce_real_prob(disc(fake).p_real, 0.0) + bce_real_prob(disc(real).p_real, 1.0)


def adversarial_generator_loss(disc: VaskeganDiscriminator, fake: Tensor) -> Tensor:
    """BCE(D(fake), 1): the generator wants fakes scored as real."""
    return bce_real_prob(disc(fake).p_real, 1.0)


def vas_reconstruction_loss(
    model: VaskeganModel,
    batch: Tensor,
    z: Tensor,
    n_max: int,
    h_mask: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Teacher-forced diagonal-Gaussian NLL plus pen cross-entropy."""
    inputs, targets = data.teacher_forcing_views(batch, n_max)
    b = batch.shape[0]
    state = decoder_init(model, z)
    n_real = data.real_point_counts(targets)
    steps = torch.arange(n_max)
    offset_mask = (steps.unsqueeze(0) < n_real.unsqueeze(1)).to(batch.dtype)
    loss_s = batch.new_zeros(())
    loss_p = batch.new_zeros(())
    for t in range(n_max):
        out, state = decode_step(model, inputs[:, t], z, state, tau=1.0, h_mask=h_mask)
        log_px = _gaussian_log_density(targets[:, t, 0], out.mu_x, out.sigma_x)
        log_py = _gaussian_log_density(targets[:, t, 1], out.mu_y, out.sigma_y)
        loss_s = loss_s - ((log_px + log_py) * offset_mask[:, t]).sum()
        log_q = torch.log_softmax(out.pen_logits, dim=-1)
        loss_p = loss_p - (targets[:, t, 2:5] * log_q).sum()
    loss_s = loss_s / (n_max * b)
    loss_p = loss_p / (n_max * b)
    total = loss_s + loss_p
    assert_finite(total, "vas_reconstruction_loss")
    return loss_s, loss_p, total


def _gaussian_log_density(x: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    return -0.5 * (((x - mu) / sigma) ** 2 + 2 * torch.log(sigma) + math.log(2 * math.pi))


def free_run_decode(
    model: VaskeganModel,
    z: Tensor,
    n_max: int,
    rng: Optional[torch.Generator] = None,
    tau: float = 1.0,
    noise_rows: Optional[list[Tensor]] = None,
    pen_rows: Optional[list[Tensor]] = None,
) -> Tensor:
    """Self-feeding decode to a padded (B, n_max+1, 5) tensor.

    Offsets stay differentiable through the reparameterization; pen states
    are sampled constants. ``noise_rows``/``pen_rows`` freeze the draws for
    gradient verification.
    """
    b = z.shape[0]
    state = decoder_init(model, z)
    x = data.start_token(model.dtype).expand(b, 5)
    end_row = data.end_token(model.dtype).expand(b, 5)
    alive = torch.ones(b, dtype=torch.bool)
    rows = []
    for t in range(n_max):
        out, state = decode_step(model, x, z, state, tau)
        noise = noise_rows[t] if noise_rows is not None else None
        if pen_rows is not None:
            dx = out.mu_x + out.sigma_x * noise[:, 0]
            dy = out.mu_y + out.sigma_y * noise[:, 1]
            pen_idx = pen_rows[t]
            onehot = torch.nn.functional.one_hot(pen_idx, 3).to(model.dtype)
            sampled = torch.cat([dx.unsqueeze(1), dy.unsqueeze(1), onehot], dim=1)
        else:
            sampled, pen_idx = sample_decoder_point(out, rng, noise)
        keep = (alive & (pen_idx != 2)).unsqueeze(1)
        row = torch.where(keep, sampled, end_row)
        rows.append(row)
        alive = alive & (pen_idx != 2)
        x = row
    rows.append(end_row)
    return torch.stack(rows, dim=1)


@dataclass
class VaskeganTrainState:
    cfg: VaskeganTrainConfig
    model: VaskeganModel
    disc: VaskeganDiscriminator
    data: Tensor
    n_max: int
    offset_scale: float
    label: str
    seed: int
    rng: torch.Generator
    metrics: MetricsLogger
    iteration: int = 0


def init_vaskegan(
    dataset: SketchDataset,
    cfg: VaskeganTrainConfig,
    seed: int = 0,
    metrics: Optional[MetricsLogger] = None,
    dtype: torch.dtype = torch.float32,
) -> VaskeganTrainState:
    cfg.validate()
    init_rng = torch.Generator().manual_seed(seed)
    model = VaskeganModel(cfg, dtype=dtype, generator=init_rng)
    disc = VaskeganDiscriminator(cfg.disc_hidden, cfg.disc_kind, dtype=dtype, generator=init_rng)
    return VaskeganTrainState(
        cfg=cfg,
        model=model,
        disc=disc,
        data=data.dataset_to_tensor(dataset, dtype),
        n_max=dataset.n_max,
        offset_scale=dataset.offset_scale,
        label=dataset.sketches[0].label if dataset.sketches else "",
        seed=seed,
        rng=torch.Generator().manual_seed(seed + 1),
        metrics=metrics if metrics is not None else MetricsLogger(),
    )


def vaskegan_checkpoint(state: VaskeganTrainState) -> Checkpoint:
    tensors, counters = store_to_tensors(state.model.store, "g.")
    d_tensors, d_counters = store_to_tensors(state.disc.store, "d.")
    tensors.update(d_tensors)
    counters.update(d_counters)
    counters["iteration"] = state.iteration
    config = {
        "kind": "vaskegan",
        "label": state.label,
        "seed": state.seed,
        "n_max": state.n_max,
        "offset_scale": state.offset_scale,
        "train": asdict(state.cfg),
    }
    return Checkpoint(config=config, counters=counters, tensors=tensors)


def load_vaskegan_state(
    ckpt: Checkpoint,
    dataset: Optional[SketchDataset] = None,
    metrics: Optional[MetricsLogger] = None,
    dtype: torch.dtype = torch.float32,
) -> VaskeganTrainState:
    cfg = VaskeganTrainConfig(**ckpt.config["train"])
    ds = dataset if dataset is not None else SketchDataset(sketches=[], n_max=ckpt.config["n_max"])
    state = init_vaskegan(ds, cfg, seed=ckpt.config["seed"], metrics=metrics, dtype=dtype)
    load_store_from_tensors(state.model.store, ckpt.tensors, ckpt.counters, "g.")
    load_store_from_tensors(state.disc.store, ckpt.tensors, ckpt.counters, "d.")
    state.n_max = ckpt.config["n_max"]
    state.offset_scale = ckpt.config["offset_scale"]
    state.label = ckpt.config["label"]
    state.iteration = ckpt.counters.get("iteration", 0)
    return state


def train_iteration(state: VaskeganTrainState) -> dict:
    """One 1:1 update: a VAE-side Adam step, then a discriminator SGD step."""
    cfg = state.cfg
    model, disc = state.model, state.disc
    batch = data.sample_batch(state.data, min(cfg.batch_size, state.data.shape[0]), state.rng)
    b = batch.shape[0]
    enc_mask = dropout_mask((b, cfg.enc_hidden), cfg.dropout, state.rng, model.dtype)
    dec_mask = dropout_mask((b, cfg.dec_hidden), cfg.dropout, state.rng, model.dtype)

    if cfg.use_encoder:
        code = encode(model, batch, rng=state.rng, h_mask=enc_mask)
        l_kl = kl_loss(code.mu, code.sigma_hat)
        z = code.z
    else:
        z = torch.randn(b, cfg.n_z, generator=state.rng, dtype=model.dtype)
        l_kl = torch.zeros((), dtype=model.dtype)

    _, _, l_r = vas_reconstruction_loss(model, batch, z, state.n_max, h_mask=dec_mask)
    fakes = free_run_decode(model, z, state.n_max, rng=state.rng)
    fakes_in = data.prepend_start(fakes)
    l_adv_g = adversarial_generator_loss(disc, fakes_in)
    if cfg.use_encoder:
        total = vae_total_loss(l_r, l_kl, l_adv_g, state.iteration, cfg)
    else:
        total = l_r + l_adv_g
    assert_finite(total, "train_vaskegan total loss")

    lr = scheduled_lr(state.iteration, cfg.lr0, cfg.lr_decay, cfg.lr_decay_every, cfg.lr_min)
    model.store.zero_grad()
    disc.store.zero_grad()
    total.backward()
    clip_gradients(model.store, cfg.clip_lo, cfg.clip_hi)
    adam_step(model.store, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    real_in = data.prepend_start(batch)
    disc.store.zero_grad()
    l_adv_d = disc_loss(disc, real_in, fakes_in.detach())
    l_adv_d.backward()
    clip_gradients(disc.store, cfg.clip_lo, cfg.clip_hi)
    sgd_step(disc.store, lr)
    disc.store.zero_grad()
    model.store.zero_grad()

    state.iteration += 1
    record = {
        "phase": "vaskegan",
        "iter": state.iteration,
        "loss_r": float(l_r.detach()),
        "loss_kl": float(l_kl.detach()),
        "loss_adv_g": float(l_adv_g.detach()),
        "loss_adv_d": float(l_adv_d.detach()),
        "loss_total": float(total.detach()),
        "lr": lr,
    }
    state.metrics.log(**record)
    return record


def train_vaskegan(state: VaskeganTrainState, iters: Optional[int] = None) -> Checkpoint:
    n_iters = state.cfg.total_iters if iters is None else iters
    try:
        for _ in range(n_iters):
            train_iteration(state)
    except NonFiniteError as e:
        raise TrainingDivergedError(str(e), checkpoint=vaskegan_checkpoint(state)) from e
    return vaskegan_checkpoint(state)


def conditional_generate(
    state: VaskeganTrainState, sketch: Sketch, tau: float, rng: torch.Generator
) -> Sketch:
    """Encode a sketch, then free-run decode a reconstruction at ``tau``."""
    batch = data.sketch_to_tensor(sketch, state.model.dtype).unsqueeze(0)
    with torch.no_grad():
        code = encode(state.model, batch, rng=rng)
        seq = free_run_decode(state.model, code.z, state.n_max, rng=rng, tau=tau)
    points = data.tensor_to_sketch(seq[0], label=sketch.label).points
    trimmed = []
    for pt in points:
        trimmed.append(pt)
        if pt.q3 == 1:
            break
    return Sketch(points=tuple(trimmed), label=sketch.label)

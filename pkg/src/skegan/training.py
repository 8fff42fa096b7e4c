"""Two-stage adversarial training for the coupled sketch generator.

Stage one pre-trains the generator on teacher-forced likelihood and the
discriminator on half-real/half-generated batches. Stage two alternates
rounds: one epoch of generator updates (a policy-gradient step on the
pen-state parameters driven by Monte Carlo rollout action values, plus an
adversarial step on the offset parameters through reparameterized offset
samples), then two epochs of discriminator updates.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import IO, Optional

import torch

from . import data
from .checkpoint import Checkpoint, load_store_from_tensors, store_to_tensors
from .discriminator import SkeganDiscriminator, accuracy, make_adversarial_batch, nll_loss
from .errors import NonFiniteError, TrainingDivergedError
from .generator import (
    CoupledGenerator,
    gmm_params_from,
    pen_probs_from,
    reconstruction_loss,
    sample_points_batch,
    generate_batch,
)
from .strokes import SketchDataset, StrokePoint5
from .substrate import (
    ParamStore,
    Tensor,
    adam_step,
    ascent_step,
    assert_finite,
    clip_gradients,
    dropout_mask,
    scheduled_lr,
    sgd_step,
)


@dataclass
class SkeganTrainConfig:
    batch_size: int = 100
    lr0: float = 0.001
    # The published 0.001 is calibrated for 35000-iteration discriminator
    # pre-training; plain SGD needs a proportionally larger step at desk
    # scale. The paper-scale profile sets this back to 0.001.
    lr0_d: float = 0.05
    lr_decay: float = 0.9999
    lr_decay_every_g: int = 700
    lr_decay_every_d: int = 1400
    lr_min: float = 0.00001
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    rollout_max_steps: int = 8
    rollout_count: int = 8
    rollout_update_rate: float = 0.8
    pg_loss_weight: float = 1.0
    adv_loss_weight: float = 1.0
    pretrain_g_iters: int = 2000
    pretrain_d_iters: int = 1000
    rounds: int = 3
    epoch_g_iters: int = 50
    epoch_d_iters: int = 50
    hidden_gen: int = 128
    hidden_disc: int = 64
    n_mixtures: int = 20
    dropout: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "SkeganTrainConfig":
        if self.batch_size <= 0 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be positive and even")
        if min(
            self.lr0,
            self.lr0_d,
            self.lr_decay,
            self.lr_min,
            self.rollout_max_steps,
            self.rollout_count,
            self.rollout_update_rate,
            self.epoch_g_iters,
            self.epoch_d_iters,
            self.hidden_gen,
            self.hidden_disc,
            self.n_mixtures,
        ) <= 0:
            raise ValueError("config values must be positive")
        if self.pg_loss_weight < 0 or self.adv_loss_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        return self


@dataclass
class ActionValueTable:
    """Q(s, a) estimates per generated position; every value is in [0, 1]."""

    values: list[float]

    def __len__(self) -> int:
        return len(self.values)


class MetricsLogger:
    """Line-delimited JSON metrics sink (file stream and/or memory)."""

    def __init__(self, stream: Optional[IO[str]] = None, keep: bool = True):
        self.stream = stream
        self.records: list[dict] = [] if keep else None

    def log(self, **record) -> None:
        if self.records is not None:
            self.records.append(record)
        if self.stream is not None:
            self.stream.write(json.dumps(record) + "\n")
            self.stream.flush()


@dataclass
class SkeganTrainState:
    cfg: SkeganTrainConfig
    generator: CoupledGenerator
    discriminator: SkeganDiscriminator
    rollout_pen_params: dict[str, Tensor]
    data: Tensor
    n_max: int
    offset_scale: float
    label: str
    seed: int
    rng: torch.Generator
    metrics: MetricsLogger
    g_iter: int = 0
    d_iter: int = 0
    round_idx: int = 0
    val_data: Optional[Tensor] = None


def init_skegan(
    dataset: SketchDataset,
    cfg: SkeganTrainConfig,
    seed: int = 0,
    metrics: Optional[MetricsLogger] = None,
    val_dataset: Optional[SketchDataset] = None,
    dtype: torch.dtype = torch.float32,
) -> SkeganTrainState:
    cfg.validate()
    init_rng = torch.Generator().manual_seed(seed)
    gen = CoupledGenerator(
        cfg.hidden_gen, cfg.n_mixtures, dtype=dtype, generator=init_rng, dropout=cfg.dropout
    )
    disc = SkeganDiscriminator(cfg.hidden_disc, dtype=dtype, generator=init_rng)
    return SkeganTrainState(
        cfg=cfg,
        generator=gen,
        discriminator=disc,
        rollout_pen_params=gen.store.copy_values(gen.pen_param_names()),
        data=data.dataset_to_tensor(dataset, dtype),
        n_max=dataset.n_max,
        offset_scale=dataset.offset_scale,
        label=dataset.sketches[0].label if dataset.sketches else "",
        seed=seed,
        rng=torch.Generator().manual_seed(seed + 1),
        metrics=metrics if metrics is not None else MetricsLogger(),
        val_data=data.dataset_to_tensor(val_dataset, dtype) if val_dataset is not None else None,
    )


def skegan_checkpoint(state: SkeganTrainState) -> Checkpoint:
    tensors, counters = store_to_tensors(state.generator.store, "g.")
    d_tensors, d_counters = store_to_tensors(state.discriminator.store, "d.")
    tensors.update(d_tensors)
    counters.update(d_counters)
    for name, value in state.rollout_pen_params.items():
        tensors[f"rollout.{name}"] = value.cpu().numpy().copy()
    counters.update(g_iter=state.g_iter, d_iter=state.d_iter, round_idx=state.round_idx)
    config = {
        "kind": "skegan",
        "label": state.label,
        "seed": state.seed,
        "n_max": state.n_max,
        "offset_scale": state.offset_scale,
        "train": asdict(state.cfg),
    }
    return Checkpoint(config=config, counters=counters, tensors=tensors)


def load_skegan_state(
    ckpt: Checkpoint,
    dataset: Optional[SketchDataset] = None,
    metrics: Optional[MetricsLogger] = None,
    dtype: torch.dtype = torch.float32,
) -> SkeganTrainState:
    """Rebuild a training state (or a sampling-only state) from a checkpoint."""
    cfg = SkeganTrainConfig(**ckpt.config["train"])
    if dataset is not None:
        state = init_skegan(dataset, cfg, seed=ckpt.config["seed"], metrics=metrics, dtype=dtype)
    else:
        empty = SketchDataset(sketches=[], n_max=ckpt.config["n_max"])
        state = SkeganTrainState(
            cfg=cfg,
            generator=CoupledGenerator(cfg.hidden_gen, cfg.n_mixtures, dtype=dtype),
            discriminator=SkeganDiscriminator(cfg.hidden_disc, dtype=dtype),
            rollout_pen_params={},
            data=data.dataset_to_tensor(empty, dtype),
            n_max=ckpt.config["n_max"],
            offset_scale=ckpt.config["offset_scale"],
            label=ckpt.config["label"],
            seed=ckpt.config["seed"],
            rng=torch.Generator().manual_seed(ckpt.config["seed"] + 1),
            metrics=metrics if metrics is not None else MetricsLogger(),
        )
    load_store_from_tensors(state.generator.store, ckpt.tensors, ckpt.counters, "g.")
    load_store_from_tensors(state.discriminator.store, ckpt.tensors, ckpt.counters, "d.")
    state.rollout_pen_params = {
        name: torch.from_numpy(ckpt.tensors[f"rollout.{name}"].copy()).to(dtype)
        for name in state.generator.pen_param_names()
        if f"rollout.{name}" in ckpt.tensors
    }
    state.n_max = ckpt.config["n_max"]
    state.offset_scale = ckpt.config["offset_scale"]
    state.g_iter = ckpt.counters.get("g_iter", 0)
    state.d_iter = ckpt.counters.get("d_iter", 0)
    state.round_idx = ckpt.counters.get("round_idx", 0)
    return state


def _gen_dropout_mask(state: SkeganTrainState, batch: int) -> Optional[Tensor]:
    return dropout_mask(
        (batch, state.cfg.hidden_gen), state.cfg.dropout, state.rng, state.generator.dtype
    )


def _disc_dropout_mask(state: SkeganTrainState, batch: int) -> Optional[Tensor]:
    return dropout_mask(
        (batch, state.cfg.hidden_disc), state.cfg.dropout, state.rng, state.discriminator.dtype
    )


def pretrain_generator(state: SkeganTrainState, iters: Optional[int] = None) -> Checkpoint:
    """Teacher-forced likelihood pre-training with Adam."""
    cfg = state.cfg
    gen = state.generator
    n_iters = cfg.pretrain_g_iters if iters is None else iters
    try:
        for _ in range(n_iters):
            batch = data.sample_batch(state.data, min(cfg.batch_size, state.data.shape[0]), state.rng)
            mask = _gen_dropout_mask(state, batch.shape[0])
            gen.store.zero_grad()
            loss_s, loss_p, loss = reconstruction_loss(gen, batch, state.n_max, h_mask=mask)
            loss.backward()
            clip_gradients(gen.store, cfg.clip_lo, cfg.clip_hi)
            lr = scheduled_lr(state.g_iter, cfg.lr0, cfg.lr_decay, cfg.lr_decay_every_g, cfg.lr_min)
            adam_step(gen.store, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            state.g_iter += 1
            state.metrics.log(
                phase="pretrain_g",
                iter=state.g_iter,
                loss_s=float(loss_s.detach()),
                loss_p=float(loss_p.detach()),
                loss_r=float(loss.detach()),
                lr=lr,
            )
    except NonFiniteError as e:
        raise TrainingDivergedError(str(e), checkpoint=skegan_checkpoint(state)) from e
    state.rollout_pen_params = gen.store.copy_values(gen.pen_param_names())
    return skegan_checkpoint(state)


def discriminator_update(state: SkeganTrainState) -> tuple[float, float]:
    """One SGD step of the discriminator on a fresh 50/50 batch."""
    cfg = state.cfg
    disc = state.discriminator
    seqs, labels = make_adversarial_batch(
        state.data, state.generator, min(cfg.batch_size, 2 * state.data.shape[0]), state.rng
    )
    mask = _disc_dropout_mask(state, seqs.shape[0])
    disc.store.zero_grad()
    logits = disc.logits(seqs, h_mask=mask)
    loss = nll_loss(logits, labels)
    loss.backward()
    clip_gradients(disc.store, cfg.clip_lo, cfg.clip_hi)
    lr = scheduled_lr(state.d_iter, cfg.lr0_d, cfg.lr_decay, cfg.lr_decay_every_d, cfg.lr_min)
    sgd_step(disc.store, lr)
    state.d_iter += 1
    with torch.no_grad():
        acc = accuracy(disc(seqs), labels)
    return float(loss.detach()), acc


def pretrain_discriminator(state: SkeganTrainState, iters: Optional[int] = None) -> Checkpoint:
    """Binary cross-entropy pre-training against current-generator fakes."""
    n_iters = state.cfg.pretrain_d_iters if iters is None else iters
    try:
        for _ in range(n_iters):
            loss, acc = discriminator_update(state)
            state.metrics.log(phase="pretrain_d", iter=state.d_iter, loss=loss, accuracy=acc)
    except NonFiniteError as e:
        raise TrainingDivergedError(str(e), checkpoint=skegan_checkpoint(state)) from e
    return skegan_checkpoint(state)


def generate_with_pen_logprobs(
    state: SkeganTrainState,
) -> tuple[list[StrokePoint5], list[Tensor]]:
    """Sample one sequence keeping the autograd graph of pen log-probs.

    Offsets are sampled as non-differentiable environment values; the pen
    choice at each step records ``log q[chosen]`` for the policy gradient.
    """
    gen = state.generator
    points: list[StrokePoint5] = []
    logprobs: list[Tensor] = []
    st = gen.init_state(1)
    x = data.start_token(gen.dtype).unsqueeze(0)
    for _ in range(state.n_max):
        y_off, y_pen, st = gen.step(x, st)
        log_q = torch.log_softmax(y_pen, dim=-1)
        k = int(torch.multinomial(log_q.detach().exp()[0], 1, generator=state.rng).item())
        logprobs.append(log_q[0, k])
        with torch.no_grad():
            pts, _ = sample_points_batch(
                gmm_params_from(y_off.detach()), pen_probs_from(y_pen.detach()), state.rng
            )
        if k == 2:
            points.append(StrokePoint5(0.0, 0.0, 0, 0, 1))
            break
        onehot = [0, 0, 0]
        onehot[k] = 1
        pt = StrokePoint5(float(pts[0, 0]), float(pts[0, 1]), *onehot)
        points.append(pt)
        x = torch.tensor([list(pt)], dtype=gen.dtype)
    return points, logprobs


def mc_rollout(
    generator: CoupledGenerator,
    prefix: list[StrokePoint5],
    n_rollouts: int,
    max_steps: int,
    n_max: int,
    rng: torch.Generator,
    pen_params: Optional[dict[str, Tensor]] = None,
) -> Tensor:
    """Complete a prefix ``n_rollouts`` times under the rollout policy.

    Returns an (n_rollouts, n_max+1, 5) padded tensor. The prefix is
    re-fed through the rollout policy so the continuation distribution is
    the rollout policy's own, then the branches are sampled in one batch.
    """
    if not prefix:
        raise ValueError("rollout prefix must contain at least one generated tuple")
    prefix_rows = torch.tensor([list(p) for p in prefix], dtype=generator.dtype)
    done = len(prefix) >= n_max or prefix[-1].q3 == 1
    budget = min(max_steps, n_max - len(prefix))
    if done or budget <= 0:
        base = data.pad_points_tensor(prefix_rows, n_max + 1)
        return base.unsqueeze(0).expand(n_rollouts, -1, -1).clone()
    with torch.no_grad():
        st = generator.init_state(1)
        x = data.start_token(generator.dtype).unsqueeze(0)
        for point in prefix:
            _, _, st = generator.step(x, st, pen_params=pen_params)
            x = torch.tensor([list(point)], dtype=generator.dtype)
        branches = generate_batch(
            generator,
            n_rollouts,
            tau=1.0,
            n_max=n_max,
            rng=rng,
            pen_params=pen_params,
            init_state=st.expand(n_rollouts),
            first_input=x.expand(n_rollouts, 5),
            max_new=budget,
        )
        continuation = branches[:, :budget]
        full = torch.cat(
            [prefix_rows.unsqueeze(0).expand(n_rollouts, -1, -1), continuation], dim=1
        )
        pad = n_max + 1 - full.shape[1]
        if pad > 0:
            end = data.end_token(generator.dtype).expand(n_rollouts, pad, 5)
            full = torch.cat([full, end], dim=1)
    return full


def action_values(disc: SkeganDiscriminator, rollouts: Tensor) -> float:
    """Mean discriminator real-probability over a rollout batch."""
    with torch.no_grad():
        out = disc(data.prepend_start(rollouts))
    return float(out.p_real.mean())


def action_value_table(state: SkeganTrainState, points: list[StrokePoint5]) -> ActionValueTable:
    """Q estimate per position of a generated sequence (rollouts before the
    final position, the full-sequence score at it)."""
    cfg = state.cfg
    values = []
    for t in range(1, len(points) + 1):
        if t == len(points):
            full = data.pad_points_tensor(
                torch.tensor([list(p) for p in points], dtype=state.generator.dtype),
                state.n_max + 1,
            ).unsqueeze(0)
            values.append(action_values(state.discriminator, full))
        else:
            rollouts = mc_rollout(
                state.generator,
                points[:t],
                cfg.rollout_count,
                cfg.rollout_max_steps,
                state.n_max,
                state.rng,
                pen_params=state.rollout_pen_params,
            )
            values.append(action_values(state.discriminator, rollouts))
    return ActionValueTable(values=values)


def policy_gradient_update(
    store: ParamStore,
    policy_names: list[str],
    logprobs: list[Tensor],
    q_table: ActionValueTable,
    lr: float,
    pg_weight: float,
) -> float:
    """Clipped REINFORCE ascent on the policy parameter group.

    Maximizes sum_t log pi(y_t) * Q_t * pg_weight; gradients are clamped to
    [-1, 1] before the ascent step.
    """
    if len(logprobs) != len(q_table.values):
        raise ValueError("log-prob and action-value lengths differ")
    if not logprobs:
        return 0.0
    objective = sum(lp * q * pg_weight for lp, q in zip(logprobs, q_table.values))
    store.zero_grad()
    objective.backward()
    clip_gradients(store, -1.0, 1.0, policy_names)
    ascent_step(store, lr, policy_names)
    store.zero_grad()
    return float(objective.detach())


@dataclass
class FrozenDraws:
    """Recorded sampling decisions of one reparameterized generation pass.

    Replaying them makes the fake batch a smooth deterministic function of
    the offset parameters, which is what the finite-difference gradient
    check needs.
    """

    components: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    pens: list = field(default_factory=list)


def reparameterized_fake_batch(
    state: SkeganTrainState,
    batch_size: int,
    rng: Optional[torch.Generator] = None,
    replay: Optional[FrozenDraws] = None,
) -> tuple[Tensor, FrozenDraws]:
    """Free-running generation keeping gradients through offset samples.

    Mixture components and pen states are sampled as constants; within the
    chosen component the offset is mean + Cholesky * noise, differentiable
    in the offset-head parameters. Ended rows continue as end tokens.
    """
    gen = state.generator
    rng = rng if rng is not None else state.rng
    draws = FrozenDraws()
    st = gen.init_state(batch_size)
    x = data.start_token(gen.dtype).expand(batch_size, 5)
    end_row = data.end_token(gen.dtype).expand(batch_size, 5)
    alive = torch.ones(batch_size, dtype=torch.bool)
    rows = []
    for t in range(state.n_max):
        y_off, y_pen, st = gen.step(x, st)
        gmm = gmm_params_from(y_off)
        if replay is not None:
            j, eps, pen_idx = replay.components[t], replay.eps[t], replay.pens[t]
        else:
            j = torch.multinomial(gmm.weights.detach(), 1, generator=rng)
            eps = torch.randn(batch_size, 2, generator=rng, dtype=gen.dtype)
            pen = pen_probs_from(y_pen.detach())
            pen_idx = torch.multinomial(pen.probs, 1, generator=rng).squeeze(1)
        draws.components.append(j)
        draws.eps.append(eps)
        draws.pens.append(pen_idx)
        mu_x = gmm.mu_x.gather(1, j).squeeze(1)
        mu_y = gmm.mu_y.gather(1, j).squeeze(1)
        sx = gmm.sigma_x.gather(1, j).squeeze(1)
        sy = gmm.sigma_y.gather(1, j).squeeze(1)
        rho = gmm.rho.gather(1, j).squeeze(1)
        dx = mu_x + sx * eps[:, 0]
        dy = mu_y + sy * (rho * eps[:, 0] + torch.sqrt(torch.clamp(1 - rho**2, min=1e-12)) * eps[:, 1])
        onehot = torch.nn.functional.one_hot(pen_idx, 3).to(gen.dtype)
        sampled = torch.cat([dx.unsqueeze(1), dy.unsqueeze(1), onehot], dim=1)
        keep = (alive & (pen_idx != 2)).unsqueeze(1)
        row = torch.where(keep, sampled, end_row)
        rows.append(row)
        alive = alive & (pen_idx != 2)
        x = row
    rows.append(end_row)
    return torch.stack(rows, dim=1), draws


def adversarial_update_offsets(
    state: SkeganTrainState, fake_batch: Tensor, lr: float
) -> float:
    """Non-saturating generator loss, minimized over the offset parameters.

    The discriminator and pen-state parameters are left untouched; the loss
    is -log D(fake scored as real), averaged over the batch.
    """
    gen = state.generator
    disc = state.discriminator
    logits = disc.logits(data.prepend_start(fake_batch))
    loss = -torch.log_softmax(logits, dim=-1)[:, 0].mean() * state.cfg.adv_loss_weight
    assert_finite(loss, "adversarial_update_offsets loss")
    gen.store.zero_grad()
    disc.store.zero_grad()
    loss.backward()
    offset_names = gen.offset_param_names()
    clip_gradients(gen.store, state.cfg.clip_lo, state.cfg.clip_hi, offset_names)
    adam_step(
        gen.store, lr, state.cfg.adam_beta1, state.cfg.adam_beta2, state.cfg.adam_eps,
        names=offset_names,
    )
    gen.store.zero_grad()
    disc.store.zero_grad()
    return float(loss.detach())


def soft_update_rollout_policy(state: SkeganTrainState) -> None:
    """rollout <- rate * rollout + (1 - rate) * current pen parameters."""
    rate = state.cfg.rollout_update_rate
    current = state.generator.store.copy_values(state.generator.pen_param_names())
    with torch.no_grad():
        for name, value in state.rollout_pen_params.items():
            value.mul_(rate).add_(current[name], alpha=1 - rate)


def train_round(state: SkeganTrainState) -> SkeganTrainState:
    """One adversarial round: a generator epoch, then two discriminator epochs."""
    cfg = state.cfg
    try:
        for _ in range(cfg.epoch_g_iters):
            lr = scheduled_lr(state.g_iter, cfg.lr0, cfg.lr_decay, cfg.lr_decay_every_g, cfg.lr_min)
            points, logprobs = generate_with_pen_logprobs(state)
            q_table = action_value_table(state, points)
            pg_objective = policy_gradient_update(
                state.generator.store,
                state.generator.pen_param_names(),
                logprobs,
                q_table,
                lr,
                cfg.pg_loss_weight,
            )
            if cfg.adv_loss_weight > 0:
                fakes, _ = reparameterized_fake_batch(state, cfg.batch_size)
                adv_loss = adversarial_update_offsets(state, fakes, lr)
            else:
                adv_loss = 0.0
            state.g_iter += 1
            state.metrics.log(
                phase="adversarial_g",
                iter=state.g_iter,
                round=state.round_idx,
                pg_objective=pg_objective,
                adv_loss=adv_loss,
                seq_len=len(points),
                lr=lr,
            )
        soft_update_rollout_policy(state)
        for _ in range(2 * cfg.epoch_d_iters):
            loss, acc = discriminator_update(state)
            state.metrics.log(
                phase="adversarial_d",
                iter=state.d_iter,
                round=state.round_idx,
                loss=loss,
                accuracy=acc,
            )
    except NonFiniteError as e:
        raise TrainingDivergedError(str(e), checkpoint=skegan_checkpoint(state)) from e
    state.round_idx += 1
    if state.val_data is not None:
        l_r_eval, d_nll = eval_losses(state, state.val_data)
        state.metrics.log(
            phase="eval", round=state.round_idx, l_r_eval=l_r_eval, d_nll=d_nll
        )
    return state


def eval_losses(state: SkeganTrainState, val_data: Tensor) -> tuple[float, float]:
    """Held-out reconstruction loss and discriminator NLL; no updates."""
    with torch.no_grad():
        _, _, l_r = reconstruction_loss(state.generator, val_data, state.n_max)
        count = min(state.cfg.batch_size, 2 * val_data.shape[0])
        seqs, labels = make_adversarial_batch(val_data, state.generator, count, state.rng)
        d_nll = nll_loss(state.discriminator.logits(seqs), labels)
    return float(l_r.detach()), float(d_nll.detach())


def train_skegan(state: SkeganTrainState) -> Checkpoint:
    """Full pipeline: both pre-trainings, then the configured rounds."""
    pretrain_generator(state)
    pretrain_discriminator(state)
    for _ in range(state.cfg.rounds):
        train_round(state)
    return skegan_checkpoint(state)

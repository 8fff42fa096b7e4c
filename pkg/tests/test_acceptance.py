"""Acceptance gate: property checks plus scaled-down end-to-end runs.

Each test prints one PASS line with its measured numbers; run with
``pytest tests/test_acceptance.py -v -s`` to watch them live.
"""

import random
import time

import pytest
import torch

from skegan import data
from skegan.discriminator import accuracy, make_adversarial_batch
from skegan.evaluation import (
    SkeScoreReport,
    dataset_ske_score,
    format_report_table,
    goodness,
    model_ske_score,
    skegan_sampler,
)
from skegan.generator import (
    CoupledGenerator,
    gmm_params_from,
    pen_probs_from,
    reconstruction_loss,
)
from skegan.strokes import (
    END_TOKEN,
    Sketch,
    StrokePoint5,
    normalize_offsets,
    ske_score,
)
from skegan.substrate import ParamStore, finite_diff_check
from skegan.training import (
    ActionValueTable,
    SkeganTrainConfig,
    init_skegan,
    policy_gradient_update,
    pretrain_discriminator,
    pretrain_generator,
    reparameterized_fake_batch,
    skegan_checkpoint,
    train_round,
)
from skegan.vaskegan import (
    VaskeganTrainConfig,
    adversarial_generator_loss,
    encode,
    free_run_decode,
    init_vaskegan,
    kl_anneal,
    train_iteration,
    vae_total_loss,
    vas_reconstruction_loss,
    vaskegan_checkpoint,
)
from toycorpus import box_diagonal_dataset

pytestmark = pytest.mark.acceptance

GRAD_TOL = 1e-4
GRAD_DELTA = 1e-5


def report_line(name, detail):
    print(f"\nACCEPTANCE {name}: PASS ({detail})")


@pytest.fixture(scope="module")
def toy_corpus():
    return normalize_offsets(box_diagonal_dataset(200, seed=0))


class TestGradientSuite:
    """Finite differences vs autograd, 64-bit, models of <= 16 hidden units."""

    def test_gradient_suite(self, toy_corpus):
        t0 = time.time()

        # (a) Reconstruction loss through the coupled generator, gates included.
        gen = CoupledGenerator(
            8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0)
        )
        sketch = [
            StrokePoint5(0.5, -0.2, 1, 0, 0),
            StrokePoint5(-0.3, 0.4, 1, 0, 0),
            StrokePoint5(0.1, 0.2, 0, 1, 0),
            StrokePoint5(0.6, -0.5, 1, 0, 0),
        ]
        batch = data.pad_points_tensor(
            torch.tensor([list(p) for p in sketch], dtype=torch.float64), 6
        ).unsqueeze(0)

        report_a = finite_diff_check(
            lambda: reconstruction_loss(gen, batch, n_max=5)[2],
            gen.store,
            delta=GRAD_DELTA,
            tolerance=GRAD_TOL,
            max_entries_per_param=24,
        )
        assert report_a.passed, f"coupled-generator L_R gradients: {report_a}"
        gate_names = {"pen.gate_h.w", "pen.gate_h.b", "pen.gate_c.w", "pen.gate_c.b"}
        assert gate_names <= set(report_a.per_param), "gates must be covered"

        # (b) KL + reconstruction + adversarial total through the VAE-GAN,
        # with every sampling decision frozen.
        vcfg = VaskeganTrainConfig(
            batch_size=2, enc_hidden=5, dec_hidden=8, n_z=3, disc_hidden=5, dropout=0.0
        )
        vstate = init_vaskegan(toy_corpus, vcfg, seed=1, dtype=torch.float64)
        vbatch = vstate.data[:2]
        n_max = vstate.n_max
        enc_noise = torch.randn(2, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        g = torch.Generator().manual_seed(3)
        noise_rows = [torch.randn(2, 2, generator=g, dtype=torch.float64) for _ in range(n_max)]
        pen_rows = [torch.randint(0, 3, (2,), generator=g) for _ in range(n_max)]

        def vas_loss():
            code = encode(vstate.model, vbatch, noise=enc_noise)
            from skegan.vaskegan import kl_loss

            l_kl = kl_loss(code.mu, code.sigma_hat)
            _, _, l_r = vas_reconstruction_loss(vstate.model, vbatch, code.z, n_max)
            fakes = free_run_decode(
                vstate.model, code.z, n_max, noise_rows=noise_rows, pen_rows=pen_rows
            )
            l_adv = adversarial_generator_loss(vstate.disc, data.prepend_start(fakes))
            return vae_total_loss(l_r, l_kl, l_adv, t=5, cfg=vcfg)

        report_b = finite_diff_check(
            vas_loss,
            vstate.model.store,
            delta=GRAD_DELTA,
            tolerance=GRAD_TOL,
            max_entries_per_param=12,
        )
        assert report_b.passed, f"VASkeGAN total-loss gradients: {report_b}"

        # (c) Reparameterized offset path of the adversarial generator update.
        scfg = SkeganTrainConfig(
            batch_size=2, hidden_gen=8, hidden_disc=6, n_mixtures=3, dropout=0.0
        )
        sstate = init_skegan(toy_corpus, scfg, seed=4, dtype=torch.float64)
        _, frozen = reparameterized_fake_batch(
            sstate, 2, rng=torch.Generator().manual_seed(5)
        )

        def adv_loss():
            fakes, _ = reparameterized_fake_batch(sstate, 2, replay=frozen)
            logits = sstate.discriminator.logits(data.prepend_start(fakes))
            return -torch.log_softmax(logits, dim=-1)[:, 0].mean()

        report_c = finite_diff_check(
            adv_loss,
            sstate.generator.store,
            delta=GRAD_DELTA,
            tolerance=GRAD_TOL,
            names=sstate.generator.offset_param_names(),
            max_entries_per_param=16,
        )
        assert report_c.passed, f"reparameterized offset gradients: {report_c}"

        elapsed = time.time() - t0
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s (limit 120s)"
        report_line(
            "gradient-suite",
            f"max rel err L_R={report_a.max_rel_err:.2e}, "
            f"vae={report_b.max_rel_err:.2e}, adv={report_c.max_rel_err:.2e}, "
            f"runtime {elapsed:.1f}s",
        )


class TestDistributionInvariants:
    def test_heads_over_random_outputs(self):
        t0 = time.time()
        n, m = 10_000, 20
        g = torch.Generator().manual_seed(10)
        y_off = torch.randn(n, 6 * m, generator=g) * 4
        y_pen = torch.randn(n, 3, generator=g) * 4
        base_argmax = pen_probs_from(y_pen, tau=1.0).probs.argmax(dim=-1)
        for tau in (0.2, 0.4, 0.6, 0.8, 1.0):
            gmm = gmm_params_from(y_off, tau)
            assert torch.allclose(gmm.weights.sum(dim=-1), torch.ones(n), atol=1e-6)
            assert torch.all(gmm.weights >= 0)
            assert torch.all(gmm.sigma_x > 0) and torch.all(gmm.sigma_y > 0)
            assert torch.all(gmm.rho.abs() < 1)
            pen = pen_probs_from(y_pen, tau)
            assert torch.allclose(pen.probs.sum(dim=-1), torch.ones(n), atol=1e-6)
            assert torch.equal(pen.probs.argmax(dim=-1), base_argmax)
        elapsed = time.time() - t0
        report_line(
            "distribution-invariants",
            f"10,000 outputs x 5 temperatures, runtime {elapsed:.1f}s",
        )


def brute_force_ske_score(points):
    """Independent counter over the raw tuple sequence."""
    on = 0
    lift = 0
    for dx, dy, q1, q2, q3 in points:
        if q3 == 1:
            break
        if q1 == 1:
            on += 1
        if q2 == 1:
            lift += 1
    if on == 0:
        return float(lift)
    return lift / on


class TestSkeScoreOracle:
    def test_ten_thousand_random_sketches_exact(self):
        rng = random.Random(42)
        checked = 0
        for _ in range(10_000):
            length = rng.randint(0, 20)
            pts = []
            for _ in range(length):
                state = rng.choice(["on", "on", "lift"])
                one_hot = (1, 0, 0) if state == "on" else (0, 1, 0)
                pts.append(StrokePoint5(rng.uniform(-3, 3), rng.uniform(-3, 3), *one_hot))
            pts.append(END_TOKEN)
            pts.extend([END_TOKEN] * rng.randint(0, 3))
            sketch = Sketch(points=tuple(pts))
            assert ske_score(sketch) == brute_force_ske_score(sketch.points)
            checked += 1
        report_line("ske-score-oracle", f"{checked} random sketches, exact equality")

    def test_published_reference_values_as_fixtures(self):
        dataset_cat = SkeScoreReport(mean=0.18, std=0.07, n=2500)
        skegan_cat = SkeScoreReport(mean=0.19, std=0.09, n=2500)
        table = format_report_table({"dataset cat": dataset_cat, "skegan cat": skegan_cat})
        assert "0.18 ± 0.07" in table and "0.19 ± 0.09" in table
        assert goodness(dataset_cat, skegan_cat, epsilon=0.05)


class TestPolicyGradientSanity:
    def test_bandit_policy_reaches_optimal(self):
        t0 = time.time()
        store = ParamStore(dtype=torch.float64)
        store.new_param("pen.theta", (1,), 0.0)
        rng = torch.Generator().manual_seed(11)
        optimal = 0

        def probs():
            logits = torch.cat([store["pen.theta"], torch.zeros(2, dtype=torch.float64)])
            return torch.softmax(logits, dim=-1)

        for _ in range(200):
            p = probs()
            k = int(torch.multinomial(p.detach(), 1, generator=rng).item())
            logits = torch.cat([store["pen.theta"], torch.zeros(2, dtype=torch.float64)])
            logprob = torch.log_softmax(logits, dim=-1)[k]
            reward = 1.0 if k == optimal else 0.0  # fixed reward oracle
            policy_gradient_update(
                store, ["pen.theta"], [logprob], ActionValueTable([reward]), lr=0.5, pg_weight=1.0
            )
        final = probs()[optimal].item()
        elapsed = time.time() - t0
        assert final > 0.95, f"optimal-token probability {final:.3f}"
        assert elapsed < 60
        report_line(
            "policy-gradient-sanity",
            f"pi(optimal)={final:.3f} after 200 steps, runtime {elapsed:.1f}s",
        )


class TestToyEndToEnd:
    def test_skegan_pipeline(self, toy_corpus):
        t0 = time.time()
        s_d = dataset_ske_score(toy_corpus)

        # Discriminator pre-training separates untrained-generator fakes.
        d_cfg = SkeganTrainConfig(pretrain_d_iters=500)
        d_state = init_skegan(toy_corpus, d_cfg, seed=21)
        pretrain_discriminator(d_state)
        with torch.no_grad():
            accs = []
            for _ in range(5):
                seqs, labels = make_adversarial_batch(
                    d_state.data, d_state.generator, 100, d_state.rng
                )
                accs.append(accuracy(d_state.discriminator(seqs), labels))
        d_acc = sum(accs) / len(accs)
        assert d_acc >= 0.9, f"discriminator accuracy vs untrained fakes: {d_acc:.3f}"

        # Main pipeline at the toy profile.
        cfg = SkeganTrainConfig()  # toy defaults: 128/64 hidden, 2000/1000, 50-iter epochs
        state = init_skegan(toy_corpus, cfg, seed=20)
        with torch.no_grad():
            _, _, before = reconstruction_loss(state.generator, state.data, state.n_max)
        pretrain_generator(state)
        with torch.no_grad():
            _, _, after = reconstruction_loss(state.generator, state.data, state.n_max)
        assert after.item() <= 0.5 * before.item(), (
            f"pre-training must halve L_R: {before.item():.3f} -> {after.item():.3f}"
        )

        pretrain_discriminator(state)
        rounds = 3
        for _ in range(rounds):
            train_round(state)

        sampler = skegan_sampler(state.generator, state.n_max)
        rng = torch.Generator().manual_seed(100)
        samples = sampler(200, 1.0, rng)
        s_m = model_ske_score(lambda *_: samples, 200, 1.0, rng)
        assert goodness(s_d, s_m, epsilon=0.1), f"S_D={s_d.mean:.3f} vs S_M={s_m.mean:.3f}"

        ended = sum(1 for s in samples if s.points and s.points[-1].q3 == 1)
        assert ended >= 0.95 * len(samples), f"only {ended}/200 samples terminate with q3"

        elapsed = time.time() - t0
        assert elapsed < 1800, f"toy end-to-end took {elapsed:.0f}s (limit 30 min)"
        report_line(
            "toy-end-to-end",
            f"L_R {before.item():.2f}->{after.item():.2f}, D acc {d_acc:.2f}, "
            f"S_D={s_d.mean:.3f} S_M={s_m.mean:.3f}, q3-terminated {ended}/200, "
            f"{rounds} rounds, runtime {elapsed:.0f}s",
        )

    def test_overfit_train_vs_heldout(self):
        train = normalize_offsets(box_diagonal_dataset(16, seed=30))
        heldout = normalize_offsets(box_diagonal_dataset(64, seed=31))
        cfg = SkeganTrainConfig(hidden_gen=64, hidden_disc=32, batch_size=16)
        state = init_skegan(train, cfg, seed=32)
        pretrain_generator(state, iters=600)
        held_tensor = data.dataset_to_tensor(heldout)[:, : train.n_max + 1]
        if heldout.n_max < train.n_max:
            pytest.skip("held-out corpus shorter than training corpus")
        with torch.no_grad():
            _, _, on_train = reconstruction_loss(state.generator, state.data, state.n_max)
            _, _, on_held = reconstruction_loss(state.generator, held_tensor, state.n_max)
        assert on_train.item() <= on_held.item()
        report_line(
            "overfit-gap",
            f"train L_R {on_train.item():.3f} <= held-out {on_held.item():.3f}",
        )


class TestVaskeganToy:
    def test_vaskegan_pipeline(self, toy_corpus):
        t0 = time.time()
        cfg = VaskeganTrainConfig()  # toy defaults, 2000 iterations
        state = init_vaskegan(toy_corpus, cfg, seed=40)

        def eval_l_r():
            with torch.no_grad():
                code = encode(state.model, state.data, rng=torch.Generator().manual_seed(1))
                _, _, l_r = vas_reconstruction_loss(state.model, state.data, code.z, state.n_max)
            return l_r.item()

        before = eval_l_r()
        for _ in range(cfg.total_iters):
            train_iteration(state)
        after = eval_l_r()
        assert after <= 0.6 * before, f"L_R must drop >= 40%: {before:.3f} -> {after:.3f}"

        # Annealing and floor closed forms.
        assert kl_anneal(0, cfg.eta_min, cfg.anneal_r) == pytest.approx(cfg.eta_min)
        for t in (0, 10, 500, 12345):
            expected = 1 - (1 - cfg.eta_min) * cfg.anneal_r**t
            assert kl_anneal(t, cfg.eta_min, cfg.anneal_r) == pytest.approx(expected, rel=1e-12)
        l_r = torch.tensor(1.25)
        l_adv = torch.tensor(0.5)
        for l_kl_value in (0.05, 0.19, 0.2, 0.7):
            t = 77
            total = vae_total_loss(l_r, torch.tensor(l_kl_value), l_adv, t, cfg)
            eta = kl_anneal(t, cfg.eta_min, cfg.anneal_r)
            manual = 1.25 + cfg.w_kl * eta * max(l_kl_value, cfg.kl_min) + 0.5
            assert total.item() == pytest.approx(manual, rel=1e-6)

        elapsed = time.time() - t0
        assert elapsed < 1200, f"VASkeGAN toy run took {elapsed:.0f}s (limit 20 min)"
        report_line(
            "vaskegan-toy",
            f"L_R {before:.2f}->{after:.2f} ({(1 - after / before) * 100:.0f}% drop), "
            f"KL floor/annealing closed forms verified, runtime {elapsed:.0f}s",
        )


class TestDeterminism:
    def _skegan_run(self, corpus, seed):
        cfg = SkeganTrainConfig(
            pretrain_g_iters=60, pretrain_d_iters=20, epoch_g_iters=10, epoch_d_iters=5
        )
        state = init_skegan(corpus, cfg, seed=seed)
        pretrain_generator(state)
        pretrain_discriminator(state)
        train_round(state)  # 10 G iterations + 10 D iterations
        return skegan_checkpoint(state)

    def test_identical_seeds_bitwise_equal(self, toy_corpus):
        # 100 training iterations total at the toy profile, run twice.
        a = self._skegan_run(toy_corpus, seed=7)
        b = self._skegan_run(toy_corpus, seed=7)
        assert a.bytes_equal(b), "skegan checkpoints differ between identical runs"

        vcfg = VaskeganTrainConfig(total_iters=50)
        runs = []
        for _ in range(2):
            vstate = init_vaskegan(toy_corpus, vcfg, seed=7)
            for _ in range(50):
                train_iteration(vstate)
            runs.append(vaskegan_checkpoint(vstate))
        assert runs[0].bytes_equal(runs[1]), "vaskegan checkpoints differ"
        report_line(
            "determinism",
            "two identical-seed runs, both models, bitwise-equal checkpoints",
        )

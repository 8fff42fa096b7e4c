"""Policy-gradient-weight ablation at toy scale.

Deselected by default (multiplies the toy training time by the number of
weights); run with ``pytest -m slow``.
"""

import pytest

from skegan.evaluation import dataset_ske_score, pg_weight_ablation
from skegan.strokes import normalize_offsets
from skegan.training import SkeganTrainConfig
from toycorpus import box_diagonal_dataset

pytestmark = pytest.mark.slow


def test_ske_score_trend_over_pg_weight():
    corpus = normalize_offsets(box_diagonal_dataset(200, seed=0))
    cfg = SkeganTrainConfig(pretrain_g_iters=1200, pretrain_d_iters=600, rounds=2)
    weights = [0.25, 0.5, 1.0, 2.0]
    table = pg_weight_ablation(corpus, weights, cfg, seed=0, n_samples=400)
    s_d = dataset_ske_score(corpus)
    print()
    for w in weights:
        print(f"pg_weight={w}: {table[w]} (dataset {s_d.mean:.3f})")
    means = [table[w].mean for w in weights]
    # Loose monotone-nondecreasing trend, +-0.02 slack per step.
    for a, b in zip(means, means[1:]):
        assert b >= a - 0.02, f"trend violated beyond slack: {means}"

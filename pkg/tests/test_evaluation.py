"""Ranking metrics against brute-force oracles plus harness-level properties."""

import math

import numpy as np
import pytest

from crossdiff.data import DOMAIN_X, DOMAIN_Y, UserSequence, Vocab
from crossdiff.diffusion import build_schedule
from crossdiff.evaluation import (
    MetricReport,
    auto_negatives,
    compute_metrics,
    evaluate,
    noise_robustness,
    overall_ndcg,
    rank_of_positive,
    sample_batch,
    sample_negatives,
    score_items,
    step_sweep,
)
from crossdiff.network import (
    VARIANTS,
    guidance_forward,
    init_parameters,
    make_eval_batch,
)
from crossdiff.autograd import no_grad

from conftest import tiny_model_cfg


def oracle_metrics(ranks, cutoffs=(5, 10), mrr_cutoff=10):
    n = len(ranks)
    hit = {k: sum(1 for r in ranks if r <= k) / n for k in cutoffs}
    ndcg = {k: sum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / n
            for k in cutoffs}
    mrr = sum(1.0 / r for r in ranks if r <= mrr_cutoff) / n
    return mrr, hit, ndcg


class TestRank:
    def test_strict_winner(self):
        assert rank_of_positive(np.array([5.0, 1.0, 2.0])) == 1

    def test_pessimistic_ties(self):
        assert rank_of_positive(np.array([1.0, 1.0, 0.5])) == 2
        assert rank_of_positive(np.array([1.0, 1.0, 1.0])) == 3

    def test_worst_case(self):
        assert rank_of_positive(np.array([0.0, 1.0, 2.0, 3.0])) == 4

    def test_singleton(self):
        assert rank_of_positive(np.array([7.0])) == 1

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            rank_of_positive(np.array([]))
        with pytest.raises(ValueError, match="non-finite"):
            rank_of_positive(np.array([1.0, np.nan]))
        with pytest.raises(ValueError, match="non-finite"):
            rank_of_positive(np.array([np.inf, 1.0]))


class TestComputeMetrics:
    def test_matches_oracle_on_random_lists(self):
        rng = np.random.default_rng(30)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            ranks = rng.integers(1, 1001, size=n)
            mv = compute_metrics(ranks)
            mrr, hit, ndcg = oracle_metrics(list(ranks))
            assert abs(mv.mrr - mrr) < 1e-12
            for k in (5, 10):
                assert abs(mv.hit[k] - hit[k]) < 1e-12
                assert abs(mv.ndcg[k] - ndcg[k]) < 1e-12
            assert mv.n_users == n

    def test_inequalities(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            ranks = rng.integers(1, 30, size=int(rng.integers(1, 25)))
            mv = compute_metrics(ranks)
            assert mv.hit[5] <= mv.hit[10]
            assert mv.ndcg[5] <= mv.ndcg[10]
            assert mv.ndcg[5] <= mv.hit[5] and mv.ndcg[10] <= mv.hit[10]
            assert mv.mrr <= mv.hit[10]
            for v in (mv.mrr, mv.hit[5], mv.hit[10], mv.ndcg[5], mv.ndcg[10]):
                assert 0.0 <= v <= 1.0

    def test_exact_small_case(self):
        mv = compute_metrics([1, 3, 11])
        assert mv.hit[5] == pytest.approx(2 / 3, abs=1e-15)
        assert mv.hit[10] == pytest.approx(2 / 3, abs=1e-15)
        assert mv.ndcg[10] == pytest.approx((1.0 + 1.0 / math.log2(4)) / 3, abs=1e-15)
        assert mv.mrr == pytest.approx((1.0 + 1.0 / 3) / 3, abs=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError, match="no ranks"):
            compute_metrics([])
        with pytest.raises(ValueError, match="1-based"):
            compute_metrics([0, 2])

    def test_uniform_scorer_mrr(self):
        # iid continuous scores make the positive's rank uniform on 1..1000;
        # the truncated expectation is H_10 / 1000
        n_users, n_cand = 2500, 1000
        rng = np.random.default_rng(32)
        ranks = [rank_of_positive(rng.normal(size=n_cand)) for _ in range(n_users)]
        mv = compute_metrics(ranks)
        h10 = sum(1.0 / r for r in range(1, 11))
        mean = h10 / n_cand
        second = sum(1.0 / r ** 2 for r in range(1, 11)) / n_cand
        sigma = math.sqrt((second - mean ** 2) / n_users)
        assert abs(mv.mrr - mean) < 3 * sigma
        assert abs(mean - 0.00293) < 1e-5


class TestOverallNdcg:
    def test_user_weighted(self):
        ra = compute_metrics([1, 1, 2])        # 3 users
        rb = compute_metrics([20])             # 1 user
        rep = MetricReport(per_domain={"x": ra, "y": rb}, n_users=4, fingerprint={})
        want = (ra.ndcg[10] * 3 + rb.ndcg[10] * 1) / 4
        assert overall_ndcg(rep, 10) == pytest.approx(want, abs=1e-15)

    def test_empty_report(self):
        rep = MetricReport(per_domain={}, n_users=0, fingerprint={})
        with pytest.raises(ValueError, match="no users"):
            overall_ndcg(rep)


class TestNegatives:
    def test_count_distinct_excluded(self):
        vocab = Vocab(DOMAIN_X, 0, ["i%d" % i for i in range(30)])
        exclude = {vocab.index_of("i0"), vocab.index_of("i1"), vocab.index_of("i2")}
        rng = np.random.default_rng(33)
        negs = sample_negatives(rng, vocab, exclude, 20)
        assert len(negs) == 20
        assert len(set(negs.tolist())) == 20
        assert not (set(negs.tolist()) & exclude)
        for g in negs:
            assert vocab.contains(int(g))
            assert int(g) not in (vocab.mask_index, vocab.pad_index)

    def test_deterministic_per_stream(self):
        vocab = Vocab(DOMAIN_X, 0, ["i%d" % i for i in range(30)])
        a = sample_negatives(np.random.default_rng(7), vocab, set(), 10)
        b = sample_negatives(np.random.default_rng(7), vocab, set(), 10)
        assert np.array_equal(a, b)

    def test_insufficient_pool(self):
        vocab = Vocab(DOMAIN_X, 0, ["a", "b", "c"])
        with pytest.raises(ValueError, match="eligible negatives"):
            sample_negatives(np.random.default_rng(0), vocab, {vocab.index_of("a")}, 3)

    def test_auto_negatives_bound(self):
        vx = Vocab(DOMAIN_X, 0, ["i%d" % i for i in range(20)])
        vy = Vocab(DOMAIN_Y, vx.size, ["j%d" % i for i in range(10)])

        class Stub:
            vocab_x, vocab_y = vx, vy
            validation = [(UserSequence(0, [(vx.index_of("i0"), DOMAIN_X)]),
                           (vx.index_of("i1"), DOMAIN_X))]
            test = [(UserSequence(0, [(vy.index_of("j0"), DOMAIN_Y),
                                      (vy.index_of("j1"), DOMAIN_Y)]),
                     (vy.index_of("j2"), DOMAIN_Y))]

            def vocab_of(self, d):
                return vx if d == DOMAIN_X else vy

        stub = Stub()
        # validation user: 20 - 2 = 18 eligible; test user: 10 - 3 = 7
        assert auto_negatives(stub) == 7
        assert auto_negatives(stub, cap=5) == 5


class TestScoreItems:
    def test_distribution(self):
        rng = np.random.default_rng(34)
        emb = rng.normal(size=(12, 6))
        vec = rng.normal(size=6)
        p = score_items(vec, None, emb)
        assert p.shape == (12,)
        assert abs(p.sum() - 1.0) < 1e-12
        assert p[0] == 0.0 and p[1] == 0.0
        assert np.all(p[2:] > 0)

    def test_orders_by_alignment(self):
        emb = np.zeros((5, 3))
        emb[2] = [1.0, 0, 0]
        emb[3] = [3.0, 0, 0]
        emb[4] = [-1.0, 0, 0]
        p = score_items(np.array([1.0, 0, 0]), None, emb)
        assert p[3] > p[2] > p[4]

    def test_guidance_vector_added(self):
        rng = np.random.default_rng(35)
        emb = rng.normal(size=(8, 4))
        x0 = rng.normal(size=4)
        g = rng.normal(size=4)
        assert np.allclose(score_items(x0, g, emb), score_items(x0 + g, None, emb),
                           atol=0, rtol=0)


@pytest.fixture(scope="module")
def eval_setup(small_split_mod, sched_mod):
    split = small_split_mod
    cfg = tiny_model_cfg(split)
    params = init_parameters(cfg, rng_seed=17)
    return split, cfg, params, sched_mod


@pytest.fixture(scope="module")
def small_split_mod():
    from conftest import make_split
    split, _ = make_split()
    return split


@pytest.fixture(scope="module")
def sched_mod():
    return build_schedule(6)


class TestSampleBatch:
    def test_batch_composition_invariance(self, eval_setup):
        split, cfg, params, sched = eval_setup
        seqs = [s for s, _ in split.test[:6]]
        batch = make_eval_batch(seqs, split.vocab_x, split.vocab_y)
        with no_grad():
            gb = guidance_forward(params, cfg, batch, VARIANTS["full"])
        full = sample_batch(params, cfg, sched, gb.guide, gb.guide_valid,
                            batch.user_index, seed=5, n_steps=sched.T)
        # the same user alone must reproduce its row exactly
        solo_batch = make_eval_batch([seqs[3]], split.vocab_x, split.vocab_y)
        with no_grad():
            gb1 = guidance_forward(params, cfg, solo_batch, VARIANTS["full"])
        solo = sample_batch(params, cfg, sched, gb1.guide, gb1.guide_valid,
                            solo_batch.user_index, seed=5, n_steps=sched.T)
        assert np.array_equal(solo[0], full[3])

    def test_seed_and_steps_matter(self, eval_setup):
        split, cfg, params, sched = eval_setup
        seqs = [s for s, _ in split.test[:4]]
        batch = make_eval_batch(seqs, split.vocab_x, split.vocab_y)
        with no_grad():
            gb = guidance_forward(params, cfg, batch, VARIANTS["full"])
        a = sample_batch(params, cfg, sched, gb.guide, gb.guide_valid,
                         batch.user_index, seed=5, n_steps=sched.T)
        b = sample_batch(params, cfg, sched, gb.guide, gb.guide_valid,
                         batch.user_index, seed=5, n_steps=sched.T)
        c = sample_batch(params, cfg, sched, gb.guide, gb.guide_valid,
                         batch.user_index, seed=6, n_steps=sched.T)
        d = sample_batch(params, cfg, sched, gb.guide, gb.guide_valid,
                         batch.user_index, seed=5, n_steps=2)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)
        assert np.all(np.isfinite(a))


class TestEvaluate:
    def test_deterministic_and_seed_sensitive(self, eval_setup):
        split, cfg, params, sched = eval_setup
        kw = dict(seed=3, n_negatives=15)
        a = evaluate(split.test, params, cfg, sched, "full",
                     split.vocab_x, split.vocab_y, **kw)
        b = evaluate(split.test, params, cfg, sched, "full",
                     split.vocab_x, split.vocab_y, **kw)
        assert a == b
        c = evaluate(split.test, params, cfg, sched, "full",
                     split.vocab_x, split.vocab_y, seed=4, n_negatives=15)
        assert c.fingerprint["seed"] == 4
        assert a.fingerprint["seed"] == 3

    def test_batch_size_invariance(self, eval_setup):
        split, cfg, params, sched = eval_setup
        a = evaluate(split.test, params, cfg, sched, "full", split.vocab_x,
                     split.vocab_y, seed=3, n_negatives=15, batch_size=64)
        b = evaluate(split.test, params, cfg, sched, "full", split.vocab_x,
                     split.vocab_y, seed=3, n_negatives=15, batch_size=3)
        assert a.per_domain == b.per_domain

    def test_fingerprint_fields(self, eval_setup):
        split, cfg, params, sched = eval_setup
        rep = evaluate(split.test, params, cfg, sched, "diff", split.vocab_x,
                       split.vocab_y, seed=0, n_negatives=10)
        fp = rep.fingerprint
        assert fp["trained_steps"] == "untrained"
        assert fp["variant"] == "diff"
        assert fp["n_steps"] == sched.T
        assert fp["n_negatives"] == 10
        rep2 = evaluate(split.test, params, cfg, sched, "diff", split.vocab_x,
                        split.vocab_y, seed=0, n_negatives=10, trained_steps=40)
        assert rep2.fingerprint["trained_steps"] == 40

    def test_user_counts_per_domain(self, eval_setup):
        split, cfg, params, sched = eval_setup
        rep = evaluate(split.test, params, cfg, sched, "full", split.vocab_x,
                       split.vocab_y, seed=0, n_negatives=10)
        by_dom = {d: 0 for d in ("x", "y")}
        for _, (_, td) in split.test:
            by_dom[td] += 1
        for d, mv in rep.per_domain.items():
            assert mv.n_users == by_dom[d]
        assert rep.n_users == len(split.test)

    def test_validation_errors(self, eval_setup):
        split, cfg, params, sched = eval_setup
        with pytest.raises(ValueError, match="nothing"):
            evaluate([], params, cfg, sched, "full", split.vocab_x, split.vocab_y)
        with pytest.raises(ValueError, match="align"):
            evaluate(split.test, params, cfg, sched, "full", split.vocab_x,
                     split.vocab_y, exclude_seqs=[split.test[0][0]])


class TestRobustness:
    def test_rate_zero_retains_exactly_one(self, eval_setup):
        split, cfg, params, sched = eval_setup
        rows = noise_robustness(split.test, params, cfg, sched, "full",
                                split.vocab_x, split.vocab_y, [0.0, 0.2],
                                seed=3, n_negatives=15)
        assert rows[0]["noise_rate"] == 0.0
        assert rows[0]["retained"] == 1.0
        assert rows[1]["noise_rate"] == 0.2
        base = rows[0]["ndcg10"]
        assert rows[1]["retained"] == rows[1]["ndcg10"] / base

    def test_deterministic(self, eval_setup):
        split, cfg, params, sched = eval_setup
        kw = dict(seed=3, n_negatives=15)
        a = noise_robustness(split.test, params, cfg, sched, "full",
                             split.vocab_x, split.vocab_y, [0.0, 0.3], **kw)
        b = noise_robustness(split.test, params, cfg, sched, "full",
                             split.vocab_x, split.vocab_y, [0.0, 0.3], **kw)
        assert [r["ndcg10"] for r in a] == [r["ndcg10"] for r in b]

    def test_rate_streams_differ(self, eval_setup):
        split, cfg, params, sched = eval_setup
        rows = noise_robustness(split.test, params, cfg, sched, "full",
                                split.vocab_x, split.vocab_y,
                                [0.0, 0.1, 0.3], seed=3, n_negatives=15)
        fps = [r["report"].fingerprint["n_negatives"] for r in rows]
        assert fps == [15, 15, 15]


class TestStepSweep:
    def test_full_chain_matches_default_eval(self, eval_setup):
        split, cfg, params, sched = eval_setup
        rep = evaluate(split.test, params, cfg, sched, "full", split.vocab_x,
                       split.vocab_y, seed=5, n_negatives=15)
        rows = step_sweep(split.test, params, cfg, sched, "full", split.vocab_x,
                          split.vocab_y, [sched.T, 2], seed=5, n_negatives=15)
        assert rows[0]["n_steps"] == sched.T
        assert rows[0]["report"] == rep
        assert rows[1]["report"] != rep

    def test_row_count_and_validation(self, eval_setup):
        split, cfg, params, sched = eval_setup
        rows = step_sweep(split.test, params, cfg, sched, "full", split.vocab_x,
                          split.vocab_y, [1, 2, 3], seed=5, n_negatives=10)
        assert [r["n_steps"] for r in rows] == [1, 2, 3]
        for bad in (0, sched.T + 1):
            with pytest.raises(ValueError, match="step count"):
                step_sweep(split.test, params, cfg, sched, "full", split.vocab_x,
                           split.vocab_y, [bad], seed=5, n_negatives=10)


class TestAblationHarness:
    def test_grid_shape(self, small_split_mod, sched_mod):
        from crossdiff.evaluation import ablation_study
        from crossdiff.trainer import TrainConfig

        split = small_split_mod
        cfg = tiny_model_cfg(split)
        tcfg = TrainConfig(batch_size=64, epochs=1, warmup_epochs=0, seed=0)
        rows = ablation_study(split, ["diff", "full"], cfg, tcfg, sched_mod,
                              seeds=(0, 1), n_negatives=10, eval_seed=2)
        assert [r["variant"] for r in rows] == ["diff", "full"]
        for row in rows:
            assert len(row["per_seed"]) == 2
            assert row["ndcg10_mean"] == pytest.approx(np.mean(row["per_seed"]))
            for rep in row["reports"]:
                assert rep.fingerprint["variant"] == row["variant"]
                assert rep.fingerprint["trained_steps"] != "untrained"

    def test_unknown_variant(self, small_split_mod, sched_mod):
        from crossdiff.evaluation import run_ablation
        from crossdiff.trainer import TrainConfig

        split = small_split_mod
        cfg = tiny_model_cfg(split)
        with pytest.raises(ValueError, match="variant"):
            run_ablation(split, "extra", cfg, TrainConfig(epochs=1), sched_mod)

"""Ranking evaluation.

Protocol: for each held-out user the guided sampler reconstructs a target
vector, the scores of the true next item and k sampled negatives are
compared, and the 1-based rank of the true item (pessimistic under ties)
feeds hit rate, NDCG, and reciprocal-rank metrics per domain. Robustness,
step-count sweeps, and the ablation grid reuse the same pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, no_grad
from .data import (DOMAIN_X, DOMAINS, AugmentationSpec, DatasetSplit,
                   N_RESERVED, Vocab, augment)
from .diffusion import DiffusionSchedule, NoisyState, reverse_step, strided_steps
from .network import (VARIANTS, ModelConfig, ParameterSet, denoise,
                      guidance_forward, make_eval_batch)


@dataclass(frozen=True)
class MetricValues:
    mrr: float
    hit: dict
    ndcg: dict
    n_users: int


@dataclass(frozen=True)
class MetricReport:
    per_domain: dict
    n_users: int
    fingerprint: dict


def rank_of_positive(scores: np.ndarray) -> int:
    """1-based rank of scores[0] among all entries, ties resolved pessimistically."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise ValueError("empty candidate list")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite candidate scores")
    return int(1 + np.sum(scores[1:] >= scores[0]))


def compute_metrics(ranks, cutoffs=(5, 10), mrr_cutoff: int = 10) -> MetricValues:
    """Aggregate 1-based ranks; reciprocal rank counts only hits within the cutoff."""
    ranks = np.asarray(list(ranks), dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    if np.any(ranks < 1):
        raise ValueError("ranks must be 1-based")
    hit = {int(k): float(np.mean(ranks <= k)) for k in cutoffs}
    ndcg = {int(k): float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)))
            for k in cutoffs}
    mrr = float(np.mean(np.where(ranks <= mrr_cutoff, 1.0 / ranks, 0.0)))
    return MetricValues(mrr=mrr, hit=hit, ndcg=ndcg, n_users=int(ranks.size))


def overall_ndcg(report: MetricReport, k: int = 10) -> float:
    """User-weighted NDCG@k across domains."""
    num = den = 0.0
    for mv in report.per_domain.values():
        num += mv.ndcg[k] * mv.n_users
        den += mv.n_users
    if den == 0:
        raise ValueError("report contains no users")
    return num / den


def sample_negatives(rng: np.random.Generator, vocab: Vocab, exclude,
                     k: int) -> np.ndarray:
    """k distinct real items of the domain outside the excluded set."""
    exclude = set(exclude)
    cand = np.array([i for i in vocab.real_indices() if i not in exclude],
                    dtype=np.int64)
    if cand.size < k:
        raise ValueError("domain %s has %d eligible negatives, need %d"
                         % (vocab.domain, cand.size, k))
    return rng.choice(cand, size=k, replace=False)


def auto_negatives(split: DatasetSplit, cap: int = 999) -> int:
    """Largest negative count every held-out user can support, capped."""
    worst = None
    for part in (split.validation, split.test):
        for seq, (tg, td) in part:
            vocab = split.vocab_of(td)
            used = {g for g in seq.indices if vocab.contains(g)}
            used.add(tg)
            avail = vocab.n_items - len(used)
            worst = avail if worst is None else min(worst, avail)
    if worst is None:
        raise ValueError("split has no held-out users")
    return max(1, min(cap, worst))


def score_items(x0_hat: np.ndarray, g_hat: np.ndarray | None,
                emb: np.ndarray) -> np.ndarray:
    """Probabilities over one domain's full table; reserved rows get zero mass."""
    vec = x0_hat if g_hat is None else x0_hat + g_hat
    logits = emb @ vec
    logits[:N_RESERVED] = -np.inf
    shift = logits.max()
    p = np.exp(logits - shift)
    return p / p.sum()


def sample_batch(params: ParameterSet, cfg: ModelConfig, sched: DiffusionSchedule,
                 guide, guide_valid: np.ndarray, user_indices, seed: int,
                 n_steps: int) -> np.ndarray:
    """Guided reverse chains for a batch of users, one RNG stream per user.

    Draw order per user is fixed (start vector, then one noise draw per
    non-final transition), so results do not depend on batch composition.
    """
    B, d = len(user_indices), cfg.d
    rngs = [np.random.default_rng([seed, 0, int(u)]) for u in user_indices]
    x = np.stack([r.standard_normal(d) for r in rngs])
    steps = strided_steps(sched.T, n_steps)
    x0_hat = None
    with no_grad():
        for i, t in enumerate(steps):
            out = denoise(params, cfg, Tensor(x), np.full(B, t, dtype=np.int64),
                          guide, guide_valid)
            x0_hat = out.data
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            if t_prev > 0:
                noise = np.stack([r.standard_normal(d) for r in rngs])
            else:
                noise = np.zeros((B, d))
            x = reverse_step(NoisyState(x_t=x, t=t, eps=noise), x0_hat, sched,
                             noise, t_prev=t_prev)
    return x0_hat


def evaluate(part, params: ParameterSet, model_cfg: ModelConfig,
             sched: DiffusionSchedule, variant_name: str, vocab_x: Vocab,
             vocab_y: Vocab, *, seed: int = 0, n_steps: int | None = None,
             n_negatives: int = 999, batch_size: int = 64,
             trained_steps: int | None = None,
             exclude_seqs=None) -> MetricReport:
    """Negative-sampled ranking metrics over (sequence, target) pairs.

    Negatives exclude the positive and the user's history. exclude_seqs, when
    given, supplies the history for exclusion instead of the scored sequences
    themselves; the robustness sweep uses it to keep candidate sets identical
    across corruption rates.
    """
    if not part:
        raise ValueError("nothing to evaluate")
    if exclude_seqs is not None and len(exclude_seqs) != len(part):
        raise ValueError("exclude_seqs must align with part")
    variant = VARIANTS[variant_name]
    steps = sched.T if n_steps is None else n_steps
    vocabs = {d: (vocab_x if d == DOMAIN_X else vocab_y) for d in DOMAINS}
    ranks = {d: [] for d in DOMAINS}
    for lo in range(0, len(part), batch_size):
        chunk = part[lo:lo + batch_size]
        batch = make_eval_batch([s for s, _ in chunk], vocab_x, vocab_y)
        with no_grad():
            gb = guidance_forward(params, model_cfg, batch, variant)
        x0_hat = sample_batch(params, model_cfg, sched, gb.guide, gb.guide_valid,
                              batch.user_index, seed, steps)
        gx = gb.gx_hat.data if gb.gx_hat is not None else None
        gy = gb.gy_hat.data if gb.gy_hat is not None else None
        for b, (seq, (tg, td)) in enumerate(chunk):
            vocab = vocabs[td]
            g_hat = None
            if variant.use_de:
                g_hat = gx[b] if td == DOMAIN_X else gy[b]
            emb = params["emb_x" if td == DOMAIN_X else "emb_y"].data
            probs = score_items(x0_hat[b], g_hat, emb)
            history = (exclude_seqs[lo + b] if exclude_seqs is not None else seq).indices
            rng_neg = np.random.default_rng([seed, 1, int(seq.user_index)])
            negs = sample_negatives(rng_neg, vocab, set(history) | {tg},
                                    n_negatives)
            cand = np.concatenate([[tg], negs]) - vocab.base
            ranks[td].append(rank_of_positive(probs[cand]))
    per_domain = {d: compute_metrics(rs) for d, rs in ranks.items() if rs}
    n_users = sum(mv.n_users for mv in per_domain.values())
    fingerprint = {"seed": seed, "n_steps": steps, "n_negatives": n_negatives,
                   "n_users": n_users, "variant": variant_name,
                   "trained_steps": ("untrained" if trained_steps is None
                                     else trained_steps),
                   "model": {"d": model_cfg.d, "T": model_cfg.T,
                             "enc_layers": model_cfg.enc_layers,
                             "dec_layers": model_cfg.dec_layers},
                   "schedule": sched.spec()}
    return MetricReport(per_domain=per_domain, n_users=n_users,
                        fingerprint=fingerprint)


def noise_robustness(part, params: ParameterSet, model_cfg: ModelConfig,
                     sched: DiffusionSchedule, variant_name: str, vocab_x: Vocab,
                     vocab_y: Vocab, noise_rates, *, seed: int = 0,
                     n_steps: int | None = None, n_negatives: int = 999,
                     batch_size: int = 64, trained_steps: int | None = None):
    """Metric decay under history corruption.

    Each user's held-out sequence is perturbed by inserting or substituting
    same-domain random items at the given rate (op chosen 50/50 per user);
    targets stay clean, and negatives are drawn against the clean history so
    every rate ranks the identical candidate set. Returns one row per rate
    with the report and the NDCG@10 fraction retained relative to the clean
    run.
    """
    kw = dict(seed=seed, n_steps=n_steps, n_negatives=n_negatives,
              batch_size=batch_size, trained_steps=trained_steps,
              exclude_seqs=[s for s, _ in part])
    clean = evaluate(part, params, model_cfg, sched, variant_name,
                     vocab_x, vocab_y, **kw)
    base = overall_ndcg(clean, 10)
    if base <= 0:
        raise ValueError("clean-run NDCG@10 is zero; retained fractions undefined")
    rows = []
    for rate in noise_rates:
        if rate == 0:
            rep = clean
        else:
            pert = []
            for seq, target in part:
                r = np.random.default_rng([seed, 2, int(seq.user_index),
                                           int(round(rate * 1000))])
                op = "insert" if r.random() < 0.5 else "substitute"
                aseq = augment(seq, AugmentationSpec(op, rate, int(r.integers(2 ** 63))),
                               vocab_x, vocab_y, max_seq_len=model_cfg.max_seq_len)
                pert.append((aseq, target))
            rep = evaluate(pert, params, model_cfg, sched, variant_name,
                           vocab_x, vocab_y, **kw)
        nd = overall_ndcg(rep, 10)
        rows.append({"noise_rate": float(rate), "report": rep,
                     "ndcg10": nd, "retained": nd / base})
    return rows


def step_sweep(part, params: ParameterSet, model_cfg: ModelConfig,
               sched: DiffusionSchedule, variant_name: str, vocab_x: Vocab,
               vocab_y: Vocab, step_counts, *, seed: int = 0,
               n_negatives: int = 999, batch_size: int = 64,
               trained_steps: int | None = None):
    """Evaluate under different reverse-chain lengths, everything else fixed."""
    rows = []
    for n in step_counts:
        if not (1 <= n <= sched.T):
            raise ValueError("step count %d outside [1, %d]" % (n, sched.T))
        rep = evaluate(part, params, model_cfg, sched, variant_name, vocab_x,
                       vocab_y, seed=seed, n_steps=int(n),
                       n_negatives=n_negatives, batch_size=batch_size,
                       trained_steps=trained_steps)
        rows.append({"n_steps": int(n), "report": rep,
                     "ndcg10": overall_ndcg(rep, 10)})
    return rows


def run_ablation(split: DatasetSplit, variant_name: str, model_cfg: ModelConfig,
                 train_cfg, sched: DiffusionSchedule, *, eval_seed: int = 0,
                 n_negatives: int | None = None, eval_steps: int | None = None,
                 out_dir: str | None = None, verbose: bool = False) -> dict:
    """Train one variant from scratch and evaluate it on the test part."""
    from .trainer import fit, init_state

    if variant_name not in VARIANTS:
        raise ValueError("unknown variant %r" % variant_name)
    if n_negatives is None:
        n_negatives = auto_negatives(split)
    state = init_state(model_cfg, train_cfg, sched, variant=variant_name)
    fit(state, split, out_dir=out_dir, eval_every=0, verbose=verbose)
    rep = evaluate(split.test, state.params, model_cfg, sched, variant_name,
                   split.vocab_x, split.vocab_y, seed=eval_seed,
                   n_steps=eval_steps, n_negatives=n_negatives,
                   trained_steps=state.global_step)
    return {"variant": variant_name, "seed": train_cfg.seed, "report": rep,
            "ndcg10": overall_ndcg(rep, 10)}


def ablation_study(split: DatasetSplit, variants, model_cfg: ModelConfig,
                   train_cfg, sched: DiffusionSchedule, seeds=(0, 1, 2),
                   **kwargs) -> list[dict]:
    """The full grid: every variant trained with every seed, means reported."""
    from dataclasses import replace

    rows = []
    for variant in variants:
        runs = [run_ablation(split, variant, model_cfg,
                             replace(train_cfg, seed=seed), sched, **kwargs)
                for seed in seeds]
        rows.append({"variant": variant,
                     "per_seed": [r["ndcg10"] for r in runs],
                     "ndcg10_mean": float(np.mean([r["ndcg10"] for r in runs])),
                     "reports": [r["report"] for r in runs]})
    return rows

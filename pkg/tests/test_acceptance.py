"""Acceptance suite: every exit criterion at its stated tolerance.

Each criterion prints one PASS/FAIL line (visible with ``pytest -v -s``).
The end-to-end trend checks train ten short seeded runs on a synthetic
three-topic corpus of ~2000 instances; on one CPU core the whole module
takes roughly ten minutes.
"""

import functools
import itertools
import math
import time
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import stats

from helpers import fd_grad, max_rel_error, pick_indices
from test_summarizer import exhaustive_best, random_extraction_case
from treesum.config import Config
from treesum.corpus import (
    Instance,
    Review,
    SyntheticSpec,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    sentence_topic_labels,
    split_instances,
)
from treesum.latent_gmm import (
    em_topic_posteriors,
    gaussian_kl,
    kl_bound_gap,
    logdet_cov,
    topic_posterior_covs,
    topic_posterior_means,
    topic_priors,
    weighted_mean_sentence_logdet,
)
from treesum.metrics import rouge_l, rouge_n, self_bleu
from treesum.model import SummaryModel, instance_to_tensors
from treesum.objective import (
    ablation_flags,
    compute_loss,
    evaluate_mean_loss,
    load_checkpoint,
    train,
)
from treesum.summarizer import extract_summary, summarize_instance
from treesum.topic_model import TopicTree, TreeTopicModel

torch.set_num_threads(1)

VAR_FLOOR = math.exp(0.5)


def criterion(name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.time()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {name}: FAIL ({time.time() - start:.1f}s)")
                raise
            print(f"\nACCEPTANCE {name}: PASS ({time.time() - start:.1f}s)")

        return run

    return wrap


# ----------------------------------------------------------------------
# Latent-mixture inequality suite
# ----------------------------------------------------------------------

TREE_SHAPES = ([], [2], [3], [4], [2, 2], [3, 3])  # 1..13 topics


def random_floored_instance(rng, n=8):
    tree = TopicTree(list(TREE_SHAPES[rng.integers(len(TREE_SHAPES))]))
    s = int(rng.integers(2, 13))
    means = torch.tensor(rng.normal(scale=rng.uniform(0.3, 2.0), size=(s, n)))
    extra = rng.exponential(scale=rng.uniform(0.1, 2.0), size=(s, n))
    extra[rng.uniform(size=(s, n)) < 0.2] = 0.0  # exercise exact-floor entries
    variances = torch.tensor(VAR_FLOOR + extra)
    alpha = float(rng.choice([0.1, 0.5, 1.0, 5.0]))
    theta = torch.tensor(rng.dirichlet([alpha] * tree.n_nodes, size=s))
    return means, variances, theta, tree


@criterion("KL upper-bound inequality suite (1000 instances)")
def test_kl_bound_inequality_suite():
    start = time.time()
    rng = np.random.default_rng(2024)
    n = 8
    floor = n * 0.5
    for _ in range(1000):
        means, variances, theta, tree = random_floored_instance(rng, n=n)
        posterior = em_topic_posteriors(means, variances, theta, tree)
        priors = topic_priors(posterior, tree)
        for k in range(tree.n_nodes):
            gap = kl_bound_gap(means, variances, theta, posterior, priors, k).item()
            assert gap >= -1e-8, f"gap {gap} at topic {k} of {tree}"
            if posterior.empty[k]:
                # a starved topic inherits its prior instead of moment
                # matching, so the chain does not describe it
                torch.testing.assert_close(posterior.covs[k], priors.covs[k])
                continue
            topic_logdet = logdet_cov(posterior.covs[k]).item()
            sentence_mean = weighted_mean_sentence_logdet(variances, theta, k).item()
            assert topic_logdet >= sentence_mean - 1e-9
            assert sentence_mean >= floor - 1e-9
    assert time.time() - start < 60.0


# ----------------------------------------------------------------------
# EM moment-matching oracle
# ----------------------------------------------------------------------


def brute_force_moments(means, variances, theta, k):
    """Direct weighted-sum evaluation of the M-step formulas."""
    s, n = means.shape
    w = theta[:, k]
    mass = float(w.sum())
    mean = np.zeros(n)
    for i in range(s):
        mean += float(w[i]) * means[i].numpy()
    mean /= mass
    cov = np.zeros((n, n))
    for i in range(s):
        diff = means[i].numpy() - mean
        cov += float(w[i]) * (np.diag(variances[i].numpy()) + np.outer(diff, diff))
    cov /= mass
    return mean, cov


@criterion("EM moment-matching vs brute force (100 instances)")
def test_em_oracle_suite():
    start = time.time()
    rng = np.random.default_rng(7)
    for _ in range(100):
        means, variances, theta, tree = random_floored_instance(rng, n=8)
        topic_means, masses, empty = topic_posterior_means(means, theta, tree)
        covs = topic_posterior_covs(means, variances, theta, topic_means, tree)
        for k in range(tree.n_nodes):
            if empty[k]:
                continue
            want_mean, want_cov = brute_force_moments(means, variances, theta, k)
            np.testing.assert_allclose(topic_means[k].numpy(), want_mean, atol=1e-8)
            np.testing.assert_allclose(
                covs[k].numpy(), want_cov + 1e-6 * np.eye(8), atol=1e-8
            )
    assert time.time() - start < 10.0


# ----------------------------------------------------------------------
# Closed-form KL vs Monte Carlo
# ----------------------------------------------------------------------


@criterion("Gaussian KL vs Monte Carlo (20 pairs, 1e6 samples)")
def test_kl_monte_carlo_oracle():
    start = time.time()
    rng = np.random.default_rng(11)
    n = 4
    for pair in range(20):
        q_mean = rng.normal(size=n)
        q_var = VAR_FLOOR + rng.exponential(size=n)
        p_mean = rng.normal(size=n)
        a = rng.normal(size=(n, n)) * rng.uniform(0.3, 1.5)
        p_cov = a @ a.T + np.eye(n)
        closed = gaussian_kl(
            torch.tensor(q_mean), torch.tensor(q_var), torch.tensor(p_mean), torch.tensor(p_cov)
        ).item()
        draws = rng.normal(size=(10**6, n)) * np.sqrt(q_var) + q_mean
        diffs = stats.multivariate_normal(q_mean, np.diag(q_var)).logpdf(draws)
        diffs -= stats.multivariate_normal(p_mean, p_cov).logpdf(draws)
        se = diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert abs(closed - diffs.mean()) < 3 * se, f"pair {pair}"
        identical = gaussian_kl(
            torch.tensor(q_mean), torch.tensor(q_var), torch.tensor(q_mean),
            torch.tensor(np.diag(q_var)),
        ).item()
        assert abs(identical) < 1e-10
    assert time.time() - start < 60.0


# ----------------------------------------------------------------------
# Topic-distribution normalization
# ----------------------------------------------------------------------


@criterion("Topic-distribution normalization (1000 trials)")
def test_topic_distribution_normalization():
    rng = torch.Generator().manual_seed(99)
    shapes = ([2], [4], [2, 2], [3, 3], [4, 4], [2, 3, 2])
    trials = 0
    for shape in shapes:
        tree = TopicTree(list(shape))
        for _ in range(4):  # fresh random parameters
            embedding = torch.nn.Embedding(30, 6)
            torch.nn.init.normal_(embedding.weight, generator=rng)
            model = TreeTopicModel(tree, embedding, hidden_dim=6)
            tokens = torch.randint(1, 30, (42, 5), generator=rng)
            theta, pi, phi = model.topic_distribution_from_embedding(
                model.sentence_embedding(tokens, [5] * 42)
            )
            for level in range(tree.n_levels):
                level_sum = pi[:, tree.nodes_at_level(level)].sum(dim=1)
                assert (level_sum - 1.0).abs().max() < 1e-6
            for leaf in tree.leaves:
                path_sum = phi[:, tree.ancestors(leaf) + [leaf]].sum(dim=1)
                assert (path_sum - 1.0).abs().max() < 1e-6
            assert (theta.sum(dim=1) - 1.0).abs().max() < 1e-6
            trials += 42
    assert trials >= 1000


# ----------------------------------------------------------------------
# Extraction vs exhaustive enumeration
# ----------------------------------------------------------------------


@criterion("Extraction beam equals exhaustive optimum (200 instances)")
def test_extraction_oracle():
    rng = np.random.default_rng(17)
    for trial in range(200):
        sentences, instance = random_extraction_case(
            rng, n_candidates=int(rng.integers(2, 9)), vocab=int(rng.integers(6, 14)), min_len=1
        )
        got = extract_summary(
            sentences, instance, beam_width=8, max_sentences=3, redundancy_threshold=0.6
        )
        want_score, _ = exhaustive_best(sentences, instance, 3, 0.6)
        assert abs(got.score - want_score) < 1e-12, f"trial {trial}"
        by_id = {ts.topic_id: ts.tokens for ts in sentences}
        for a, b in itertools.combinations(got.topic_ids, 2):
            pab = rouge_n(by_id[a], by_id[b], 1).precision
            pba = rouge_n(by_id[b], by_id[a], 1).precision
            assert max(pab, pba) < 0.6


# ----------------------------------------------------------------------
# Metric golden values
# ----------------------------------------------------------------------


@criterion("Metric golden tests (hand-computed values)")
def test_metric_golden_values():
    checks = 0

    def close(got, want):
        nonlocal checks
        assert abs(got - want) < 1e-10
        checks += 1

    cat, ran = "the cat sat".split(), "the cat ran".split()
    close(rouge_n(cat, cat, 1).f1, 1.0)
    close(rouge_n(["a", "b"], ["c", "d"], 1).f1, 0.0)
    close(rouge_n(cat, ran, 1).precision, 2 / 3)
    close(rouge_n(cat, ran, 1).f1, 2 / 3)
    close(rouge_n(cat, ran, 2).f1, 1 / 2)
    close(rouge_n(["a", "a", "b"], ["a", "c"], 1).precision, 1 / 3)
    close(rouge_n(["a", "a", "b"], ["a", "c"], 1).recall, 1 / 2)
    close(rouge_n("a b c d".split(), "b d".split(), 1).f1, 2 * (2 / 4) / (2 / 4 + 1))

    close(rouge_l("a b c".split(), "a b c".split()).f1, 1.0)
    close(rouge_l("a b c".split(), "a x c".split()).precision, 2 / 3)
    close(rouge_l("a b c d".split(), "d c b a".split()).f1, 1 / 4)

    close(self_bleu([["a", "b", "c"]] * 3, n_max=3)[3], 1.0)
    close(self_bleu([["a", "b"], ["c", "d"], ["e", "f"]], n_max=2)[2], 0.0)
    s1 = "the food was great here".split()
    s2 = "the food was bad".split()
    s3 = "the food was great too".split()
    scores = self_bleu([s1, s2, s3], n_max=4)
    b3 = (
        2 * (4 / 5 * 3 / 4 * 2 / 3) ** (1 / 3)
        + math.exp(1 - 5 / 4) * (3 / 4 * 2 / 3 * 1 / 2) ** (1 / 3)
    ) / 3
    b4 = 2 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** (1 / 4) / 3
    close(scores[3], b3)
    close(scores[4], b4)
    assert checks >= 10


# ----------------------------------------------------------------------
# Gradient checks
# ----------------------------------------------------------------------


@criterion("Gradient checks vs central finite differences")
def test_gradient_checks():
    # tiny model: latent 4, vocabulary 20, 3 topics
    words = [f"w{i}" for i in range(16)]
    vocab = Vocabulary(words, [9] * 16)
    config = Config(
        embedding_dim=5, hidden_dim=5, topic_hidden_dim=5, latent_dim=4,
        tree_branching=[2], dropout=0.0, disc_sample_len=4, max_decode_len=6,
    )
    torch.manual_seed(8)
    model = SummaryModel(len(vocab), config).double()
    model.eval()
    instance = Instance("p", [Review([["w1", "w2", "w3"], ["w4", "w5"]])])
    batch = instance_to_tensors(instance, vocab, config.max_sentence_len)

    def loss_value() -> float:
        gen = torch.Generator().manual_seed(77)
        return compute_loss(model, batch, step=11, generator=gen).total.item()

    gen = torch.Generator().manual_seed(77)
    compute_loss(model, batch, step=11, generator=gen).total.backward()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _, param in model.named_parameters():
        if param.grad is None:
            continue
        indices = pick_indices(param, 3, rng)
        analytic = {i: param.grad.reshape(-1)[i].item() for i in indices}
        numeric = fd_grad(loss_value, param, indices, h=1e-5)
        worst = max(worst, max_rel_error(analytic, numeric, floor=1e-5))
    assert worst < 1e-3, f"compute_loss worst relative error {worst}"

    # classifier gradient wrt the relaxed word inputs
    soft = torch.rand(1, 3, len(vocab), dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    soft = (soft / soft.sum(-1, keepdim=True)).requires_grad_(True)
    probe = torch.tensor(rng.normal(size=model.tree.n_nodes), dtype=torch.float64)

    def soft_loss(s):
        return (model.topic_model.classify_soft_sentence(s) * probe).sum()

    soft_loss(soft).backward()
    analytic = {i: soft.grad.reshape(-1)[i].item() for i in range(soft.numel())}
    clone = soft.detach().clone()
    indices = rng.choice(soft.numel(), size=15, replace=False).tolist()
    numeric = fd_grad(lambda: soft_loss(clone).item(), clone, indices)
    worst = max_rel_error(analytic, numeric, floor=1e-6)
    assert worst < 1e-3, f"classifier worst relative error {worst}"


# ----------------------------------------------------------------------
# End-to-end trend checks (ten short seeded runs)
# ----------------------------------------------------------------------

E2E_SPEC = SyntheticSpec(
    topic_words=[
        [f"food{i}" for i in range(12)],
        [f"staff{i}" for i in range(12)],
        [f"room{i}" for i in range(12)],
    ],
    mixture_weights=[0.4, 0.35, 0.25],
    n_products=250,
    reviews_per_product=9,
    sentences_per_review=(2, 4),
    sentence_length=(4, 8),
    reviews_per_instance=8,
    instances_per_product=8,
    val_fraction=0.04,
    test_fraction=0.04,
    seed=101,
)

E2E_SEEDS = list(range(10))


def e2e_config(seed: int, max_steps: int = 120, **overrides) -> Config:
    base = dict(
        embedding_dim=16, hidden_dim=16, topic_hidden_dim=16, latent_dim=8,
        tree_branching=[3, 3], dropout=0.1,
        kl_weight_increment=2e-3, gumbel_temperature_decay=2e-3,
        disc_sample_len=8, max_decode_len=10, max_steps=max_steps,
        batch_size=8, min_count=1, checkpoint_every=0, validate_every=0,
        seed=seed,
    )
    base.update(overrides)
    return Config(**base).validate()


def analyze_run(model, instances, vocab, spec, n_eval=60):
    """Per-level mean log-determinants and sibling-leaf topic purity."""
    tree = model.tree
    model.eval()
    level_values: dict[int, list] = {}
    pair_same = pair_total = 0
    gt_counts: Counter = Counter()
    with torch.no_grad():
        for inst in instances[:n_eval]:
            batch = instance_to_tensors(inst, vocab, model.config.max_sentence_len)
            posterior, theta = model.encode_instance(batch)
            topics = em_topic_posteriors(posterior.mean, posterior.variance, theta, tree)
            logdets = logdet_cov(topics.covs)
            for k in range(tree.n_nodes):
                level_values.setdefault(tree.level(k) + 1, []).append(float(logdets[k]))
            assignments = theta.argmax(dim=1).tolist()
            labels = sentence_topic_labels(inst, spec)
            gt_counts.update(l for l in labels if l is not None)
            leaves = set(tree.leaves)
            items = [
                (a, l) for a, l in zip(assignments, labels) if l is not None and a in leaves
            ]
            for i in range(len(items)):
                for j in range(i + 1, len(items)):
                    if tree.parent[items[i][0]] == tree.parent[items[j][0]]:
                        pair_total += 1
                        pair_same += items[i][1] == items[j][1]
    level_means = {level: float(np.mean(v)) for level, v in level_values.items()}
    total = sum(gt_counts.values())
    chance = sum((c / total) ** 2 for c in gt_counts.values())
    purity = pair_same / pair_total if pair_total else 0.0
    return level_means, purity, chance


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    instances = generate_synthetic_corpus(E2E_SPEC)
    assert 1900 <= len(instances) <= 2100
    train_instances = split_instances(instances)["train"]
    vocab = build_vocabulary(train_instances, min_count=1)
    eval_instances = train_instances[:32]

    runs = {}
    for seed in E2E_SEEDS:
        config = e2e_config(seed)
        eval_batches = [
            instance_to_tensors(i, vocab, config.max_sentence_len) for i in eval_instances
        ]
        torch.manual_seed(seed)
        fresh = SummaryModel(len(vocab), config)
        loss_start = evaluate_mean_loss(fresh, eval_batches, step=0, seed=99)
        result = train(config, instances, vocab, root / f"run{seed}")
        assert not result.diverged
        model, _, _ = load_checkpoint(result.last_checkpoint)
        loss_end = evaluate_mean_loss(model, eval_batches, step=result.steps_run, seed=99)
        level_means, purity, chance = analyze_run(model, train_instances, vocab, E2E_SPEC)
        runs[seed] = {
            "loss_start": loss_start,
            "loss_end": loss_end,
            "levels": level_means,
            "purity": purity,
            "chance": chance,
            "checkpoint": result.last_checkpoint,
            "config": config,
        }
        print(
            f"\n  seed {seed}: loss {loss_start:.2f}->{loss_end:.2f}, "
            f"logdet {level_means}, purity x{purity / chance:.2f}"
        )
    return {
        "runs": runs,
        "instances": instances,
        "vocab": vocab,
        "test_instances": split_instances(instances)["test"][:24],
    }


@criterion("End-to-end (a): training cuts total loss by >= 30%")
def test_e2e_loss_drop(e2e_runs):
    run = e2e_runs["runs"][0]
    drop = (run["loss_start"] - run["loss_end"]) / run["loss_start"]
    assert drop >= 0.30, f"loss dropped only {drop:.1%}"


@criterion("End-to-end (b): log-determinants decrease by level in >= 8/10 runs")
def test_e2e_logdet_trend(e2e_runs):
    monotone = 0
    for seed, run in e2e_runs["runs"].items():
        levels = [run["levels"][l] for l in sorted(run["levels"])]
        assert len(levels) == 3
        if all(a > b for a, b in zip(levels, levels[1:])):
            monotone += 1
    assert monotone >= 8, f"only {monotone}/10 runs strictly decreasing"


@criterion("End-to-end (c): sibling-leaf purity beats chance by > 1.5x")
def test_e2e_topic_purity(e2e_runs):
    run = e2e_runs["runs"][0]
    assert run["purity"] > 1.5 * run["chance"], (
        f"purity {run['purity']:.3f} vs chance {run['chance']:.3f}"
    )


# ----------------------------------------------------------------------
# Ablation plumbing
# ----------------------------------------------------------------------


@criterion("Ablations: distinct self-BLEU, beam >= nucleus")
def test_ablation_plumbing(e2e_runs, tmp_path_factory):
    root = tmp_path_factory.mktemp("ablations")
    vocab = e2e_runs["vocab"]
    instances = e2e_runs["instances"]
    test_instances = e2e_runs["test_instances"]

    def summary_tokens(model):
        return [summarize_instance(model, vocab, inst, seed=0).tokens() for inst in test_instances]

    full_model, full_config, _ = load_checkpoint(e2e_runs["runs"][0]["checkpoint"])
    scores = {}
    scores["full"] = self_bleu(summary_tokens(full_model), n_max=4)

    beam_model, _, _ = load_checkpoint(e2e_runs["runs"][0]["checkpoint"])
    beam_model.config = ablation_flags(full_config, ["beam_decode_instead_of_nucleus"])
    scores["beam_decode"] = self_bleu(summary_tokens(beam_model), n_max=4)

    for flag in ("no_discriminator", "no_attention"):
        config = ablation_flags(e2e_config(0, max_steps=60), [flag])
        result = train(config, instances, vocab, root / flag)
        model, _, _ = load_checkpoint(result.last_checkpoint)
        scores[flag] = self_bleu(summary_tokens(model), n_max=4)

    print("\n  self-BLEU:", {k: round(v[3], 4) for k, v in scores.items()})
    values = [round(v[3], 6) for v in scores.values()]
    assert len(set(values)) == len(values), "self-BLEU values not distinct"
    assert scores["beam_decode"][3] >= scores["full"][3]
    assert scores["beam_decode"][4] >= scores["full"][4]

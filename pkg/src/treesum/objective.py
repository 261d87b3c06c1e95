"""Training objective and loop.

Per instance the loss combines: teacher-forced reconstruction of every
sentence from one reparameterized latent sample, the topic-distribution KL
against a uniform prior, the topic-weighted latent KL against the recursive
mixture priors, and the topic discriminator on relaxed decodes of the topic
means. The KL block is annealed in; the Gumbel temperature anneals down.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import Config, load_config
from .corpus import Instance, Vocabulary, split_instances
from .latent_gmm import (
    CovarianceFactorizationError,
    em_topic_posteriors,
    kl_sentences_vs_priors,
    topic_priors,
)
from .metrics import rouge_l
from .model import InstanceBatch, SummaryModel, instance_to_tensors
from .seq_codec import gumbel_softmax_decode
from .summarizer import summarize_instance

CHECKPOINT_VERSION = 1

ABLATIONS = ("no_discriminator", "no_attention", "beam_decode_instead_of_nucleus")


class NonFiniteLossError(RuntimeError):
    """A loss term left the reals; carries the offending term's name."""

    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite loss term {term!r} at step {step}")
        self.term = term
        self.step = step


@dataclass
class LossBreakdown:
    recon: torch.Tensor  # -sum_s log p(w_s | x_s)
    kl_z: torch.Tensor  # sum_s KL(topic distribution || uniform)
    kl_x: torch.Tensor  # sum_k sum_s theta KL(sentence posterior || topic prior)
    disc: torch.Tensor  # -sum_k log (classifier prob of topic k on its own decode)
    total: torch.Tensor
    beta: float
    tau: float
    n_sentences: int

    def detached(self) -> dict[str, float]:
        return {
            "recon": float(self.recon.detach()),
            "kl_z": float(self.kl_z.detach()),
            "kl_x": float(self.kl_x.detach()),
            "disc": float(self.disc.detach()),
            "total": float(self.total.detach()),
            "beta": self.beta,
            "tau": self.tau,
        }


def anneal(
    step: int,
    kl_weight_increment: float = 2.5e-5,
    gumbel_temperature_init: float = 1.0,
    gumbel_temperature_decay: float = 2.5e-5,
    gumbel_temperature_min: float = 0.1,
    kl_anneal: bool = True,
) -> tuple[float, float]:
    """KL weight (ramping to 1) and Gumbel temperature (decaying) at a step."""
    beta = 1.0 if not kl_anneal else min(1.0, kl_weight_increment * step)
    tau = max(gumbel_temperature_min, gumbel_temperature_init - gumbel_temperature_decay * step)
    return beta, tau


def anneal_for(config: Config, step: int) -> tuple[float, float]:
    return anneal(
        step,
        kl_weight_increment=config.kl_weight_increment,
        gumbel_temperature_init=config.gumbel_temperature_init,
        gumbel_temperature_decay=config.gumbel_temperature_decay,
        gumbel_temperature_min=config.gumbel_temperature_min,
        kl_anneal=config.kl_anneal,
    )


def compute_loss(
    model: SummaryModel,
    batch: InstanceBatch,
    step: int,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Loss terms for one instance (sums over its sentences/topics)."""
    config = model.config
    beta, tau = anneal_for(config, step)
    tree = model.tree

    def check(term: str, value: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(value):
            raise NonFiniteLossError(term, step)
        return value

    posterior, theta = model.encode_instance(batch)
    latents = posterior.sample(generator)
    memory, memory_mask = model.attention_memory(posterior)
    log_probs = model.decoder.teacher_forced_log_probs(
        latents, batch.dec_input, batch.dec_target, batch.dec_mask, memory, memory_mask
    )
    recon = check("recon", -log_probs.sum())

    log_k = math.log(tree.n_nodes)
    kl_z = check("kl_z", (theta * (torch.log(theta.clamp_min(1e-30)) + log_k)).sum())

    try:
        topics = em_topic_posteriors(posterior.mean, posterior.variance, theta, tree)
        priors = topic_priors(topics, tree, stop_gradients=config.stop_prior_gradients)
        kl_matrix = kl_sentences_vs_priors(posterior.mean, posterior.variance, priors)
    except CovarianceFactorizationError as exc:
        # finite inputs always factorize (floored + jittered), so this means
        # the encoder emitted non-finite moments
        raise NonFiniteLossError("kl_x", step) from exc
    kl_x = check("kl_x", (theta * kl_matrix).sum())

    if config.no_discriminator or config.disc_weight == 0.0:
        disc = torch.zeros((), dtype=recon.dtype)
    else:
        soft = gumbel_softmax_decode(
            model.decoder,
            topics.means,
            memory,
            memory_mask,
            temperature=tau,
            max_len=config.disc_sample_len,
            generator=generator,
        )
        theta_disc = model.topic_model.classify_soft_sentence(soft)
        disc = check("disc", -torch.log(theta_disc.diagonal().clamp_min(1e-30)).sum())

    total = check("total", recon + beta * (kl_z + kl_x) + config.disc_weight * disc)
    return LossBreakdown(recon, kl_z, kl_x, disc, total, beta, tau, batch.n_sentences)


def ablation_flags(config: Config, flags) -> Config:
    """Model variant with the named components disabled."""
    unknown = set(flags) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
    out = config
    if "no_discriminator" in flags:
        out = replace(out, no_discriminator=True, disc_weight=0.0)
    if "no_attention" in flags:
        out = replace(out, no_attention=True)
    if "beam_decode_instead_of_nucleus" in flags:
        out = replace(out, beam_decode=True)
    return out


def save_checkpoint(directory, model: SummaryModel, optimizer, config: Config, step: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config_hash": config.hash(),
            "step": step,
            "vocab_size": model.embedding.num_embeddings,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        },
        directory / "params.pt",
    )
    config.save(directory / "config.snapshot")
    (directory / "step.txt").write_text(f"{step}\n")
    return directory


def load_checkpoint(directory) -> tuple[SummaryModel, Config, int]:
    directory = Path(directory)
    config = load_config(directory / "config.snapshot")
    payload = torch.load(directory / "params.pt", map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    if payload["config_hash"] != config.hash():
        raise ValueError("checkpoint hash does not match its config snapshot")
    model = SummaryModel(payload["vocab_size"], config)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, config, payload["step"]


@dataclass
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    steps_run: int
    diverged: bool
    log_rows: list[dict]
    best_metric: float | None


def _set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    if os.environ.get("TREESUM_DETERMINISTIC"):
        torch.set_num_threads(1)


def validation_rouge_l(
    model: SummaryModel,
    vocab: Vocabulary,
    instances: list[Instance],
    gold: dict[str, list[str]] | None,
    seed: int,
    limit: int,
) -> float:
    """Mean ROUGE-L F of extracted summaries on validation instances.

    Scored against gold summaries when available, else against the
    instance's own input reviews (the unsupervised extraction criterion).
    """
    scores = []
    for inst in instances[:limit]:
        summary = summarize_instance(model, vocab, inst, seed)
        reference = (gold or {}).get(inst.product_id)
        if reference is None:
            reference = [t for s in inst.sentences() for t in s]
        scores.append(rouge_l(summary.tokens(), reference).f1)
    return float(np.mean(scores)) if scores else 0.0


def evaluate_mean_loss(
    model: SummaryModel, batches: list[InstanceBatch], step: int, seed: int
) -> float:
    """Deterministic eval-mode mean of per-sentence-normalized totals."""
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        totals = [
            float(compute_loss(model, b, step, generator).total) / b.n_sentences
            for b in batches
        ]
    return float(np.mean(totals))


def train(
    config: Config,
    instances: list[Instance],
    vocab: Vocabulary,
    out_dir,
    gold: dict[str, list[str]] | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Minimize the objective with Adam; checkpoint and optionally validate.

    Fully seeded: the same config, corpus and seed give the same losses on a
    single-threaded run. On divergence the last saved checkpoint survives.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _set_determinism(config.seed)

    by_split = split_instances(instances)
    train_instances = by_split["train"]
    if not train_instances:
        raise ValueError("no training instances")
    batches = [
        instance_to_tensors(inst, vocab, config.max_sentence_len) for inst in train_instances
    ]

    model = SummaryModel(len(vocab), config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    noise = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)

    last_dir = out_dir / "checkpoint"
    best_dir = out_dir / "best"
    best_metric: float | None = None
    stale_validations = 0
    log_rows: list[dict] = []
    diverged = False
    order: list[int] = []
    step = 0

    for step in range(config.max_steps):
        if len(order) < config.batch_size:
            fresh = list(range(len(batches)))
            order_rng.shuffle(fresh)
            order.extend(fresh)
        chosen = [order.pop() for _ in range(min(config.batch_size, len(order)))]

        model.train()
        try:
            breakdowns = [compute_loss(model, batches[i], step, noise) for i in chosen]
        except NonFiniteLossError as exc:
            diverged = True
            log_rows.append({"step": step, "error": exc.term})
            break
        loss = torch.stack([b.total / b.n_sentences for b in breakdowns]).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        row = {"step": step}
        for key in ("recon", "kl_z", "kl_x", "disc"):
            row[key] = float(np.mean([b.detached()[key] for b in breakdowns]))
        row["beta"], row["tau"] = breakdowns[0].beta, breakdowns[0].tau
        log_rows.append(row)
        if progress_every and step % progress_every == 0:
            print(f"step {step}: loss/sentence {loss.item():.3f}")

        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(last_dir, model, optimizer, config, step + 1)
        if config.validate_every and (step + 1) % config.validate_every == 0:
            metric = validation_rouge_l(
                model,
                vocab,
                by_split["validation"],
                gold,
                config.seed,
                config.validation_instances,
            )
            if best_metric is None or metric > best_metric:
                best_metric = metric
                stale_validations = 0
                save_checkpoint(best_dir, model, optimizer, config, step + 1)
            else:
                stale_validations += 1
                if config.patience and stale_validations >= config.patience:
                    break

    if not diverged:
        save_checkpoint(last_dir, model, optimizer, config, step + 1)
    _write_log(out_dir / "train_log.csv", log_rows)
    return TrainResult(
        out_dir=out_dir,
        last_checkpoint=last_dir,
        best_checkpoint=best_dir if best_metric is not None else None,
        steps_run=step + (0 if diverged else 1),
        diverged=diverged,
        log_rows=log_rows,
        best_metric=best_metric,
    )


def _write_log(path: Path, rows: list[dict]) -> None:
    columns = ["step", "recon", "kl_z", "kl_x", "disc", "beta", "tau", "error"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

"""Training loop, dataset samplers, and exact-match span evaluation.

Training mixes fusion and synthetic samples in every step: the step loss is
the mean fusion loss plus beta times the mean synthetic loss, optimized with
decoupled weight decay and separate learning rates for encoder and head.
Evaluation is micro-averaged exact-match F1 over (start, end, label) triples.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .corpus import AnnotatedSample, CorpusError, LabelVocabulary, Span
from .encoder import encode_tokens
from .span_model import LossWeights, SpanModel, dynamic_alpha, span_loss

log = logging.getLogger(__name__)

ALPHA_MODES = ("dynamic", "fixed")


class TrainingError(RuntimeError):
    """Bad training inputs, vocabulary mismatch, or diverged optimization."""


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder: float = 2e-5
    lr_head: float = 1e-3
    weight_decay: float = 1e-2
    beta: float = 1.0
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    alpha_mode: str = "dynamic"
    alpha_value: float = 1.0

    def __post_init__(self) -> None:
        if self.lr_encoder <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0 or self.beta < 0 or self.alpha_value < 0:
            raise ValueError("weight_decay, beta, and alpha_value must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")

    def to_dict(self) -> dict:
        return {
            "lr_encoder": self.lr_encoder,
            "lr_head": self.lr_head,
            "weight_decay": self.weight_decay,
            "beta": self.beta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "alpha_mode": self.alpha_mode,
            "alpha_value": self.alpha_value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:10]


def label_counts(
    samples: Sequence[AnnotatedSample],
    vocab: LabelVocabulary,
) -> tuple[list[int], list[int]]:
    """Span occurrence counts aligned with vocab.target_labels / extension_labels."""
    target_index = {label: i for i, label in enumerate(vocab.target_labels)}
    ext_index = {label: i for i, label in enumerate(vocab.extension_labels)}
    targets = [0] * vocab.num_target
    extensions = [0] * vocab.num_extension
    for sample in samples:
        for span in sample.target_spans:
            targets[target_index[span.label]] += 1
        for span in sample.extension_spans:
            extensions[ext_index[span.label]] += 1
    return targets, extensions


def resolve_alpha(
    config: TrainConfig,
    samples: Sequence[AnnotatedSample],
    vocab: LabelVocabulary,
) -> tuple[float, ...]:
    """Extension-channel weights: dynamic from counts, or a fixed constant."""
    if config.alpha_mode == "fixed":
        return (config.alpha_value,) * vocab.num_extension
    target_counts, extension_counts = label_counts(samples, vocab)
    return tuple(dynamic_alpha(extension_counts, target_counts))


def build_optimizer(model: SpanModel, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW with separate encoder/head learning rates, shared weight decay."""
    return torch.optim.AdamW(
        [
            {"params": model.encoder.parameters(), "lr": config.lr_encoder},
            {"params": model.scorer.parameters(), "lr": config.lr_head},
        ],
        weight_decay=config.weight_decay,
    )


@dataclass
class TrainResult:
    loss_trace: list[float]
    alpha: tuple[float, ...]
    checkpoint_path: Path | None
    dev_f1_trace: list[float]
    best_dev_f1: float | None


def _validate_samples(samples: Sequence[AnnotatedSample], model: SpanModel, role: str) -> None:
    max_len = model.encoder.config.max_len
    for i, sample in enumerate(samples):
        try:
            sample.validate_labels(model.vocab)
        except CorpusError as exc:
            raise TrainingError(f"{role} sample {i}: {exc}") from exc
        if len(sample.sequence) > max_len:
            raise TrainingError(
                f"{role} sample {i} has {len(sample.sequence)} tokens (encoder max_len {max_len})"
            )


def train(
    model: SpanModel,
    fusion: Sequence[AnnotatedSample],
    synthetic: Sequence[AnnotatedSample] = (),
    config: TrainConfig | None = None,
    checkpoint_dir: str | Path | None = None,
    dev_samples: Sequence[AnnotatedSample] | None = None,
    patience: int = 10,
) -> TrainResult:
    """Optimize the model in place; returns the per-epoch loss trace.

    Each step draws a fusion batch and a proportional slice of the synthetic
    set; the step loss is mean(fusion losses) + beta * mean(synthetic
    losses), with an empty synthetic slice contributing zero. Aborts on
    non-finite loss.

    Early stopping is off by default: pass dev_samples to score span F1 after
    every epoch, stop once it fails to improve for `patience` epochs, and
    restore the best-scoring parameters.
    """
    config = config if config is not None else TrainConfig()
    fusion = list(fusion)
    synthetic = list(synthetic)
    if not fusion:
        raise TrainingError("no fusion samples to train on")
    _validate_samples(fusion, model, "fusion")
    _validate_samples(synthetic, model, "synthetic")

    torch.manual_seed(config.seed)
    fusion_rng = random.Random(config.seed)
    synthetic_rng = random.Random(config.seed + 1)

    alpha = resolve_alpha(config, fusion + synthetic, model.vocab)
    weights = LossWeights(alpha=alpha, beta=config.beta)
    optimizer = build_optimizer(model, config)
    device = next(model.parameters()).device
    fusion_ids = [encode_tokens(s.sequence.tokens, model.token_vocab).to(device) for s in fusion]
    synthetic_ids = [encode_tokens(s.sequence.tokens, model.token_vocab).to(device) for s in synthetic]

    if patience < 1:
        raise ValueError("patience must be at least 1")
    use_synthetic = bool(synthetic) and config.beta > 0
    steps = math.ceil(len(fusion) / config.batch_size)
    trace: list[float] = []
    dev_trace: list[float] = []
    best_f1 = None
    best_state: dict[str, torch.Tensor] | None = None
    epochs_since_best = 0
    model.train()
    for epoch in range(config.epochs):
        fusion_order = list(range(len(fusion)))
        fusion_rng.shuffle(fusion_order)
        synthetic_order = list(range(len(synthetic)))
        synthetic_rng.shuffle(synthetic_order)
        epoch_losses = []
        for step in range(steps):
            batch = fusion_order[step * config.batch_size : (step + 1) * config.batch_size]
            loss = sum(
                span_loss(model(fusion_ids[i]).probs, fusion[i], model.vocab, weights)
                for i in batch
            ) / len(batch)
            if use_synthetic:
                lo = step * len(synthetic) // steps
                hi = (step + 1) * len(synthetic) // steps
                chunk = synthetic_order[lo:hi]
                if chunk:
                    synthetic_loss = sum(
                        span_loss(model(synthetic_ids[i]).probs, synthetic[i], model.vocab, weights)
                        for i in chunk
                    ) / len(chunk)
                    loss = loss + config.beta * synthetic_loss
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(value)
        trace.append(sum(epoch_losses) / len(epoch_losses))
        if (epoch + 1) % 50 == 0:
            log.info("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, trace[-1])
        if dev_samples is not None:
            dev_f1 = evaluate(model, dev_samples).f1
            model.train()
            dev_trace.append(dev_f1)
            if best_f1 is None or dev_f1 > best_f1:
                best_f1 = dev_f1
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= patience:
                    log.info("early stop after epoch %d (best dev F1 %.4f)", epoch + 1, best_f1)
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    checkpoint_path = None
    if checkpoint_dir is not None:
        name = f"model-{config.config_hash()}-ep{config.epochs}.ckpt"
        checkpoint_path = Path(checkpoint_dir) / name
        model.save(checkpoint_path)
    return TrainResult(
        loss_trace=trace,
        alpha=alpha,
        checkpoint_path=checkpoint_path,
        dev_f1_trace=dev_trace,
        best_dev_f1=best_f1,
    )


def _prf(matched: int, predicted: int, gold: int) -> tuple[float, float, float]:
    precision = matched / predicted if predicted else 0.0
    recall = matched / gold if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    gold: int
    predicted: int
    matched: int
    per_label: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "gold": self.gold,
            "predicted": self.predicted,
            "matched": self.matched,
            "per_label": {label: dict(stats) for label, stats in sorted(self.per_label.items())},
        }


def evaluate_pairs(pairs: Sequence[tuple[set[Span], set[Span]]]) -> EvalReport:
    """Micro exact-match report from (predicted, gold) span-set pairs."""
    matched_total = predicted_total = gold_total = 0
    by_label: dict[str, list[int]] = {}
    for predicted, gold in pairs:
        predicted = set(predicted)
        gold = set(gold)
        matched = predicted & gold
        matched_total += len(matched)
        predicted_total += len(predicted)
        gold_total += len(gold)
        for label in {s.label for s in predicted | gold}:
            row = by_label.setdefault(label, [0, 0, 0])
            row[0] += sum(1 for s in matched if s.label == label)
            row[1] += sum(1 for s in predicted if s.label == label)
            row[2] += sum(1 for s in gold if s.label == label)
    precision, recall, f1 = _prf(matched_total, predicted_total, gold_total)
    per_label = {}
    for label in sorted(by_label):
        m, p, g = by_label[label]
        lp, lr, lf = _prf(m, p, g)
        per_label[label] = {
            "precision": lp,
            "recall": lr,
            "f1": lf,
            "gold": g,
            "predicted": p,
            "matched": m,
        }
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=f1,
        gold=gold_total,
        predicted=predicted_total,
        matched=matched_total,
        per_label=per_label,
    )


def evaluate(model: SpanModel, samples: Sequence[AnnotatedSample], threshold: float = 0.5) -> EvalReport:
    """Decode every sentence and micro-average exact-match span F1."""
    target_set = model.vocab.target_set
    for i, sample in enumerate(samples):
        unknown = {span.label for span in sample.target_spans} - target_set
        if unknown:
            raise TrainingError(f"sample {i} has target labels outside the model vocabulary: {sorted(unknown)}")
    pairs = [
        (model.predict(sample.sequence.text, threshold), set(sample.target_spans))
        for sample in samples
    ]
    return evaluate_pairs(pairs)


@dataclass
class KShotResult:
    samples: list[AnnotatedSample]
    counts: dict[str, int]
    unmet: tuple[str, ...]


def sample_kshot(
    corpus: Sequence[AnnotatedSample],
    k: int,
    seed: int,
    vocab: LabelVocabulary | None = None,
) -> KShotResult:
    """Greedy k-shot subset.

    Walk the seed-shuffled corpus and take a sentence iff some target label
    in it is still below k occurrences; stop once every label reached k.
    The subset comes back in original corpus order. Labels that cannot reach
    k are reported in ``unmet``, not raised.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    corpus = list(corpus)
    if vocab is not None:
        labels = list(vocab.target_labels)
    else:
        labels = sorted({span.label for sample in corpus for span in sample.target_spans})
    counts = {label: 0 for label in labels}
    order = list(range(len(corpus)))
    random.Random(seed).shuffle(order)
    chosen: list[int] = []
    for index in order:
        if all(count >= k for count in counts.values()):
            break
        spans = corpus[index].target_spans
        if any(span.label in counts and counts[span.label] < k for span in spans):
            chosen.append(index)
            for span in spans:
                if span.label in counts:
                    counts[span.label] += 1
    chosen.sort()
    unmet = tuple(label for label in labels if counts[label] < k)
    if unmet:
        log.warning("k-shot coverage incomplete for labels: %s", ", ".join(unmet))
    return KShotResult(samples=[corpus[i] for i in chosen], counts=counts, unmet=unmet)


def sample_nested_subsets(
    corpus: Sequence[AnnotatedSample],
    sizes: Sequence[int],
    seed: int,
) -> list[list[AnnotatedSample]]:
    """Prefixes of one seed-shuffled permutation, so subsets strictly nest."""
    corpus = list(corpus)
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if any(size < 1 for size in sizes):
        raise ValueError("sizes must be positive")
    if any(a >= b for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly ascending")
    if sizes[-1] > len(corpus):
        raise ValueError(f"size {sizes[-1]} exceeds corpus size {len(corpus)}")
    permutation = list(corpus)
    random.Random(seed).shuffle(permutation)
    return [permutation[:size] for size in sizes]

"""Training loop and inference helpers for the segmentation model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergedLoss
from ..metrics import dice
from ..optim import Adam
from ..taxonomy import HierLabel
from .config import ModelConfig
from .network import Params, forward, init_params, loss_and_grads
from .text import Vocabulary


@dataclass
class SampleTriple:
    """One training unit: image, binary mask, hierarchical label."""

    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW {0,1}
    label: HierLabel


@dataclass
class TrainResult:
    params: Params
    history: list[dict] = field(default_factory=list)  # per-epoch loss/dice


def train(
    dataset: list[SampleTriple],
    cfg: ModelConfig,
    vocab: Vocabulary | None = None,
    params: Params | None = None,
    eval_every: int = 0,
    target_dice: float | None = None,
    log=None,
) -> TrainResult:
    """Adam training of the full model on (image, mask, label) triples.

    Samples are visited one at a time in a seed-deterministic shuffled order;
    the loop is single-threaded so loss curves are bit-reproducible for a
    fixed seed.  When eval_every > 0 the mean training overlap score is
    recorded (and training stops early once it reaches target_dice, if set).
    Raises DivergedLoss on a NaN/inf loss.
    """
    if not dataset:
        raise ValueError("training dataset must be non-empty")
    if cfg.lr < 0:
        raise ValueError("learning rate must be >= 0")
    if vocab is None:
        vocab = Vocabulary.from_labels([s.label for s in dataset])
    if params is None:
        params = init_params(cfg, len(vocab))
    token_ids = [vocab.encode(s.label.prompt()) for s in dataset]

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(lr=cfg.lr)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay**epoch
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for idx in order:
            sample = dataset[idx]
            breakdown, grads = loss_and_grads(
                sample.image, token_ids[idx], sample.mask, params, cfg
            )
            if not np.isfinite(breakdown.total):
                raise DivergedLoss(f"loss {breakdown.total} at epoch {epoch}")
            opt.step(params, grads)
            epoch_loss += breakdown.total
        record = {"epoch": epoch, "loss": epoch_loss / len(dataset)}
        if eval_every and (epoch + 1) % eval_every == 0:
            record["train_dice"] = evaluate_dice(dataset, params, cfg, vocab)
        history.append(record)
        if log is not None:
            log(record)
        if target_dice is not None and record.get("train_dice", 0.0) >= target_dice:
            break
    return TrainResult(params=params, history=history)


def predict_mask(
    image: np.ndarray,
    prompt: str,
    params: Params,
    cfg: ModelConfig,
    vocab: Vocabulary,
    threshold: float = 0.5,
) -> np.ndarray:
    """Binary mask prediction for one (image, prompt) pair."""
    result = forward(image, vocab.encode(prompt), params, cfg)
    return (result.probabilities >= threshold).astype(np.uint8)


def evaluate_dice(
    dataset: list[SampleTriple],
    params: Params,
    cfg: ModelConfig,
    vocab: Vocabulary,
    threshold: float = 0.5,
) -> float:
    """Mean overlap score of thresholded predictions over a dataset."""
    scores = []
    for sample in dataset:
        pred = predict_mask(sample.image, sample.label.prompt(), params, cfg, vocab, threshold)
        scores.append(dice(pred, sample.mask))
    return float(np.mean(scores))

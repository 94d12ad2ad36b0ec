"""Episodic training, the supervised pretraining stage, and evaluation.

Training samples one episode per step, backpropagates the sum of the
discriminative loss over queries and (when eta is nonzero) the
divergence loss over every support and query sample, and applies a
clipped, step-decayed Adam update. Evaluation classifies query samples
by the smallest class distance and reports the mean accuracy with a
normal-approximation confidence interval.

All randomness is derived from the seed and the episode index, so
traces, checkpoints, and reports are reproducible bit for bit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import matcher, optim
from .model import Model, ModelConfig, build_model, save_model
from .seeding import derive_rng, derive_seed
from .synth import SyntheticDataset, sample_episode

log = logging.getLogger("dopm.trainer")

METRICS_HEADER = "episode,loss_dis,loss_div,lr,accuracy"


@dataclass(frozen=True)
class TrainConfig:
    """Episode, schedule, and loss settings for one training run."""

    model: ModelConfig
    episodes: int = 2000
    n_way: int = 5
    m_support: int = 1
    q_query: int = 5
    lr: float = 1e-3
    decay_factor: float = 0.1
    decay_period: int = 600
    eta: float = 1.0
    clip_norm: float = 10.0
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay factor must be in (0, 1], got {self.decay_factor}")
        if self.n_way < 2:
            raise ValueError(f"n_way must be >= 2, got {self.n_way}")
        if min(self.m_support, self.q_query) < 1:
            raise ValueError("m_support and q_query must be >= 1")
        if self.m_support != self.model.support_size and self.model.use_alpha:
            raise ValueError(
                f"m_support {self.m_support} does not match the model's "
                f"support_size {self.model.support_size}"
            )


@dataclass
class EvalReport:
    """Aggregate accuracy of an evaluation run."""

    mean: float
    ci: float
    per_episode: np.ndarray
    episodes: int

    def formatted(self) -> str:
        return f"{self.mean:.2f} ± {self.ci:.2f}"


def train(dataset: SyntheticDataset, config: TrainConfig,
          model: Model | None = None, run_dir=None):
    """Train a model episodically on the dataset's train split.

    Passing a model continues from its parameters (the pretraining
    path); otherwise fresh parameters are built from the seed. Metrics
    go to run_dir/metrics.csv when run_dir is given, and checkpoints to
    run_dir/checkpoint every checkpoint_every episodes.

    Returns:
        (model, trace): trace rows are
        [episode, loss_dis, loss_div, lr, accuracy].
    """
    if not dataset.split_classes("train"):
        raise ValueError("dataset train split is empty")
    if model is None:
        model = build_model(config.model, derive_seed(config.seed, "init"))
    params = model.parameters()
    state = optim.AdamState.for_params(params)
    run_path = Path(run_dir) if run_dir is not None else None
    metrics = None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        metrics = open(run_path / "metrics.csv", "w")
        metrics.write(METRICS_HEADER + "\n")
    trace = []
    try:
        for episode_idx in range(config.episodes):
            lr = optim.step_decay_lr(config.lr, episode_idx,
                                     config.decay_factor, config.decay_period)
            rng = derive_rng(config.seed, "episode", episode_idx)
            episode = sample_episode(dataset, "train", config.n_way,
                                     config.m_support, config.q_query, rng)
            result = model.episode_result(episode, config.eta)
            total = result.loss_dis
            div_value = 0.0
            if result.loss_div is not None:
                total = total + result.loss_div
                div_value = float(result.loss_div.data)
            if not np.isfinite(float(total.data)):
                _dump_abort(run_path, episode_idx, episode, result)
                raise RuntimeError(
                    f"non-finite loss at episode {episode_idx}; "
                    + ("diagnostics in " + str(run_path / "abort.txt")
                       if run_path is not None else "no run dir for diagnostics")
                )
            for p in params:
                p.zero_grad()
            ad.backward(total)
            grads = [p.grad for p in params]
            optim.clip_global_norm(grads, config.clip_norm)
            optim.adam_step(params, grads, state, lr)
            model.reseed_degenerate(derive_rng(config.seed, "reseed", episode_idx))
            row = (episode_idx, float(result.loss_dis.data), div_value, lr,
                   result.accuracy)
            trace.append(row)
            if metrics is not None:
                metrics.write(",".join(repr(v) for v in row) + "\n")
                metrics.flush()
            if log.isEnabledFor(logging.DEBUG) or (
                    log.isEnabledFor(logging.INFO) and (episode_idx + 1) % 100 == 0):
                log.info("episode %d: loss_dis=%.4f loss_div=%.4f lr=%.2e acc=%.3f",
                         episode_idx, row[1], row[2], lr, row[4])
            if (run_path is not None and config.checkpoint_every > 0
                    and (episode_idx + 1) % config.checkpoint_every == 0):
                save_model(model, run_path / "checkpoint")
    finally:
        if metrics is not None:
            metrics.close()
    if run_path is not None:
        save_model(model, run_path / "model")
    return model, np.asarray(trace)


def _dump_abort(run_path, episode_idx, episode, result) -> None:
    if run_path is None:
        return
    lines = [f"episode = {episode_idx}",
             f"classes = {' '.join(str(c) for c in episode.class_ids)}",
             f"loss_dis = {float(result.loss_dis.data)!r}"]
    if result.loss_div is not None:
        lines.append(f"loss_div = {float(result.loss_div.data)!r}")
    lines.append("distances =")
    for row in result.distances:
        lines.append("  " + " ".join(f"{v:.6e}" for v in row))
    (run_path / "abort.txt").write_text("\n".join(lines) + "\n")


# -- pretraining ---------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    """Supervised warm-up settings for dictionaries and backbone."""

    model: ModelConfig
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    decay_factor: float = 0.5
    decay_period: int = 4
    eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.model.variant == "baseline1":
            raise ValueError("pretraining needs a parsing variant with a dictionary")


def pretrain(dataset: SyntheticDataset, config: PretrainConfig,
             model: Model | None = None):
    """Warm up parsing parameters with a linear classification head.

    A linear head maps each sample's concatenated part expressions to
    its global train-split class; the head trains jointly with the
    dictionary (and backbone) under cross-entropy plus the divergence
    term, then is discarded.

    Returns:
        (model, epoch_losses): mean total loss per epoch.
    """
    classes = dataset.split_classes("train")
    if len(classes) < 2:
        raise ValueError(f"pretraining needs >= 2 train classes, got {len(classes)}")
    if model is None:
        model = build_model(config.model, derive_seed(config.seed, "init"))
    probe = dataset.samples[classes[0]][0]
    with ad.no_grad():
        feat_width = model.parse_sample(probe.data).expression.data.size
    head_rng = derive_rng(config.seed, "pretrain", "head")
    head_w = ad.parameter(head_rng.standard_normal((len(classes), feat_width))
                          * np.sqrt(1.0 / feat_width))
    head_b = ad.parameter(np.zeros(len(classes)))
    params = model.parameters() + [head_w, head_b]
    state = optim.AdamState.for_params(params)
    label_of = {cid: i for i, cid in enumerate(classes)}
    pool = [(cid, idx) for cid in classes
            for idx in range(dataset.config.samples_per_class)]
    epoch_losses = []
    for epoch in range(config.epochs):
        lr = optim.step_decay_lr(config.lr, epoch, config.decay_factor,
                                 config.decay_period)
        order = derive_rng(config.seed, "pretrain", "order", epoch).permutation(len(pool))
        total_epoch = 0.0
        n_batches = 0
        for start in range(0, len(pool), config.batch_size):
            batch = [pool[i] for i in order[start:start + config.batch_size]]
            loss = None
            for cid, idx in batch:
                sample = dataset.samples[cid][idx]
                rec = model.parse_sample(sample.data)
                flat = ad.reshape(rec.expression, (feat_width,))
                logits = head_w @ flat + head_b
                term = _cross_entropy(logits, label_of[cid])
                if config.eta != 0.0:
                    term = term + matcher.divergence_loss(rec.distribution, config.eta)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            if not np.isfinite(float(loss.data)):
                raise RuntimeError(f"non-finite pretraining loss in epoch {epoch}")
            for prm in params:
                prm.zero_grad()
            ad.backward(loss)
            grads = [prm.grad for prm in params]
            optim.clip_global_norm(grads, 10.0)
            optim.adam_step(params, grads, state, lr)
            model.reseed_degenerate(
                derive_rng(config.seed, "pretrain", "reseed", epoch, n_batches))
            total_epoch += float(loss.data)
            n_batches += 1
        epoch_losses.append(total_epoch / max(n_batches, 1))
        log.info("pretrain epoch %d: mean loss %.4f (lr %.2e)",
                 epoch, epoch_losses[-1], lr)
    return model, epoch_losses


def _cross_entropy(logits, true_index: int):
    shift = float(logits.data.max())
    lse = ad.log(ad.exp(logits - shift).sum()) + shift
    return lse - logits[true_index]


# -- evaluation ----------------------------------------------------------


def evaluate(dataset: SyntheticDataset, model: Model, split: str = "test",
             episodes: int = 600, n_way: int = 5, m_support: int = 1,
             q_query: int = 15, seed: int = 0, jobs: int = 1) -> EvalReport:
    """Mean episode accuracy over a split with a 95% interval.

    Queries are classified by the smallest class distance. The
    confidence half-width is 1.96 times the standard error over
    episode accuracies. With jobs > 1, episodes run on a thread pool;
    parameters are read-only and every episode draws from its own rng
    stream, so the report matches the sequential one exactly.
    """
    if not dataset.split_classes(split):
        raise ValueError(f"dataset split {split!r} is empty")
    accs = np.zeros(episodes)

    def run_one(e: int) -> None:
        rng = derive_rng(seed, "eval", e)
        episode = sample_episode(dataset, split, n_way, m_support, q_query, rng)
        accs[e] = model.episode_result(episode, eta=0.0).accuracy

    with ad.no_grad():
        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(run_one, range(episodes)))
        else:
            for e in range(episodes):
                run_one(e)
    mean = float(100.0 * accs.mean())
    if episodes > 1:
        ci = float(1.96 * (100.0 * accs).std(ddof=1) / np.sqrt(episodes))
    else:
        ci = 0.0
    return EvalReport(mean=mean, ci=ci, per_episode=accs, episodes=episodes)

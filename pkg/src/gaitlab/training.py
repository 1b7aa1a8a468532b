"""Metric-learning training: online triplet mining, AdamW, triangular
cyclical learning rate, augmentation, PK batch sampling, and the epoch loop
for both embedding models. Everything is driven by one master seed; identical
(seed, config, dataset) runs produce bit-identical checkpoints.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import InsufficientIdentities, NonFiniteGradient, NoValidTriplets
from .models import ParamStore, init_params, spe_forward, temporal_forward
from .normalization import apply_scheme, compute_stats, scheme_needs_stats, scheme_needs_geom
from .poses import FrameGeometry, GaitSequence, resample


@dataclass
class TrainConfig:
    margin: float = 0.2
    mining: str = "batch-hard"
    p_identities: int = 8
    k_samples: int = 4
    epochs: int = 30
    base_lr: float = 1e-5
    max_lr: float = 1e-3
    cycle_epochs: int = 10           # cycle length in epochs' worth of steps
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    noise_sigma: float = 0.01
    seq_len: int = 60
    frames_per_sequence: int = 1     # poses drawn per sampled sequence (spe only)
    steps_per_epoch: int = 0         # 0 = ceil(n_sequences / (P*K))

    def __post_init__(self):
        if not (0 < self.base_lr <= self.max_lr):
            raise ValueError("require 0 < base_lr <= max_lr")
        if self.p_identities < 2 or self.k_samples < 2:
            raise ValueError("PK sampling requires P >= 2 and K >= 2")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.mining not in ("batch-hard", "batch-all"):
            raise ValueError(f"unknown mining strategy {self.mining!r}")


# -- triplet loss --

def pairwise_sq_dists(embeddings: Tensor) -> Tensor:
    sq = (embeddings * embeddings).sum(axis=1, keepdims=True)       # (B, 1)
    cross = embeddings @ embeddings.swapaxes(0, 1)                  # (B, B)
    d2 = sq + sq.reshape(1, -1) - 2.0 * cross
    return d2.relu()   # clamp tiny negative round-off


def triplet_loss(embeddings: Tensor, labels, margin: float = 0.2,
                 mining: str = "batch-hard") -> Tensor:
    """Online-mined triplet loss on squared Euclidean distances.

    batch-hard: per anchor, hardest positive and hardest negative.
    batch-all: hinge over all valid triplets, averaged over nonzero terms.
    """
    labels = np.asarray(labels)
    b = labels.shape[0]
    if embeddings.data.shape[0] != b:
        raise ValueError("embeddings/labels length mismatch")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    valid_anchor = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid_anchor.any():
        raise NoValidTriplets("no anchor has both a positive and a negative in batch")

    d2 = pairwise_sq_dists(embeddings)
    dist = d2.data

    if mining == "batch-hard":
        anchors = np.nonzero(valid_anchor)[0]
        pos_d = np.where(pos_mask, dist, -np.inf)
        neg_d = np.where(neg_mask, dist, np.inf)
        hardest_pos = pos_d[anchors].argmax(axis=1)
        hardest_neg = neg_d[anchors].argmin(axis=1)
        terms = d2[anchors, hardest_pos] - d2[anchors, hardest_neg] + margin
        return terms.relu().mean()

    # batch-all
    tri = pos_mask[:, :, None] & neg_mask[:, None, :]
    hinge_data = np.where(tri, dist[:, :, None] - dist[:, None, :] + margin, -np.inf)
    active = hinge_data > 0
    n_active = max(int(active.sum()), 1)
    a_idx, p_idx, n_idx = np.nonzero(active)
    if a_idx.size == 0:
        # all triplets satisfied; loss is exactly zero with zero gradient
        return (embeddings * 0.0).sum() * 0.0
    terms = d2[a_idx, p_idx] - d2[a_idx, n_idx] + margin
    return terms.sum() * (1.0 / n_active)


# -- AdamW --

def init_adamw_state(store: ParamStore) -> dict:
    return {
        "t": 0,
        "m": {p.name: np.zeros_like(p.data) for p in store.all_parameters()},
        "v": {p.name: np.zeros_like(p.data) for p in store.all_parameters()},
    }


def adamw_step(store: ParamStore, state: dict, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for p in store.all_parameters():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {p.name}")
        m = state["m"][p.name]
        v = state["v"][p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def cyclical_lr(step: int, base_lr: float, max_lr: float, cycle_len: int) -> float:
    """Triangular wave: base at step 0, max at half cycle, period cycle_len."""
    if cycle_len < 2:
        raise ValueError("cycle_len must be >= 2")
    pos = step % cycle_len
    tri = 1.0 - abs(2.0 * pos / cycle_len - 1.0)
    return base_lr + (max_lr - base_lr) * tri


# -- augmentation --

def augment(seq: GaitSequence, rng: np.random.Generator, noise_sigma: float,
            target_len: int) -> GaitSequence:
    """Random temporal crop (interpolating up when too short) + gaussian joint noise."""
    if len(seq) >= target_len:
        out = resample(seq, target_len, "random_crop", rng)
    else:
        out = resample(seq, target_len, "interpolate")
    if noise_sigma > 0:
        out = out.with_poses(out.poses + rng.normal(0.0, noise_sigma, size=out.poses.shape))
    return out


# -- PK sampling --

class PKSampler:
    """Yields batches of sequence indices: P identities x K sequences each."""

    def __init__(self, labels, p, k, rng):
        self.by_identity = {}
        for i, lab in enumerate(labels):
            self.by_identity.setdefault(lab, []).append(i)
        self.eligible = [lab for lab, idxs in self.by_identity.items() if len(idxs) >= k]
        if len(self.eligible) < p:
            raise InsufficientIdentities(
                f"need {p} identities with >= {k} sequences, have {len(self.eligible)}")
        self.p, self.k, self.rng = p, k, rng
        self.n_sequences = len(labels)

    def batches_per_epoch(self) -> int:
        return max(1, int(np.ceil(self.n_sequences / (self.p * self.k))))

    def sample_batch(self):
        idents = self.rng.choice(len(self.eligible), size=self.p, replace=False)
        batch = []
        for ii in idents:
            idxs = self.by_identity[self.eligible[ii]]
            chosen = self.rng.choice(len(idxs), size=self.k, replace=False)
            batch.extend(idxs[c] for c in chosen)
        return batch


# -- training loop --

@dataclass
class TrainResult:
    store: ParamStore
    model_config: object
    train_config: TrainConfig
    optimizer_state: dict
    metrics: list = field(default_factory=list)   # rows: (step, epoch, lr, loss)
    stats: object = None                          # DatasetStats if the scheme needed them


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch", "lr", "loss"])
        w.writerows(metrics)


def prepare_normalized(dataset, scheme, stats=None, geom=None):
    """Apply a normalization scheme to every sequence, computing stats on the
    given dataset when the scheme needs them and none are supplied."""
    if scheme_needs_stats(scheme) and stats is None:
        if geom is None:
            geom = FrameGeometry(1.0, 1.0)
        stats = compute_stats(dataset, geom)
    if scheme_needs_geom(scheme) and geom is None:
        raise ValueError("scheme requires frame geometry")
    return [apply_scheme(scheme, s, stats=stats, geom=geom) for s in dataset], stats


def train(model_kind: str, dataset, scheme: str, model_config, config: TrainConfig,
          stats=None, geom=None, log_every: int = 0) -> TrainResult:
    """Train an embedding model with online triplet mining.

    One epoch is ceil(n_sequences / (P*K)) batches. For the single-pose model
    each sampled sequence contributes `frames_per_sequence` random frames.
    """
    if not dataset:
        raise InsufficientIdentities("empty dataset")
    normalized, stats = prepare_normalized(dataset, scheme, stats, geom)
    labels = [s.subject_id for s in normalized]

    rng = np.random.default_rng(config.seed)
    store = init_params(model_kind, model_config, config.seed)
    opt_state = init_adamw_state(store)
    sampler = PKSampler(labels, config.p_identities, config.k_samples, rng)
    steps_per_epoch = config.steps_per_epoch or sampler.batches_per_epoch()
    cycle_len = max(2, config.cycle_epochs * steps_per_epoch)

    metrics = []
    step = 0
    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            batch_idx = sampler.sample_batch()
            seqs = [augment(normalized[i], rng, config.noise_sigma, config.seq_len)
                    for i in batch_idx]
            if model_kind == "spe":
                frames, frame_labels = [], []
                for i, s in zip(batch_idx, seqs):
                    picks = rng.integers(0, len(s), size=config.frames_per_sequence)
                    for f in picks:
                        frames.append(s.poses[int(f)])
                        frame_labels.append(labels[i])
                x = np.stack(frames)
                emb = spe_forward(x, store, model_config, training=True)
                batch_labels = frame_labels
            else:
                x = np.stack([s.poses for s in seqs])
                emb = temporal_forward(x, store, model_config, training=True)
                batch_labels = [labels[i] for i in batch_idx]

            loss = triplet_loss(emb, batch_labels, config.margin, config.mining)
            lr = cyclical_lr(step, config.base_lr, config.max_lr, cycle_len)
            for p in store.all_parameters():
                p.zero_grad()
            loss.backward()
            adamw_step(store, opt_state, lr, config.betas, config.eps,
                       config.weight_decay)
            if not log_every or step % log_every == 0:
                metrics.append((step, epoch, lr, loss.item()))
            step += 1

    return TrainResult(store=store, model_config=model_config, train_config=config,
                       optimizer_state=opt_state, metrics=metrics, stats=stats)

"""Contrastive training: dataset assembly, the InfoNCE objective, AdamW.

One training sample per (landmark x axis): the anchor is the reference-volume
series at the landmark, the positive the query-volume series at the paired
landmark, and the negatives are offset-sampled query patches plus every other
positive in the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, encoder_forward, init_encoder_params, save_checkpoint
from .patches import (
    AXES,
    PatchSeries,
    apply_augmentation,
    draw_augmentation,
    extract_series,
    sample_negative_center,
)
from .volume import LandmarkPairSet, Volume3D


@dataclass(frozen=True)
class SubjectData:
    """A loaded, intensity-normalized subject ready for sampling."""

    subject_id: str
    mri: Volume3D
    us: Volume3D
    pairs: LandmarkPairSet


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        groups = (set(self.train), set(self.val), set(self.test))
        if sum(len(g) for g in groups) != len(set().union(*groups)):
            raise ValueError("split groups must be disjoint")


def make_split(subject_ids, seed: int, fractions=(0.70, 0.15, 0.15)) -> SplitSpec:
    """Subject-wise 70/15/15 split with largest-remainder rounding."""
    ids = sorted(subject_ids)
    n = len(ids)
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for i in sorted(range(3), key=lambda i: (-remainders[i], i)):
        if sum(counts) == n:
            break
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    train = tuple(shuffled[: counts[0]])
    val = tuple(shuffled[counts[0] : counts[0] + counts[1]])
    test = tuple(shuffled[counts[0] + counts[1] :])
    return SplitSpec(train=train, val=val, test=test)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 50
    batch_size: int = 256
    temperature: float = 1.0
    negatives_per_anchor: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    encode_chunk: int = 128

    def __post_init__(self):
        if min(self.lr, self.epochs + 1, self.batch_size, self.temperature, self.negatives_per_anchor) <= 0:
            raise ValueError("TrainConfig: lr, batch_size, temperature, negatives_per_anchor must be positive")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("TrainConfig: epochs and weight_decay must be nonnegative")


def cosine_similarity(v: np.ndarray, w: np.ndarray) -> float:
    """Plain cosine similarity of two feature vectors (error on zero norm)."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    nv, nw = np.linalg.norm(v), np.linalg.norm(w)
    if nv == 0 or nw == 0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return float(np.dot(v, w) / (nv * nw))


def info_nce(
    anchor_feats: ad.Tensor,
    positive_feats: ad.Tensor,
    negative_feats: ad.Tensor,
    temperature: float = 1.0,
) -> ad.Tensor:
    """InfoNCE over a batch: softmax of the positive cosine against negatives.

    anchor/positive are (N, D); negative_feats is (N, M, D) with each
    anchor's own negative stack. Gradient flows to all three inputs.
    """
    pos = ad.cosine_pairs(anchor_feats, positive_feats)
    neg = ad.cosine_stack(anchor_feats, negative_feats)
    return ad.nce_softmax_loss(pos, neg, temperature)


@dataclass(frozen=True)
class ContrastiveSample:
    """One training sample: per-axis series roles for a single landmark."""

    subject_id: str
    landmark_id: str
    axis: str
    anchor: PatchSeries
    positive: PatchSeries
    negatives: tuple[PatchSeries, ...]

    def __post_init__(self):
        if self.anchor.axis != self.positive.axis:
            raise ValueError("anchor and positive must share the stacking axis")


@dataclass
class Batch:
    anchors: np.ndarray  # (B, 3, 42, 42)
    positives: np.ndarray  # (B, 3, 42, 42)
    negatives: np.ndarray  # (B, K, 3, 42, 42)
    sample_keys: list[tuple[str, str, str]]  # (subject, landmark, axis)


def enumerate_samples(subjects: list[SubjectData]) -> list[tuple[int, str, str]]:
    """(subject index, landmark id, axis) for every landmark x axis."""
    out = []
    for si, subject in enumerate(subjects):
        for lm in subject.pairs.mri:
            for axis in AXES:
                out.append((si, lm.id, axis))
    return out


def make_sample(
    subject: SubjectData, lm_id: str, axis: str, rng: np.random.Generator, cfg: TrainConfig, augment: bool
) -> ContrastiveSample:
    """Extract one anchor/positive/negatives tuple, with paired augmentation."""
    mri_pos = subject.pairs.mri.get(lm_id).position
    us_pos = subject.pairs.us.get(lm_id).position
    anchor = extract_series(subject.mri, mri_pos, axis)
    positive = extract_series(subject.us, us_pos, axis)
    if augment:
        angle, hflip, vflip = draw_augmentation(rng)
        anchor = apply_augmentation(anchor, angle, hflip, vflip)
        positive = apply_augmentation(positive, angle, hflip, vflip)
    negatives = tuple(
        extract_series(subject.us, sample_negative_center(us_pos, rng), axis)
        for _ in range(cfg.negatives_per_anchor)
    )
    return ContrastiveSample(
        subject_id=subject.subject_id,
        landmark_id=lm_id,
        axis=axis,
        anchor=anchor,
        positive=positive,
        negatives=negatives,
    )


def build_batches(
    subjects: list[SubjectData],
    cfg: TrainConfig,
    seed: int,
    augment: bool = True,
):
    """Yield shuffled contrastive batches; fully determined by ``seed``."""
    samples = enumerate_samples(subjects)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), cfg.batch_size):
        chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
        anchors, positives, negatives, keys = [], [], [], []
        for si, lm_id, axis in chunk:
            sample = make_sample(subjects[si], lm_id, axis, rng, cfg, augment)
            anchors.append(sample.anchor.channels_first())
            positives.append(sample.positive.channels_first())
            negatives.append(np.stack([n.channels_first() for n in sample.negatives]))
            keys.append((sample.subject_id, sample.landmark_id, sample.axis))
        yield Batch(
            anchors=np.stack(anchors),
            positives=np.stack(positives),
            negatives=np.stack(negatives),
            sample_keys=keys,
        )


def _encode_chunked(params: EncoderParams, x: np.ndarray, chunk: int) -> ad.Tensor:
    """Run the encoder over row chunks and concatenate, keeping peak memory flat."""
    parts = [encoder_forward(params, ad.Tensor(x[i : i + chunk])) for i in range(0, len(x), chunk)]
    return parts[0] if len(parts) == 1 else ad.concat_rows(parts)


def negative_index_matrix(b: int, k: int) -> np.ndarray:
    """Row i of the (b, k + b - 1) result indexes anchor i's negatives inside
    the concatenated [positives | explicit negatives] feature stack: its own
    k offset negatives plus every other anchor's positive."""
    explicit = b + np.arange(b * k).reshape(b, k)
    if b == 1:
        return explicit
    others = np.array([[j for j in range(b) if j != i] for i in range(b)])
    return np.concatenate([explicit, others], axis=1)


def batch_loss(params_mri: EncoderParams, params_us: EncoderParams, batch: Batch, cfg: TrainConfig) -> ad.Tensor:
    """InfoNCE of one batch; negatives are the K explicit offsets plus all
    other in-batch positives."""
    b, k = batch.negatives.shape[:2]
    anchor_feats = _encode_chunked(params_mri, batch.anchors, cfg.encode_chunk)
    us_input = np.concatenate([batch.positives, batch.negatives.reshape(b * k, *batch.negatives.shape[2:])])
    us_feats = _encode_chunked(params_us, us_input, cfg.encode_chunk)
    positive_feats = ad.gather_rows(us_feats, np.arange(b))
    negative_feats = ad.gather_rows(us_feats, negative_index_matrix(b, k))
    return info_nce(anchor_feats, positive_feats, negative_feats, cfg.temperature)


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, ad.Tensor], state: AdamWState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay touches conv/linear weights only, never biases or norm
    parameters.
    """
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            raise ValueError(f"adamw_step: no gradient for {name}")
        if g.shape != tensor.data.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != param shape {tensor.data.shape} for {name}")
        g = g.astype(tensor.data.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        update = cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay > 0 and name.endswith(".weight"):
            update = update + cfg.lr * cfg.weight_decay * tensor.data
        tensor.data = tensor.data - update


def merged_params(params_mri: EncoderParams, params_us: EncoderParams) -> dict[str, ad.Tensor]:
    out = {f"mri/{n}": t for n, t in params_mri.tensors.items()}
    out.update({f"us/{n}": t for n, t in params_us.tensors.items()})
    return out


@dataclass
class TrainResult:
    checkpoint_dir: Path | None
    log: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    split: SplitSpec


def initial_params(cfg: TrainConfig) -> tuple[EncoderParams, EncoderParams]:
    """The two independent encoder initializations derived from cfg.seed."""
    state = np.random.SeedSequence(cfg.seed).generate_state(2)
    return init_encoder_params(int(state[0])), init_encoder_params(int(state[1]))


def _epoch_loss(subjects, params_mri, params_us, cfg, seed) -> float:
    """Mean validation loss with fixed sampling and no augmentation."""
    losses, weights = [], []
    with ad.no_grad():
        for batch in build_batches(subjects, cfg, seed=seed, augment=False):
            loss = batch_loss(params_mri, params_us, batch, cfg)
            losses.append(loss.item())
            weights.append(len(batch.sample_keys))
    return float(np.average(losses, weights=weights)) if losses else float("nan")


def train(
    subjects: list[SubjectData],
    cfg: TrainConfig,
    out_dir=None,
    split: SplitSpec | None = None,
    log_fn=None,
) -> TrainResult:
    """Run the contrastive loop; keeps the best-validation parameters.

    The subject-wise split is derived from ``cfg.seed`` unless one is given.
    With ``out_dir`` set, writes the best checkpoint plus a loss-log CSV.
    """
    if split is None:
        split = make_split([s.subject_id for s in subjects], seed=cfg.seed)
    by_id = {s.subject_id: s for s in subjects}
    train_subjects = [by_id[i] for i in split.train]
    val_subjects = [by_id[i] for i in split.val]
    if not train_subjects:
        raise ValueError("train: empty training split")

    seeds = np.random.SeedSequence(cfg.seed)
    epoch_seeds = seeds.spawn(max(cfg.epochs, 1) + 1)
    val_seed = int(epoch_seeds[-1].generate_state(1)[0])

    params_mri, params_us = initial_params(cfg)
    opt_state = AdamWState()
    merged = merged_params(params_mri, params_us)

    best = (params_mri.copy(), params_us.copy())
    best_epoch = 0
    best_val = _epoch_loss(val_subjects, params_mri, params_us, cfg, val_seed) if val_subjects else float("inf")
    log: list[tuple[int, float, float]] = []

    for epoch in range(1, cfg.epochs + 1):
        epoch_seed = int(epoch_seeds[epoch - 1].generate_state(1)[0])
        train_losses, train_weights = [], []
        for batch in build_batches(train_subjects, cfg, seed=epoch_seed, augment=True):
            for t in merged.values():
                t.grad = None
            loss = batch_loss(params_mri, params_us, batch, cfg)
            loss.backward()
            adamw_step(merged, opt_state, cfg)
            train_losses.append(loss.item())
            train_weights.append(len(batch.sample_keys))
        train_loss = float(np.average(train_losses, weights=train_weights))
        val_loss = _epoch_loss(val_subjects, params_mri, params_us, cfg, val_seed) if val_subjects else train_loss
        log.append((epoch, train_loss, val_loss))
        if log_fn is not None:
            log_fn(epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = (params_mri.copy(), params_us.copy())

    checkpoint_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {"seed": cfg.seed, "epoch": best_epoch, "loss": f"{best_val:.17g}"}
        checkpoint_dir = save_checkpoint(out_dir, best[0], best[1], meta)
        with (out_dir / "loss_log.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tr, va in log:
                writer.writerow([epoch, f"{tr:.17g}", f"{va:.17g}"])
    return TrainResult(
        checkpoint_dir=checkpoint_dir,
        log=log,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        split=split,
    )

"""Video-centralised learning: clip sampling, attract/repel losses, centre
table maintenance and the full training loop.

Each track owns a latent-space centre.  Clip representations are attracted
to their own centre and repelled (hinge with margin g) from centres of
cannot-linked tracks.  Parameters are trained with SGD + momentum under a
OneCycle schedule; centres take SGD steps at a proportional rate eta = p*xi
and are periodically re-established by a full-track forward pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .constraints import CannotLinkMatrix
from .trackio import EmbeddingTrack, TrackSet

DIST_EPS = 1e-12


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class Clip:
    """Consecutive frames i..i+j of a track, 1-indexed."""

    start: int  # i
    extra: int  # j; clip length is j + 1
    track_id: int | None = None

    def __post_init__(self):
        if self.start < 1 or self.extra < 0:
            raise TrainError(f"invalid clip (i={self.start}, j={self.extra})")

    def slice_of(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings[self.start - 1 : self.start + self.extra]


@dataclass
class CentreTable:
    """One latent centre per track, in track index order."""

    centres: np.ndarray  # (M, z)
    track_ids: tuple[int, ...]
    epochs_since_recompute: int = 0

    def copy(self) -> "CentreTable":
        return CentreTable(
            centres=self.centres.copy(),
            track_ids=self.track_ids,
            epochs_since_recompute=self.epochs_since_recompute,
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 900
    warmup_epochs: int = 400
    max_lr: float = 5.1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 512
    clip_cap: int = 90
    attract_per_track: int = 10
    repel_per_track: int = 16
    margin: float = 1.0
    centre_lr_factor: float = 1.0  # p in eta = p * xi
    centre_recompute_interval: int = 50  # epochs between full recomputes
    seed: int = 0
    checkpoint_policy: str = "final"  # "final" | "best_sdbw"

    def __post_init__(self):
        positive = {
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "max_lr": self.max_lr,
            "batch_size": self.batch_size,
            "clip_cap": self.clip_cap,
            "attract_per_track": self.attract_per_track,
            "repel_per_track": self.repel_per_track,
            "margin": self.margin,
            "centre_lr_factor": self.centre_lr_factor,
            "centre_recompute_interval": self.centre_recompute_interval,
        }
        for name, v in positive.items():
            if v <= 0:
                raise TrainError(f"{name} must be positive, got {v}")
        if not (0 <= self.momentum < 1):
            raise TrainError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise TrainError("weight_decay must be >= 0")
        if self.warmup_epochs >= self.epochs:
            raise TrainError("warmup_epochs must be < epochs")
        if self.checkpoint_policy not in ("final", "best_sdbw"):
            raise TrainError(f"unknown checkpoint policy {self.checkpoint_policy!r}")
        if self.clip_cap < 2:
            raise TrainError("clip_cap must be >= 2")


def sample_clip_consecutive(n: int, cap: int, rng: np.random.Generator) -> Clip:
    """Sample a consecutive clip: i uniform on {1..n-1}, j uniform on
    {1..min(n-i, cap-1)}; a length-1 track yields the whole track."""
    if n < 1:
        raise TrainError("track length must be >= 1")
    if cap < 2:
        raise TrainError("clip cap must be >= 2")
    if n == 1:
        return Clip(start=1, extra=0)
    i = int(rng.integers(1, n))
    j = int(rng.integers(1, min(n - i, cap - 1) + 1))
    return Clip(start=i, extra=j)


def sample_clip_uniform(n: int, length: int, rng: np.random.Generator):
    """Ablation sampler: ``length`` distinct 1-indexed frames, sorted."""
    if not (1 <= length <= n):
        raise TrainError(f"need 1 <= length <= n, got length={length}, n={n}")
    idx = rng.choice(n, size=length, replace=False)
    return tuple(sorted(int(i) + 1 for i in idx))


def vc_loss(z, c, y: int, g: float) -> float:
    """Attract (y=1): 0.5*||z-c||.  Repel (y=0): 0.5*max(g-||z-c||, 0)."""
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(c))):
        raise TrainError("non-finite inputs to vc_loss")
    if g <= 0:
        raise TrainError("margin must be positive")
    dist = float(np.linalg.norm(z - c))
    if y == 1:
        return 0.5 * dist
    return 0.5 * max(g - dist, 0.0)


def grad_z(z, c, y: int, g: float) -> np.ndarray:
    """Analytic gradient of vc_loss w.r.t. z; zero (with a warning) at the
    non-differentiable point ||z-c|| <= eps."""
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    diff = z - c
    dist = float(np.linalg.norm(diff))
    if dist <= DIST_EPS:
        warnings.warn("grad_z at non-differentiable point ||z-c||=0; returning 0")
        return np.zeros_like(diff)
    unit = diff / dist
    if y == 1:
        return 0.5 * unit
    if g - dist > 0:
        return -0.5 * unit
    return np.zeros_like(diff)


def update_centre(c, z, y: int, eta: float, g: float) -> np.ndarray:
    """One SGD step on the centre, treating z as constant."""
    if eta <= 0:
        raise TrainError("eta must be positive")
    c = np.asarray(c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    diff = z - c
    dist = float(np.linalg.norm(diff))
    if dist <= DIST_EPS:
        warnings.warn("centre update at non-differentiable point ||z-c||=0")
        return c.copy()
    unit = diff / dist
    if y == 1:
        grad_c = -0.5 * unit  # (c - z) / ||z - c|| scaled by y/2
    elif g - dist > 0:
        grad_c = 0.5 * unit
    else:
        return c.copy()
    return c - eta * grad_c


def compute_centre_full(params: enc.EncoderParams, track: EmbeddingTrack) -> np.ndarray:
    """Whole-track centre: the training-head output on the full track."""
    z, _ = enc.forward_train(params, track.embeddings)
    return z


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine one-cycle schedule: max_lr/25 -> max_lr over the warm-up
    fraction of steps, then cosine decay to max_lr/1e4 at the last step."""
    if not (0 <= step < total_steps):
        raise TrainError(f"step {step} outside [0, {total_steps})")
    last = total_steps - 1
    warm_steps = int(round(last * cfg.warmup_epochs / cfg.epochs))
    start = cfg.max_lr / 25.0
    final = cfg.max_lr / 1e4
    if step <= warm_steps:
        if warm_steps == 0:
            return cfg.max_lr
        p = step / warm_steps
        return start + (cfg.max_lr - start) * 0.5 * (1.0 - np.cos(np.pi * p))
    q = (step - warm_steps) / (last - warm_steps)
    return final + (cfg.max_lr - final) * 0.5 * (1.0 + np.cos(np.pi * q))


@dataclass(frozen=True)
class _Sample:
    track_idx: int
    clip: Clip
    y: int
    centre_idx: int


_CHUNK = 128


def bucketed_forward(params: enc.EncoderParams, clips: list[np.ndarray]):
    """Forward a batch of variable-length clips in length-sorted chunks.

    Padding each chunk only to its own longest clip cuts the wasted work
    substantially; results are identical to one padded batch.  Returns
    (z in original order, list of (index array, cache)).
    """
    order = np.argsort([c.shape[0] for c in clips], kind="stable")
    z = np.empty((len(clips), params.config.head_out_dim))
    caches = []
    for c0 in range(0, len(order), _CHUNK):
        idx = order[c0 : c0 + _CHUNK]
        zc, cache = enc.forward_train_batch(params, [clips[i] for i in idx])
        z[idx] = zc
        caches.append((idx, cache))
    return z, caches


def bucketed_backward(params: enc.EncoderParams, caches, gz: np.ndarray):
    """Accumulate parameter gradients over the chunks of bucketed_forward."""
    total = None
    for idx, cache in caches:
        g = enc.backward(params, cache, gz[idx])
        if total is None:
            total = g
        else:
            for name in total:
                total[name] += g[name]
    return total


def _batch_loss_and_gradz(z_batch, centres, ys, g):
    """Vectorised per-sample losses and dL/dz over one batch."""
    diff = z_batch - centres
    dist = np.linalg.norm(diff, axis=1)
    att = ys == 1
    losses = np.where(att, 0.5 * dist, 0.5 * np.maximum(g - dist, 0.0))
    safe = dist > DIST_EPS
    unit = np.zeros_like(diff)
    unit[safe] = diff[safe] / dist[safe, None]
    sign = np.where(att, 0.5, np.where((g - dist > 0), -0.5, 0.0))
    return losses, sign[:, None] * unit


def init_centres(params: enc.EncoderParams, trackset: TrackSet) -> CentreTable:
    centres = np.stack([compute_centre_full(params, t) for t in trackset.tracks])
    return CentreTable(
        centres=centres,
        track_ids=tuple(t.track_id for t in trackset.tracks),
        epochs_since_recompute=0,
    )


def train(
    trackset: TrackSet,
    n_matrix: CannotLinkMatrix,
    encoder_config: enc.EncoderConfig,
    train_config: TrainConfig,
    on_epoch_end=None,
):
    """Run the two-step iterative optimisation and return
    (selected EncoderParams, CentreTable, history rows).

    History rows are dicts with keys epoch, mean_loss, lr, sdbw (sdbw is
    None unless checkpoint_policy == "best_sdbw").  ``on_epoch_end``, if
    given, is called as on_epoch_end(epoch, params, centre_table) after
    any scheduled centre recompute.
    """
    cfg = train_config
    tracks = trackset.tracks
    m = len(tracks)
    rng = np.random.default_rng(cfg.seed)
    params = enc.init_params(encoder_config, rng)
    velocity = enc.zero_grads(params)
    decayed = set(params.decayed_names())

    partner_lists = [n_matrix.partners(i) for i in range(m)]
    if not n_matrix.any_links():
        warnings.warn("no cannot-links available; training with attract samples only")
    repel_tracks = sum(1 for p in partner_lists if len(p) > 0)
    samples_per_epoch = cfg.attract_per_track * m + cfg.repel_per_track * repel_tracks
    batches_per_epoch = -(-samples_per_epoch // cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch

    table = init_centres(params, trackset)
    history: list[dict] = []
    step = 0
    best_sdbw = np.inf
    best_tensors = None
    sdbw_k = None
    if cfg.checkpoint_policy == "best_sdbw":
        labels = [t.label for t in tracks]
        if any(l is None for l in labels):
            raise TrainError("best_sdbw checkpoint policy requires labeled tracks")
        sdbw_k = len(set(labels))
        if sdbw_k < 2:
            raise TrainError("best_sdbw checkpoint policy needs >= 2 identities")

    for epoch in range(1, cfg.epochs + 1):
        samples: list[_Sample] = []
        for ti, track in enumerate(tracks):
            for _ in range(cfg.attract_per_track):
                clip = sample_clip_consecutive(track.length, cfg.clip_cap, rng)
                samples.append(_Sample(ti, clip, 1, ti))
            partners = partner_lists[ti]
            if len(partners) > 0:
                for _ in range(cfg.repel_per_track):
                    clip = sample_clip_consecutive(track.length, cfg.clip_cap, rng)
                    other = int(partners[rng.integers(len(partners))])
                    samples.append(_Sample(ti, clip, 0, other))
        order = rng.permutation(len(samples))
        samples = [samples[i] for i in order]

        loss_sum = 0.0
        lr = 0.0
        for b0 in range(0, len(samples), cfg.batch_size):
            batch = samples[b0 : b0 + cfg.batch_size]
            clips = [s.clip.slice_of(tracks[s.track_idx].embeddings) for s in batch]
            z_batch, caches = bucketed_forward(params, clips)
            ys = np.array([s.y for s in batch])
            cen = table.centres[[s.centre_idx for s in batch]]
            losses, gz = _batch_loss_and_gradz(z_batch, cen, ys, cfg.margin)
            if not np.all(np.isfinite(losses)):
                raise TrainError(
                    f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}"
                )
            loss_sum += float(losses.sum())
            grads = bucketed_backward(params, caches, gz / len(batch))

            lr = onecycle_lr(step, total_steps, cfg)
            for name, g in grads.items():
                w = params.tensors[name]
                if name in decayed and cfg.weight_decay > 0:
                    g = g + cfg.weight_decay * w
                velocity[name] = cfg.momentum * velocity[name] + g
                w -= lr * velocity[name]
            params.check_finite()

            eta = cfg.centre_lr_factor * lr
            for s, z in zip(batch, z_batch):
                table.centres[s.centre_idx] = update_centre(
                    table.centres[s.centre_idx], z, s.y, eta, cfg.margin
                )
            step += 1

        table.epochs_since_recompute += 1
        if epoch % cfg.centre_recompute_interval == 0:
            table = init_centres(params, trackset)

        sdbw_val = None
        if cfg.checkpoint_policy == "best_sdbw":
            from .clustereval import KnownK, hac, sdbw as sdbw_index

            reps = enc.forward_eval_batch(params, [t.embeddings for t in tracks])
            assign = hac(reps, linkage="average", stop=KnownK(sdbw_k))
            sdbw_val = sdbw_index(reps, assign.as_array())
            if sdbw_val < best_sdbw:
                best_sdbw = sdbw_val
                best_tensors = {n: t.copy() for n, t in params.tensors.items()}

        history.append(
            dict(
                epoch=epoch,
                mean_loss=loss_sum / len(samples),
                lr=lr,
                sdbw=sdbw_val,
            )
        )
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, table)

    if cfg.checkpoint_policy == "best_sdbw" and best_tensors is not None:
        params = enc.EncoderParams(config=params.config, tensors=best_tensors)
    return params, table, history


def write_history_csv(path, history) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "lr", "sdbw"])
        for row in history:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["mean_loss"]),
                    repr(row["lr"]),
                    "" if row["sdbw"] is None else repr(row["sdbw"]),
                ]
            )

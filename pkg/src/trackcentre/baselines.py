"""Comparison systems: temporal averaging and pairwise contrastive
training of a Siamese MLP (frame level) or the transformer (clip level).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .constraints import CannotLinkMatrix, sample_pairs
from .trackio import EmbeddingTrack, TrackSet
from .vcl import (
    TrainConfig,
    TrainError,
    bucketed_backward,
    bucketed_forward,
    onecycle_lr,
    sample_clip_consecutive,
)


@dataclass
class SiameseMlpParams:
    """Two affine layers d -> h -> z with a GELU between."""

    tensors: dict[str, np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.tensors["w1"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.tensors["w2"].shape[1]


def init_mlp(
    dim: int, hidden: int, out_dim: int, rng: np.random.Generator
) -> SiameseMlpParams:
    def proj(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return SiameseMlpParams(
        tensors={
            "w1": proj(dim, hidden),
            "b1": np.zeros(hidden),
            "w2": proj(hidden, out_dim),
            "b2": np.zeros(out_dim),
        }
    )


def mlp_forward(params: SiameseMlpParams, x: np.ndarray):
    """x: (..., d) -> (out, pre-activation cache)."""
    t = params.tensors
    pre = x @ t["w1"] + t["b1"]
    out = enc.gelu(pre) @ t["w2"] + t["b2"]
    return out, pre


def mlp_backward(params: SiameseMlpParams, x, pre, dout):
    t = params.tensors
    act = enc.gelu(pre)
    x2 = x.reshape(-1, x.shape[-1])
    dout2 = dout.reshape(-1, dout.shape[-1])
    act2 = act.reshape(-1, act.shape[-1])
    grads = {
        "w2": act2.T @ dout2,
        "b2": dout2.sum(axis=0),
    }
    dact = dout @ t["w2"].T
    dpre = dact * enc.gelu_grad(pre)
    dpre2 = dpre.reshape(-1, dpre.shape[-1])
    grads["w1"] = x2.T @ dpre2
    grads["b1"] = dpre2.sum(axis=0)
    return grads


def temporal_average(track: EmbeddingTrack) -> np.ndarray:
    """Arithmetic mean of the track's frame embeddings."""
    return track.embeddings.mean(axis=0)


def pairwise_contrastive_loss(z_i, z_j, y: int, g: float) -> float:
    """(y/2)||zi-zj||^2 + ((1-y)/2) max(g - ||zi-zj||, 0)^2."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if not (np.all(np.isfinite(z_i)) and np.all(np.isfinite(z_j))):
        raise TrainError("non-finite inputs to pairwise_contrastive_loss")
    if g <= 0:
        raise TrainError("margin must be positive")
    dist = float(np.linalg.norm(z_i - z_j))
    if y == 1:
        return 0.5 * dist**2
    return 0.5 * max(g - dist, 0.0) ** 2


def _pair_loss_grads(zi, zj, ys, g):
    """Vectorised losses and (dL/dzi, dL/dzj) for batches of pairs."""
    diff = zi - zj
    dist = np.linalg.norm(diff, axis=1)
    att = ys == 1
    hinge = np.maximum(g - dist, 0.0)
    losses = np.where(att, 0.5 * dist**2, 0.5 * hinge**2)
    safe = dist > 1e-12
    unit = np.zeros_like(diff)
    unit[safe] = diff[safe] / dist[safe, None]
    dzi = np.where(att[:, None], diff, -hinge[:, None] * unit)
    return losses, dzi, -dzi


def track_representation_mlp(params: SiameseMlpParams, track: EmbeddingTrack):
    """Temporal average of the per-frame MLP projections."""
    out, _ = mlp_forward(params, track.embeddings)
    return out.mean(axis=0)


def train_pairwise(
    model_kind: str,
    trackset: TrackSet,
    n_matrix: CannotLinkMatrix,
    config: TrainConfig,
    encoder_config: enc.EncoderConfig | None = None,
    mlp_hidden: int | None = None,
    mlp_out_dim: int = 2,
):
    """Pairwise contrastive training; returns (params, history).

    "mlp": frame-level Siamese MLP on sampled constraint pairs.
    "transformer": clip-vs-clip training of the encoder head outputs.
    """
    if model_kind not in ("mlp", "transformer"):
        raise TrainError(f"unknown model kind {model_kind!r}")
    cfg = config
    tracks = trackset.tracks
    m = len(tracks)
    rng = np.random.default_rng(cfg.seed)
    have_negatives = n_matrix.any_links()
    if not have_negatives:
        warnings.warn("no cannot-links available; training with positives only")

    pos_per_epoch = cfg.attract_per_track * m
    neg_per_epoch = cfg.repel_per_track * m if have_negatives else 0
    pairs_per_epoch = pos_per_epoch + neg_per_epoch
    batches_per_epoch = -(-pairs_per_epoch // cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch

    if model_kind == "mlp":
        hidden = mlp_hidden if mlp_hidden is not None else max(1, trackset.dim // 2)
        params = init_mlp(trackset.dim, hidden, mlp_out_dim, rng)
    else:
        if encoder_config is None:
            raise TrainError("transformer mode requires an encoder_config")
        params = enc.init_params(encoder_config, rng)
    velocity = {n: np.zeros_like(t) for n, t in params.tensors.items()}
    decayed = {n for n, t in params.tensors.items() if t.ndim == 2}

    track_index = {t.track_id: i for i, t in enumerate(tracks)}
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if model_kind == "mlp":
            pairs = sample_pairs(trackset, n_matrix, rng, pos_per_epoch, neg_per_epoch)
            order = rng.permutation(len(pairs))
            pairs = [pairs[i] for i in order]
        else:
            pairs = []
            for ti, track in enumerate(tracks):
                partners = n_matrix.partners(ti)
                for _ in range(cfg.attract_per_track):
                    ca = sample_clip_consecutive(track.length, cfg.clip_cap, rng)
                    cb = sample_clip_consecutive(track.length, cfg.clip_cap, rng)
                    pairs.append((ti, ca, ti, cb, 1))
                if have_negatives and len(partners) > 0:
                    for _ in range(cfg.repel_per_track):
                        other = int(partners[rng.integers(len(partners))])
                        ca = sample_clip_consecutive(track.length, cfg.clip_cap, rng)
                        cb = sample_clip_consecutive(
                            tracks[other].length, cfg.clip_cap, rng
                        )
                        pairs.append((ti, ca, other, cb, 0))
            order = rng.permutation(len(pairs))
            pairs = [pairs[i] for i in order]

        loss_sum = 0.0
        n_pairs = len(pairs)
        lr = 0.0
        for b0 in range(0, n_pairs, cfg.batch_size):
            batch = pairs[b0 : b0 + cfg.batch_size]
            bsz = len(batch)
            if model_kind == "mlp":
                xi = np.stack(
                    [
                        tracks[track_index[p.track_a]].embeddings[p.frame_idx_a]
                        for p in batch
                    ]
                )
                xj = np.stack(
                    [
                        tracks[track_index[p.track_b]].embeddings[p.frame_idx_b]
                        for p in batch
                    ]
                )
                ys = np.array([p.y for p in batch])
                zi, pre_i = mlp_forward(params, xi)
                zj, pre_j = mlp_forward(params, xj)
                losses, dzi, dzj = _pair_loss_grads(zi, zj, ys, cfg.margin)
                gi = mlp_backward(params, xi, pre_i, dzi / bsz)
                gj = mlp_backward(params, xj, pre_j, dzj / bsz)
                grads = {n: gi[n] + gj[n] for n in gi}
            else:
                clips_i = [
                    c.slice_of(tracks[ti].embeddings) for ti, c, _, _, _ in batch
                ]
                clips_j = [
                    c.slice_of(tracks[tj].embeddings) for _, _, tj, c, _ in batch
                ]
                ys = np.array([p[4] for p in batch])
                zi, caches_i = bucketed_forward(params, clips_i)
                zj, caches_j = bucketed_forward(params, clips_j)
                losses, dzi, dzj = _pair_loss_grads(zi, zj, ys, cfg.margin)
                gi = bucketed_backward(params, caches_i, dzi / bsz)
                gj = bucketed_backward(params, caches_j, dzj / bsz)
                grads = {n: gi[n] + gj[n] for n in gi}
            if not np.all(np.isfinite(losses)):
                raise TrainError(
                    f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}"
                )
            loss_sum += float(losses.sum())

            lr = onecycle_lr(step, total_steps, cfg)
            for name, g in grads.items():
                w = params.tensors[name]
                if name in decayed and cfg.weight_decay > 0:
                    g = g + cfg.weight_decay * w
                velocity[name] = cfg.momentum * velocity[name] + g
                w -= lr * velocity[name]
            step += 1

        history.append(
            dict(epoch=epoch, mean_loss=loss_sum / n_pairs, lr=lr, sdbw=None)
        )
    return params, history

"""Training loops for the baseline (single-speaker crops) and guided
(on-the-fly three-speaker mixtures) extractors.

Both loops are single-threaded and bit-deterministic for a fixed seed: the
root seed spawns one child seed per iteration, and every random draw inside
an iteration comes from that child stream in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, logmel
from .autograd import Tape, backward, tensor
from .config import dilations_of
from .errors import UsageError
from .mixture import by_speaker, make_training_mixture
from .model import (GuideMode, ModelConfig, ModelParams, build_input, init_params,
                    pooled_embedding, save_checkpoint)
from .objective import AamConfig, AdamState, ScheduleConfig, aam_loss, adam_step, lr_at

GUIDED_TRAIN_MODE = GuideMode(True, True, True)


@dataclass(frozen=True)
class TrainResult:
    params: ModelParams
    losses: tuple
    label_map: dict

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _maybe_add_noise(wav: np.ndarray, rng: np.random.Generator,
                     prob: float, snr_range) -> np.ndarray:
    # draw order is fixed: one uniform for the gate, then SNR, then samples
    if rng.uniform() >= prob:
        return wav
    snr_db = rng.uniform(*snr_range)
    noise = rng.normal(0.0, 1.0, wav.size)
    sig_rms = np.sqrt(np.mean(wav ** 2))
    noise_rms = np.sqrt(np.mean(noise ** 2))
    scale = sig_rms / (noise_rms * 10.0 ** (snr_db / 20.0))
    return wav + scale * noise


def _schedule(cfg: dict) -> ScheduleConfig:
    return ScheduleConfig(iters_per_epoch=cfg["iters_per_epoch"],
                          cycles=cfg["cycles"],
                          epochs_per_cycle=cfg["epochs_per_cycle"],
                          warmup_iters=cfg["warmup_iters"],
                          peak_lr=cfg["peak_lr"],
                          cycle_decay=cfg["cycle_decay"])


def _model_config(cfg: dict, in_dim: int) -> ModelConfig:
    return ModelConfig(in_dim=in_dim, channels=cfg["channels"],
                       attention_dim=cfg["attention_dim"],
                       embed_dim=cfg["embed_dim"], kernel=cfg["kernel"],
                       dilations=dilations_of(cfg))


def _dtype(cfg: dict):
    return np.float32 if cfg["precision"] == "f32" else np.float64


def _run_loop(corpus, cfg, in_dim, batch_builder, checkpoint_dir=None,
              progress=None) -> TrainResult:
    utts = by_speaker(corpus)
    speakers = sorted(utts)
    label_map = {sid: i for i, sid in enumerate(speakers)}
    sched = _schedule(cfg)
    dtype = _dtype(cfg)
    params = init_params(_model_config(cfg, in_dim), n_classes=len(speakers),
                         seed=cfg["seed"])
    if dtype is np.float32:
        params = params.cast(np.float32)
    aam = AamConfig(margin=cfg["aam_margin"], scale=cfg["aam_scale"])
    adam = AdamState()
    snr_range = (cfg["noise_snr_low"], cfg["noise_snr_high"])
    iter_seeds = np.random.SeedSequence(cfg["seed"]).spawn(sched.total_iters)
    losses = []
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    for it in range(sched.total_iters):
        rng = np.random.default_rng(iter_seeds[it])
        tape = Tape()
        embs, labels = [], []
        batch_builder(tape, params, rng, utts, label_map, embs, labels,
                      snr_range, dtype)
        stacked = tape.stack_rows(embs)
        loss = aam_loss(tape, params["cls.w"], stacked, labels, aam)
        grads = backward(tape, loss, params.trainable())
        adam_step(params.trainable(), grads, adam, lr_at(it, sched))
        losses.append(float(loss.data))
        if progress is not None:
            progress(it, losses[-1])
        if checkpoint_dir and (it + 1) % sched.iters_per_epoch == 0:
            epoch = (it + 1) // sched.iters_per_epoch
            save_checkpoint(params, checkpoint_dir / f"epoch_{epoch:03d}.ckpt")
    if checkpoint_dir:
        save_checkpoint(params, checkpoint_dir / "final.ckpt")
    return TrainResult(params, tuple(losses), label_map)


def train_guided(corpus, cfg: dict, checkpoint_dir=None, progress=None) -> TrainResult:
    """Guided extractor: every speaker of every mixture becomes one sample."""
    if len({u.speaker_id for u in corpus}) < 3:
        raise UsageError("guided training needs at least 3 speakers")
    crop_range = (cfg["crop_mix_low"], cfg["crop_mix_high"])

    def build(tape, params, rng, utts, label_map, embs, labels, snr_range, dtype):
        for _ in range(cfg["batch_mixtures"]):
            mix = make_training_mixture(utts, rng, crop_range=crop_range)
            wav = _maybe_add_noise(mix.clip.samples, rng, cfg["noise_prob"], snr_range)
            feat = logmel(AudioClip(wav, mix.clip.sample_rate))
            for idx, sid in enumerate(mix.speaker_ids):
                x = build_input(feat, mix.acts, idx, GUIDED_TRAIN_MODE, 82)
                v = pooled_embedding(tape, params, tensor(x.astype(dtype)),
                                     z_frames=mix.acts.data[idx], use_mask=True,
                                     training=True)
                embs.append(v)
                labels.append(label_map[sid])

    return _run_loop(corpus, cfg, 82, build, checkpoint_dir, progress)


def train_baseline(corpus, cfg: dict, checkpoint_dir=None, progress=None) -> TrainResult:
    """Baseline extractor: fixed-length single-speaker crops, no guidance."""
    crop = cfg["crop_single_s"]

    def build(tape, params, rng, utts, label_map, embs, labels, snr_range, dtype):
        speakers = sorted(utts)
        n_samples = int(round(crop * 16000))
        for _ in range(cfg["batch_singles"]):
            sid = speakers[rng.integers(0, len(speakers))]
            cands = utts[sid]
            utt = cands[rng.integers(0, len(cands))]
            offset = int(rng.integers(0, utt.clip.samples.size))
            idx = (offset + np.arange(n_samples)) % utt.clip.samples.size
            wav = utt.clip.samples[idx]
            wav = _maybe_add_noise(wav, rng, cfg["noise_prob"], snr_range)
            feat = logmel(AudioClip(wav, 16000))
            v = pooled_embedding(tape, params, tensor(feat.data.astype(dtype)),
                                 training=True)
            embs.append(v)
            labels.append(label_map[sid])

    return _run_loop(corpus, cfg, 80, build, checkpoint_dir, progress)

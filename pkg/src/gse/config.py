"""Flat key=value run configuration: every key documented here, unknown keys
rejected, overridable from the command line via --set key=value."""

from __future__ import annotations

from pathlib import Path

from .errors import UsageError

# key -> (type, default, help)
SCHEMA = {
    "seed": (int, 7, "root random seed"),
    "sample_rate": (int, 16000, "audio sample rate; only 16000 is supported"),
    "corpus_speakers": (int, 20, "number of synthetic speakers"),
    "corpus_utts": (int, 8, "utterances synthesized per speaker"),
    "corpus_train_utts": (int, 5, "per-speaker utterances reserved for training"),
    "channels": (int, 64, "encoder channels D"),
    "attention_dim": (int, 32, "attention bottleneck width"),
    "embed_dim": (int, 192, "output embedding dimensionality"),
    "kernel": (int, 5, "encoder conv kernel width"),
    "dilations": (str, "1,2,3", "comma-separated encoder dilation rates"),
    "cycles": (int, 2, "learning-rate cycles"),
    "epochs_per_cycle": (int, 2, "epochs per cycle"),
    "iters_per_epoch": (int, 40, "iterations per epoch"),
    "warmup_iters": (int, 15, "warm-up iterations at the start of each cycle"),
    "peak_lr": (float, 0.002, "peak learning rate of the first cycle"),
    "cycle_decay": (float, 0.75, "peak decay factor applied each cycle"),
    "batch_mixtures": (int, 8, "training mixtures per iteration (guided)"),
    "batch_singles": (int, 24, "single-speaker crops per iteration (baseline)"),
    "aam_margin": (float, 0.2, "additive angular margin"),
    "aam_scale": (float, 30.0, "logit scale"),
    "noise_prob": (float, 0.5, "probability of additive-noise augmentation"),
    "noise_snr_low": (float, 5.0, "lowest augmentation SNR in dB"),
    "noise_snr_high": (float, 20.0, "highest augmentation SNR in dB"),
    "crop_single_s": (float, 3.0, "baseline crop length in seconds"),
    "crop_mix_low": (float, 3.0, "shortest mixture crop in seconds"),
    "crop_mix_high": (float, 6.0, "longest mixture crop in seconds"),
    "precision": (str, "f64", "training precision: f64 or f32"),
}


def default_config() -> dict:
    return {key: spec[1] for key, spec in SCHEMA.items()}


def _convert(key: str, raw: str):
    typ = SCHEMA[key][0]
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key '{key}' expects {typ.__name__}, got '{raw}'") from None


def parse_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"no such config file: {path}")
    cfg = default_config()
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{ln}: expected key=value, got '{stripped}'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise UsageError(f"{path}:{ln}: unknown config key '{key}'")
        cfg[key] = _convert(key, raw)
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    out = dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise UsageError(f"unknown config key '{key}'")
        out[key] = _convert(key, raw.strip())
    return out


def validate(cfg: dict) -> dict:
    if cfg["sample_rate"] != 16000:
        raise UsageError("only sample_rate=16000 is supported")
    if cfg["precision"] not in ("f64", "f32"):
        raise UsageError("precision must be f64 or f32")
    if not 0 < cfg["corpus_train_utts"] < cfg["corpus_utts"]:
        raise UsageError("corpus_train_utts must leave at least one eval utterance")
    return cfg


def dilations_of(cfg: dict) -> tuple:
    try:
        return tuple(int(v) for v in str(cfg["dilations"]).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad dilations '{cfg['dilations']}'") from None

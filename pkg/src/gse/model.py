"""Embedding extractor: dilated-conv encoder, context-dependent attention,
activity masking, attentive statistics pooling, and output projection.

The extractor runs in a baseline mode (80-dim input, no conditioning) or in
guided modes where binary target/non-target activity rows extend the input
to 82 dims and the target activity gates the pooling attention. Ablation
modes disable individual guide rows (fed as all-zero rows, so one checkpoint
serves every mode) or the attention masking step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import ActivityMatrix, AudioClip, FeatureMatrix, downsample_activity, logmel, union_nontarget
from .autograd import BatchNormState, Tape, Tensor, tensor
from .errors import DataError, EmptyTargetActivity, ShapeError, UsageError

CHECKPOINT_MAGIC = b"GSE1"


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = 82
    channels: int = 64
    attention_dim: int = 32
    embed_dim: int = 192
    kernel: int = 5
    dilations: tuple = (1, 2, 3)
    encoder: str = "conv"  # "identity" is a test hook: H = x padded/truncated to D rows
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.in_dim not in (80, 82):
            raise UsageError(f"in_dim must be 80 or 82, got {self.in_dim}")
        if self.channels < 1:
            raise UsageError("channels must be >= 1")
        if self.encoder not in ("conv", "identity"):
            raise UsageError(f"unknown encoder '{self.encoder}'")


@dataclass(frozen=True)
class GuideMode:
    use_target_channel: bool = False
    use_nontarget_channel: bool = False
    use_attention_mask: bool = False

    @property
    def is_baseline(self) -> bool:
        return not (self.use_target_channel or self.use_nontarget_channel
                    or self.use_attention_mask)


BASELINE = GuideMode(False, False, False)
MODES = {
    "B1": BASELINE,
    "B2": BASELINE,
    "P1": GuideMode(True, True, True),
    "P2": GuideMode(False, True, True),
    "P3": GuideMode(True, False, True),
    "P4": GuideMode(True, True, False),
}


def mode_for(policy: str) -> GuideMode:
    try:
        return MODES[policy]
    except KeyError:
        raise UsageError(f"unknown policy '{policy}' (expected one of {sorted(MODES)})") from None


class ModelParams:
    """All trainable tensors plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, tensors: dict, bn_states: list,
                 n_classes: int = 0):
        self.config = config
        self.tensors = tensors
        self.bn_states = bn_states
        self.n_classes = n_classes

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list:
        return [t for t in self.tensors.values() if t.requires_grad]

    def cast(self, dtype) -> "ModelParams":
        tensors = {
            k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)
            for k, t in self.tensors.items()
        }
        return ModelParams(self.config, tensors, [s.copy() for s in self.bn_states],
                           self.n_classes)


def init_params(config: ModelConfig, n_classes: int = 0, seed: int = 0) -> ModelParams:
    """He-style initialization, deterministic in the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tensors: dict[str, Tensor] = {}
    bn_states: list[BatchNormState] = []

    def param(name, shape, std):
        arr = rng.normal(0.0, std, size=shape) if std > 0 else np.zeros(shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)

    D, A, E, k = config.channels, config.attention_dim, config.embed_dim, config.kernel
    if config.encoder == "conv":
        prev = config.in_dim
        for i, _ in enumerate(config.dilations):
            param(f"enc{i}.w", (D, prev, k), np.sqrt(2.0 / (prev * k)))
            param(f"enc{i}.b", (D,), 0.0)
            tensors[f"enc{i}.gamma"] = Tensor(np.ones(D), requires_grad=True,
                                              name=f"enc{i}.gamma")
            tensors[f"enc{i}.beta"] = Tensor(np.zeros(D), requires_grad=True,
                                             name=f"enc{i}.beta")
            bn_states.append(BatchNormState(D, config.bn_momentum))
            prev = D
        param("proj.w", (D, D, 1), np.sqrt(1.0 / D))
        param("proj.b", (D,), 0.0)
    param("att.w1", (A, 3 * D), np.sqrt(2.0 / (3 * D)))
    param("att.b1", (A,), 0.0)
    param("att.w2", (D, A), np.sqrt(1.0 / A))
    param("att.b2", (D,), 0.0)
    param("out.w", (E, 2 * D), np.sqrt(1.0 / (2 * D)))
    param("out.b", (E,), 0.0)
    if n_classes > 0:
        param("cls.w", (n_classes, E), np.sqrt(1.0 / E))
    return ModelParams(config, tensors, bn_states, n_classes)


# ---------------------------------------------------------------------------
# forward pieces


def encode(tape: Tape, params: ModelParams, x: Tensor, training: bool = False) -> Tensor:
    """Frame embeddings H of shape (D, T) with T equal to the input length."""
    cfg = params.config
    if x.data.shape[0] != cfg.in_dim:
        raise ShapeError(f"encoder expects {cfg.in_dim} rows, got {x.data.shape[0]}")
    if cfg.encoder == "identity":
        D = cfg.channels
        sel = np.zeros((D, cfg.in_dim))
        for i in range(min(D, cfg.in_dim)):
            sel[i, i] = 1.0
        return tape.matmul(tensor(sel.astype(x.data.dtype)), x)
    h = x
    for i, dil in enumerate(cfg.dilations):
        h = tape.conv1d(params[f"enc{i}.w"], h, params[f"enc{i}.b"], dilation=dil)
        h = tape.relu(h)
        h = tape.batch_norm(h, params[f"enc{i}.gamma"], params[f"enc{i}.beta"],
                            params.bn_states[i], training)
    return tape.conv1d(params["proj.w"], h, params["proj.b"], dilation=1)


def context_stats(tape: Tape, H: Tensor) -> Tensor:
    """Per-frame context vectors e_t = h_t (+) mu (+) sigma, shape (3D, T)."""
    T = H.data.shape[1]
    mu = tape.mean_over_time(H)
    sigma = tape.std_over_time(H, mu)
    return tape.concat([H, tape.broadcast_col(mu, T), tape.broadcast_col(sigma, T)],
                       axis=0)


def attention_weights(tape: Tape, params: ModelParams, e_seq: Tensor) -> Tensor:
    """Channel-wise attention over frames, each of the D rows summing to 1."""
    hidden = tape.relu(tape.affine(params["att.w1"], e_seq, params["att.b1"]))
    logits = tape.affine(params["att.w2"], hidden, params["att.b2"])
    return tape.row_softmax(logits)


def mask_renormalize(tape: Tape, A: Tensor, z_frames: np.ndarray, T: int) -> Tensor:
    """Zero attention at target-inactive frames and renormalize each row."""
    zT = downsample_activity(np.asarray(z_frames), T)
    if int(zT.sum()) == 0:
        raise EmptyTargetActivity("target speaker has no active frame")
    return tape.masked_renormalize(A, zT)


def attentive_stats(tape: Tape, H: Tensor, A: Tensor):
    mu = tape.weighted_mean(H, A)
    sigma = tape.weighted_std(H, A, mu)
    return mu, sigma


def project(tape: Tape, params: ModelParams, mu: Tensor, sigma: Tensor) -> Tensor:
    return tape.affine(params["out.w"], tape.concat([mu, sigma], axis=0),
                       params["out.b"])


def pooled_embedding(tape: Tape, params: ModelParams, x: Tensor,
                     z_frames=None, use_mask: bool = False,
                     training: bool = False) -> Tensor:
    """Full path from input features to the embedding vector.

    When masking is on, encoder outputs at target-inactive frames are zeroed
    before the context statistics so that nothing from excluded frames can
    reach the pooled embedding, and the attention weights are zeroed and
    renormalized over the active frames.
    """
    H = encode(tape, params, x, training=training)
    T = H.data.shape[1]
    zT = None
    if use_mask:
        if z_frames is None:
            raise UsageError("masking requires the target activity")
        zT = downsample_activity(np.asarray(z_frames), T)
        if int(zT.sum()) == 0:
            raise EmptyTargetActivity("target speaker has no active frame")
        H = tape.mask_cols(H, zT)
    e_seq = context_stats(tape, H)
    A = attention_weights(tape, params, e_seq)
    if use_mask:
        A = tape.masked_renormalize(A, zT)
    mu, sigma = attentive_stats(tape, H, A)
    return project(tape, params, mu, sigma)


def build_input(feat: FeatureMatrix, acts: ActivityMatrix | None,
                target_index: int | None, mode: GuideMode,
                in_dim: int) -> np.ndarray:
    """Assemble the encoder input for a mode; disabled guide rows are zeros."""
    if in_dim == 80:
        if not mode.is_baseline:
            raise UsageError("guided modes need an 82-dim model")
        if feat.n_rows != 80:
            raise ShapeError(f"baseline input must have 80 rows, got {feat.n_rows}")
        return feat.data
    if feat.n_rows == 82:
        return feat.data
    if feat.n_rows != 80:
        raise ShapeError(f"expected 80 or 82 feature rows, got {feat.n_rows}")
    if acts is None or target_index is None:
        raise UsageError("guided input requires an activity matrix and target index")
    if acts.n_frames != feat.n_frames:
        raise ShapeError("activity length does not match the feature frame count")
    L = feat.n_frames
    zt = acts.data[target_index] if mode.use_target_channel else np.zeros(L, np.uint8)
    znt = (union_nontarget(acts, target_index)
           if mode.use_nontarget_channel else np.zeros(L, np.uint8))
    return np.vstack([feat.data, zt.astype(np.float64), znt.astype(np.float64)])


def extract(params: ModelParams, source, acts: ActivityMatrix | None = None,
            target_index: int | None = None,
            mode: GuideMode = BASELINE) -> np.ndarray:
    """Extract one embedding from a clip or feature matrix.

    Guided modes require the paired activity matrix and a target index;
    the baseline mode ignores both.
    """
    feat = logmel(source) if isinstance(source, AudioClip) else source
    if not isinstance(feat, FeatureMatrix):
        raise UsageError("source must be an AudioClip or FeatureMatrix")
    if acts is not None and target_index is not None:
        if not 0 <= target_index < acts.n_speakers:
            raise DataError(f"target index {target_index} out of range")
    x = build_input(feat, acts, target_index, mode, params.config.in_dim)
    z_frames = None
    if mode.use_attention_mask:
        if acts is None or target_index is None:
            raise UsageError("attention masking requires activities and a target index")
        z_frames = acts.data[target_index]
    tape = Tape()
    v = pooled_embedding(tape, params, tensor(x), z_frames,
                         use_mask=mode.use_attention_mask, training=False)
    return v.data.copy()


def attention_profile(params: ModelParams, feat: FeatureMatrix,
                      acts: ActivityMatrix, target_index: int,
                      mode: GuideMode) -> dict:
    """Per-frame mean attention mass plus the activity lanes, for reports.

    Returns arrays over the T frames: 'attention' (mean of the post-masking
    weights over channels), 'target' and 'nontarget' activity.
    """
    x = build_input(feat, acts, target_index, mode, params.config.in_dim)
    z_frames = acts.data[target_index]
    tape = Tape()
    H = encode(tape, params, tensor(x), training=False)
    T = H.data.shape[1]
    zT = downsample_activity(z_frames, T)
    if mode.use_attention_mask:
        if int(zT.sum()) == 0:
            raise EmptyTargetActivity("target speaker has no active frame")
        H = tape.mask_cols(H, zT)
    A = attention_weights(tape, params, context_stats(tape, H))
    if mode.use_attention_mask:
        A = tape.masked_renormalize(A, zT)
    mu, sigma = attentive_stats(tape, H, A)
    v = project(tape, params, mu, sigma)
    znt = union_nontarget(acts, target_index)
    return {
        "attention": A.data.mean(axis=0).copy(),
        "target": downsample_activity(z_frames, T),
        "nontarget": downsample_activity(znt, T),
        "embedding": v.data.copy(),
    }


# ---------------------------------------------------------------------------
# checkpoint format: magic "GSE1", then per-parameter records of
# (u32 name length, utf-8 name, u32 rank, u32 dims..., little-endian f32 data)


def _entries(params: ModelParams):
    yield "meta.in_dim", np.asarray([params.config.in_dim], dtype=np.float64)
    yield "meta.dilations", np.asarray(params.config.dilations, dtype=np.float64)
    for name, t in params.tensors.items():
        yield name, t.data
    for i, st in enumerate(params.bn_states):
        yield f"enc{i}.rmean", st.mean
        yield f"enc{i}.rvar", st.var


def save_checkpoint(params: ModelParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in _entries(params):
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    pos = 4
    arrays: dict[str, np.ndarray] = {}
    order: list[str] = []
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise DataError(f"{path}: truncated record header")
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float64)
        pos += 4 * count
        arrays[name] = arr.reshape(dims)
        order.append(name)
    for required in ("meta.in_dim", "att.w1", "att.w2", "out.w", "out.b"):
        if required not in arrays:
            raise DataError(f"{path}: missing checkpoint entry '{required}'")
    in_dim = int(arrays["meta.in_dim"][0])
    dilations = tuple(int(v) for v in arrays.get("meta.dilations", np.empty(0)))
    D, A = arrays["att.w2"].shape
    E = arrays["out.w"].shape[0]
    kernel = arrays["enc0.w"].shape[2] if "enc0.w" in arrays else 5
    config = ModelConfig(in_dim=in_dim, channels=D, attention_dim=A, embed_dim=E,
                         kernel=kernel, dilations=dilations,
                         encoder="conv" if dilations else "identity")
    tensors = {}
    bn_states = []
    for name in order:
        if name.startswith("meta.") or name.endswith(".rmean") or name.endswith(".rvar"):
            continue
        tensors[name] = Tensor(arrays[name], requires_grad=True, name=name)
    for i in range(len(dilations)):
        st = BatchNormState(D, config.bn_momentum)
        st.mean[...] = arrays[f"enc{i}.rmean"]
        st.var[...] = arrays[f"enc{i}.rvar"]
        bn_states.append(st)
    n_classes = arrays["cls.w"].shape[0] if "cls.w" in arrays else 0
    return ModelParams(config, tensors, bn_states, n_classes)

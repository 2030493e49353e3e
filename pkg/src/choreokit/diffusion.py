"""Music-conditioned denoising diffusion generator with a text control branch.

The denoiser predicts the clean clip directly: a grouped channel encoder maps
features to hidden frames, then a stack of transformer blocks applies temporal
self-attention, cross-attention over the music condition, and a feed-forward
network FiLM-modulated by the timestep embedding.

Text control clones the first K blocks into a trainable branch that
cross-attends over text tokens; each clone's output passes through a
zero-initialised linear projection and is added to the frozen block's output.
At initialisation every residual is exactly zero, so the branch is
function-preserving, and sampling with no text bypasses it entirely.

Sampling is ancestral DDPM with classifier-free guidance on the music
condition: the per-step estimate is null + scale * (conditioned - null),
collapsing to the plain conditioned estimate at scale 1.

Everything runs in float64 for exact gradient checking; the compact 46-wide
feature layout (7 channel groups of 6 plus 4 contacts) keeps desk-scale
training fast while the same code path accepts the canonical 319-wide layout.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import (
    BackboneDriftError,
    DimensionError,
    TrainingDivergedError,
    UserInputError,
)
from .motion import CONTACT_CHANNELS, JOINT_NAMES, NUM_JOINTS, JointSequence, MotionClip
from .seeding import stable_seed
from . import serial

_DTYPE = torch.float64

# Compact feature layout: 7 body-part groups of two joints each (6 channels),
# then 4 contact flags; 7 * 6 + 4 = 46.
TOY_JOINT_PAIRS = (
    ("pelvis", "spine3"),
    ("neck", "head"),
    ("left_shoulder", "left_wrist"),
    ("right_shoulder", "right_wrist"),
    ("left_hip", "left_ankle"),
    ("right_hip", "right_ankle"),
    ("left_foot", "right_foot"),
)
TOY_FEATURE_DIM = len(TOY_JOINT_PAIRS) * 6 + CONTACT_CHANNELS  # 46

_J = {name: i for i, name in enumerate(JOINT_NAMES)}
_TOY_JOINTS = tuple(j for pair in TOY_JOINT_PAIRS for j in pair)

# Contact flags gate the sliding of their ankle/foot channels.
TOY_CONTACT_MAP = {
    42: tuple(range(4 * 6 + 3, 4 * 6 + 6)),   # left ankle
    43: tuple(range(6 * 6 + 0, 6 * 6 + 3)),   # left foot
    44: tuple(range(5 * 6 + 3, 5 * 6 + 6)),   # right ankle
    45: tuple(range(6 * 6 + 3, 6 * 6 + 6)),   # right foot
}

_CONTACT_SOURCE_JOINTS = ("left_ankle", "left_foot", "right_ankle", "right_foot")
_CONTACT_TOLERANCE = 0.02


@dataclass(frozen=True)
class LossWeights:
    """Aggregation weights for the dance objective and the stream trade-off."""

    diff: float = 1.0
    joint: float = 0.5
    vel: float = 0.5
    contact: float = 0.2
    lambda_p: float = 0.5

    def __post_init__(self):
        weights = (self.diff, self.joint, self.vel, self.contact)
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise UserInputError("loss weights must be finite and non-negative")
        if not any(w > 0 for w in weights):
            raise UserInputError("at least one loss weight must be positive")
        if not 0.0 <= self.lambda_p <= 1.0:
            raise UserInputError("lambda_p must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing cumulative signal-keep schedule in (0, 1)."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 1:
            raise UserInputError("alpha_bar must be a 1-d array")
        if ab.min() <= 0.0 or ab.max() >= 1.0:
            raise UserInputError("alpha_bar values must lie strictly in (0, 1)")
        if not (np.diff(ab) < 0).all():
            raise UserInputError("alpha_bar must be strictly decreasing")
        if ab[0] < 0.99 or ab[-1] > 0.01:
            raise UserInputError("alpha_bar must start >= 0.99 and end <= 0.01")
        arr = np.ascontiguousarray(ab)
        arr.setflags(write=False)
        object.__setattr__(self, "alpha_bar", arr)

    @property
    def timesteps(self) -> int:
        return self.alpha_bar.size

    @classmethod
    def cosine(cls, timesteps: int, floor: float = 1e-4) -> "NoiseSchedule":
        """Cosine curve affinely rescaled into (floor, 1 - floor).

        The affine rescale (instead of clamping) keeps the schedule strictly
        monotone all the way to the last step.
        """
        if timesteps < 1:
            raise UserInputError("timesteps must be >= 1")
        s = 0.008
        u = np.arange(1, timesteps + 1) / timesteps
        f = np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2
        f0 = math.cos(s / (1.0 + s) * math.pi / 2.0) ** 2
        f_end = f[-1]
        rescaled = floor + (1.0 - 2.0 * floor) * (f - f_end) / (f0 - f_end)
        return cls(alpha_bar=rescaled)


@dataclass(frozen=True)
class GenConfig:
    frames: int = 120
    feature_dim: int = TOY_FEATURE_DIM
    music_dim: int = 32
    text_dim: int = 32
    hidden: int = 32
    heads: int = 4
    blocks: int = 4
    control_blocks: int | None = None  # default ceil(blocks / 2)
    ffn_mult: int = 2
    groups: int = 7
    timesteps: int = 50
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 4
    cond_dropout: float = 0.1
    seed: int = 0

    def resolved_control_blocks(self) -> int:
        k = self.control_blocks if self.control_blocks is not None \
            else math.ceil(self.blocks / 2)
        if not 1 <= k <= self.blocks:
            raise UserInputError("control_blocks must lie in [1, blocks]")
        return k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        return cls(**data)


def partition_channels(feature_dim: int, groups: int):
    """Contiguous channel groups covering every channel exactly once."""
    if groups < 1 or groups > feature_dim:
        raise UserInputError("groups must lie in [1, feature_dim]")
    return [tuple(chunk.tolist()) for chunk in np.array_split(np.arange(feature_dim), groups)]


# ---------------------------------------------------------------------------
# Forward diffusion

def diffuse_with_alpha_bar(x0, alpha_bar: float, eps):
    """sqrt(ab) * x0 + sqrt(1 - ab) * eps, for ab in [0, 1]."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != signal shape {x0.shape}")
    if not 0.0 <= alpha_bar <= 1.0:
        raise UserInputError("alpha_bar must lie in [0, 1]")
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Noised sample at step t (1-indexed) under the schedule."""
    if not 1 <= t <= schedule.timesteps:
        raise UserInputError(f"t must lie in [1, {schedule.timesteps}], got {t}")
    return diffuse_with_alpha_bar(x0, float(schedule.alpha_bar[t - 1]), eps)


# ---------------------------------------------------------------------------
# Model

class GroupEncoder(nn.Module):
    """Per-group channel subnetworks followed by a fusion layer."""

    def __init__(self, feature_dim: int, hidden: int, groups: int):
        super().__init__()
        self.partition = partition_channels(feature_dim, groups)
        self.group_nets = nn.ModuleList([
            nn.Sequential(nn.Linear(len(g), hidden, dtype=_DTYPE), nn.GELU(),
                          nn.Linear(hidden, hidden, dtype=_DTYPE))
            for g in self.partition
        ])
        self.fusion = nn.Linear(len(self.partition) * hidden, hidden, dtype=_DTYPE)

    def group_features(self, x: torch.Tensor):
        """Pre-fusion per-group features, each (B, frames, hidden)."""
        return [net(x[..., list(g)]) for net, g in zip(self.group_nets, self.partition)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fusion(torch.cat(self.group_features(x), dim=-1))


class TimestepEmbedding(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.net = nn.Sequential(nn.Linear(hidden, hidden, dtype=_DTYPE), nn.SiLU(),
                                 nn.Linear(hidden, hidden, dtype=_DTYPE))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.hidden // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=_DTYPE) / half)
        angles = t.to(_DTYPE).unsqueeze(-1) * freqs
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        if emb.shape[-1] < self.hidden:
            emb = torch.nn.functional.pad(emb, (0, self.hidden - emb.shape[-1]))
        return self.net(emb)


class FilmFeedForward(nn.Module):
    """Feed-forward network whose hidden activation is FiLM-modulated."""

    def __init__(self, hidden: int, ffn_mult: int):
        super().__init__()
        width = hidden * ffn_mult
        self.w_in = nn.Linear(hidden, width, dtype=_DTYPE)
        self.w_out = nn.Linear(width, hidden, dtype=_DTYPE)
        self.film = nn.Linear(hidden, 2 * width, dtype=_DTYPE)

    def forward(self, h: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(t_emb).unsqueeze(1).chunk(2, dim=-1)
        u = self.w_in(h) * (1.0 + scale) + shift
        return self.w_out(torch.nn.functional.gelu(u))


class DecoderBlock(nn.Module):
    """Temporal self-attention, condition cross-attention, FiLM feed-forward."""

    def __init__(self, hidden: int, heads: int, ffn_mult: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(hidden, dtype=_DTYPE)
        self.norm_cross = nn.LayerNorm(hidden, dtype=_DTYPE)
        self.norm_ffn = nn.LayerNorm(hidden, dtype=_DTYPE)
        self.self_attn = nn.MultiheadAttention(hidden, heads, batch_first=True, dtype=_DTYPE)
        self.cross_attn = nn.MultiheadAttention(hidden, heads, batch_first=True, dtype=_DTYPE)
        self.ffn = FilmFeedForward(hidden, ffn_mult)

    def forward(self, h, cond, t_emb, cond_padding_mask=None):
        q = self.norm_self(h)
        h = h + self.self_attn(q, q, q, need_weights=False)[0]
        h = h + self.cross_attn(self.norm_cross(h), cond, cond, need_weights=False,
                                key_padding_mask=cond_padding_mask)[0]
        return h + self.ffn(self.norm_ffn(h), t_emb)


class BackboneModel(nn.Module):
    """Frozen-able music-conditioned denoiser predicting the clean clip."""

    def __init__(self, config: GenConfig):
        super().__init__()
        self.config = config
        self.encoder = GroupEncoder(config.feature_dim, config.hidden, config.groups)
        self.time_embed = TimestepEmbedding(config.hidden)
        self.music_proj = nn.Linear(config.music_dim, config.hidden, dtype=_DTYPE)
        self.null_music = nn.Parameter(torch.zeros(1, config.music_dim, dtype=_DTYPE))
        self.blocks = nn.ModuleList([
            DecoderBlock(config.hidden, config.heads, config.ffn_mult)
            for _ in range(config.blocks)
        ])
        self.head = nn.Linear(config.hidden, config.feature_dim, dtype=_DTYPE)

    def music_condition(self, c_music, batch: int, frames: int) -> torch.Tensor:
        """Projected condition tokens; None selects the learned null sequence."""
        if c_music is None:
            tokens = self.null_music.expand(batch, frames, -1)
        else:
            tokens = c_music
        return self.music_proj(tokens)


class ControlBranch(nn.Module):
    """Trainable clones of the first K blocks, text-conditioned, zero-projected."""

    def __init__(self, backbone: BackboneModel, text_dim: int | None = None,
                 control_blocks: int | None = None):
        super().__init__()
        cfg = backbone.config
        k = control_blocks if control_blocks is not None else cfg.resolved_control_blocks()
        if not 1 <= k <= cfg.blocks:
            raise UserInputError("control branch depth must lie in [1, blocks]")
        self.control_blocks = k
        self.blocks = nn.ModuleList([copy.deepcopy(backbone.blocks[i]) for i in range(k)])
        self.text_proj = nn.Linear(text_dim or cfg.text_dim, cfg.hidden, dtype=_DTYPE)
        self.zero_projs = nn.ModuleList()
        for _ in range(k):
            z = nn.Linear(cfg.hidden, cfg.hidden, dtype=_DTYPE)
            nn.init.zeros_(z.weight)
            nn.init.zeros_(z.bias)
            self.zero_projs.append(z)


def _as_batched(x, dims: int):
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=_DTYPE) \
        if not torch.is_tensor(x) else x.to(_DTYPE)
    squeezed = t.ndim == dims - 1
    return (t.unsqueeze(0) if squeezed else t), squeezed


def _denoise(model: BackboneModel, branch, x_t, t, c_music, c_text,
             text_padding_mask=None, text_active=None):
    """Shared forward pass; the branch path is skipped entirely without text,
    so null-text output is identical to the plain backbone's."""
    h = model.encoder(x_t)
    batch, frames = x_t.shape[0], x_t.shape[1]
    cond = model.music_condition(c_music, batch, frames)
    t_emb = model.time_embed(t)
    use_branch = branch is not None and c_text is not None
    if use_branch:
        text_cond = branch.text_proj(c_text)
    for idx, block in enumerate(model.blocks):
        if use_branch and idx < branch.control_blocks:
            residual = branch.zero_projs[idx](
                branch.blocks[idx](h, text_cond, t_emb, text_padding_mask))
            if text_active is not None:
                residual = residual * text_active.view(-1, 1, 1)
            h = block(h, cond, t_emb) + residual
        else:
            h = block(h, cond, t_emb)
    return model.head(h)


def backbone_forward(model: BackboneModel, x_t, t, c_music) -> torch.Tensor:
    """Denoise one clip (frames, F) or a batch (B, frames, F)."""
    x, squeeze = _as_batched(x_t, 3)
    if x.shape[-1] != model.config.feature_dim:
        raise DimensionError(f"expected feature dim {model.config.feature_dim}, "
                             f"got {x.shape[-1]}")
    c = None
    if c_music is not None:
        c, _ = _as_batched(c_music, 3)
        if c.shape[1] != x.shape[1]:
            raise DimensionError("music condition frame count must match the clip")
    t_vec = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t_vec.numel() == 1 and x.shape[0] > 1:
        t_vec = t_vec.expand(x.shape[0])
    out = _denoise(model, None, x, t_vec, c, None)
    return out.squeeze(0) if squeeze else out


def controlled_forward(model: BackboneModel, branch: ControlBranch | None, x_t, t,
                       c_music, c_text) -> torch.Tensor:
    """Denoise with text residuals injected into the first K blocks.

    ``c_text`` holds raw text tokens (N, text_dim); None bypasses the branch
    and reproduces ``backbone_forward`` exactly.
    """
    x, squeeze = _as_batched(x_t, 3)
    c = None
    if c_music is not None:
        c, _ = _as_batched(c_music, 3)
    text = None
    if c_text is not None and branch is not None:
        text, _ = _as_batched(c_text, 3)
        if text.shape[0] == 1 and x.shape[0] > 1:
            text = text.expand(x.shape[0], -1, -1)
    t_vec = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t_vec.numel() == 1 and x.shape[0] > 1:
        t_vec = t_vec.expand(x.shape[0])
    out = _denoise(model, branch, x, t_vec, c, text)
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# Losses

def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()


def dance_loss(x0, x0_hat, weights: LossWeights, contact_channels: dict | None = None):
    """Weighted reconstruction objective with a per-term breakdown.

    Terms: full-feature MSE; MSE over non-contact channels; MSE of first and
    second temporal differences; and contact-gated sliding, the squared
    velocity residual of each contact flag's channels weighted by the
    reference flag. Every term is zero when the prediction equals the target.
    """
    x, _ = _as_batched(x0, 3)
    xh, _ = _as_batched(x0_hat, 3)
    if x.shape != xh.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(xh.shape)}")
    zero = torch.zeros((), dtype=_DTYPE)
    terms = {"diff": _mse(x, xh)}

    contact_channels = contact_channels or {}
    flags = sorted(contact_channels)
    keep = [c for c in range(x.shape[-1]) if c not in flags]
    terms["joint"] = _mse(x[..., keep], xh[..., keep]) if keep else zero

    if x.shape[1] >= 2:
        d_x, d_h = torch.diff(x, dim=1), torch.diff(xh, dim=1)
        vel = _mse(d_x, d_h)
        if x.shape[1] >= 3:
            vel = vel + _mse(torch.diff(d_x, dim=1), torch.diff(d_h, dim=1))
        terms["vel"] = vel
    else:
        terms["vel"] = zero

    if flags and x.shape[1] >= 2:
        total_sq = zero
        count = 0
        for flag in flags:
            governed = list(contact_channels[flag])
            mask = x[:, :-1, flag].unsqueeze(-1)
            slide = torch.diff(xh[..., governed], dim=1) - torch.diff(x[..., governed], dim=1)
            total_sq = total_sq + (mask * slide ** 2).sum()
            count += mask.shape[0] * mask.shape[1] * len(governed)
        terms["contact"] = total_sq / count
    else:
        terms["contact"] = zero

    total = (weights.diff * terms["diff"] + weights.joint * terms["joint"]
             + weights.vel * terms["vel"] + weights.contact * terms["contact"])
    return total, terms


# ---------------------------------------------------------------------------
# Feature codec for the compact layout

def toy_features_from_sequence(seq: JointSequence) -> np.ndarray:
    """Encode positions into the compact 46-channel layout.

    Channels hold the seven joint-pair groups' coordinates; the trailing four
    contact flags mark frames where each ankle/foot sits near its own minimum
    height.
    """
    coords = np.concatenate([seq.positions[:, seq.index(j), :] for j in _TOY_JOINTS], axis=1)
    contacts = np.zeros((seq.frames, CONTACT_CHANNELS))
    for c, joint in enumerate(_CONTACT_SOURCE_JOINTS):
        h = seq.positions[:, seq.index(joint), 1]
        contacts[:, c] = (h <= h.min() + _CONTACT_TOLERANCE).astype(float)
    return np.concatenate([coords, contacts], axis=1)


def fit_position_readout(features_list, positions_list, ridge: float = 1e-8) -> np.ndarray:
    """Least-squares affine map from compact features to 22-joint positions.

    Fit once on the synthetic corpus and then frozen; this is the bridge that
    lets generated feature clips be evaluated kinematically.
    """
    feats = np.concatenate([np.asarray(f, dtype=np.float64) for f in features_list])
    pos = np.concatenate([np.asarray(p, dtype=np.float64).reshape(len(p), -1)
                          for p in positions_list])
    if feats.shape[0] != pos.shape[0]:
        raise DimensionError("features and positions must cover the same frames")
    design = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
    gram = design.T @ design + ridge * np.eye(design.shape[1])
    return np.linalg.solve(gram, design.T @ pos)


def positions_from_features(readout: np.ndarray, features) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    design = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
    if design.shape[1] != readout.shape[0]:
        raise DimensionError("readout does not match the feature width")
    return (design @ readout).reshape(feats.shape[0], NUM_JOINTS, 3)


def sequence_from_clip(readout: np.ndarray, clip: MotionClip) -> JointSequence:
    return JointSequence(positions_from_features(readout, clip.features), fps=clip.fps)


# ---------------------------------------------------------------------------
# Training

def build_backbone(config: GenConfig) -> BackboneModel:
    torch.manual_seed(stable_seed(config.seed, "backbone-init"))
    return BackboneModel(config)


def build_control_branch(backbone: BackboneModel, config: GenConfig | None = None) -> ControlBranch:
    cfg = config or backbone.config
    torch.manual_seed(stable_seed(cfg.seed, "branch-init"))
    return ControlBranch(backbone, text_dim=cfg.text_dim,
                         control_blocks=cfg.resolved_control_blocks())


def _diffuse_batch(x0: torch.Tensor, t: np.ndarray, schedule: NoiseSchedule,
                   generator: torch.Generator):
    ab = torch.as_tensor(schedule.alpha_bar[t - 1], dtype=_DTYPE).view(-1, 1, 1)
    eps = torch.randn(x0.shape, generator=generator, dtype=_DTYPE)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def train_backbone(corpus, config: GenConfig, weights: LossWeights | None = None,
                   contact_channels: dict | None = None,
                   schedule: NoiseSchedule | None = None):
    """Train the music-conditioned denoiser from scratch.

    ``corpus`` holds (features, music_features) pairs. A fraction of samples
    per step swaps the music for the learned null sequence so that the null
    condition used by classifier-free guidance is trained too.
    """
    if not corpus:
        raise UserInputError("training corpus must be non-empty")
    weights = weights or LossWeights()
    schedule = schedule or NoiseSchedule.cosine(config.timesteps)
    if contact_channels is None and config.feature_dim == TOY_FEATURE_DIM:
        contact_channels = TOY_CONTACT_MAP
    model = build_backbone(config)
    feats = torch.as_tensor(np.stack([np.asarray(f, dtype=np.float64) for f, _ in corpus]),
                            dtype=_DTYPE)
    music = torch.as_tensor(np.stack([np.asarray(m, dtype=np.float64) for _, m in corpus]),
                            dtype=_DTYPE)
    rng = np.random.default_rng(stable_seed(config.seed, "backbone-batches"))
    noise_gen = torch.Generator().manual_seed(stable_seed(config.seed, "backbone-noise"))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    null_len = feats.shape[1]

    trace = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(corpus), size=config.batch_size)
        t = rng.integers(1, schedule.timesteps + 1, size=config.batch_size)
        x0 = feats[idx]
        x_t = _diffuse_batch(x0, t, schedule, noise_gen)
        cond = music[idx].clone()
        dropped = rng.random(config.batch_size) < config.cond_dropout
        if dropped.any():
            cond[np.flatnonzero(dropped)] = model.null_music.expand(null_len, -1)
        x0_hat = _denoise(model, None, x_t, torch.as_tensor(t, dtype=torch.long), cond, None)
        total, terms = dance_loss(x0, x0_hat, weights, contact_channels)
        if not torch.isfinite(total):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        total.backward()
        opt.step()
        trace.append({"step": step, "total": total.item(),
                      **{k: v.item() if torch.is_tensor(v) else float(v)
                         for k, v in terms.items()}})
    return model, trace


def _text_batch(triplets, text_cache, text_dim):
    """Stack variable-length text tokens with padding mask and activity flags."""
    toks = []
    for trip in triplets:
        if trip.text_cond is None:
            toks.append(None)
        else:
            if trip.text_cond not in text_cache:
                from .corpus import text_condition_tokens
                text_cache[trip.text_cond] = text_condition_tokens(trip.text_cond, text_dim)
            toks.append(text_cache[trip.text_cond])
    max_len = max((t.shape[0] for t in toks if t is not None), default=1)
    batch = np.zeros((len(toks), max_len, text_dim))
    mask = np.ones((len(toks), max_len), dtype=bool)
    active = np.zeros(len(toks))
    for i, t in enumerate(toks):
        if t is None:
            mask[i, 0] = False  # dummy token; residual zeroed via `active`
        else:
            batch[i, : t.shape[0]] = t
            mask[i, : t.shape[0]] = False
            active[i] = 1.0
    return (torch.as_tensor(batch, dtype=_DTYPE), torch.as_tensor(mask),
            torch.as_tensor(active, dtype=_DTYPE))


def _stream_batch(model, branch, triplets, t, schedule, noise_gen, weights,
                  contact_channels, text_cache):
    x0 = torch.as_tensor(np.stack([np.asarray(tr.motion_features, dtype=np.float64)
                                   for tr in triplets]), dtype=_DTYPE)
    frames = x0.shape[1]
    cond_rows = []
    for tr in triplets:
        if tr.music_cond is None:
            cond_rows.append(model.null_music.expand(frames, -1))
        else:
            cond_rows.append(torch.as_tensor(np.asarray(tr.music_cond, dtype=np.float64),
                                             dtype=_DTYPE))
    cond = torch.stack(cond_rows)
    text, mask, active = _text_batch(triplets, text_cache, branch.text_proj.in_features)
    x_t = _diffuse_batch(x0, t, schedule, noise_gen)
    x0_hat = _denoise(model, branch, x_t, torch.as_tensor(t, dtype=torch.long), cond, text,
                      text_padding_mask=mask, text_active=active)
    total, _ = dance_loss(x0, x0_hat, weights, contact_channels)
    return total


def finetune_control(backbone: BackboneModel, branch: ControlBranch, corpus_text,
                     corpus_dance, weights: LossWeights, config: GenConfig,
                     contact_channels: dict | None = None,
                     schedule: NoiseSchedule | None = None):
    """Fine-tune the control branch on the two pseudo-triplet streams.

    Each step draws one minibatch from the text-motion stream and one from the
    music-dance stream and descends (1 - lambda_p) * text + lambda_p * dance;
    only branch parameters update. A digest over the backbone guards against
    drift and any change is a hard failure.
    """
    if not corpus_text or not corpus_dance:
        raise UserInputError("both fine-tuning corpora must be non-empty")
    schedule = schedule or NoiseSchedule.cosine(config.timesteps)
    if contact_channels is None and config.feature_dim == TOY_FEATURE_DIM:
        contact_channels = TOY_CONTACT_MAP
    for p in backbone.parameters():
        p.requires_grad_(False)
    digest_before = serial.model_digest(backbone)
    rng = np.random.default_rng(stable_seed(config.seed, "finetune-batches"))
    noise_gen = torch.Generator().manual_seed(stable_seed(config.seed, "finetune-noise"))
    opt = torch.optim.Adam(branch.parameters(), lr=config.lr)
    text_cache: dict = {}
    lam = weights.lambda_p

    trace = []
    for step in range(1, config.steps + 1):
        batch_t = [corpus_text[i] for i in rng.integers(0, len(corpus_text),
                                                        size=config.batch_size)]
        batch_d = [corpus_dance[i] for i in rng.integers(0, len(corpus_dance),
                                                         size=config.batch_size)]
        t_t = rng.integers(1, schedule.timesteps + 1, size=config.batch_size)
        t_d = rng.integers(1, schedule.timesteps + 1, size=config.batch_size)
        loss_text = _stream_batch(backbone, branch, batch_t, t_t, schedule, noise_gen,
                                  weights, contact_channels, text_cache)
        loss_dance = _stream_batch(backbone, branch, batch_d, t_d, schedule, noise_gen,
                                   weights, contact_channels, text_cache)
        combined = (1.0 - lam) * loss_text + lam * loss_dance
        if not torch.isfinite(combined):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        combined.backward()
        opt.step()
        trace.append({"step": step, "loss_text": loss_text.item(),
                      "loss_dance": loss_dance.item(), "combined": combined.item()})
    if serial.model_digest(backbone) != digest_before:
        raise BackboneDriftError("backbone parameters changed during fine-tuning")
    return branch, trace


# ---------------------------------------------------------------------------
# Sampling

def cfg_sample(backbone: BackboneModel, branch: ControlBranch | None, c_music, c_text,
               music_scale: float = 1.0, schedule: NoiseSchedule | None = None,
               seed: int = 0, fps: int = 30) -> MotionClip:
    """Ancestral sampling with classifier-free guidance on the music condition.

    Per step the estimate is null + scale * (conditioned - null); at scale 1
    (or with no music, where both sides coincide) only the conditioned pass
    runs, so the identity holds exactly. Text residuals are active whenever
    text tokens are given; with ``c_text=None`` the branch is bypassed and the
    trajectory matches an untouched backbone bit for bit.
    """
    if music_scale < 0:
        raise UserInputError("music_scale must be >= 0")
    cfg = backbone.config
    schedule = schedule or NoiseSchedule.cosine(cfg.timesteps)
    gen = torch.Generator().manual_seed(stable_seed(seed, "sample"))
    frames = cfg.frames
    music = None
    if c_music is not None:
        music, _ = _as_batched(c_music, 3)
        frames = music.shape[1]
    text = None
    if c_text is not None and branch is not None:
        text, _ = _as_batched(c_text, 3)

    ab = schedule.alpha_bar
    x = torch.randn(1, frames, cfg.feature_dim, generator=gen, dtype=_DTYPE)
    single_pass = music is None or music_scale == 1.0
    with torch.no_grad():
        for t in range(schedule.timesteps, 0, -1):
            t_vec = torch.tensor([t], dtype=torch.long)
            pred_cond = _denoise(backbone, branch, x, t_vec, music, text)
            if single_pass:
                x0_hat = pred_cond
            else:
                pred_null = _denoise(backbone, branch, x, t_vec, None, text)
                x0_hat = pred_null + music_scale * (pred_cond - pred_null)
            if not torch.isfinite(x0_hat).all():
                raise TrainingDivergedError(t, f"non-finite sample state at step {t}")
            if t == 1:
                x = x0_hat
                break
            a_t, a_prev = float(ab[t - 1]), float(ab[t - 2])
            beta_t = 1.0 - a_t / a_prev
            coef_x0 = math.sqrt(a_prev) * beta_t / (1.0 - a_t)
            coef_xt = math.sqrt(a_t / a_prev) * (1.0 - a_prev) / (1.0 - a_t)
            var = beta_t * (1.0 - a_prev) / (1.0 - a_t)
            noise = torch.randn(x.shape, generator=gen, dtype=_DTYPE)
            x = coef_x0 * x0_hat + coef_xt * x + math.sqrt(var) * noise

    features = x.squeeze(0).numpy()
    features[:, -CONTACT_CHANNELS:] = np.clip(features[:, -CONTACT_CHANNELS:], 0.0, 1.0)
    return MotionClip(features=features, fps=fps)


# ---------------------------------------------------------------------------
# Checkpoints

def save_backbone(path, model: BackboneModel):
    tensors = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    serial.save_tensors(path, tensors, model.config.to_dict(),
                        extra={"model_digest": serial.model_digest(model)})


def load_backbone(path) -> BackboneModel:
    tensors, config, _ = serial.load_tensors(path)
    model = BackboneModel(GenConfig.from_dict(config))
    model.load_state_dict({name: torch.as_tensor(arr, dtype=_DTYPE)
                           for name, arr in tensors.items()})
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_branch(path, branch: ControlBranch, config: GenConfig):
    tensors = {name: p.detach().numpy() for name, p in branch.state_dict().items()}
    serial.save_tensors(path, tensors, config.to_dict(),
                        extra={"control_blocks": branch.control_blocks})


def load_branch(path, backbone: BackboneModel) -> ControlBranch:
    tensors, config, extra = serial.load_tensors(path)
    cfg = GenConfig.from_dict(config)
    branch = ControlBranch(backbone, text_dim=cfg.text_dim,
                           control_blocks=int(extra["control_blocks"]))
    branch.load_state_dict({name: torch.as_tensor(arr, dtype=_DTYPE)
                            for name, arr in tensors.items()})
    for p in branch.parameters():
        p.requires_grad_(False)
    return branch


def save_readout(path, readout: np.ndarray):
    serial.save_tensors(path, {"readout": readout}, {"kind": "position_readout"})


def load_readout(path) -> np.ndarray:
    tensors, _, _ = serial.load_tensors(path)
    return tensors["readout"]

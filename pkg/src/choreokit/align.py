"""Motion-centred contrastive alignment of music, text, and motion.

Motion is always the key side: music and text queries are pulled toward the
paired motion embedding against a FIFO queue of stale motion keys, one queue
per stream. Keys come from an EMA copy of the motion encoder (the projector
stays live), and a mean/covariance bridge penalty keeps the two motion
domains co-located so the music and text streams share one space.

Everything runs in float64 with plain fixed-step gradient descent so that
gradients can be checked against central finite differences and training is
bit-reproducible given a seed.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    CovarianceUndefinedError,
    DegenerateEmbeddingError,
    TrainingDivergedError,
    UserInputError,
)
from .seeding import stable_seed
from . import serial

_DTYPE = torch.float64
_EPS = 1e-12


@dataclass(frozen=True)
class AlignConfig:
    token_dim: int = 32
    embed_dim: int = 16
    # With eight motion classes, a deeper queue floods the denominator with
    # same-class keys and puts an irreducible floor under the loss (measured:
    # at 256 even an oracle query cannot reach half the full-queue initial
    # loss); 64 keeps ~8 same-class negatives and leaves headroom.
    queue_size: int = 64
    ema_momentum: float = 0.99
    bridge_weight: float = 1.0
    logit_scale_init: float = math.log(10.0)
    # The logit scales take a smaller fixed step and stay clamped to
    # [0, log(100)]; their raw gradient carries a factor of exp(alpha) and
    # destabilises plain gradient descent otherwise.
    logit_scale_max: float = math.log(100.0)
    logit_scale_lr_mult: float = 0.1
    # The motion path takes a much smaller fixed step: its only gradient is
    # the bridge penalty, whose minibatch noise would otherwise keep the keys
    # wandering while the queries chase them.
    encoder_lr_mult: float = 0.01
    lr: float = 0.02
    steps: int = 500
    batch_size: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AlignConfig":
        return cls(**data)


class MomentumQueue:
    """Fixed-capacity FIFO ring of unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise UserInputError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._storage = torch.zeros(capacity, dim, dtype=_DTYPE)
        self._count = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._count

    def push(self, keys):
        """Append keys FIFO, evicting the oldest beyond capacity.

        Non-unit keys are normalised with a warning.
        """
        keys = torch.as_tensor(np.asarray(keys, dtype=np.float64), dtype=_DTYPE)
        if keys.ndim == 1:
            keys = keys.unsqueeze(0)
        if keys.numel() == 0:
            return self
        norms = keys.norm(dim=1, keepdim=True)
        if (norms < _EPS).any():
            raise DegenerateEmbeddingError("cannot enqueue a zero-norm key")
        if (norms - 1.0).abs().max() > 1e-6:
            warnings.warn("non-unit key pushed to queue; normalising", stacklevel=2)
            keys = keys / norms
        for row in keys:
            self._storage[self._cursor] = row
            self._cursor = (self._cursor + 1) % self.capacity
            self._count = min(self._count + 1, self.capacity)
        return self

    def negatives(self) -> torch.Tensor:
        """Current contents, order unspecified; shape (occupancy, dim)."""
        return self._storage[: self._count].clone() if self._count < self.capacity \
            else self._storage.clone()

    def entries(self) -> torch.Tensor:
        """Current contents in insertion order, oldest first."""
        if self._count < self.capacity:
            return self._storage[: self._count].clone()
        return torch.cat([self._storage[self._cursor:], self._storage[: self._cursor]]).clone()


class MotionTokenEncoder(nn.Module):
    """Small two-layer per-token nonlinearity applied before pooling.

    Weights start amplified so the tanh operates in its curved regime; a
    near-linear encoder would map scaled variants of one motion to almost
    identical directions and flatten the within-class geometry.
    """

    INIT_GAIN = 3.0

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim, dtype=_DTYPE)
        self.fc2 = nn.Linear(dim, dim, dtype=_DTYPE)
        with torch.no_grad():
            self.fc1.weight.mul_(self.INIT_GAIN)
            self.fc2.weight.mul_(self.INIT_GAIN)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(tokens)))


class AlignmentSpace:
    """Shared embedding space: encoders, projectors, logit scales, queues.

    The key-side motion path (token nonlinearity plus motion projector) has a
    full EMA copy: motion embeddings are the stable anchor that music and text
    queries are pulled toward, and the queue stays consistent with the keys.
    """

    def __init__(self, config: AlignConfig):
        self.config = config
        d_in, d = config.token_dim, config.embed_dim
        self.motion_encoder = MotionTokenEncoder(d_in)
        self.proj_motion = nn.Linear(d_in, d, dtype=_DTYPE)
        self.motion_encoder_ema = MotionTokenEncoder(d_in)
        self.proj_motion_ema = nn.Linear(d_in, d, dtype=_DTYPE)
        self.motion_encoder_ema.load_state_dict(self.motion_encoder.state_dict())
        self.proj_motion_ema.load_state_dict(self.proj_motion.state_dict())
        for module in (self.motion_encoder_ema, self.proj_motion_ema):
            for p in module.parameters():
                p.requires_grad_(False)
        self.proj_music = nn.Linear(d_in, d, dtype=_DTYPE)
        self.proj_text = nn.Linear(d_in, d, dtype=_DTYPE)
        self.alpha_music = nn.Parameter(torch.tensor(config.logit_scale_init, dtype=_DTYPE))
        self.alpha_text = nn.Parameter(torch.tensor(config.logit_scale_init, dtype=_DTYPE))
        self.queue_dance = MomentumQueue(config.queue_size, d)
        self.queue_motion = MomentumQueue(config.queue_size, d)

    def trainable_parameters(self):
        for module in (self.motion_encoder, self.proj_motion, self.proj_music, self.proj_text):
            yield from module.parameters()
        yield self.alpha_music
        yield self.alpha_text

    def named_tensors(self) -> dict:
        out = {}
        for prefix, module in (("motion_encoder", self.motion_encoder),
                               ("motion_encoder_ema", self.motion_encoder_ema),
                               ("proj_motion", self.proj_motion),
                               ("proj_motion_ema", self.proj_motion_ema),
                               ("proj_music", self.proj_music),
                               ("proj_text", self.proj_text)):
            for name, param in module.state_dict().items():
                out[f"{prefix}.{name}"] = param.detach().numpy()
        out["alpha_music"] = self.alpha_music.detach().numpy()
        out["alpha_text"] = self.alpha_text.detach().numpy()
        return out

    def freeze(self):
        for p in self.trainable_parameters():
            p.requires_grad_(False)
        return self

    def _embed_batch(self, kind: str, tokens: torch.Tensor, use_ema: bool) -> torch.Tensor:
        """norm(P(pool(encoder(tokens)))) for a (B, T, D_in) batch."""
        if kind == "motion":
            encoder = self.motion_encoder_ema if use_ema else self.motion_encoder
            proj = self.proj_motion_ema if use_ema else self.proj_motion
            raw = proj(encoder(tokens).mean(dim=1))
        elif kind == "music":
            raw = self.proj_music(tokens.mean(dim=1))
        elif kind == "text":
            raw = self.proj_text(tokens.mean(dim=1))
        else:
            raise UserInputError(f"unknown embedding kind {kind!r}")
        norms = raw.norm(dim=1, keepdim=True)
        if (norms < _EPS).any():
            raise DegenerateEmbeddingError(f"{kind} embedding collapsed to zero norm")
        return raw / norms

    def embed(self, kind: str, tokens, use_ema: bool = False) -> np.ndarray:
        """Embed one token matrix (T, D_in) to a unit vector (D,).

        The key-side motion embedding (``use_ema=True``) routes through the
        EMA encoder copy; retrieval and bank building use the live path.
        """
        arr = np.asarray(tokens, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise UserInputError("tokens must be (T, token_dim) with T >= 1")
        with torch.no_grad():
            out = self._embed_batch(kind, torch.as_tensor(arr, dtype=_DTYPE).unsqueeze(0),
                                    use_ema)
        return out.squeeze(0).numpy()


def _infonce_terms(q, k, negatives, alpha):
    scale = torch.exp(alpha)
    pos = scale * (q * k).sum(dim=-1, keepdim=True)
    if negatives.shape[0] == 0:
        return (-pos + torch.logsumexp(pos, dim=-1, keepdim=True)).squeeze(-1)
    neg = scale * (q @ negatives.T)
    logits = torch.cat([pos, neg], dim=-1)
    return (-pos.squeeze(-1)) + torch.logsumexp(logits, dim=-1)


def infonce_loss(q, k, queue, alpha):
    """Queue-based InfoNCE value and exact gradients.

    loss = -s q.k + log(exp(s q.k) + sum_j exp(s q.u_j)), s = exp(alpha).
    Returns ``(loss, {"q": dq, "k": dk, "alpha": dalpha})``. An empty queue
    degenerates to the uninformative two-term form (loss 0) and warns.
    """
    q_t = torch.as_tensor(np.asarray(q, dtype=np.float64), dtype=_DTYPE).requires_grad_(True)
    k_t = torch.as_tensor(np.asarray(k, dtype=np.float64), dtype=_DTYPE).requires_grad_(True)
    a_t = torch.as_tensor(float(alpha), dtype=_DTYPE).requires_grad_(True)
    negs = np.asarray(queue, dtype=np.float64)
    negs = negs.reshape(0, q_t.shape[-1]) if negs.size == 0 else np.atleast_2d(negs)
    if negs.shape[0] == 0:
        warnings.warn("InfoNCE with an empty queue is uninformative (loss 0)", stacklevel=2)
    loss = _infonce_terms(q_t.unsqueeze(0), k_t.unsqueeze(0),
                          torch.as_tensor(negs, dtype=_DTYPE), a_t).squeeze(0)
    dq, dk, da = torch.autograd.grad(loss, [q_t, k_t, a_t])
    return loss.item(), {"q": dq.numpy(), "k": dk.numpy(), "alpha": da.item()}


def _bridge_terms(batch_a: torch.Tensor, batch_b: torch.Tensor) -> torch.Tensor:
    mu_a, mu_b = batch_a.mean(dim=0), batch_b.mean(dim=0)
    ca = batch_a - mu_a
    cb = batch_b - mu_b
    cov_a = ca.T @ ca / batch_a.shape[0]
    cov_b = cb.T @ cb / batch_b.shape[0]
    return ((mu_a - mu_b) ** 2).sum() + ((cov_a - cov_b) ** 2).sum()


def bridge_loss(batch_a, batch_b):
    """Mean plus population-covariance alignment penalty with exact gradients.

    Returns ``(loss, grad_a, grad_b)``. Batches need at least two rows each
    for the covariance to be defined.
    """
    a = np.atleast_2d(np.asarray(batch_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(batch_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise CovarianceUndefinedError("bridge loss needs batches of size >= 2")
    a_t = torch.as_tensor(a, dtype=_DTYPE).requires_grad_(True)
    b_t = torch.as_tensor(b, dtype=_DTYPE).requires_grad_(True)
    loss = _bridge_terms(a_t, b_t)
    da, db = torch.autograd.grad(loss, [a_t, b_t])
    return loss.item(), da.numpy(), db.numpy()


def queue_push(space: AlignmentSpace, keys, stream: str = "dance") -> AlignmentSpace:
    """Push motion keys into one stream's queue (``dance`` or ``motion``)."""
    if stream == "dance":
        space.queue_dance.push(keys)
    elif stream == "motion":
        space.queue_motion.push(keys)
    else:
        raise UserInputError(f"unknown queue stream {stream!r}")
    return space


def ema_update(space: AlignmentSpace, momentum: float | None = None) -> AlignmentSpace:
    """Elementwise EMA <- m * EMA + (1 - m) * live over the key-side motion path."""
    m = space.config.ema_momentum if momentum is None else float(momentum)
    if not 0.0 <= m <= 1.0:
        raise UserInputError("EMA momentum must lie in [0, 1]")
    pairs = ((space.motion_encoder_ema, space.motion_encoder),
             (space.proj_motion_ema, space.proj_motion))
    with torch.no_grad():
        for ema_module, live_module in pairs:
            live = dict(live_module.named_parameters())
            for name, ema_p in ema_module.named_parameters():
                ema_p.mul_(m).add_((1.0 - m) * live[name])
    return space


def _stack_pairs(pairs):
    conds = torch.as_tensor(np.stack([np.asarray(c, dtype=np.float64).mean(axis=0)
                                      for c, _ in pairs]), dtype=_DTYPE)
    motions = torch.as_tensor(np.stack([np.asarray(m, dtype=np.float64) for _, m in pairs]),
                              dtype=_DTYPE)
    return conds, motions


def train_alignment(corpus_dance, corpus_motion, config: AlignConfig):
    """Optimise the two InfoNCE streams plus the bridge penalty.

    ``corpus_dance`` holds (music_tokens, motion_tokens) pairs and
    ``corpus_motion`` (text_tokens, motion_tokens) pairs. Each step draws a
    minibatch from both corpora, takes one fixed-step gradient-descent step on
    stream_music + stream_text + bridge_weight * bridge, EMA-updates the key
    encoder, and enqueues the step's keys. Returns the trained space and the
    per-step loss trace.
    """
    if not corpus_dance or not corpus_motion:
        raise UserInputError("both corpora must be non-empty")
    torch.manual_seed(stable_seed(config.seed, "align-init"))
    space = AlignmentSpace(config)
    # Condition pooling commutes with the linear projectors, so conditions are
    # pre-pooled; motion tokens keep their token axis for the nonlinearity.
    cond_da, mot_da = _stack_pairs(corpus_dance)
    cond_mo, mot_mo = _stack_pairs(corpus_motion)

    rng = np.random.default_rng(stable_seed(config.seed, "align-batches"))
    scales = [space.alpha_music, space.alpha_text]
    encoder_params = (list(space.motion_encoder.parameters())
                      + list(space.proj_motion.parameters()))
    query_params = (list(space.proj_music.parameters())
                    + list(space.proj_text.parameters()))
    opt = torch.optim.SGD([
        {"params": query_params, "lr": config.lr},
        {"params": encoder_params, "lr": config.lr * config.encoder_lr_mult},
        {"params": scales, "lr": config.lr * config.logit_scale_lr_mult},
    ])

    def keys(motions_batch):
        return space._embed_batch("motion", motions_batch, use_ema=True)

    def queries(kind, conds_batch):
        raw = (space.proj_music if kind == "music" else space.proj_text)(conds_batch)
        norms = raw.norm(dim=1, keepdim=True)
        if (norms < _EPS).any():
            raise DegenerateEmbeddingError(f"{kind} embedding collapsed to zero norm")
        return raw / norms

    # Fill the queues before step 1: the loss baseline is only comparable
    # across steps once the denominator has its full complement of negatives.
    with torch.no_grad():
        fill_da = np.arange(config.queue_size) % len(corpus_dance)
        fill_mo = np.arange(config.queue_size) % len(corpus_motion)
        space.queue_dance.push(keys(mot_da[fill_da]))
        space.queue_motion.push(keys(mot_mo[fill_mo]))

    trace = []
    for step in range(1, config.steps + 1):
        ia = rng.integers(0, len(corpus_dance), size=config.batch_size)
        ib = rng.integers(0, len(corpus_motion), size=config.batch_size)
        k_da = keys(mot_da[ia])
        k_mo = keys(mot_mo[ib])
        loss_m2d = _infonce_terms(queries("music", cond_da[ia]), k_da,
                                  space.queue_dance.negatives(), space.alpha_music).mean()
        loss_t2m = _infonce_terms(queries("text", cond_mo[ib]), k_mo,
                                  space.queue_motion.negatives(), space.alpha_text).mean()
        live_da = space._embed_batch("motion", mot_da[ia], use_ema=False)
        live_mo = space._embed_batch("motion", mot_mo[ib], use_ema=False)
        loss_bridge = _bridge_terms(live_da, live_mo)
        total = loss_m2d + loss_t2m + config.bridge_weight * loss_bridge
        if not torch.isfinite(total):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            for scale in scales:
                scale.clamp_(0.0, config.logit_scale_max)
        ema_update(space)
        space.queue_dance.push(k_da.detach())
        space.queue_motion.push(k_mo.detach())
        trace.append({
            "step": step,
            "loss_music": loss_m2d.item(),
            "loss_text": loss_t2m.item(),
            "loss_bridge": loss_bridge.item(),
            "total": total.item(),
        })
    return space, trace


def class_retrieval_accuracy(space: AlignmentSpace, pairs, labels, kind: str = "music") -> float:
    """Top-1 label agreement of nearest condition embedding per motion."""
    cond_embs = [space.embed(kind, cond) for cond, _ in pairs]
    motion_embs = [space.embed("motion", motion) for _, motion in pairs]
    cond_mat = np.stack(cond_embs)
    hits = 0
    for emb, label in zip(motion_embs, labels):
        nearest = int(np.argmax(cond_mat @ emb))
        hits += labels[nearest] == label
    return hits / len(labels)


def write_trace_csv(path, trace, columns=None):
    if not trace:
        raise UserInputError("empty trace")
    columns = columns or list(trace[0].keys())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(trace)


def save_alignment(space: AlignmentSpace, path):
    serial.save_tensors(path, space.named_tensors(), space.config.to_dict())


def load_alignment(path) -> AlignmentSpace:
    tensors, config, _ = serial.load_tensors(path)
    space = AlignmentSpace(AlignConfig.from_dict(config))
    modules = {
        "motion_encoder": space.motion_encoder,
        "motion_encoder_ema": space.motion_encoder_ema,
        "proj_motion": space.proj_motion,
        "proj_motion_ema": space.proj_motion_ema,
        "proj_music": space.proj_music,
        "proj_text": space.proj_text,
    }
    with torch.no_grad():
        for prefix, module in modules.items():
            state = {name[len(prefix) + 1:]: torch.as_tensor(arr, dtype=_DTYPE)
                     for name, arr in tensors.items() if name.startswith(prefix + ".")}
            module.load_state_dict(state)
        space.alpha_music.copy_(torch.as_tensor(tensors["alpha_music"], dtype=_DTYPE))
        space.alpha_text.copy_(torch.as_tensor(tensors["alpha_text"], dtype=_DTYPE))
    return space.freeze()

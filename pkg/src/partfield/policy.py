"""Conditional diffusion policy over action chunks.

The denoiser is a small 1D temporal conv encoder-decoder. Each stage is
FiLM-modulated by the global condition plus a diffusion-step embedding and
followed by a cross-attention read of the refined part set.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .condition import (POSE_DIM, PartCrossAttention, PartRefiner, RobotEncoder, SetEncoder,
                        aggregate_parts, build_global_condition, canonical_order,
                        cross_attend, encode_parts, refine_parts, zero_module)
from .errors import InvalidArgument
from .semlift import FusionWeights


@dataclass(frozen=True)
class PolicyConfig:
    feat_dim: int = 16
    joint_dim: int = 4
    horizon: int = 8
    action_dim: int = 4
    k: int = 8
    d_g: int = 64
    d_r: int = 16
    d_e: int = 32
    encoder_hidden: tuple[int, ...] = (64, 64)
    robot_hidden: tuple[int, ...] = (32,)
    attn_dim: int = 32
    heads: int = 1
    channels: tuple[int, int] = (64, 128)
    step_dim: int = 32
    groups: int = 8
    num_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    clip_sample: bool = True
    action_bound: float = 1.0
    zero_init: bool = True
    prediction: str = "epsilon"
    refine_residual: bool = True
    refine_prenorm: bool = True
    object_frame_parts: bool = False
    dense_semantic: bool = True
    global_pose_condition: bool = True
    part_refine: bool = True

    @property
    def part_dim(self) -> int:
        return self.d_e + POSE_DIM

    @property
    def global_dims(self) -> tuple[int, int, int]:
        return (self.d_g, self.d_r, self.part_dim)

    @property
    def global_dim(self) -> int:
        return sum(self.global_dims)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise InvalidArgument(f"unknown policy config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- schedule --------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule. Step ``t`` runs 1..T; arrays are indexed t-1."""
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise InvalidArgument("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))

    @property
    def num_steps(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        """``t = 0`` gives 1 (clean sample)."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_coefs(self, t: int) -> tuple[float, float, float]:
        """(coef on x0, coef on x_t, variance) of q(x_{t-1} | x_t, x0)."""
        ab, ab_prev = self.alpha_bar(t), self.alpha_bar(t - 1)
        beta = float(self.betas[t - 1])
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = math.sqrt(float(self.alphas[t - 1])) * (1.0 - ab_prev) / (1.0 - ab)
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        return c0, ct, var


def make_schedule(num_steps: int = 100, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if num_steps < 1:
        raise InvalidArgument("need at least one diffusion step")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidArgument("require 0 < beta_start <= beta_end < 1")
    if num_steps == 1:
        return NoiseSchedule(np.array([beta_start]))
    return NoiseSchedule(np.linspace(beta_start, beta_end, num_steps))


def _check_step(t, sched: NoiseSchedule):
    tt = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(tt < 1) or np.any(tt > sched.num_steps):
        raise InvalidArgument(f"diffusion step must be in [1, {sched.num_steps}]")


def add_noise(a0, t, eps, sched: NoiseSchedule):
    """``sqrt(ab_t) a0 + sqrt(1 - ab_t) eps``; ``t`` may be an int or a per-sample tensor."""
    _check_step(t, sched)
    if isinstance(a0, torch.Tensor):
        ab = torch.as_tensor(sched.alpha_bars, dtype=a0.dtype, device=a0.device)[
            torch.as_tensor(t, device=a0.device) - 1]
        ab = ab.reshape(ab.shape + (1,) * (a0.dim() - ab.dim()))
        return ab.sqrt() * a0 + (1 - ab).sqrt() * eps
    ab = sched.alpha_bars[np.asarray(t) - 1]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(a0) - np.ndim(ab)))
    return np.sqrt(ab) * a0 + np.sqrt(1 - ab) * eps


# -- denoiser ----------------------------------------------------------------

@dataclass
class ConditionBundle:
    global_: torch.Tensor                 # (B, global_dim)
    parts: torch.Tensor | None = None     # (B, K, part_dim), refined


def step_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    ang = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


class FiLMResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, cond_dim: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(groups, c_out), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(groups, c_out), c_out)
        self.film = nn.Linear(cond_dim, 2 * c_out)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        scale, shift = self.film(cond).unsqueeze(-1).chunk(2, dim=1)
        h = h * (1 + scale) + shift
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Predicts the injected noise for a batch of noisy action chunks."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.channels
        cond_dim = cfg.global_dim + cfg.step_dim
        self.step_mlp = nn.Sequential(nn.Linear(cfg.step_dim, cfg.step_dim), nn.SiLU(),
                                      nn.Linear(cfg.step_dim, cfg.step_dim))
        self.stage1 = FiLMResBlock(cfg.action_dim, c1, cond_dim, cfg.groups)
        self.down = nn.Conv1d(c1, c1, 3, stride=2, padding=1)
        self.stage2 = FiLMResBlock(c1, c2, cond_dim, cfg.groups)
        self.stage3 = FiLMResBlock(c2 + c1, c1, cond_dim, cfg.groups)
        self.cross = nn.ModuleList([
            PartCrossAttention(c, cfg.part_dim, cfg.attn_dim, cfg.heads, zero_out=cfg.zero_init)
            for c in (c1, c2, c1)])
        self.out = nn.Conv1d(c1, cfg.action_dim, 1)
        if cfg.prediction not in ("epsilon", "sample"):
            raise InvalidArgument(f"unknown prediction type {cfg.prediction!r}")
        self.register_buffer("alpha_bars", torch.as_tensor(
            make_schedule(cfg.num_steps, cfg.beta_start, cfg.beta_end).alpha_bars), persistent=False)
        if cfg.zero_init:
            zero_module(self.out)

    def forward(self, a_t: torch.Tensor, t, cond: ConditionBundle) -> torch.Tensor:
        cfg = self.cfg
        if a_t.shape[-2:] != (cfg.horizon, cfg.action_dim):
            raise InvalidArgument(f"actions must be (B, {cfg.horizon}, {cfg.action_dim}), "
                                  f"got {tuple(a_t.shape)}")
        if cond.global_.shape[-1] != cfg.global_dim:
            raise InvalidArgument(f"global condition must have width {cfg.global_dim}")
        B = a_t.shape[0]
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(B)
        temb = self.step_mlp(step_embedding(t, cfg.step_dim).to(a_t.dtype))
        c = torch.cat([cond.global_, temb], dim=-1)
        parts = cond.parts

        def inject(z, i):
            return z if parts is None else cross_attend(z, parts, self.cross[i])

        x = a_t.transpose(1, 2)
        h1 = inject(self.stage1(x, c), 0)
        h2 = inject(self.stage2(self.down(h1), c), 1)
        up = F.interpolate(h2, size=h1.shape[-1], mode="nearest")
        h3 = inject(self.stage3(torch.cat([up, h1], dim=1), c), 2)
        out = self.out(h3).transpose(1, 2)
        if cfg.prediction == "epsilon":
            return out
        # network output is a clean-sample estimate; convert it to the implied noise
        ab = torch.as_tensor(self.alpha_bars, dtype=a_t.dtype)[t - 1].reshape(B, 1, 1)
        return (a_t - ab.sqrt() * out) / (1 - ab).sqrt()


def denoiser_forward(d: Callable, a_t, t, c: ConditionBundle) -> torch.Tensor:
    return d(a_t, t, c)


# -- loss and sampling ---------------------------------------------------------

def training_loss(d: Callable, a0: torch.Tensor, c: ConditionBundle, sched: NoiseSchedule,
                  generator: torch.Generator | int | None = None) -> torch.Tensor:
    """Batch mean of the summed squared noise-prediction error."""
    if a0.shape[0] < 1:
        raise InvalidArgument("empty batch")
    if not isinstance(generator, torch.Generator):
        seed = generator
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else int(seed))
    B = a0.shape[0]
    t = torch.randint(1, sched.num_steps + 1, (B,), generator=generator)
    eps = torch.randn(a0.shape, generator=generator, dtype=a0.dtype)
    a_t = add_noise(a0, t, eps, sched)
    pred = d(a_t, t, c)
    return ((eps - pred) ** 2).flatten(1).sum(dim=1).mean()


def denoise_step(d: Callable, a_t: torch.Tensor, t: int, c: ConditionBundle, sched: NoiseSchedule,
                 noise: torch.Tensor | None = None, clip: float | None = None) -> torch.Tensor:
    """One ancestral DDPM step from ``t`` to ``t - 1``.

    ``noise`` is the standard-normal draw for the step; passing None (or t == 1)
    gives the posterior mean only.
    """
    _check_step(t, sched)
    eps = d(a_t, torch.full((a_t.shape[0],), t, dtype=torch.long), c)
    ab = sched.alpha_bar(t)
    x0 = (a_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
    c0, ct, var = sched.posterior_coefs(t)
    mean = c0 * x0 + ct * a_t
    if t > 1 and noise is not None:
        return mean + math.sqrt(var) * noise
    return mean


@torch.no_grad()
def sample(d: Callable, c: ConditionBundle, sched: NoiseSchedule, seed: int, shape: tuple,
           deterministic: bool = False, clip: float | None = None,
           dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Full reverse chain from N(0, I); the draw sequence is fixed by ``seed``."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    a = torch.randn(shape, generator=g, dtype=dtype)
    for t in range(sched.num_steps, 0, -1):
        z = torch.randn(shape, generator=g, dtype=dtype)
        a = denoise_step(d, a, t, c, sched, None if deterministic else z, clip)
    if clip is not None:
        a = a.clamp(-clip, clip)
    return a


# -- full policy -------------------------------------------------------------

class HierarchicalPolicy(nn.Module):
    """Semantic fusion + hierarchical conditioning + diffusion denoiser.

    ``obs`` is a dict of tensors:
      points (B, N, 3), feat_a / feat_b (B, N, d) lifted PCA-reduced maps of
      the two extractors, part_index (B, K, n_k) into N, pose (B, 9) or per part (B, K, 9),
      robot (B, J); with ``object_frame_parts`` also part_origin (B, K, 3), the
      reference point (e.g. owning object's centre) each part is expressed against.
    """

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = 3 + cfg.feat_dim
        self.fusion = FusionWeights()
        self.scene_encoder = SetEncoder(in_dim, cfg.d_g, cfg.encoder_hidden)
        self.robot_encoder = RobotEncoder(cfg.joint_dim, cfg.d_r, cfg.robot_hidden)
        self.part_encoder = SetEncoder(in_dim, cfg.d_e, cfg.encoder_hidden)
        self.refiner = PartRefiner(cfg.part_dim, cfg.attn_dim, cfg.heads,
                                   cfg.refine_residual, cfg.refine_prenorm)
        self.denoiser = Denoiser(cfg)
        self.schedule = make_schedule(cfg.num_steps, cfg.beta_start, cfg.beta_end)

    def fused_features(self, obs: dict) -> torch.Tensor:
        if not self.cfg.dense_semantic:
            return torch.zeros_like(obs["feat_a"])
        return self.fusion(obs["feat_a"], obs["feat_b"])

    def part_rows(self, obs: dict, x: torch.Tensor) -> torch.Tensor:
        idx = obs["part_index"]
        B, K, n = idx.shape
        gathered = torch.gather(x, 1, idx.reshape(B, K * n, 1).expand(B, K * n, x.shape[-1]))
        gathered = gathered.reshape(B, K, n, x.shape[-1])
        if self.cfg.object_frame_parts:
            if "part_origin" not in obs:
                raise InvalidArgument("object_frame_parts needs obs['part_origin'] (B, K, 3)")
            origin = obs["part_origin"].to(gathered.dtype).unsqueeze(-2)
            gathered = torch.cat([gathered[..., :3] - origin, gathered[..., 3:]], dim=-1)
        rows = encode_parts(gathered, obs["pose"], self.part_encoder)
        return canonical_order(rows)

    def condition(self, obs: dict) -> ConditionBundle:
        cfg = self.cfg
        x = torch.cat([obs["points"], self.fused_features(obs)], dim=-1)
        scene = self.scene_encoder(x)
        robot = self.robot_encoder(obs["robot"])
        rows = None
        if cfg.global_pose_condition or cfg.part_refine:
            rows = self.part_rows(obs, x)
        part = aggregate_parts(rows) if cfg.global_pose_condition else \
            scene.new_zeros(scene.shape[0], cfg.part_dim)
        g = build_global_condition(scene, robot, part, cfg.global_dims)
        parts = refine_parts(rows, self.refiner) if cfg.part_refine else None
        return ConditionBundle(g, parts)

    def forward(self, a_t, t, cond: ConditionBundle) -> torch.Tensor:
        return self.denoiser(a_t, t, cond)

    def loss(self, obs: dict, actions: torch.Tensor, generator=None) -> torch.Tensor:
        return training_loss(self.denoiser, actions, self.condition(obs), self.schedule, generator)

    @torch.no_grad()
    def act(self, obs: dict, seed: int, deterministic: bool = False) -> torch.Tensor:
        cond = self.condition(obs)
        B = cond.global_.shape[0]
        clip = self.cfg.action_bound if self.cfg.clip_sample else None
        dtype = next(self.denoiser.parameters()).dtype
        out = sample(self.denoiser, cond, self.schedule, seed,
                     (B, self.cfg.horizon, self.cfg.action_dim), deterministic, clip, dtype)
        return out.clamp(-self.cfg.action_bound, self.cfg.action_bound)

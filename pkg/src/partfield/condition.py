"""Hierarchical conditioning: scene / robot / part encoders, the global
condition vector, and the order-free part pathway (self-attention refine,
cross-attention injection).

Tensors follow a leading batch convention where it matters:
points ``(..., N, 3 + d)``, part sets ``(..., K, n_k, 3 + d)``, part
embeddings ``(..., K, d_e + 9)``.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument
from .geometry import RigidTransform
from .partition import LocalFieldSet
from .semlift import SemanticField

POSE_DIM = 9


def mlp(in_dim: int, hidden, out_dim: int, act=nn.SiLU) -> nn.Sequential:
    layers, last = [], in_dim
    for h in hidden:
        layers += [nn.Linear(last, h), act()]
        last = h
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class SetEncoder(nn.Module):
    """PointNet-style encoder: shared per-point MLP followed by max pooling."""

    def __init__(self, in_dim: int, d_e: int, hidden=(64, 64)):
        super().__init__()
        self.in_dim = in_dim
        self.d_e = d_e
        self.per_point = mlp(in_dim, hidden, d_e)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise InvalidArgument(f"encoder expects width {self.in_dim}, got {x.shape[-1]}")
        h = self.per_point(x)
        if mask is not None:
            h = h.masked_fill(~mask[..., None], float("-inf"))
        return h.amax(dim=-2)


class RobotEncoder(nn.Module):
    def __init__(self, joint_dim: int, d_r: int, hidden=(32,), zero_init: bool = False):
        super().__init__()
        self.joint_dim = joint_dim
        self.net = mlp(joint_dim, hidden, d_r)
        if zero_init:
            zero_module(self.net[-1])

    def forward(self, joints: torch.Tensor) -> torch.Tensor:
        if joints.shape[-1] != self.joint_dim:
            raise InvalidArgument(f"expected {self.joint_dim} joints, got {joints.shape[-1]}")
        return self.net(joints)


def _to_tensor(x, dtype=torch.float64) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def _param_dtype(m: nn.Module) -> torch.dtype:
    return next(m.parameters()).dtype


def encode_scene(fld: SemanticField | torch.Tensor, enc: SetEncoder) -> torch.Tensor:
    x = fld if isinstance(fld, torch.Tensor) else _to_tensor(fld.augmented(), _param_dtype(enc))
    if x.shape[-2] < 1:
        raise InvalidArgument("empty field")
    return enc(x)


def encode_robot(state, enc: RobotEncoder) -> torch.Tensor:
    return enc(_to_tensor(state, _param_dtype(enc)))


def pose_encoding(pose: RigidTransform) -> np.ndarray:
    return pose.encode()


def encode_parts(parts: LocalFieldSet | torch.Tensor, pose, enc: SetEncoder,
                 mask: torch.Tensor | None = None) -> torch.Tensor:
    """One row per part: ``encoder(part)`` followed by the 9-d object pose code.

    ``parts`` is either a LocalFieldSet or a padded tensor ``(..., K, n_k, 3+d)``;
    ``pose`` a RigidTransform, a ``(..., 9)`` tensor shared by all parts, or
    ``(..., K, 9)`` with one pose per part (parts of different objects).
    """
    dtype = _param_dtype(enc)
    if isinstance(parts, LocalFieldSet):
        if any(len(p) == 0 for p in parts.parts):
            raise InvalidArgument("empty part")
        width = max(len(p) for p in parts.parts)
        x = torch.zeros(parts.k, width, 3 + parts.parts[0].dim, dtype=dtype)
        mask = torch.zeros(parts.k, width, dtype=torch.bool)
        for j, p in enumerate(parts.parts):
            x[j, :len(p)] = _to_tensor(p.augmented(), dtype)
            mask[j, :len(p)] = True
    else:
        x = parts
        if x.shape[-2] == 0:
            raise InvalidArgument("empty part")
    rows = enc(x, mask)
    code = _to_tensor(pose.encode() if isinstance(pose, RigidTransform) else pose, rows.dtype)
    if code.dim() < rows.dim():   # one pose for every part
        code = code.unsqueeze(-2)
    code = code.expand(*rows.shape[:-1], POSE_DIM)
    return torch.cat([rows, code], dim=-1)


def canonical_order(rows: torch.Tensor) -> torch.Tensor:
    """Reorder the part axis (-2) lexicographically by row values.

    Sorting is itself order-free, so downstream summations see the same
    operand order whatever order the parts arrived in.
    """
    flat = rows.detach().reshape(-1, *rows.shape[-2:]).cpu().numpy()
    perms = np.stack([np.lexsort(f.T[::-1]) for f in flat])
    idx = torch.as_tensor(perms, device=rows.device).reshape(rows.shape[:-1])
    return torch.gather(rows, -2, idx.unsqueeze(-1).expand_as(rows))


def aggregate_parts(rows: torch.Tensor) -> torch.Tensor:
    if rows.shape[-2] < 1:
        raise InvalidArgument("need at least one part")
    return rows.mean(dim=-2)


def build_global_condition(scene: torch.Tensor, robot: torch.Tensor, part: torch.Tensor,
                           dims: tuple[int, int, int] | None = None) -> torch.Tensor:
    if dims is not None and (scene.shape[-1], robot.shape[-1], part.shape[-1]) != tuple(dims):
        raise InvalidArgument(f"segment widths {(scene.shape[-1], robot.shape[-1], part.shape[-1])} "
                              f"do not match {tuple(dims)}")
    return torch.cat([scene, robot, part], dim=-1)


def split_global_condition(vec: torch.Tensor, dims: tuple[int, int, int]):
    a, b, _ = dims
    return vec[..., :a], vec[..., a:a + b], vec[..., a + b:]


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with no positional terms."""

    def __init__(self, q_dim: int, kv_dim: int, dim: int, heads: int = 1, zero_out: bool = False):
        super().__init__()
        if dim % heads:
            raise InvalidArgument("attention dim must be divisible by heads")
        self.q_dim, self.kv_dim, self.heads = q_dim, kv_dim, heads
        self.to_q = nn.Linear(q_dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, q_dim)
        if zero_out:
            zero_module(self.to_out)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.q_dim or ctx.shape[-1] != self.kv_dim:
            raise InvalidArgument(f"attention expects widths ({self.q_dim}, {self.kv_dim}), "
                                  f"got ({x.shape[-1]}, {ctx.shape[-1]})")
        h = self.heads
        q, k, v = self.to_q(x), self.to_k(ctx), self.to_v(ctx)
        split = lambda t: t.reshape(*t.shape[:-1], h, -1).transpose(-3, -2)
        q, k, v = split(q), split(k), split(v)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = (w @ v).transpose(-3, -2)
        return self.to_out(out.reshape(*out.shape[:-2], -1))


class PartRefiner(nn.Module):
    """Self-attention over the part set, optionally pre-normed and residual."""

    def __init__(self, dim: int, attn_dim: int = 32, heads: int = 1,
                 residual: bool = True, prenorm: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(dim) if prenorm else nn.Identity()
        self.attn = Attention(dim, dim, attn_dim, heads)
        self.residual = residual

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        h = self.norm(rows)
        out = self.attn(h, h)
        return rows + out if self.residual else out


def refine_parts(rows: torch.Tensor, attn: PartRefiner) -> torch.Tensor:
    if rows.shape[-2] < 1:
        raise InvalidArgument("need at least one part")
    return attn(rows)


class PartCrossAttention(nn.Module):
    """Denoiser activations ``(B, C, H)`` attend to part rows ``(B, K, d)``."""

    def __init__(self, channels: int, part_dim: int, attn_dim: int = 32, heads: int = 1,
                 zero_out: bool = True):
        super().__init__()
        self.channels = channels
        self.norm = nn.LayerNorm(channels)
        self.attn = Attention(channels, part_dim, attn_dim, heads, zero_out=zero_out)

    def forward(self, z: torch.Tensor, parts: torch.Tensor) -> torch.Tensor:
        if z.shape[-2] != self.channels:
            raise InvalidArgument(f"expected {self.channels} channels, got {z.shape[-2]}")
        tokens = z.transpose(-1, -2)
        return z + self.attn(self.norm(tokens), parts).transpose(-1, -2)


def cross_attend(z: torch.Tensor, parts: torch.Tensor, attn: PartCrossAttention) -> torch.Tensor:
    return attn(z, parts)

"""Transformer backbone: visible-token encoder, reconstruction decoder with
learnable miss tokens, and the shared-weight per-group projection head.

The encoder runs joint self-attention over all visible tokens plus one
learnable class token that aggregates global context. The decoder rebuilds
the full token grid by placing a learnable miss token at every masked
coordinate, adds its own positional table, and predicts raw pixel patches.
The projection head is a small transformer applied independently to each
temporal group's visible latents with a prepended class token; its final
class state is the group embedding used for temporal self-similarity.

All blocks are pre-norm with GELU MLPs and no dropout; forward passes are
deterministic given parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .masking import MaskPlan, VisibleTokens
from .tokenizer import PatchConfig, TokenEmbedder, TokenGrid, patchify


@dataclass(frozen=True)
class ModelConfig:
    """Backbone geometry. ``frames``/``height``/``width`` fix the input size
    (the positional tables are allocated for exactly that token grid)."""

    embed_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_width: int = 32
    dec_depth: int = 1
    dec_heads: int = 4
    proj_depth: int = 1
    proj_heads: int = 4
    patch: PatchConfig = field(default_factory=PatchConfig)
    frames: int = 32
    height: int = 64
    width: int = 64
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.embed_dim % self.enc_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by enc_heads {self.enc_heads}"
            )
        if self.dec_width % self.dec_heads != 0:
            raise ValueError(
                f"dec_width {self.dec_width} not divisible by dec_heads {self.dec_heads}"
            )
        if self.embed_dim % self.proj_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by proj_heads {self.proj_heads}"
            )
        if self.patch.D != self.embed_dim:
            raise ValueError(
                f"patch embedding width {self.patch.D} must equal embed_dim {self.embed_dim}"
            )
        # Allocating the positional tables requires the grid to exist.
        self.patch.grid_shape(self.frames, self.height, self.width)

    @property
    def n_t(self) -> int:
        return self.frames // self.patch.t

    @property
    def n_s(self) -> int:
        return (self.height // self.patch.h) * (self.width // self.patch.w)

    @property
    def patch_dim(self) -> int:
        return self.patch.patch_dim(3)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["patch"] = {"h": cfg.patch.h, "w": cfg.patch.w, "t": cfg.patch.t, "D": cfg.patch.D}
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    patch = d.pop("patch")
    return ModelConfig(patch=PatchConfig(**patch), **d)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


@dataclass
class LatentTokens:
    """Encoder outputs for the visible tokens, plus the global class latent.

    ``latents`` is (V, D) in the same scan order as the VisibleTokens input;
    ``coords``/``group_counts`` carry the coordinate map through.
    """

    latents: torch.Tensor
    coords: torch.Tensor
    group_counts: tuple[int, ...]
    cls_latent: torch.Tensor

    @property
    def n_t(self) -> int:
        return len(self.group_counts)

    def group_slices(self):
        offset = 0
        for j, count in enumerate(self.group_counts):
            yield j, slice(offset, offset + count)
            offset += count


class VideoModel(nn.Module):
    """Full pretraining assembly: embedder + encoder + decoder + projector."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embedder = TokenEmbedder(cfg.patch_dim, cfg.n_t, cfg.n_s, d)
        self.enc_cls = nn.Parameter(torch.zeros(d))
        self.encoder_blocks = nn.ModuleList(
            [Block(d, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth)]
        )
        self.encoder_norm = nn.LayerNorm(d)

        dw = cfg.dec_width
        self.decoder_embed = nn.Linear(d, dw)
        self.miss_token = nn.Parameter(torch.zeros(dw))
        self.decoder_pos = nn.Parameter(torch.zeros(cfg.n_t, cfg.n_s, dw))
        self.decoder_blocks = nn.ModuleList(
            [Block(dw, cfg.dec_heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth)]
        )
        self.decoder_norm = nn.LayerNorm(dw)
        self.decoder_head = nn.Linear(dw, cfg.patch_dim)

        self.proj_cls = nn.Parameter(torch.zeros(d))
        self.projector_blocks = nn.ModuleList(
            [Block(d, cfg.proj_heads, cfg.mlp_ratio) for _ in range(cfg.proj_depth)]
        )
        self.projector_norm = nn.LayerNorm(d)

    # -- forward pieces ----------------------------------------------------

    def embed(self, frames: torch.Tensor) -> TokenGrid:
        """Patchify a (T, H, W, 3) clip and embed all tokens."""
        expected = (self.cfg.frames, self.cfg.height, self.cfg.width, 3)
        if tuple(frames.shape) != expected:
            raise ValueError(f"clip shape {tuple(frames.shape)} does not match model {expected}")
        grid = patchify(frames, self.cfg.patch)
        return self.embedder(grid)

    def encode(self, visible: VisibleTokens) -> LatentTokens:
        """Joint self-attention over the class token and all visible tokens."""
        if visible.tokens.shape[0] == 0:
            raise ValueError("cannot encode an empty visible set")
        for j, count in enumerate(visible.group_counts):
            if count < 1:
                raise ValueError(f"temporal group {j} has no visible tokens")
        x = torch.cat([self.enc_cls[None, :], visible.tokens], dim=0)[None]
        for blk in self.encoder_blocks:
            x = blk(x)
        x = self.encoder_norm(x)
        return LatentTokens(
            latents=x[0, 1:],
            coords=visible.coords,
            group_counts=visible.group_counts,
            cls_latent=x[0, 0],
        )

    def reconstruct(self, latents: LatentTokens, plan: MaskPlan) -> torch.Tensor:
        """Predict the full (N_T, N_S, c*t*h*w) patch grid from visible latents."""
        n_t, n_s = self.cfg.n_t, self.cfg.n_s
        if (plan.n_t, plan.n_s) != (n_t, n_s):
            raise ValueError(f"mask {(plan.n_t, plan.n_s)} does not match model grid {(n_t, n_s)}")
        rows, cols = np.nonzero(~plan.M)
        expected = np.stack([rows, cols], axis=1).astype(np.int64)
        if latents.coords.shape[0] != expected.shape[0] or not np.array_equal(
            latents.coords.numpy(), expected
        ):
            raise ValueError("latent coordinates do not match the mask plan's visible set")
        vis = self.decoder_embed(latents.latents)
        flat_idx = latents.coords[:, 0] * n_s + latents.coords[:, 1]
        base = self.miss_token[None, :].expand(n_t * n_s, -1)
        x = base.index_copy(0, flat_idx, vis)
        x = x + self.decoder_pos.reshape(n_t * n_s, -1)
        x = x[None]
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.decoder_norm(x)
        pred = self.decoder_head(x[0])
        return pred.reshape(n_t, n_s, self.cfg.patch_dim)

    def encode_batch(self, visibles: Sequence[VisibleTokens]) -> list[LatentTokens]:
        """Encode several visible sets with identical shapes in one pass.

        Used for the per-triple consistent-mask passes, which all share the
        same visible count per group; each batch element is processed
        independently by the attention blocks.
        """
        if not visibles:
            return []
        counts = visibles[0].group_counts
        for v in visibles:
            if v.group_counts != counts:
                raise ValueError("encode_batch requires identical visible counts")
            if min(v.group_counts) < 1:
                raise ValueError("cannot encode an empty temporal group")
        tokens = torch.stack([v.tokens for v in visibles])
        b = tokens.shape[0]
        cls = self.enc_cls[None, None, :].expand(b, 1, -1)
        x = torch.cat([cls, tokens], dim=1)
        for blk in self.encoder_blocks:
            x = blk(x)
        x = self.encoder_norm(x)
        return [
            LatentTokens(
                latents=x[i, 1:],
                coords=visibles[i].coords,
                group_counts=visibles[i].group_counts,
                cls_latent=x[i, 0],
            )
            for i in range(b)
        ]

    def project_groups_batch(
        self, latents_list: Sequence[LatentTokens], groups_list: Sequence[Sequence[int]]
    ) -> torch.Tensor:
        """Projection head over selected groups of several latent sets at once.

        Requires every selected group to hold the same number of visible
        latents; returns a (len(latents_list), len(groups), D) tensor whose
        rows match the per-group :meth:`project_frames` outputs.
        """
        seqs = []
        count = None
        for latents, groups in zip(latents_list, groups_list):
            slices = {j: s for j, s in latents.group_slices()}
            for j in groups:
                grp = latents.latents[slices[j]]
                if count is None:
                    count = grp.shape[0]
                elif grp.shape[0] != count:
                    raise ValueError("project_groups_batch requires equal group counts")
                seqs.append(grp)
        if not seqs:
            raise ValueError("no groups selected")
        stacked = torch.stack(seqs)
        b = stacked.shape[0]
        cls = self.proj_cls[None, None, :].expand(b, 1, -1)
        x = torch.cat([cls, stacked], dim=1)
        for blk in self.projector_blocks:
            x = blk(x)
        x = self.projector_norm(x)
        n_groups = len(groups_list[0])
        return x[:, 0].reshape(len(latents_list), n_groups, -1)

    def project_frames(
        self, latents: LatentTokens, groups: Sequence[int] | None = None
    ) -> torch.Tensor:
        """Per-group class embeddings from the shared projection head.

        Groups are processed independently with identical weights; ``groups``
        restricts computation to a subset (output rows follow the given
        order), which matches the full pass row-for-row because the head
        never looks across groups.
        """
        slices = {j: s for j, s in latents.group_slices()}
        if groups is None:
            groups = list(range(latents.n_t))
        outs = []
        for j in groups:
            if j not in slices:
                raise ValueError(f"temporal group {j} out of range [0, {latents.n_t})")
            grp = latents.latents[slices[j]]
            if grp.shape[0] == 0:
                raise ValueError(f"temporal group {j} has no visible latents")
            x = torch.cat([self.proj_cls[None, :], grp], dim=0)[None]
            for blk in self.projector_blocks:
                x = blk(x)
            x = self.projector_norm(x)
            outs.append(x[0, 0])
        return torch.stack(outs, dim=0)


def init_params(cfg: ModelConfig, seed: int) -> VideoModel:
    """Build a model and initialize all parameters deterministically from seed.

    Linear/projection/token/positional weights are drawn N(0, 0.02); biases
    and layer-norm offsets start at zero, layer-norm gains at one. The draw
    order follows parameter registration order, which is fixed by
    construction, so identical (cfg, seed) gives bitwise-identical models.
    """
    model = VideoModel(cfg)
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if _is_norm_param(name):
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(mean=0.0, std=0.02, generator=gen)
    return model


def _is_norm_param(name: str) -> bool:
    parts = name.split(".")
    return any(part in ("ln1", "ln2") or part.endswith("norm") for part in parts)

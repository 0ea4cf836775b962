"""Frame-stacked diffusion transformer.

Every frame of a stack is cut into P×P×3 patches. The patch tokens of all frames and a few
hashed text tokens form one sequence that every block attends over jointly. The diffusion
timestep modulates each block through adaptive layer norm. Only tokens of generated frames
are read back out as noise predictions.

Tensors are channel-last: a batch of stacks is (B, F, R, R, 3).
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
from einops import rearrange

from .errors import DimensionError
from .run_config import ModelConfig

logger = logging.getLogger(__name__)

MAX_PERIOD = 10000.0
TIMESTEP_FREQ_DIM = 256
_WORD_SPLIT = re.compile(r"[^0-9a-z]+")


# ----------------------------------------------------------------------------
# Patches and positions
# ----------------------------------------------------------------------------


def patchify(frames: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, F, R, R, 3) frames -> (B, F·(R/P)², P·P·3) patch vectors in (frame, row, col) order."""
    if frames.ndim != 5 or frames.shape[-1] != 3 or frames.shape[2] != frames.shape[3]:
        raise DimensionError(f"Expected (B, F, R, R, 3) frames, got {tuple(frames.shape)}")
    if frames.shape[2] % patch_size:
        raise DimensionError(
            f"Resolution {frames.shape[2]} is not divisible by patch size {patch_size}"
        )
    return rearrange(
        frames, "b f (h p1) (w p2) c -> b (f h w) (p1 p2 c)", p1=patch_size, p2=patch_size
    )


def unpatchify(tokens: torch.Tensor, num_frames: int, resolution: int, patch_size: int) -> torch.Tensor:
    """Inverse of patchify."""
    grid = resolution // patch_size
    if tokens.ndim != 3 or tokens.shape[1] != num_frames * grid * grid:
        raise DimensionError(
            f"Cannot unpatchify {tuple(tokens.shape)} into {num_frames} frames of {resolution}px"
        )
    return rearrange(
        tokens,
        "b (f h w) (p1 p2 c) -> b f (h p1) (w p2) c",
        f=num_frames,
        h=grid,
        w=grid,
        p1=patch_size,
        p2=patch_size,
    )


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """[cos(p·w_k), sin(p·w_k)] with w_k = MAX_PERIOD^(-k / (dim/2))."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(MAX_PERIOD) * torch.arange(half, dtype=torch.float64) / half
    )
    args = positions.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def position_encoding(num_frames: int, grid: int, dim: int) -> torch.Tensor:
    """Factorized encodings (F·grid², dim): temporal dim/2, row dim/4, col dim/4."""
    if dim % 8:
        raise DimensionError(f"Embedding dim {dim} must be a multiple of 8")
    f, row, col = torch.meshgrid(
        torch.arange(num_frames), torch.arange(grid), torch.arange(grid), indexing="ij"
    )
    return torch.cat(
        [
            sinusoid(f.reshape(-1), dim // 2),
            sinusoid(row.reshape(-1), dim // 4),
            sinusoid(col.reshape(-1), dim // 4),
        ],
        dim=-1,
    )


def embed_positions(
    tokens: torch.Tensor, num_text: int, num_frames: int, grid: int
) -> torch.Tensor:
    """Add position encodings to the visual tokens that follow ``num_text`` text tokens."""
    encoding = position_encoding(num_frames, grid, tokens.shape[-1]).to(tokens)
    text, visual = tokens[:, :num_text], tokens[:, num_text:]
    if visual.shape[1] != encoding.shape[0]:
        raise DimensionError(
            f"{visual.shape[1]} visual tokens do not match {num_frames} frames of {grid}² patches"
        )
    return torch.cat([text, visual + encoding], dim=1)


# ----------------------------------------------------------------------------
# Conditioning embedders
# ----------------------------------------------------------------------------


class TimestepEmbedder(nn.Module):
    """Sinusoidal embedding of integer steps in [0, T) followed by a 2-layer MLP."""

    def __init__(self, dim: int, num_timesteps: int) -> None:
        super().__init__()
        self.num_timesteps = num_timesteps
        self.mlp = nn.Sequential(
            nn.Linear(TIMESTEP_FREQ_DIM, dim),
            nn.SiLU(),
            nn.Linear(dim, dim),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if torch.any(t < 0) or torch.any(t >= self.num_timesteps):
            raise ValueError(
                f"Timesteps {t.tolist()} outside [0, {self.num_timesteps})"
            )
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoid(t, TIMESTEP_FREQ_DIM).to(dtype))


def tokenize_prompt(text: str, vocab_size: int, slots: int) -> List[int]:
    """Hash lowercase alphanumeric words into buckets; pad with the null id ``vocab_size``."""
    words = [w for w in _WORD_SPLIT.split(text.lower()) if w]
    ids = [
        int.from_bytes(hashlib.blake2b(w.encode("utf-8"), digest_size=8).digest(), "little")
        % vocab_size
        for w in words[:slots]
    ]
    return ids + [vocab_size] * (slots - len(ids))


class HashedTextEncoder(nn.Module):
    """Bag of hashed words looked up in a learned table; the extra row is the null token."""

    def __init__(self, vocab_size: int, slots: int, dim: int) -> None:
        super().__init__()
        self.vocab_size = vocab_size
        self.slots = slots
        self.embedding = nn.Embedding(vocab_size + 1, dim)

    def token_ids(self, prompts: Sequence[str]) -> torch.Tensor:
        return torch.tensor(
            [tokenize_prompt(p, self.vocab_size, self.slots) for p in prompts],
            dtype=torch.long,
            device=self.embedding.weight.device,
        )

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.embedding(self.token_ids(prompts))


class IdentityCodec(nn.Module):
    """Pixel-space codec; frames go to the transformer unchanged."""

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        return frames

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return latents


def build_codec(name: str) -> nn.Module:
    if name == "identity":
        return IdentityCodec()
    raise ValueError(f"Unknown codec: {name}")


# ----------------------------------------------------------------------------
# Transformer
# ----------------------------------------------------------------------------


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class JointAttention(nn.Module):
    """Multi-head self-attention with an explicit softmax so weights can be recorded."""

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, record: bool = False) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.heads)
        weights = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        if record:
            self.last_attention = weights.detach()
        return self.proj(rearrange(weights @ v, "b h n d -> b n (h d)"))


class DiTBlock(nn.Module):
    """Pre-norm block with adaLN-zero modulation of attention and MLP branches."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float) -> None:
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = JointAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(hidden, dim),
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor, record: bool = False) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(c).chunk(6, dim=-1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a), record)
        x = x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch_dim: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, patch_dim)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class MaterialDiT(nn.Module):
    """Denoiser over frame stacks: ``model(x_t, prompts, t, clean_flags)`` -> ε of generated frames.

    Key Features:
        - Joint self-attention over [text tokens; all frame tokens]
        - Factorized sinusoidal (frame, row, col) encodings, none on text tokens
        - Learned clean/generated role embedding per frame
        - adaLN-zero timestep conditioning; blocks are identity maps at init

    Example:
        ```python
        model = MaterialDiT(ModelConfig(resolution=32), num_timesteps=1000)
        eps = model(x_t, ["red brick wall"], torch.tensor([500]), FrameMode.IMAGE_COND.clean_flags)
        eps.shape  # (1, 6, 32, 32, 3)
        ```
    """

    def __init__(self, config: ModelConfig, num_timesteps: int) -> None:
        super().__init__()
        self.config = config
        self.num_timesteps = num_timesteps
        dim = config.embed_dim
        patch_dim = config.patch_size * config.patch_size * 3
        self.grid = config.resolution // config.patch_size

        self.codec = build_codec(config.codec)
        self.patch_embed = nn.Linear(patch_dim, dim)
        self.role_embed = nn.Embedding(2, dim)
        self.text_encoder = HashedTextEncoder(config.text_vocab_size, config.text_slots, dim)
        self.timestep_embedder = TimestepEmbedder(dim, num_timesteps)
        self.blocks = nn.ModuleList(
            [DiTBlock(dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.final_layer = FinalLayer(dim, patch_dim)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=0.02)
        for block in self.blocks:
            nn.init.zeros_(block.modulation[-1].weight)
            nn.init.zeros_(block.modulation[-1].bias)
        nn.init.zeros_(self.final_layer.modulation[-1].weight)
        nn.init.zeros_(self.final_layer.modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)

    def embed_timestep(self, t: torch.Tensor) -> torch.Tensor:
        return self.timestep_embedder(t)

    def embed_text(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.text_encoder(prompts)

    def attention_maps(self) -> List[Optional[torch.Tensor]]:
        """Weights recorded by the last forward run with ``record_attention=True``."""
        return [block.attn.last_attention for block in self.blocks]

    def forward(
        self,
        x_t: torch.Tensor,
        prompts: Sequence[str],
        t: torch.Tensor,
        clean_flags: Sequence[bool],
        record_attention: bool = False,
    ) -> torch.Tensor:
        batch, num_frames, resolution = x_t.shape[0], x_t.shape[1], x_t.shape[2]
        if resolution != self.config.resolution:
            raise DimensionError(
                f"Model expects {self.config.resolution}px frames, got {resolution}px"
            )
        if num_frames > self.config.max_frames or len(clean_flags) != num_frames:
            raise DimensionError(
                f"{num_frames} frames with {len(clean_flags)} flags exceed or mismatch "
                f"max_frames {self.config.max_frames}"
            )
        if len(prompts) != batch:
            raise DimensionError(f"{len(prompts)} prompts for a batch of {batch}")

        latents = self.codec.encode(x_t)
        visual = self.patch_embed(patchify(latents, self.config.patch_size))
        roles = torch.tensor([int(flag) for flag in clean_flags], device=x_t.device)
        visual = visual + self.role_embed(roles).repeat_interleave(self.grid * self.grid, dim=0)
        text = self.embed_text(prompts).to(visual.dtype)
        tokens = embed_positions(
            torch.cat([text, visual], dim=1), text.shape[1], num_frames, self.grid
        )

        c = self.embed_timestep(t).to(visual.dtype)
        if c.shape[0] == 1 and batch > 1:
            c = c.expand(batch, -1)
        for block in self.blocks:
            tokens = block(tokens, c, record_attention)

        out = self.final_layer(tokens[:, text.shape[1] :], c)
        frames = self.codec.decode(
            unpatchify(out, num_frames, resolution, self.config.patch_size)
        )
        generated = [i for i, flag in enumerate(clean_flags) if not flag]
        return frames[:, generated]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(config: ModelConfig, num_timesteps: int, seed: Optional[int] = None) -> MaterialDiT:
    """Construct a model; with ``seed`` the initialization is reproducible."""
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = MaterialDiT(config, num_timesteps)
    else:
        model = MaterialDiT(config, num_timesteps)
    logger.info(f"Built MaterialDiT with {count_parameters(model)} parameters")
    return model


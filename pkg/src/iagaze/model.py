"""The Interactive Attention network.

Pipeline per sample: prompt triplet and patch tokens from a frozen encoder,
positional adapter (text + Fourier box features -> knowledge prototypes),
visual adapter (two pre-norm transformer layers), human-object block
(self-attention over prototypes and tokens, visual positions kept), interaction
block (gated cross-attention to the interaction prototype, then
self-attention), and a 1x1-conv decoder upsampled to image size.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

BCE_EPS = 1e-7
MODULES = ("PA", "VA", "HOCB", "ICB")


@dataclass
class IAConfig:
    text_dim: int = 64
    visual_dim: int = 64
    model_width: int = 32
    fourier_bands: int = 4
    n_heads: int = 4
    mlp_hidden: int = 64
    decoder_mid_channels: int | None = None
    patch_size: int = 16
    image_size: int = 64
    ablate: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ablate = sorted(set(self.ablate))
        unknown = set(self.ablate) - set(MODULES)
        if unknown:
            raise ConfigError(f"unknown ablation module(s) {sorted(unknown)}")
        if self.decoder_mid_channels is None:
            self.decoder_mid_channels = max(self.model_width // 2, 1)
        if self.model_width % self.n_heads:
            raise ConfigError(f"model_width {self.model_width} not divisible by n_heads {self.n_heads}")
        if self.fourier_dim % 8:
            raise ConfigError("fourier_dim must be divisible by 8")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")

    @property
    def fourier_dim(self) -> int:
        # 4 box coordinates x (sin, cos) x bands
        return 8 * self.fourier_bands

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    def uses(self, module: str) -> bool:
        return module not in self.ablate

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **kw) -> "IAConfig":
        return cls(**kw)

    @classmethod
    def full(cls, profile: str = "base", **kw) -> "IAConfig":
        dims = {"base": (512, 768, 16), "large": (768, 1024, 14)}[profile]
        base = dict(text_dim=dims[0], visual_dim=dims[1], patch_size=dims[2], image_size=224,
                    model_width=256, fourier_bands=8, n_heads=8, mlp_hidden=512)
        base.update(kw)
        return cls(**base)


def fourier_embed(coords, n_bands: int) -> np.ndarray:
    """``[sin(2^k pi c), cos(2^k pi c)]`` for each coordinate ``c``, then each band ``k``."""
    c = np.atleast_1d(np.asarray(coords, dtype=np.float64))
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError(f"coordinates must lie in [0, 1], got {c}")
    return fourier_embed_t(torch.from_numpy(c), n_bands).numpy()


def fourier_embed_t(coords: torch.Tensor, n_bands: int) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(n_bands, dtype=coords.dtype)) * math.pi
    ang = coords[..., :, None] * freqs  # (..., d, bands)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., d, bands, 2)
    return out.flatten(-3)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v/out maps."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def weights(self, x, ctx):
        B, T, D = x.shape
        h = self.n_heads
        q = self.q(x).view(B, T, h, D // h).transpose(1, 2)
        k = self.k(ctx).view(B, ctx.shape[1], h, D // h).transpose(1, 2)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)

    def forward(self, x, ctx=None):
        ctx = x if ctx is None else ctx
        B, T, D = x.shape
        h = self.n_heads
        attn = self.weights(x, ctx)
        v = self.v(ctx).view(B, ctx.shape[1], h, D // h).transpose(1, 2)
        y = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y)


def _mlp(d_in, hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))


class PositionalAdapter(nn.Module):
    def __init__(self, cfg: IAConfig, which=("human", "object", "interaction")):
        super().__init__()
        fd = cfg.fourier_dim if cfg.uses("PA") else 0
        self.n_bands = cfg.fourier_bands
        self.use_boxes = cfg.uses("PA")
        in_dims = {"human": cfg.text_dim + fd, "object": cfg.text_dim + fd,
                   "interaction": cfg.text_dim + 2 * fd}
        self.mlps = nn.ModuleDict({w: _mlp(in_dims[w], cfg.mlp_hidden, cfg.model_width) for w in which})

    def forward(self, text, boxes):
        """text: (B, 3, text_dim) for human/object/interaction; boxes: (B, 2, 4) in [0, 1]."""
        t = {"human": text[:, 0], "object": text[:, 1], "interaction": text[:, 2]}
        if self.use_boxes:
            fh = fourier_embed_t(boxes[:, 0], self.n_bands)
            fo = fourier_embed_t(boxes[:, 1], self.n_bands)
            inputs = {"human": torch.cat([t["human"], fh], -1),
                      "object": torch.cat([t["object"], fo], -1),
                      "interaction": torch.cat([t["interaction"], fh, fo], -1)}
        else:
            inputs = t
        return {w: mlp(inputs[w]) for w, mlp in self.mlps.items()}


class EncoderLayer(nn.Module):
    def __init__(self, dim, n_heads, hidden):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _mlp(dim, hidden, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VisualAdapter(nn.Module):
    def __init__(self, cfg: IAConfig):
        super().__init__()
        self.layers = nn.ModuleList([EncoderLayer(cfg.model_width, cfg.n_heads, cfg.mlp_hidden) for _ in range(2)])

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class HOCB(nn.Module):
    def __init__(self, cfg: IAConfig):
        super().__init__()
        self.self_attn = Attention(cfg.model_width, cfg.n_heads)

    def forward(self, v, k_human, k_object):
        seq = torch.cat([k_human[:, None], k_object[:, None], v], dim=1)
        # the gate keeps the visual positions and drops the two prototypes
        return v + self.self_attn(seq)[:, 2:]


class ICB(nn.Module):
    def __init__(self, cfg: IAConfig):
        super().__init__()
        self.cross_attn = Attention(cfg.model_width, cfg.n_heads)
        self.gate = nn.Parameter(torch.zeros(cfg.model_width))
        self.self_attn = Attention(cfg.model_width, cfg.n_heads)

    def forward(self, v, k_interaction):
        v = v + self.gate * self.cross_attn(v, k_interaction[:, None])
        return v + self.self_attn(v)


class Decoder(nn.Module):
    def __init__(self, cfg: IAConfig):
        super().__init__()
        mid = cfg.decoder_mid_channels
        self.conv1 = nn.Conv2d(cfg.model_width, mid, kernel_size=1)
        self.bn = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, 1, kernel_size=1)

    def forward(self, v, rows, cols):
        """(B, M, D) tokens -> (B, rows, cols) probabilities on the token grid."""
        B, M, D = v.shape
        if M != rows * cols:
            raise ConfigError(f"{M} tokens do not form a {rows}x{cols} grid")
        x = v.transpose(1, 2).reshape(B, D, rows, cols)
        x = F.relu(self.bn(self.conv1(x)))
        return torch.sigmoid(self.conv2(x))[:, 0]


def upsample(grid_probs: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of one (rows, cols) map."""
    return F.interpolate(grid_probs[None, None], size=(height, width), mode="bilinear", align_corners=False)[0, 0]


class IAModel(nn.Module):
    """IA network. ``zero_init`` zeroes the residual-branch output maps.

    With ``zero_init`` the knowledge blocks start as identities; every other
    linear layer keeps PyTorch's fan-in scaled default.
    """

    def __init__(self, cfg: IAConfig, zero_init: bool = True):
        super().__init__()
        self.cfg = cfg
        D = cfg.model_width
        which = [w for w, need in (("human", cfg.uses("HOCB")), ("object", cfg.uses("HOCB")),
                                   ("interaction", cfg.uses("ICB"))) if need]
        self.pa = PositionalAdapter(cfg, which) if which else None
        self.visual_proj = nn.Linear(cfg.visual_dim, D)
        self.va = VisualAdapter(cfg) if cfg.uses("VA") else None
        self.hocb = HOCB(cfg) if cfg.uses("HOCB") else None
        self.icb = ICB(cfg) if cfg.uses("ICB") else None
        self.decoder = Decoder(cfg)
        if zero_init:
            self.zero_residual_outputs()

    def zero_residual_outputs(self):
        outs = []
        if self.va is not None:
            for layer in self.va.layers:
                outs += [layer.attn.out, layer.mlp[2]]
        if self.hocb is not None:
            outs.append(self.hocb.self_attn.out)
        if self.icb is not None:
            outs.append(self.icb.self_attn.out)
            nn.init.zeros_(self.icb.gate)
        for lin in outs:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def prototypes(self, text, boxes) -> dict:
        return self.pa(text, boxes) if self.pa is not None else {}

    def features(self, text, boxes, tokens, prototypes=None):
        """Run adapters and knowledge blocks; returns V'_HOI of shape (B, M, D)."""
        k = self.prototypes(text, boxes) if prototypes is None else prototypes
        v = self.visual_proj(tokens)
        if self.va is not None:
            v = self.va(v)
        if self.hocb is not None:
            v = self.hocb(v, k["human"], k["object"])
        if self.icb is not None:
            v = self.icb(v, k["interaction"])
        return v

    def forward(self, text, boxes, tokens, prototypes=None):
        """Token-grid probabilities of shape (B, rows, cols)."""
        rows, cols = self.cfg.grid
        return self.decoder(self.features(text, boxes, tokens, prototypes), rows, cols)

    def predict_maps(self, text, boxes, tokens, sizes, prototypes=None) -> list[torch.Tensor]:
        grid = self.forward(text, boxes, tokens, prototypes)
        return [upsample(g, h, w) for g, (h, w) in zip(grid, sizes)]


def build_model(cfg: IAConfig, seed: int = 0, dtype=torch.float32, zero_init: bool = True) -> IAModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = IAModel(cfg, zero_init=zero_init)
    return model.to(dtype)


def param_census(model: nn.Module) -> dict[str, tuple[int, ...]]:
    return {name: tuple(p.shape) for name, p in model.named_parameters()}


def bce(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def bce_loss(pred, target, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy of prediction ``pred`` against soft target ``target``."""
    p = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    y = torch.as_tensor(np.asarray(target, dtype=np.float64))
    return float(bce(p, y, eps))


# --------------------------------------------------------------------------
# sample -> tensors
# --------------------------------------------------------------------------

@dataclass
class EncodedSample:
    sample_id: str
    text: np.ndarray  # (3, text_dim)
    boxes: np.ndarray  # (2, 4), normalized
    tokens: np.ndarray  # (M, visual_dim)
    size: tuple[int, int]  # (H, W) of the original image


def encode_sample(backend, sample, image) -> EncodedSample:
    from .encoders import encode_triplet

    trip = encode_triplet(backend, sample.object_label, sample.interaction_label)
    hb, ob = sample.normalized_boxes()
    vis = backend.encode_image(image)
    return EncodedSample(sample.sample_id, trip.stack(), np.stack([hb, ob]), vis.tokens,
                         (sample.height, sample.width))


def collate(batch: list[EncodedSample], dtype=torch.float32):
    text = torch.as_tensor(np.stack([b.text for b in batch]), dtype=dtype)
    boxes = torch.as_tensor(np.stack([b.boxes for b in batch]), dtype=dtype)
    tokens = torch.as_tensor(np.stack([b.tokens for b in batch]), dtype=dtype)
    return text, boxes, tokens, [b.size for b in batch]


def ia_forward(sample, image, backend, model: IAModel) -> np.ndarray:
    """Predict the attention map of one sample at full image resolution (eval mode)."""
    enc = encode_sample(backend, sample, image)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            text, boxes, tokens, sizes = collate([enc], dtype)
            out = model.predict_maps(text, boxes, tokens, sizes)[0]
    finally:
        model.train(was_training)
    return out.double().numpy()

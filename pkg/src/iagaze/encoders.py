"""Text/image encoder backends and the interaction-oriented prompt block.

Two backends share one contract: a seeded, hash-based ``MockBackend`` for
desk-scale runs and tests, and ``PretrainedBackend`` wrapping a CLIP model
from ``transformers`` (loaded lazily, weights cached under ``IA_CACHE_DIR``).
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .data import resize_map

BACKENDS = ("mock", "pretrained-base", "pretrained-large")

PRETRAINED_PROFILES = {
    "pretrained-base": dict(model="openai/clip-vit-base-patch16", text_dim=512, visual_dim=768, patch_size=16),
    "pretrained-large": dict(model="openai/clip-vit-large-patch14", text_dim=768, visual_dim=1024, patch_size=14),
}

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class TextTriplet:
    t_human: np.ndarray
    t_object: np.ndarray
    t_interaction: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.t_human, self.t_object, self.t_interaction])


@dataclass(frozen=True)
class VisualTokens:
    tokens: np.ndarray  # (M, dim)
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid_rows * self.grid_cols:
            raise ValueError(
                f"{self.tokens.shape[0]} tokens do not fill a {self.grid_rows}x{self.grid_cols} grid"
            )


class EncoderError(RuntimeError):
    def __init__(self, backend, err):
        super().__init__(f"encoder backend {backend!r} failed: {err}")


def mock_encode(seed: int, prompt: str, dim: int) -> np.ndarray:
    """Expand a keyed BLAKE2b stream of ``prompt`` into a unit vector.

    Block ``i`` is ``blake2b(prompt_bytes || u32le(i), key=u64le(seed))``;
    each 8-byte little-endian word ``u`` maps to ``2 * u / (2**64 - 1) - 1``.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    key = struct.pack("<Q", seed & _U64)
    payload = prompt.encode("utf-8")
    words: list[int] = []
    block = 0
    while len(words) < dim:
        digest = hashlib.blake2b(payload + struct.pack("<I", block), key=key, digest_size=64).digest()
        words.extend(struct.unpack("<8Q", digest))
        block += 1
    vec = np.array(words[:dim], dtype=np.float64) / _U64 * 2.0 - 1.0
    return vec / np.linalg.norm(vec)


def _to_square(image: np.ndarray, size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None].repeat(3, axis=2)
    return np.stack([resize_map(image[:, :, c], size, size, "bilinear") for c in range(image.shape[2])], axis=2)


class MockBackend:
    """Deterministic stand-in for a CLIP encoder.

    Text vectors come from :func:`mock_encode`. Each image patch (after
    resizing to ``image_size``) is flattened and sent through a fixed random
    projection drawn from ``seed``, so tokens carry real image content.
    """

    name = "mock"

    def __init__(self, seed: int = 0, text_dim: int = 64, visual_dim: int = 64,
                 patch_size: int = 16, image_size: int = 64):
        if image_size % patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        self.seed = seed
        self.text_dim = text_dim
        self.visual_dim = visual_dim
        self.patch_size = patch_size
        self.image_size = image_size
        fan_in = 3 * patch_size * patch_size
        rng = np.random.default_rng(seed & _U64)
        self._proj = rng.standard_normal((fan_in, visual_dim)) / np.sqrt(fan_in)
        self._bias = rng.standard_normal(visual_dim) * 0.1
        # similarity maps compare tokens with text vectors in a shared space
        self._to_text = rng.standard_normal((visual_dim, text_dim)) / np.sqrt(visual_dim)

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    def encode_text(self, prompt: str) -> np.ndarray:
        return mock_encode(self.seed, prompt, self.text_dim)

    def _patches(self, image) -> np.ndarray:
        x = _to_square(image, self.image_size)
        p = self.patch_size
        g = self.image_size // p
        return x.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)

    def encode_image(self, image) -> VisualTokens:
        tokens = np.tanh(self._patches(image) @ self._proj + self._bias)
        return VisualTokens(tokens, *self.grid)

    def text_space_tokens(self, image) -> VisualTokens:
        v = self.encode_image(image)
        return VisualTokens(v.tokens @ self._to_text, v.grid_rows, v.grid_cols)

    def describe(self) -> dict:
        return {"backend": self.name, "seed": self.seed, "text_dim": self.text_dim,
                "visual_dim": self.visual_dim, "patch_size": self.patch_size,
                "image_size": self.image_size, "text_embedding": "blake2b-mock"}


class PretrainedBackend:
    """CLIP ViT encoder via ``transformers``; frozen, eval mode, float32.

    Text vectors are the model's projected sentence embedding
    (``get_text_features``). Visual tokens are the last hidden states of the
    vision tower with the class token dropped.
    """

    def __init__(self, name: str = "pretrained-base", image_size: int = 224, cache_dir=None,
                 model=None, tokenizer=None):
        if name not in PRETRAINED_PROFILES:
            raise ValueError(f"unknown pretrained profile {name!r}")
        prof = PRETRAINED_PROFILES[name]
        self.name = name
        self.text_dim = prof["text_dim"]
        self.visual_dim = prof["visual_dim"]
        self.patch_size = prof["patch_size"]
        self.image_size = image_size
        self.model_id = prof["model"]
        cache_dir = cache_dir or os.environ.get("IA_CACHE_DIR")
        try:
            import torch
            self._torch = torch
            if model is None or tokenizer is None:
                from transformers import CLIPModel, CLIPTokenizer
                model = model or CLIPModel.from_pretrained(self.model_id, cache_dir=cache_dir)
                tokenizer = tokenizer or CLIPTokenizer.from_pretrained(self.model_id, cache_dir=cache_dir)
        except Exception as e:  # missing package, no weights, no network
            raise EncoderError(name, e) from e
        self._model = model.eval()
        self._tok = tokenizer
        cfg = self._model.config.vision_config
        self._mean = np.array([0.48145466, 0.4578275, 0.40821073])
        self._std = np.array([0.26862954, 0.26130258, 0.27577711])
        if cfg.patch_size != self.patch_size:
            raise EncoderError(name, f"checkpoint patch size {cfg.patch_size} != {self.patch_size}")
        self.text_dim = model.config.projection_dim
        self.visual_dim = cfg.hidden_size

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    def encode_text(self, prompt: str) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            batch = self._tok([prompt], padding=True, return_tensors="pt")
            out = self._model.get_text_features(**batch)
            # newer transformers return an output object holding the projected pooled vector
            out = getattr(out, "pooler_output", out)
            vec = out[0].double().numpy()
        return vec / np.linalg.norm(vec)

    def _hidden(self, image):
        torch = self._torch
        x = (_to_square(image, self.image_size) - self._mean) / self._std
        pix = torch.from_numpy(x.transpose(2, 0, 1)[None].astype(np.float32))
        with torch.no_grad():
            out = self._model.vision_model(pixel_values=pix, interpolate_pos_encoding=True)
        return out.last_hidden_state[0, 1:]

    def encode_image(self, image) -> VisualTokens:
        return VisualTokens(self._hidden(image).double().numpy(), *self.grid)

    def text_space_tokens(self, image) -> VisualTokens:
        with self._torch.no_grad():
            h = self._model.vision_model.post_layernorm(self._hidden(image))
            t = self._model.visual_projection(h)
        return VisualTokens(t.double().numpy(), *self.grid)

    def describe(self) -> dict:
        return {"backend": self.name, "model": self.model_id, "text_dim": self.text_dim,
                "visual_dim": self.visual_dim, "patch_size": self.patch_size,
                "image_size": self.image_size, "text_embedding": "get_text_features (pooled EOS, projected)"}


def make_backend(name: str = "mock", seed: int = 0, image_size: int | None = None, **kw):
    if name == "mock":
        return MockBackend(seed=seed, image_size=image_size or 64, **kw)
    if name in PRETRAINED_PROFILES:
        return PretrainedBackend(name, image_size=image_size or 224, **kw)
    raise ValueError(f"unknown encoder backend {name!r}; choose from {BACKENDS}")


def build_prompts(object_label: str, interaction_label: str) -> tuple[str, str, str]:
    if not object_label or not interaction_label:
        raise ValueError("object and interaction labels must be non-empty")
    obj = object_label.replace("_", " ")
    act = interaction_label.replace("_", " ")
    return "person", obj, f"a photo of a person {act} {obj}"


def encode_triplet(backend, object_label: str, interaction_label: str) -> TextTriplet:
    prompts = build_prompts(object_label, interaction_label)
    try:
        vecs = [np.asarray(backend.encode_text(p), dtype=np.float64) for p in prompts]
    except EncoderError:
        raise
    except Exception as e:
        raise EncoderError(getattr(backend, "name", type(backend).__name__), e) from e
    return TextTriplet(*vecs)


def cosine_map(tokens: np.ndarray, text: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Per-token cosine with ``text``, min-max normalized; flat maps become zeros."""
    tokens = np.asarray(tokens, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    sims = tokens @ text / (np.linalg.norm(tokens, axis=1) * np.linalg.norm(text) + 1e-12)
    sims = sims.reshape(rows, cols)
    lo, hi = sims.min(), sims.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(sims)
    return (sims - lo) / (hi - lo)


def clip_similarity_map(backend, image, prompt: str) -> np.ndarray:
    """Raw CLIP baseline: cosine between each patch token and the prompt."""
    v = backend.text_space_tokens(image)
    return cosine_map(v.tokens, backend.encode_text(prompt), v.grid_rows, v.grid_cols)

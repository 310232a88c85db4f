"""Attention alignment for host HOI models.

A host exposes the head- and query-averaged weights of its last decoder
cross-attention as a map ``m_hoi`` (h x w). Human or IA-generated heatmaps are
adaptive-max pooled to h x w and supervise ``m_hoi`` with BCE, added to the
host's own loss as ``lambda1 * raw + lambda2 * align``.

``ToyHOIModel`` is a small stand-in host trained on synthetic images whose
label is fixed by a planted cue patch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import check_map, resize_map, write_heatmap
from .errors import LeakageError, TrainingDiverged, ValidationError
from .model import BCE_EPS, Attention, EncoderLayer, _mlp

SOURCES = ("human", "ia_pseudo")
# (lambda1, lambda2) used for one-stage and two-stage hosts
ONE_STAGE_LAMBDAS = (1.0, 10.0)
TWO_STAGE_LAMBDAS = (1.0, 6.0)


@dataclass
class AlignmentConfig:
    lambda1: float = ONE_STAGE_LAMBDAS[0]
    lambda2: float = ONE_STAGE_LAMBDAS[1]
    source: str = "human"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")


def combined_loss(l_raw, l_align, cfg: AlignmentConfig):
    return cfg.lambda1 * l_raw + cfg.lambda2 * l_align


def pool_target(target, rows: int, cols: int) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    try:
        check_map(target, normalized="max")
    except ValidationError as e:
        raise ValueError(f"alignment target must be max-normalized: {e}") from e
    return resize_map(target, rows, cols, mode="adaptive_max")


def minmax(m: torch.Tensor) -> torch.Tensor:
    """Per-map min-max normalization over the last two dims; flat maps pass through."""
    lo = m.amin(dim=(-2, -1), keepdim=True)
    hi = m.amax(dim=(-2, -1), keepdim=True)
    rng = hi - lo
    flat = rng <= 1e-12
    return torch.where(flat, m, (m - lo) / torch.where(flat, torch.ones_like(rng), rng))


def alignment_bce(m_hoi: torch.Tensor, pooled: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Differentiable alignment term; ``m_hoi`` and ``pooled`` share shape (..., h, w)."""
    p = minmax(m_hoi).clamp(eps, 1 - eps)
    return -(pooled * torch.log(p) + (1 - pooled) * torch.log(1 - p)).mean()


def alignment_loss(m_hoi, target, source: str = "human") -> float:
    """BCE between the host map and the pooled human (``human``) or IA (``ia_pseudo``) target."""
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    m = np.asarray(m_hoi, dtype=np.float64)
    pooled = pool_target(target, *m.shape)
    return float(alignment_bce(torch.from_numpy(m), torch.from_numpy(pooled)))


# --------------------------------------------------------------------------
# pseudo labels
# --------------------------------------------------------------------------

def check_leakage(train_ids, ids) -> None:
    shared = sorted(set(train_ids) & set(ids))
    if shared:
        raise LeakageError(f"{len(shared)} sample id(s) were used to train the IA model: {shared[:10]}")


def pseudo_label(checkpoint, records, backend, image_root=None, out_dir=None, images=None) -> dict[str, np.ndarray]:
    """Predict an IA map for every sample; refuses samples the IA model trained on.

    With ``out_dir``, each map is written as ``<sample_id>.ighm``.
    """
    from .checkpoint import load_checkpoint
    from .data import load_image
    from .model import ia_forward

    model, meta, _ = load_checkpoint(checkpoint)
    check_leakage(meta.get("train_ids", []), [s.sample_id for s, _ in records])
    labels = {}
    for sample, _ in records:
        img = images[sample.sample_id] if images is not None else load_image(sample, image_root)
        labels[sample.sample_id] = ia_forward(sample, img, backend, model)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for sid, m in labels.items():
            write_heatmap(m, out / f"{sid}.ighm")
    return labels


# --------------------------------------------------------------------------
# toy host model
# --------------------------------------------------------------------------

TOY_IMAGE = 64
TOY_PATCH = 8
TOY_CUE = 12
TOY_CLASSES = 4
_PALETTE = np.array([[0.9, 0.2, 0.2], [0.2, 0.85, 0.2], [0.25, 0.35, 0.95], [0.9, 0.85, 0.15]])


@dataclass
class ToyData:
    ids: list[str]
    images: np.ndarray  # (N, 64, 64, 3)
    labels: np.ndarray  # (N,)
    masks: np.ndarray  # (N, 64, 64) cue masks in {0, 1}


def make_toy_data(n: int, seed: int = 0, n_distractors: int = 3, prefix: str = "toy", border: int = 2) -> ToyData:
    """Planted-cue images: the bordered patch's color is the label.

    Distractor patches use the other colors without the white border, so the
    model has to find the cue before it can read it.
    """
    rng = np.random.default_rng(seed)
    S, c = TOY_IMAGE, TOY_CUE
    images = rng.uniform(0.0, 0.3, size=(n, S, S, 3))
    labels = rng.integers(0, TOY_CLASSES, size=n)
    masks = np.zeros((n, S, S))
    for i in range(n):
        taken = []
        for j in range(n_distractors + 1):
            for _ in range(100):
                y, x = rng.integers(0, S - c + 1, size=2)
                if all(abs(y - ty) >= c or abs(x - tx) >= c for ty, tx in taken):
                    break
            taken.append((y, x))
            if j == 0:
                images[i, y:y + c, x:x + c] = 1.0
                images[i, y + border:y + c - border, x + border:x + c - border] = _PALETTE[labels[i]]
                masks[i, y:y + c, x:x + c] = 1.0
            else:
                other = rng.choice([k for k in range(TOY_CLASSES) if k != labels[i]])
                images[i, y:y + c, x:x + c] = _PALETTE[other]
    return ToyData([f"{prefix}-{i:04d}" for i in range(n)], images, labels, masks)


class ToyHOIModel(nn.Module):
    """Patch encoder (one layer) and a two-layer query decoder with one cross-attention.

    Decoder layer 1 is query self-attention; layer 2 cross-attends to the
    encoded patches, and its weights feed :meth:`attention_map`.
    """

    def __init__(self, dim: int = 32, n_heads: int = 4, n_queries: int = 4):
        super().__init__()
        g = TOY_IMAGE // TOY_PATCH
        self.grid = (g, g)
        self.embed = nn.Linear(3 * TOY_PATCH * TOY_PATCH, dim)
        self.pos = nn.Parameter(torch.randn(g * g, dim) * 0.02)
        self.encoder = EncoderLayer(dim, n_heads, 2 * dim)
        self.queries = nn.Parameter(torch.randn(n_queries, dim) * 0.02)
        self.query_norm = nn.LayerNorm(dim)
        self.query_attn = Attention(dim, n_heads)
        self.cross_norm = nn.LayerNorm(dim)
        self.mem_norm = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, n_heads)
        self.mlp_norm = nn.LayerNorm(dim)
        self.mlp = _mlp(dim, 2 * dim, dim)
        self.head = nn.Linear(dim, TOY_CLASSES)

    def patches(self, images: torch.Tensor) -> torch.Tensor:
        B = images.shape[0]
        p, g = TOY_PATCH, self.grid[0]
        x = images.reshape(B, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, p * p * 3)

    def forward(self, images: torch.Tensor):
        """Returns ``(logits, m_hoi)``; ``m_hoi`` is (B, 8, 8), non-negative, sums to 1."""
        mem = self.encoder(self.embed(self.patches(images)) + self.pos)
        q = self.queries.expand(images.shape[0], -1, -1)
        q = q + self.query_attn(self.query_norm(q))
        qn, mn = self.cross_norm(q), self.mem_norm(mem)
        attn = self.cross_attn.weights(qn, mn)  # (B, heads, Q, M)
        q = q + self.cross_attn(qn, mn)
        q = q + self.mlp(self.mlp_norm(q))
        logits = self.head(q.mean(dim=1))
        m_hoi = attn.mean(dim=(1, 2)).reshape(-1, *self.grid)
        return logits, m_hoi

    def attention_map(self, image) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            _, m = self(torch.as_tensor(np.asarray(image)[None], dtype=torch.float32))
        return m[0].double().numpy()


def in_mask_fraction(m_hoi: np.ndarray, masks: np.ndarray) -> float:
    """Mean share of attention mass on patches overlapping the cue mask."""
    rows, cols = m_hoi.shape[-2:]
    fr = []
    for m, mask in zip(m_hoi, masks):
        pooled = resize_map(mask, rows, cols, mode="adaptive_max") > 0
        fr.append(m[pooled].sum() / m.sum())
    return float(np.mean(fr))


@dataclass
class ToyResult:
    accuracy: float
    in_mask_fraction: float
    attention_maps: np.ndarray  # (N_test, 8, 8)
    loss_log: list[dict] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)


def train_toy_hoi(train: ToyData, test: ToyData, cfg: AlignmentConfig | None, seed: int = 0,
                  epochs: int = 30, batch_size: int = 32, lr: float = 1e-3,
                  targets: dict[str, np.ndarray] | None = None) -> ToyResult:
    """Train the toy host; ``cfg=None`` trains the plain classifier.

    The alignment target per sample is ``targets[sample_id]`` when given (IA
    pseudo labels, or a subset of human maps); otherwise the cue mask.
    Samples without a target contribute only the raw loss.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyHOIModel()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    x_all = torch.as_tensor(train.images, dtype=torch.float32)
    y_all = torch.as_tensor(train.labels, dtype=torch.long)
    rows, cols = model.grid
    pooled = np.zeros((len(train.ids), rows, cols))
    has = np.zeros(len(train.ids), dtype=bool)
    if cfg is not None:
        for i, sid in enumerate(train.ids):
            t = train.masks[i] if targets is None else targets.get(sid)
            if t is not None:
                pooled[i] = pool_target(t, rows, cols)
                has[i] = True
    pooled_t = torch.as_tensor(pooled, dtype=torch.float32)
    loss_log = []
    for epoch in range(epochs):
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(train.ids))
        total = 0.0
        for step, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            logits, m_hoi = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            if cfg is not None:
                sel = torch.as_tensor(has[idx])
                align = alignment_bce(m_hoi[sel], pooled_t[idx][sel]) if bool(sel.any()) else m_hoi.sum() * 0.0
                loss = combined_loss(loss, align, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, step, float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        loss_log.append({"epoch": epoch, "mean_loss": total / len(order)})
    model.eval()
    with torch.no_grad():
        logits, m_hoi = model(torch.as_tensor(test.images, dtype=torch.float32))
    acc = float((logits.argmax(1).numpy() == test.labels).mean())
    maps = m_hoi.double().numpy()
    return ToyResult(acc, in_mask_fraction(maps, test.masks), maps, loss_log, list(test.ids))

"""AdamW training loop with step decay, checkpoint resume and the ablation harness."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .data import fixations_to_heatmap, load_image
from .errors import ConfigError, TrainingDiverged, ValidationError
from .metrics import evaluate
from .model import MODULES, EncodedSample, IAConfig, bce, build_model, collate, encode_sample, param_census, upsample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 80
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    batch_size: int = 16
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr_decay_factor > 1:
            raise ConfigError("lr_decay_factor must be > 1")
        if self.lr_decay_every < 1 or self.batch_size < 1:
            raise ConfigError("lr_decay_every and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: divide by the decay factor every ``lr_decay_every`` epochs."""
    return cfg.lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class TrainItem:
    enc: EncodedSample
    target: np.ndarray


def prepare(records, backend, image_root=None, sigma=None, images=None) -> list[TrainItem]:
    """Encode samples once with the frozen backend and rasterize their targets."""
    items = []
    for sample, fix in records:
        if not fix.points:
            raise ValidationError(f"{sample.sample_id}: training samples need fixations")
        img = images[sample.sample_id] if images is not None else load_image(sample, image_root)
        enc = encode_sample(backend, sample, img)
        items.append(TrainItem(enc, fixations_to_heatmap(fix, sample.width, sample.height, sigma)))
    return items


def no_decay_names(model) -> list[str]:
    """Biases, norm scales and the per-channel ICB gate are exempt from weight decay."""
    out = []
    for name, p in model.named_parameters():
        if p.ndim <= 1:
            out.append(name)
    return out


def make_optimizer(model, cfg: TrainConfig):
    skip = set(no_decay_names(model))
    named = list(model.named_parameters())
    groups = [
        {"params": [p for n, p in named if n not in skip], "weight_decay": cfg.weight_decay},
        {"params": [p for n, p in named if n in skip], "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def check_compatible(backend, cfg: IAConfig) -> None:
    pairs = {"text_dim": backend.text_dim, "visual_dim": backend.visual_dim,
             "patch_size": backend.patch_size, "image_size": backend.image_size}
    bad = {k: (v, getattr(cfg, k)) for k, v in pairs.items() if getattr(cfg, k) != v}
    if bad:
        raise ConfigError(f"encoder and model disagree (encoder, model): {bad}")


class Trainer:
    def __init__(self, items: list[TrainItem], model, cfg: TrainConfig, optimizer=None, epoch: int = 0):
        if not items:
            raise ValidationError("training set is empty")
        self.items = items
        self.model = model
        self.cfg = cfg
        self.optimizer = optimizer or make_optimizer(model, cfg)
        self.epoch = epoch
        self.log: list[dict] = []
        dtype = next(model.parameters()).dtype
        self._targets = [torch.as_tensor(it.target, dtype=dtype) for it in items]

    def batch_loss(self, idx) -> torch.Tensor:
        dtype = next(self.model.parameters()).dtype
        text, boxes, tokens, sizes = collate([self.items[i].enc for i in idx], dtype)
        preds = self.model.predict_maps(text, boxes, tokens, sizes)
        return torch.stack([bce(p, self._targets[i]) for p, i in zip(preds, idx)]).mean()

    def run_epoch(self) -> dict:
        e = self.epoch
        lr = lr_at(self.cfg, e)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        order = np.random.default_rng([self.cfg.seed, e]).permutation(len(self.items))
        losses = []
        for step, start in enumerate(range(0, len(order), self.cfg.batch_size)):
            idx = order[start:start + self.cfg.batch_size].tolist()
            self.optimizer.zero_grad()
            loss = self.batch_loss(idx)
            if not torch.isfinite(loss):
                raise TrainingDiverged(e, step, float(loss.detach()))
            loss.backward()
            self.optimizer.step()
            losses.append(float(loss.detach()) * len(idx))
        row = {"epoch": e, "lr": lr, "mean_loss": sum(losses) / len(order)}
        self.log.append(row)
        self.epoch += 1
        log.debug("epoch %d lr %.3g loss %.6f", e, lr, row["mean_loss"])
        return row

    def fit(self, epochs: int | None = None) -> list[dict]:
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            self.run_epoch()
        return self.log

    def eval_loss(self) -> float:
        self.model.eval()
        with torch.no_grad():
            return float(self.batch_loss(list(range(len(self.items)))))


def train(items: list[TrainItem], model_cfg: IAConfig, cfg: TrainConfig, model=None):
    """Train from a seeded init (or ``model``); returns ``(model, loss_log)``."""
    if model is None:
        model = build_model(model_cfg, seed=cfg.seed, dtype=cfg.torch_dtype)
    trainer = Trainer(items, model, cfg)
    trainer.fit()
    return model, trainer.log


def predict_items(model, items: list[TrainItem]) -> dict[str, np.ndarray]:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = {}
    with torch.no_grad():
        for it in items:
            text, boxes, tokens, sizes = collate([it.enc], dtype)
            out[it.enc.sample_id] = model.predict_maps(text, boxes, tokens, sizes)[0].double().numpy()
    return out


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

VARIANTS = {"full": [], "w/o PA": ["PA"], "w/o VA": ["VA"], "w/o HOCB": ["HOCB"], "w/o ICB": ["ICB"]}


def parse_variant(name: str) -> str:
    key = name.strip().lower().replace("_", " ").replace("-", " ")
    for prefix in ("w/o ", "wo ", "no ", "without "):
        if key.startswith(prefix):
            mod = key[len(prefix):].strip().upper()
            if mod in MODULES:
                return f"w/o {mod}"
    if key == "full":
        return "full"
    raise ValueError(f"unknown ablation variant {name!r}; choose from {list(VARIANTS)}")


def ablate(train_items, eval_records, predict_items_for_eval, model_cfg: IAConfig, cfg: TrainConfig,
           variants=tuple(VARIANTS), sigma=None) -> list[dict]:
    """Train and evaluate each variant with identical seed and schedule.

    ``predict_items_for_eval`` are the encoded evaluation samples (usually the
    test side of a zero-shot split); ``eval_records`` their (sample, fixations).
    Each returned row holds the variant name, its metrics and its parameter count.
    """
    names = [parse_variant(v) for v in variants]
    rows = []
    for name in names:
        mcfg = replace(model_cfg, ablate=list(VARIANTS[name]))
        model, loss_log = train(train_items, mcfg, cfg)
        report, _ = evaluate(eval_records, predict_items(model, predict_items_for_eval), sigma=sigma)
        census = param_census(model)
        rows.append({"variant": name, "cc": report.cc, "kldiv": report.kldiv, "sim": report.sim,
                     "auc": report.auc, "final_loss": loss_log[-1]["mean_loss"],
                     "n_params": int(sum(math.prod(s) for s in census.values())),
                     "census": census})
    return rows

"""Unsupervised training loop: Adam, cosine-annealed learning rate, aligned
HR/LR patch sampling, checkpointing and ablation switches."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import losses as L
from .imagery import SceneTriplet, from_tensor, to_tensor
from .metrics import evaluate
from .network import ModelConfig, MossFuse, save_checkpoint

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_lsc", "no_aggregate", "no_repel", "concat_conv", "cross_attention",
             "no_lsct", "no_lsct2", "conv_de")
LOSS_CSV_FIELDS = ("step", "l_ma", "l_sc", "l_sct", "l_de", "total", "lr")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patch_size: int = 128
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    ablation: str = "full"
    random_crop: bool = False
    # learning-rate multiplier for the PSF parameters (eigenvalues, angle)
    psf_lr_mult: float = 20.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch <= config.epochs - 1:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs - 1}]")
    if config.epochs == 1:
        return config.lr_start
    if epoch == config.epochs - 1:
        return config.lr_end
    t = math.pi * epoch / (config.epochs - 1)
    return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1 + math.cos(t))


def build_model(config: ModelConfig, seed: int = 0) -> MossFuse:
    torch.manual_seed(seed)
    return MossFuse(config)


def apply_ablation(model: MossFuse, mode: str) -> MossFuse:
    """Architectural ablations rebuild the model with replaced aggregation or
    degradation modules; parameters of the untouched modules are carried over.
    Loss-only ablations return the model unchanged."""
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation {mode!r}")
    changes = {"concat_conv": {"aggregation": "concat_conv"},
               "cross_attention": {"aggregation": "cross_attention"},
               "conv_de": {"degradation": "conv"}}.get(mode)
    if changes is None:
        return model
    variant = MossFuse(replace(model.config, **changes))
    own = variant.state_dict()
    carried = {k: v for k, v in model.state_dict().items()
               if k in own and own[k].shape == v.shape}
    variant.load_state_dict(carried, strict=False)
    return variant


def loss_weights_for(mode, weights: L.LossWeights) -> L.LossWeights:
    if mode == "no_lsc":
        return replace(weights, alpha1=0.0)
    if mode == "no_lsct":
        return replace(weights, alpha2=0.0)
    return weights


def compute_losses(bundle, Y, x, model, mode="full", weights: L.LossWeights = None):
    weights = loss_weights_for(mode, weights or L.LossWeights())
    spatial, spectral = model.degradation.spatial, model.degradation.spectral
    if mode in ("no_aggregate", "no_repel"):
        l_sc = L.subspace_clustering_loss_variant(bundle.features, mode)
    else:
        l_sc = L.subspace_clustering_loss(bundle.features)
    recon = (bundle.recon_hrmsi, bundle.recon_lrhsi, bundle.recon_lrmsi)
    l_sct = L.sct_loss(Y, x, recon, spatial, spectral, include_lrmsi=(mode != "no_lsct2"))
    l_de = L.degradation_loss(Y, x, spatial, spectral)
    l_ma = L.aggregation_loss(bundle.fused, Y, x, spatial, spectral)
    return L.total_loss(l_ma, l_sc, l_sct, l_de, weights)


def patch_offsets(height, width, size, scale, stride=None, rng=None):
    """HR offsets for ``size``-pixel patches, aligned to multiples of ``scale``."""
    if size % scale:
        raise ValueError(f"patch size {size} is not a multiple of scale {scale}")
    if rng is not None:
        rows = rng.integers(0, (height - size) // scale + 1) * scale
        cols = rng.integers(0, (width - size) // scale + 1) * scale
        return [(int(rows), int(cols))]
    stride = stride or size
    if stride % scale:
        raise ValueError("stride must be a multiple of scale")
    return [(r, c) for r in range(0, height - size + 1, stride)
            for c in range(0, width - size + 1, stride)]


def crop_pair(triplet: SceneTriplet, row, col, size):
    s = triplet.scale
    Y = triplet.hrmsi.data[row:row + size, col:col + size]
    x = triplet.lrhsi.data[row // s:(row + size) // s, col // s:(col + size) // s]
    return Y, x


@dataclass
class TrainResult:
    model: MossFuse
    log: List[dict]
    final_metrics: Optional[dict] = None
    checkpoints: List[str] = field(default_factory=list)


def _dump_state(out_dir, step, report, model):
    if out_dir is None:
        return
    path = Path(out_dir) / "diverged_state.json"
    state = {"step": step, "losses": report.as_floats(),
             "nonfinite_params": [n for n, p in model.named_parameters()
                                  if not torch.isfinite(p).all()]}
    path.write_text(json.dumps(state, indent=2))


@torch.no_grad()
def fuse_scene(model: MossFuse, triplet: SceneTriplet):
    model.eval()
    bundle = model(to_tensor(triplet.hrmsi), to_tensor(triplet.lrhsi))
    return from_tensor(bundle.fused, triplet.lrhsi.wavelengths), bundle


def train(model: MossFuse, triplets: List[SceneTriplet], config: TrainConfig,
          out_dir=None, log_every: int = 0) -> TrainResult:
    if not triplets:
        raise ValueError("no training scenes")
    cfg = model.config
    for t in triplets:
        if (t.hrmsi.bands != cfg.msi_bands or t.lrhsi.bands != cfg.hsi_bands
                or t.scale != cfg.scale):
            raise ValueError("scene dimensions do not match the model configuration")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed) if config.random_crop else None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    degr = model.degradation
    psf_params = [p for n, p in degr.named_parameters() if n in ("raw_lambda", "theta")]
    other_degr = [p for p in degr.parameters() if all(p is not q for q in psf_params)]
    groups = [{"params": model.network_parameters() + other_degr, "lr_mult": 1.0}]
    if psf_params:
        groups.append({"params": psf_params, "lr_mult": config.psf_lr_mult})
    opt = torch.optim.Adam(groups, lr=config.lr_start, betas=config.betas, eps=config.eps)

    records, checkpoints = [], []
    step = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        for g in opt.param_groups:
            g["lr"] = lr * g["lr_mult"]
        model.train()
        for t in triplets:
            size = min(config.patch_size, t.hrmsi.height, t.hrmsi.width)
            size -= size % t.scale
            for row, col in patch_offsets(t.hrmsi.height, t.hrmsi.width, size, t.scale, rng=rng):
                Y_np, x_np = crop_pair(t, row, col, size)
                Y, x = to_tensor(Y_np), to_tensor(x_np)
                bundle = model(Y, x)
                report = compute_losses(bundle, Y, x, model, config.ablation, config.weights)
                if not torch.isfinite(report.total):
                    _dump_state(out_dir, step, report, model)
                    raise TrainingDivergedError(f"non-finite loss at step {step}: "
                                                f"{report.as_floats()}")
                opt.zero_grad()
                report.total.backward()
                opt.step()
                degr.clamp_()
                rec = {"step": step, **report.as_floats(), "lr": lr}
                records.append(rec)
                if log_every and step % log_every == 0:
                    log.info("step %d total %.5f ma %.5f sc %.4f sct %.5f de %.5f", step,
                             rec["total"], rec["l_ma"], rec["l_sc"], rec["l_sct"], rec["l_de"])
                step += 1
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            path = out_dir / f"checkpoint_epoch{epoch + 1:04d}.npz"
            save_checkpoint(model, path, {"epoch": epoch + 1})
            checkpoints.append(str(path))

    model.eval()
    final = report = None
    if triplets[0].truth is not None:
        fused, _ = fuse_scene(model, triplets[0])
        report = evaluate(triplets[0].truth, fused, triplets[0].scale)
        final = asdict(report)
    if out_dir is not None:
        path = out_dir / "checkpoint.npz"
        save_checkpoint(model, path, {"epoch": config.epochs, "train_config": config.to_dict()})
        checkpoints.append(str(path))
        write_loss_log(records, out_dir / "losses.csv")
        summary = {"final_metrics": report.to_json_dict() if report else None, "steps": step}
        (out_dir / "train_summary.json").write_text(json.dumps(summary, indent=2))
    return TrainResult(model, records, final, checkpoints)


def write_loss_log(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in records:
            w.writerow(r)

"""The full decouple / self-reconstruct / estimate / aggregate fusion model."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import degradation as deg
from .blocks import AGGREGATORS, LKCNNBlock, SWTBlock
from .imagery import cubic_matrix

CHECKPOINT_MAGIC = "MOSSFUSE-CKPT-1"


class DegradationUnavailableError(RuntimeError):
    """The model variant has no physically parameterized degradation to report."""


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    hsi_bands: int
    msi_bands: int
    scale: int
    width: int = 32
    heads: int = 4
    base_blocks: int = 4
    decoder_blocks: int = 2
    fused_decoder_blocks: int = 4
    large_kernel: int = 13
    branches: Tuple[Tuple[int, int], ...] = ((5, 1), (3, 2), (3, 3))
    psf_kernel_size: Optional[int] = None
    aggregation: str = "gated"  # gated | concat_conv | cross_attention
    degradation: str = "agk"  # agk | conv
    # add the upsampled LR-HSI to the fused decoder output (near-zero initial head)
    fused_residual: bool = True

    def __post_init__(self):
        self.branches = tuple(tuple(int(v) for v in b) for b in self.branches)
        if self.aggregation not in AGGREGATORS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.degradation not in ("agk", "conv"):
            raise ValueError(f"unknown degradation model {self.degradation!r}")
        if self.psf_kernel_size is None:
            lam = init_psf_variance(self.scale)
            self.psf_kernel_size = max(3, deg.default_kernel_size(lam, lam))

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def init_psf_variance(scale):
    return (0.5 * scale) ** 2


def inverse_softplus(y):
    return y + math.log(-math.expm1(-y))


@dataclass
class DecoupledFeatures:
    shared_Y: torch.Tensor
    comp_Y: torch.Tensor
    shared_x: torch.Tensor
    comp_x: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in self.as_tuple()}
        if len(shapes) != 1:
            raise ValueError(f"decoupled features differ in shape: {shapes}")

    def as_tuple(self):
        return self.shared_Y, self.comp_Y, self.shared_x, self.comp_x


@dataclass
class ForwardBundle:
    fused: torch.Tensor
    recon_hrmsi: torch.Tensor
    recon_lrhsi: torch.Tensor
    recon_lrmsi: torch.Tensor
    features: DecoupledFeatures
    lrhsi_up: torch.Tensor
    est_psf: Optional[deg.PSFParams] = None
    est_srf: Optional[deg.SRFMatrix] = None
    extras: dict = field(default_factory=dict)


@lru_cache(maxsize=64)
def _cubic(n, factor):
    return torch.from_numpy(cubic_matrix(n, factor))


def upsample_t(x, factor):
    """Bicubic upsampling of an (N, C, h, w) tensor, same kernel as ``imagery.upsample``."""
    if factor == 1:
        return x
    mh = _cubic(x.shape[-2], factor).to(x.dtype)
    mw = _cubic(x.shape[-1], factor).to(x.dtype)
    return torch.einsum("ih,nchw,jw->ncij", mh, x, mw)


class AGKDegradation(nn.Module):
    """Learnable anisotropic Gaussian PSF and clamped, sum-to-one SRF."""

    def __init__(self, hsi_bands, msi_bands, scale, kernel_size):
        super().__init__()
        self.scale = scale
        self.kernel_size = kernel_size
        lam = init_psf_variance(scale)
        self.raw_lambda = nn.Parameter(torch.full((2,), inverse_softplus(lam)))
        self.theta = nn.Parameter(torch.zeros(()))
        self.raw_srf = nn.Parameter(torch.full((hsi_bands, msi_bands), 1.0 / hsi_bands))

    def lambdas(self):
        return F.softplus(self.raw_lambda)

    def kernel(self):
        l1, l2 = self.lambdas()
        return deg.agk_kernel_t(l1, l2, self.theta, self.kernel_size)

    def srf(self):
        return deg.project_srf_t(self.raw_srf)

    def spatial(self, x):
        return deg.spatial_degrade_t(x, self.kernel().to(x.dtype), self.scale)

    def spectral(self, x):
        return deg.spectral_degrade_t(x, self.srf())

    @torch.no_grad()
    def clamp_(self):
        self.raw_srf.clamp_(min=0.0)

    def estimate(self):
        with torch.no_grad():
            l1, l2 = (float(v) for v in self.lambdas())
            theta = float(self.theta)
        psf = deg.PSFParams(l1, l2, theta, self.kernel_size, self.scale)
        return psf, deg.project_srf(self.raw_srf.detach().double().cpu().numpy())


class ConvDegradation(nn.Module):
    """Unconstrained learned convolutions standing in for PSF and SRF."""

    def __init__(self, hsi_bands, msi_bands, scale, kernel_size):
        super().__init__()
        self.scale = scale
        lam = init_psf_variance(scale)
        params = deg.PSFParams(lam, lam, 0.0, kernel_size, scale)
        init = torch.from_numpy(deg.build_agk_kernel(params)).float()
        self.spatial_conv = nn.Parameter(init.clone())
        self.spectral_conv = nn.Parameter(torch.full((hsi_bands, msi_bands), 1.0 / hsi_bands))

    def kernel(self):
        return self.spatial_conv

    def srf(self):
        return self.spectral_conv

    def spatial(self, x):
        return deg.spatial_degrade_t(x, self.spatial_conv.to(x.dtype), self.scale)

    def spectral(self, x):
        return deg.spectral_degrade_t(x, self.spectral_conv)

    def clamp_(self):
        pass

    def estimate(self):
        raise DegradationUnavailableError("conv degradation variant has no PSF/SRF parameters")


class Decoder(nn.Module):
    def __init__(self, width, out_channels, blocks, heads):
        super().__init__()
        self.body = nn.Sequential(*[SWTBlock(width, heads) for _ in range(blocks)])
        self.out = nn.Conv2d(width, out_channels, 3, padding=1)

    def forward(self, x):
        return self.out(self.body(x))


class Encoder(nn.Module):
    def __init__(self, in_channels, width, blocks, heads):
        super().__init__()
        self.embed = nn.Conv2d(in_channels, width, 3, padding=1)
        self.body = nn.Sequential(*[SWTBlock(width, heads) for _ in range(blocks)])

    def forward(self, x):
        return self.body(self.embed(x))


class MossFuse(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, j = config.width, config.heads
        lk = dict(large_kernel=config.large_kernel, branches=config.branches)

        self.base_Y = Encoder(config.msi_bands, c, config.base_blocks, j)
        self.base_x = Encoder(config.hsi_bands, c, config.base_blocks, j)
        self.comp_enc_Y = LKCNNBlock(c, **lk)
        self.comp_enc_x = SWTBlock(c, j)
        self.shared_enc_Y = nn.Sequential(LKCNNBlock(c, **lk), SWTBlock(c, j))
        self.shared_enc_x = nn.Sequential(LKCNNBlock(c, **lk), SWTBlock(c, j))
        self.shared_fuse = nn.Conv2d(2 * c, c, 1)

        spa, spe = AGGREGATORS[config.aggregation]
        self.agg_Y = spa(c, j)
        self.agg_x = spe(c, j)
        self.agg_X_spa = spa(c, j)
        self.agg_X_spe = spe(c, j)

        self.dec_Y = Decoder(c, config.msi_bands, config.decoder_blocks, j)
        self.dec_x = Decoder(c, config.hsi_bands, config.decoder_blocks, j)
        self.dec_y = Decoder(c, config.msi_bands, config.decoder_blocks, j)
        self.dec_X = Decoder(c, config.hsi_bands, config.fused_decoder_blocks, j)
        if config.fused_residual:
            # start close to the bicubic estimate; small rather than zero so the
            # decoder body still receives gradient at the first step
            with torch.no_grad():
                self.dec_X.out.weight.mul_(0.01)
                self.dec_X.out.bias.zero_()

        degr = AGKDegradation if config.degradation == "agk" else ConvDegradation
        self.degradation = degr(config.hsi_bands, config.msi_bands, config.scale,
                                config.psf_kernel_size)

    def network_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("degradation.")]

    def degradation_parameters(self):
        return list(self.degradation.parameters())

    def decouple(self, hrmsi, lrhsi_up):
        if hrmsi.shape[-2:] != lrhsi_up.shape[-2:]:
            raise ValueError(f"HR-MSI {tuple(hrmsi.shape[-2:])} and upsampled LR-HSI "
                             f"{tuple(lrhsi_up.shape[-2:])} differ in spatial size")
        fb_Y = self.base_Y(hrmsi)
        fb_x = self.base_x(lrhsi_up)
        return DecoupledFeatures(
            shared_Y=self.shared_enc_Y(fb_Y),
            comp_Y=self.comp_enc_Y(fb_Y),
            shared_x=self.shared_enc_x(fb_x),
            comp_x=self.comp_enc_x(fb_x),
        )

    def reconstruct_inputs(self, feats: DecoupledFeatures):
        s = self.config.scale
        f_Y = self.agg_Y(feats.shared_Y, feats.comp_Y)
        f_x = self.agg_x(feats.shared_x, feats.comp_x)
        f_y = self.shared_fuse(torch.cat([feats.shared_Y, feats.shared_x], dim=1))
        y_hat = self.dec_Y(f_Y)
        x_hat = F.avg_pool2d(self.dec_x(f_x), s) if s > 1 else self.dec_x(f_x)
        lrmsi_hat = F.avg_pool2d(self.dec_y(f_y), s) if s > 1 else self.dec_y(f_y)
        return y_hat, x_hat, lrmsi_hat

    def aggregate(self, feats: DecoupledFeatures, lrhsi_up=None):
        f = self.agg_X_spa(feats.shared_Y + feats.shared_x, feats.comp_Y)
        f = self.agg_X_spe(f, feats.comp_x)
        out = self.dec_X(f)
        if self.config.fused_residual:
            if lrhsi_up is None:
                raise ValueError("fused_residual models need the upsampled LR-HSI")
            out = out + lrhsi_up
        return out

    def estimate_degradation(self):
        return self.degradation.estimate()

    def forward(self, hrmsi, lrhsi) -> ForwardBundle:
        s = self.config.scale
        if hrmsi.shape[-2] != lrhsi.shape[-2] * s or hrmsi.shape[-1] != lrhsi.shape[-1] * s:
            raise ValueError("HR-MSI size must be LR-HSI size times the scale")
        lrhsi_up = upsample_t(lrhsi, s)
        feats = self.decouple(hrmsi, lrhsi_up)
        y_hat, x_hat, lrmsi_hat = self.reconstruct_inputs(feats)
        fused = self.aggregate(feats, lrhsi_up)
        psf = srf = None
        if self.config.degradation == "agk":
            psf, srf = self.estimate_degradation()
        return ForwardBundle(fused, y_hat, x_hat, lrmsi_hat, feats, lrhsi_up, psf, srf)

    def merge_reparam(self):
        """Fold every dilated-reparam stage into its single large kernel (inference only)."""
        for m in self.modules():
            if isinstance(m, LKCNNBlock):
                m.merge()
        return self


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: MossFuse, path, extra: Optional[dict] = None):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__magic__"] = np.array(CHECKPOINT_MAGIC)
    arrays["__config__"] = np.array(model.config.to_json())
    merged = any(m.reparam.is_merged for m in model.modules() if isinstance(m, LKCNNBlock))
    arrays["__meta__"] = np.array(json.dumps({"reparam_merged": merged, **(extra or {})}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, return_meta=False):
    try:
        with np.load(path, allow_pickle=False) as z:
            magic = str(z["__magic__"])
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"unsupported checkpoint version {magic!r}")
            config = ModelConfig.from_json(str(z["__config__"]))
            meta = json.loads(str(z["__meta__"]))
            state = {k[len("param/"):]: torch.from_numpy(z[k].copy())
                     for k in z.files if k.startswith("param/")}
    except (KeyError, OSError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    model = MossFuse(config)
    if meta.get("reparam_merged"):
        model.eval().merge_reparam()
    model.load_state_dict(state)
    model.eval()
    return (model, meta) if return_meta else model

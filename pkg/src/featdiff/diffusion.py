"""Latent diffusion: noise schedule, AdaLN transformer denoiser, training.

The denoiser runs 8 identical blocks over the latent token grid: timestep-
modulated self-attention, cross-attention to the table condition, and a
feed-forward sublayer (residual connections throughout).  Training uses the
noise-prediction objective with Min-SNR weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .condition import ConditionNet, FeatureGraph

__all__ = [
    "DiffusionSchedule",
    "DenoiserConfig",
    "Denoiser",
    "DivergenceDetected",
    "linear_schedule",
    "forward_noise",
    "min_snr_weight",
    "ldm_loss",
    "train_ldm",
]


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray  # (T,)
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def t_train(self) -> int:
        return len(self.beta)

    def snr(self, t: np.ndarray | int) -> np.ndarray:
        ab = self.alpha_bar[np.asarray(t) - 1]
        return ab / (1.0 - ab)


def linear_schedule(t_train: int = 1000, beta_1: float = 1e-4,
                    beta_t: float = 0.02) -> DiffusionSchedule:
    beta = np.linspace(beta_1, beta_t, t_train)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_noise(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                  schedule: DiffusionSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps; t is 1-based."""
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype)[t - 1]
    while ab.ndim < z0.ndim:
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def min_snr_weight(snr: torch.Tensor, gamma_snr: float = 5.0) -> torch.Tensor:
    """min(SNR, gamma)/SNR; in (0, 1], equal to 1 where SNR <= gamma."""
    return torch.clamp(snr, max=gamma_snr) / snr


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.dtype)
    args = t[:, None].to(freqs.dtype) * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass(frozen=True)
class DenoiserConfig:
    m: int = 4  # latent tokens
    d_latent: int = 32
    n_blocks: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    d_c: int = 128
    t_emb_dim: int = 128


class _Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm_sa = nn.LayerNorm(d, elementwise_affine=False)
        self.norm_ca = nn.LayerNorm(d, elementwise_affine=False)
        self.sa = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.ca = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True,
                                        kdim=cfg.d_c, vdim=cfg.d_c)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, d))
        self.norm_ffn = nn.LayerNorm(d)
        # per-block scale/shift for the two AdaLN sites
        self.modulation = nn.Linear(cfg.t_emb_dim, 4 * d)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, h: torch.Tensor, c: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        s1, b1, s2, b2 = self.modulation(t_emb).unsqueeze(1).chunk(4, dim=-1)
        x = self.norm_sa(h) * (1 + s1) + b1
        h = h + self.sa(x, x, x, need_weights=False)[0]
        x = self.norm_ca(h) * (1 + s2) + b2
        h = h + self.ca(x, c, c, need_weights=False)[0]
        return h + self.ffn(self.norm_ffn(h))


class Denoiser(nn.Module):
    """Predicts the added noise from (z_t, t, condition c)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.d_latent, cfg.d_model)
        self.pos = nn.Parameter(torch.randn(cfg.m, cfg.d_model) * 0.02)
        self.t_mlp = nn.Sequential(
            nn.Linear(cfg.t_emb_dim, cfg.t_emb_dim), nn.SiLU(),
            nn.Linear(cfg.t_emb_dim, cfg.t_emb_dim),
        )
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_blocks))
        self.out_norm = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.d_latent)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if z_t.shape[-2:] != (self.cfg.m, self.cfg.d_latent):
            raise ValueError(
                f"latent shape {tuple(z_t.shape[-2:])} != ({self.cfg.m}, {self.cfg.d_latent})"
            )
        if c.ndim == 2:
            c = c.unsqueeze(1)  # single condition token
        t_emb = self.t_mlp(timestep_embedding(t.to(z_t.dtype), self.cfg.t_emb_dim))
        h = self.in_proj(z_t) + self.pos
        for block in self.blocks:
            h = block(h, c, t_emb)
        return self.out_proj(self.out_norm(h))


def ldm_loss(model: Denoiser, z0: torch.Tensor, c: torch.Tensor,
             schedule: DiffusionSchedule, generator: torch.Generator | None = None,
             gamma_snr: float = 5.0) -> torch.Tensor:
    """Min-SNR-weighted noise-prediction loss on a batch of clean latents."""
    B = z0.shape[0]
    t = torch.randint(1, schedule.t_train + 1, (B,), generator=generator)
    eps = torch.empty_like(z0).normal_(generator=generator)
    z_t = forward_noise(z0, t, eps, schedule)
    eps_hat = model(z_t, t, c)
    snr = torch.as_tensor(schedule.snr(t.numpy()), dtype=z0.dtype)
    w = min_snr_weight(snr, gamma_snr)
    per_sample = (eps - eps_hat).pow(2).flatten(1).sum(dim=1)
    return (w * per_sample).mean()


@dataclass
class LdmTrainResult:
    history: list[dict] = field(default_factory=list)


def train_ldm(latents: torch.Tensor, graphs: list[FeatureGraph],
              denoiser: Denoiser, cond_net: ConditionNet,
              schedule: DiffusionSchedule, seed: int, epochs: int = 800,
              batch_size: int = 64, lr: float = 1e-3,
              gamma_snr: float = 5.0, log_every: int = 0) -> LdmTrainResult:
    """Joint training of the denoiser and the GCN condition branch.

    `latents` are standardized encoder means, one per record, aligned with
    `graphs` (the correlation graph of each record's transformed table).
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = list(denoiser.parameters()) + list(cond_net.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    n = latents.shape[0]
    result = LdmTrainResult()
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        nb = 0
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            c = torch.cat([cond_net.forward_graph(graphs[i]).c for i in idx], dim=0)
            loss = ldm_loss(denoiser, latents[idx], c, schedule, gen, gamma_snr)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"non-finite diffusion loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            nb += 1
        result.history.append({"epoch": epoch, "loss": total / nb})
        if log_every and epoch % log_every == 0:
            print(f"ldm epoch {epoch}: loss={total / nb:.4f}")
    return result

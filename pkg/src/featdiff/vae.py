"""Sequence VAE over feature-set token sequences.

Encoder: transformer over the flat (SEP-joined) token sequence; m learned
query tokens cross-attend to pool a grid of latent tokens, projected to
(mu, logvar).

Decoder (default, semi-autoregressive): a count head predicts the number of
feature chunks from z, then all chunks decode in parallel, each
autoregressively from BOS.  Chunks are independent given z by construction:
each chunk is a separate sequence in the folded batch.

Ablation decoders: "ar" decodes the flat sequence token-by-token; "nar"
emits every chunk/position distribution in a single forward pass.

An evaluator head regresses normalized downstream performance from pooled z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .expr import OPERATOR_NAMES, OPERATORS, FeatureExpr, FeatureSet
from .collector import TrainingRecord

__all__ = [
    "Vocab",
    "VaeConfig",
    "LatentEmbedding",
    "FeatureSetVAE",
    "SequenceTooLong",
    "kl_loss",
    "train_vae",
    "reconstruction_accuracy",
]

PAD, BOS, EOS, SEP = 0, 1, 2, 3


class SequenceTooLong(ValueError):
    pass


class Vocab:
    """Token ids: PAD, BOS, EOS, SEP, operators, then f1..fn."""

    def __init__(self, n_features: int):
        self.n_features = n_features
        self.tokens = ["<pad>", "<bos>", "<eos>", ","] + list(OPERATOR_NAMES) + [
            f"f{i + 1}" for i in range(n_features)
        ]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_chunk(self, expr: FeatureExpr) -> list[int]:
        return [self.index[t] for t in expr.tokens]

    def surface(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass(frozen=True)
class VaeConfig:
    n_features: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    n_dec_layers: int = 2
    m: int = 4  # latent tokens
    d_latent: int = 32
    t_max: int = 16
    l_max: int = 9
    alpha: float = 1.0  # count-loss weight
    beta: float = 1.0  # evaluator-loss weight
    gamma: float = 0.01  # KL weight (annealed from 0)
    decoder: str = "sar"  # sar | ar | nar

    @property
    def vocab_size(self) -> int:
        return 4 + len(OPERATOR_NAMES) + self.n_features

    @property
    def max_flat_len(self) -> int:
        # tokens + SEP separators + final EOS
        return self.t_max * self.l_max + self.t_max


@dataclass
class LatentEmbedding:
    mu: torch.Tensor  # (B, m, d_latent)
    logvar: torch.Tensor
    z: torch.Tensor


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over latent dims, batch-mean."""
    per_dim = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)
    return per_dim.flatten(1).sum(dim=1).mean()


class FeatureSetVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = Vocab(cfg.n_features)
        d = cfg.d_model
        self.token_emb = nn.Embedding(cfg.vocab_size, d, padding_idx=PAD)
        self.enc_pos = nn.Parameter(torch.randn(cfg.max_flat_len, d) * 0.02)
        enc_layer = nn.TransformerEncoderLayer(
            d, cfg.n_heads, dim_feedforward=4 * d, dropout=0.0, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.n_layers)
        self.latent_queries = nn.Parameter(torch.randn(cfg.m, d) * 0.02)
        self.pool_attn = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
        self.to_stats = nn.Linear(d, 2 * cfg.d_latent)

        self.count_head = nn.Sequential(
            nn.Linear(cfg.d_latent, d), nn.ReLU(), nn.Linear(d, cfg.t_max)
        )
        self.mem_proj = nn.Linear(cfg.d_latent, d)
        dec_layer = nn.TransformerDecoderLayer(
            d, cfg.n_heads, dim_feedforward=4 * d, dropout=0.0, batch_first=True
        )
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.n_dec_layers)
        self.dec_pos = nn.Parameter(torch.randn(cfg.l_max + 1, d) * 0.02)
        self.chunk_emb = nn.Parameter(torch.randn(cfg.t_max, d) * 0.02)
        self.ar_pos = nn.Parameter(torch.randn(cfg.max_flat_len + 1, d) * 0.02)
        self.out_head = nn.Linear(d, cfg.vocab_size)

        self.evaluator = nn.Sequential(
            nn.Linear(cfg.d_latent, 64), nn.ReLU(), nn.Linear(64, 1)
        )

    # ---------------- batching helpers ----------------

    def flat_ids(self, sets: list[FeatureSet]) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad flat SEP-joined token sequences; returns (ids, pad_mask)."""
        rows = []
        for fs in sets:
            ids: list[int] = []
            for i, e in enumerate(fs.exprs):
                if i:
                    ids.append(SEP)
                ids.extend(self.vocab.encode_chunk(e))
            if len(ids) > self.cfg.max_flat_len:
                raise SequenceTooLong(f"flat length {len(ids)} > {self.cfg.max_flat_len}")
            rows.append(ids)
        maxlen = max(len(r) for r in rows)
        ids = torch.full((len(rows), maxlen), PAD, dtype=torch.int64)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
        return ids, ids.eq(PAD)

    def chunk_ids(self, sets: list[FeatureSet]) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forcing tensors: inputs (BOS + tokens) and targets
        (tokens + EOS), shape (B, t_max, l_max + 1), PAD-filled."""
        cfg = self.cfg
        B = len(sets)
        inp = torch.full((B, cfg.t_max, cfg.l_max + 1), PAD, dtype=torch.int64)
        tgt = torch.full((B, cfg.t_max, cfg.l_max + 1), PAD, dtype=torch.int64)
        for i, fs in enumerate(sets):
            if fs.count > cfg.t_max:
                raise SequenceTooLong(f"{fs.count} chunks > t_max={cfg.t_max}")
            for t, e in enumerate(fs.exprs):
                if len(e) > cfg.l_max:
                    raise SequenceTooLong(f"chunk length {len(e)} > l_max={cfg.l_max}")
                ids = self.vocab.encode_chunk(e)
                inp[i, t, 0] = BOS
                inp[i, t, 1 : len(ids) + 1] = torch.tensor(ids)
                tgt[i, t, : len(ids)] = torch.tensor(ids)
                tgt[i, t, len(ids)] = EOS
        return inp, tgt

    # ---------------- encoder ----------------

    def encode(self, sets: list[FeatureSet], sample: bool = False,
               generator: torch.Generator | None = None) -> LatentEmbedding:
        ids, pad_mask = self.flat_ids(sets)
        h = self.token_emb(ids) + self.enc_pos[: ids.shape[1]]
        h = self.encoder(h, src_key_padding_mask=pad_mask)
        q = self.latent_queries.unsqueeze(0).expand(len(sets), -1, -1)
        pooled, _ = self.pool_attn(q, h, h, key_padding_mask=pad_mask)
        mu, logvar = self.to_stats(pooled).chunk(2, dim=-1)
        if sample:
            eps = torch.empty_like(mu).normal_(generator=generator)
            z = mu + torch.exp(0.5 * logvar) * eps
        else:
            z = mu
        return LatentEmbedding(mu=mu, logvar=logvar, z=z)

    # ---------------- evaluator ----------------

    def evaluator_forward(self, z: torch.Tensor) -> torch.Tensor:
        """Scalar performance prediction from pooled latent tokens."""
        return self.evaluator(z.mean(dim=1)).squeeze(-1)

    def evaluator_loss(self, z: torch.Tensor, y_norm: torch.Tensor) -> torch.Tensor:
        return (self.evaluator_forward(z) - y_norm).pow(2).mean()

    # ---------------- decoders (training) ----------------

    def _count_logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.count_head(z.mean(dim=1))

    def _decode_chunks_logits(self, z: torch.Tensor, inp: torch.Tensor) -> torch.Tensor:
        """Parallel per-chunk decode; (B, t_max, L, vocab).  Each chunk is an
        independent sequence in the folded batch, so cross-chunk logits
        cannot interact."""
        B, T, L = inp.shape
        emb = self.token_emb(inp) + self.dec_pos[:L]
        # chunk-index embedding carried on the BOS slot
        bos_mask = inp.eq(BOS).unsqueeze(-1)
        emb = emb + bos_mask * self.chunk_emb[:T].unsqueeze(0).unsqueeze(2)
        emb = emb.reshape(B * T, L, -1)
        mem = self.mem_proj(z).repeat_interleave(T, dim=0)
        mask = nn.Transformer.generate_square_subsequent_mask(L, dtype=emb.dtype)
        h = self.decoder(emb, mem, tgt_mask=mask)
        return self.out_head(h).reshape(B, T, L, -1)

    def _decode_flat_logits(self, z: torch.Tensor, flat_inp: torch.Tensor) -> torch.Tensor:
        emb = self.token_emb(flat_inp) + self.ar_pos[: flat_inp.shape[1]]
        mem = self.mem_proj(z)
        mask = nn.Transformer.generate_square_subsequent_mask(
            flat_inp.shape[1], dtype=emb.dtype
        )
        h = self.decoder(emb, mem, tgt_mask=mask)
        return self.out_head(h)

    def _decode_nar_logits(self, z: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        B = z.shape[0]
        q = (self.chunk_emb[: cfg.t_max].unsqueeze(1) + self.dec_pos.unsqueeze(0)).reshape(
            1, cfg.t_max * (cfg.l_max + 1), -1
        )
        mem = self.mem_proj(z)
        h = self.decoder(q.expand(B, -1, -1), mem)
        return self.out_head(h).reshape(B, cfg.t_max, cfg.l_max + 1, -1)

    def decode_train(self, z: torch.Tensor, sets: list[FeatureSet]) -> tuple[torch.Tensor, torch.Tensor]:
        """(count_loss, recon_loss) with teacher forcing; recon is the
        per-sample token cross-entropy sum, batch-averaged."""
        counts = torch.tensor([fs.count - 1 for fs in sets])
        count_loss = F.cross_entropy(self._count_logits(z), counts)
        if self.cfg.decoder == "ar":
            ids, _ = self.flat_ids(sets)
            B, L = ids.shape
            flat_inp = torch.full((B, L + 1), PAD, dtype=torch.int64)
            flat_inp[:, 0] = BOS
            flat_inp[:, 1:] = ids
            flat_tgt = torch.full((B, L + 1), PAD, dtype=torch.int64)
            flat_tgt[:, :L] = ids
            lens = ids.ne(PAD).sum(dim=1)
            flat_tgt[torch.arange(B), lens] = EOS
            logits = self._decode_flat_logits(z, flat_inp)
            recon = F.cross_entropy(
                logits.reshape(-1, self.cfg.vocab_size),
                flat_tgt.reshape(-1),
                ignore_index=PAD,
                reduction="sum",
            ) / len(sets)
            return count_loss, recon
        inp, tgt = self.chunk_ids(sets)
        if self.cfg.decoder == "nar":
            logits = self._decode_nar_logits(z)
        else:
            logits = self._decode_chunks_logits(z, inp)
        recon = F.cross_entropy(
            logits.reshape(-1, self.cfg.vocab_size),
            tgt.reshape(-1),
            ignore_index=PAD,
            reduction="sum",
        ) / len(sets)
        return count_loss, recon

    def total_loss(self, sets: list[FeatureSet], y_norm: torch.Tensor,
                   sample: bool = True, generator: torch.Generator | None = None,
                   gamma_scale: float = 1.0) -> dict[str, torch.Tensor]:
        """Joint loss: recon + alpha*count + beta*evaluator + gamma*KL."""
        cfg = self.cfg
        lat = self.encode(sets, sample=sample, generator=generator)
        count_loss, recon = self.decode_train(lat.z, sets)
        eva = self.evaluator_loss(lat.z, y_norm)
        kl = kl_loss(lat.mu, lat.logvar)
        total = recon + cfg.alpha * count_loss + cfg.beta * eva + cfg.gamma * gamma_scale * kl
        return {"total": total, "recon": recon, "count": count_loss, "eva": eva, "kl": kl}

    # ---------------- decoders (inference) ----------------

    def _pick(self, logits: torch.Tensor, mode: str,
              generator: torch.Generator | None) -> torch.Tensor:
        if mode == "greedy":
            return logits.argmax(dim=-1)
        shape = logits.shape[:-1]
        probs = F.softmax(logits.reshape(-1, logits.shape[-1]), dim=-1)
        return torch.multinomial(probs, 1, generator=generator).reshape(shape)

    def _repair_chunk(self, ids: list[int]) -> FeatureExpr:
        """Longest valid postfix prefix; passthrough f1 when none exists."""
        tokens: list[str] = []
        for i in ids:
            if i in (PAD, BOS, EOS, SEP):
                break
            tokens.append(self.vocab.surface(i))
        depth = 0
        best = 0
        for k, tok in enumerate(tokens):
            if tok in OPERATORS:
                arity = OPERATORS[tok].arity
                if depth < arity:
                    break
                depth -= arity - 1
            else:
                depth += 1
            if depth == 1:
                best = k + 1
        if best == 0:
            return FeatureExpr(("f1",))
        return FeatureExpr(tuple(tokens[:best]))

    def decode_sar_with_stats(self, z: torch.Tensor, mode: str = "greedy",
                              generator: torch.Generator | None = None):
        """Count head, then all chunks in parallel; returns
        (feature_sets, n_sequential_passes, raw_chunk_ids)."""
        cfg = self.cfg
        B = z.shape[0]
        count_logits = self._count_logits(z)
        counts = self._pick(count_logits, mode, generator) + 1  # (B,)
        t_dec = int(counts.max())
        inp = torch.full((B, t_dec, cfg.l_max + 1), PAD, dtype=torch.int64)
        inp[:, :, 0] = BOS
        done = torch.zeros(B, t_dec, dtype=torch.bool)
        for t in range(t_dec):
            done[:, t] = counts <= t  # chunks beyond the predicted count are inert
        passes = 0
        raw: list[list[list[int]]] = [[[] for _ in range(t_dec)] for _ in range(B)]
        for k in range(cfg.l_max):
            if bool(done.all()):
                break
            logits = self._decode_chunks_logits(z, inp[:, :, : k + 1])
            passes += 1
            nxt = self._pick(logits[:, :, k, :], mode, generator)
            for b in range(B):
                for t in range(t_dec):
                    if done[b, t]:
                        continue
                    tok = int(nxt[b, t])
                    if tok == EOS:
                        done[b, t] = True
                    else:
                        raw[b][t].append(tok)
                        inp[b, t, k + 1] = tok
                        if k + 1 == cfg.l_max:
                            done[b, t] = True
        sets = []
        for b in range(B):
            n = int(counts[b])
            exprs = tuple(self._repair_chunk(raw[b][t]) for t in range(n))
            sets.append(FeatureSet(exprs))
        return sets, passes, raw

    def decode_sar(self, z: torch.Tensor, mode: str = "greedy",
                   generator: torch.Generator | None = None) -> list[FeatureSet]:
        sets, _, _ = self.decode_sar_with_stats(z, mode, generator)
        return sets

    def decode_ar_with_stats(self, z: torch.Tensor, mode: str = "greedy",
                             generator: torch.Generator | None = None):
        """Fully autoregressive flat decode (ablation); one pass per token."""
        cfg = self.cfg
        B = z.shape[0]
        seq = torch.full((B, cfg.max_flat_len + 1), PAD, dtype=torch.int64)
        seq[:, 0] = BOS
        done = torch.zeros(B, dtype=torch.bool)
        out: list[list[int]] = [[] for _ in range(B)]
        passes = 0
        for k in range(cfg.max_flat_len):
            if bool(done.all()):
                break
            logits = self._decode_flat_logits(z, seq[:, : k + 1])
            passes += 1
            nxt = self._pick(logits[:, k, :], mode, generator)
            for b in range(B):
                if done[b]:
                    continue
                tok = int(nxt[b])
                if tok == EOS:
                    done[b] = True
                else:
                    out[b].append(tok)
                    seq[b, k + 1] = tok
        sets = []
        for b in range(B):
            chunks: list[list[int]] = [[]]
            for tok in out[b]:
                if tok == SEP:
                    chunks.append([])
                else:
                    chunks[-1].append(tok)
            chunks = chunks[: cfg.t_max] or [[]]
            exprs = tuple(self._repair_chunk(c) for c in chunks)
            sets.append(FeatureSet(exprs))
        return sets, passes, out

    def decode_nar_with_stats(self, z: torch.Tensor, mode: str = "greedy",
                              generator: torch.Generator | None = None):
        """Single forward pass emits every chunk/position distribution."""
        counts = self._pick(self._count_logits(z), mode, generator) + 1
        logits = self._decode_nar_logits(z)
        toks = self._pick(logits, mode, generator)  # (B, t_max, l_max+1)
        sets = []
        for b in range(z.shape[0]):
            exprs = tuple(
                self._repair_chunk([int(i) for i in toks[b, t]])
                for t in range(int(counts[b]))
            )
            sets.append(FeatureSet(exprs))
        return sets, 1

    def decode_ablation(self, z: torch.Tensor, variant: str, mode: str = "greedy",
                        generator: torch.Generator | None = None) -> list[FeatureSet]:
        if variant == "AR":
            return self.decode_ar_with_stats(z, mode, generator)[0]
        if variant == "NAR":
            return self.decode_nar_with_stats(z, mode, generator)[0]
        raise ValueError(f"unknown variant {variant!r}")


def train_vae(records: list[TrainingRecord], cfg: VaeConfig, seed: int,
              epochs: int = 300, batch_size: int = 64, lr: float = 1e-3,
              log_every: int = 0) -> tuple[FeatureSetVAE, list[dict]]:
    """Train on (feature set, y_norm) records; returns model + per-epoch rows.

    The KL weight anneals linearly from 0 over the first 10% of steps.
    """
    torch.manual_seed(seed)
    model = FeatureSetVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    sets = [r.fs for r in records]
    ys = torch.tensor([r.y_norm for r in records], dtype=torch.float32)
    n = len(records)
    steps_total = max(1, epochs * math.ceil(n / batch_size))
    warm = max(1, steps_total // 10)
    history = []
    step_i = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        sums = {"total": 0.0, "recon": 0.0, "count": 0.0, "eva": 0.0, "kl": 0.0}
        nb = 0
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            batch = [sets[i] for i in idx]
            losses = model.total_loss(
                batch, ys[idx], sample=True, generator=gen,
                gamma_scale=min(1.0, step_i / warm),
            )
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            step_i += 1
            nb += 1
            for k in sums:
                sums[k] += float(losses[k].detach())
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
        history.append(row)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
    return model, history


@torch.no_grad()
def reconstruction_accuracy(model: FeatureSetVAE, records: list[TrainingRecord],
                            batch_size: int = 64) -> dict[str, float]:
    """Free-running greedy decode vs ground truth: fraction of matching token
    positions and of exactly-predicted chunk counts."""
    model.eval()
    tok_hit = tok_total = cnt_hit = 0
    for s in range(0, len(records), batch_size):
        batch = [r.fs for r in records[s : s + batch_size]]
        lat = model.encode(batch, sample=False)
        if model.cfg.decoder == "ar":
            decoded = model.decode_ablation(lat.mu, "AR")
        elif model.cfg.decoder == "nar":
            decoded = model.decode_ablation(lat.mu, "NAR")
        else:
            decoded = model.decode_sar(lat.mu, mode="greedy")
        for fs, dec in zip(batch, decoded):
            cnt_hit += int(dec.count == fs.count)
            for t, e in enumerate(fs.exprs):
                tok_total += len(e)
                if t < dec.count:
                    got = dec.exprs[t].tokens
                    tok_hit += sum(
                        1 for k in range(min(len(e), len(got))) if e.tokens[k] == got[k]
                    )
    model.train()
    return {
        "token_accuracy": tok_hit / max(1, tok_total),
        "count_accuracy": cnt_hit / max(1, len(records)),
    }

"""Stage orchestration: config parsing, artifact persistence, hash chaining.

A run directory accumulates append-only stage outputs:

    corpus.jsonl, corpus_manifest.json      (collect)
    vae-<kind>/, vae-<kind>_loss.csv/.png   (train-vae; kind = sar|ar|nar)
    ldm-<kind>/, ldm-<kind>_loss.csv/.png   (train-ldm)
    generate/<variant>-seed<N>/             (generate: candidates, table, report)

Every stage records the SHA-256 of its inputs and refuses to consume files
whose on-disk hash no longer matches.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .checkpoint import (
    HashMismatch,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
    sha256_file,
    verify_hash,
    write_json,
)
from .collector import CollectorConfig, TrainingRecord, collect
from .condition import ConditionNet, build_graph
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    linear_schedule,
    train_ldm,
)
from .expr import evaluate, parse, serialize
from .tabular import RAW, Dataset, downstream_score, load_csv
from .report import plot_candidates, write_loss_curve
from .sampler import SamplerConfig, continuous_search_latent, ddim_sample
from .vae import FeatureSetVAE, VaeConfig, reconstruction_accuracy, train_vae

__all__ = [
    "ConfigError",
    "RunConfig",
    "VARIANTS",
    "stage_collect",
    "stage_train_vae",
    "stage_train_ldm",
    "stage_generate",
    "run_bench",
    "run_ablation",
]

VARIANTS = ("full", "AR", "NAR", "NoR", "CS")


class ConfigError(ValueError):
    pass


def variant_decoder(variant: str) -> str:
    return {"AR": "ar", "NAR": "nar"}.get(variant, "sar")


@dataclass
class RunConfig:
    data_path: str
    data_name: str
    seed: int = 0
    variant: str = "full"
    # collector
    episodes: int = 30
    steps: int = 8
    time_limit_s: float | None = None
    # vae
    vae_epochs: int = 300
    vae_batch: int = 64
    vae_lr: float = 1e-3
    d_model: int = 128
    n_layers: int = 4
    n_dec_layers: int = 2
    n_heads: int = 4
    m: int = 4
    d_latent: int = 32
    t_max: int = 16
    l_max: int = 9
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.01
    # ldm
    ldm_epochs: int = 800
    ldm_batch: int = 64
    ldm_lr: float = 1e-3
    t_train: int = 1000
    gamma_snr: float = 5.0
    n_blocks: int = 8
    ldm_d_model: int = 128
    ldm_n_heads: int = 4
    ldm_d_ff: int = 512
    d_c: int = 128
    gcn_hidden: int = 64
    d_g: int = 64
    # sampler
    n_candidates: int = 16
    sample_steps: int = 50
    lam: float = 100.0
    eta: float = 0.0
    rescore_top: int = 4
    cs_steps: int = 100
    cs_lr: float = 0.05

    @classmethod
    def load(cls, path) -> "RunConfig":
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        if "data" not in parser or "path" not in parser["data"]:
            raise ConfigError("config needs a [data] section with a 'path' key")
        data_path = parser["data"]["path"]
        cfg = cls(data_path=data_path,
                  data_name=parser["data"].get("name", Path(data_path).stem))

        def grab(section, key, attr, conv):
            if section in parser and key in parser[section]:
                raw = parser[section][key].strip()
                if raw == "":
                    return
                try:
                    setattr(cfg, attr, conv(raw))
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc

        grab("run", "seed", "seed", int)
        grab("run", "variant", "variant", str)
        grab("collector", "episodes", "episodes", int)
        grab("collector", "steps", "steps", int)
        grab("collector", "time_limit_s", "time_limit_s", float)
        grab("vae", "epochs", "vae_epochs", int)
        grab("vae", "batch", "vae_batch", int)
        grab("vae", "lr", "vae_lr", float)
        grab("vae", "d_model", "d_model", int)
        grab("vae", "n_layers", "n_layers", int)
        grab("vae", "n_dec_layers", "n_dec_layers", int)
        grab("vae", "n_heads", "n_heads", int)
        grab("vae", "m", "m", int)
        grab("vae", "d_latent", "d_latent", int)
        grab("vae", "t_max", "t_max", int)
        grab("vae", "l_max", "l_max", int)
        grab("vae", "alpha", "alpha", float)
        grab("vae", "beta", "beta", float)
        grab("vae", "gamma", "gamma", float)
        grab("ldm", "epochs", "ldm_epochs", int)
        grab("ldm", "batch", "ldm_batch", int)
        grab("ldm", "lr", "ldm_lr", float)
        grab("ldm", "t_train", "t_train", int)
        grab("ldm", "gamma_snr", "gamma_snr", float)
        grab("ldm", "n_blocks", "n_blocks", int)
        grab("ldm", "d_model", "ldm_d_model", int)
        grab("ldm", "n_heads", "ldm_n_heads", int)
        grab("ldm", "d_ff", "ldm_d_ff", int)
        grab("ldm", "d_c", "d_c", int)
        grab("ldm", "gcn_hidden", "gcn_hidden", int)
        grab("ldm", "d_g", "d_g", int)
        grab("sampler", "n_candidates", "n_candidates", int)
        grab("sampler", "n_steps", "sample_steps", int)
        grab("sampler", "lambda", "lam", float)
        grab("sampler", "eta", "eta", float)
        grab("sampler", "rescore_top", "rescore_top", int)
        grab("sampler", "cs_steps", "cs_steps", int)
        grab("sampler", "cs_lr", "cs_lr", float)
        if cfg.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
        return cfg

    def snapshot(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def vae_config(self, n_features: int, decoder: str) -> VaeConfig:
        return VaeConfig(
            n_features=n_features, d_model=self.d_model, n_heads=self.n_heads,
            n_layers=self.n_layers, n_dec_layers=self.n_dec_layers, m=self.m,
            d_latent=self.d_latent, t_max=self.t_max, l_max=self.l_max,
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, decoder=decoder,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            m=self.m, d_latent=self.d_latent, n_blocks=self.n_blocks,
            d_model=self.ldm_d_model, n_heads=self.ldm_n_heads,
            d_ff=self.ldm_d_ff, d_c=self.d_c,
        )


def _setup_determinism(seed: int) -> None:
    torch.set_num_threads(1)
    torch.manual_seed(seed)


# ---------------------------------------------------------------- collect


def stage_collect(cfg: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = out / "corpus.jsonl"
    if corpus_path.exists():
        raise ConfigError(f"{corpus_path} already exists; stage outputs are append-only")
    ds = load_csv(cfg.data_path, cfg.data_name)
    if ds.n_cols + cfg.steps > cfg.t_max:
        raise ConfigError(
            f"t_max={cfg.t_max} cannot hold {ds.n_cols} raw columns plus {cfg.steps} steps"
        )
    _setup_determinism(cfg.seed)
    ccfg = CollectorConfig(episodes=cfg.episodes, steps=cfg.steps,
                           l_max=cfg.l_max, time_limit_s=cfg.time_limit_s)
    result = collect(ds, ccfg, cfg.seed)
    with open(corpus_path, "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(
                {"sequence": serialize(rec.fs), "y_raw": rec.y_raw, "y_norm": rec.y_norm}
            ) + "\n")
    write_json(out / "corpus_manifest.json", {
        "stage": "collect",
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "dataset": {
            "path": str(cfg.data_path), "sha256": sha256_file(cfg.data_path),
            "n_rows": ds.n_rows, "n_cols": ds.n_cols, "task": ds.task,
        },
        "baseline": result.baseline,
        "truncated": result.truncated,
        "n_records": len(result.records),
        "corpus_sha256": sha256_file(corpus_path),
    })
    return corpus_path


def load_corpus(out) -> tuple[list[TrainingRecord], dict]:
    out = Path(out)
    manifest = json.loads((out / "corpus_manifest.json").read_text())
    verify_hash(out / "corpus.jsonl", manifest["corpus_sha256"], "corpus")
    n_features = manifest["dataset"]["n_cols"]
    records = []
    with open(out / "corpus.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            records.append(TrainingRecord(
                parse(row["sequence"], n_features), row["y_raw"], row["y_norm"]
            ))
    return records, manifest


# ---------------------------------------------------------------- train-vae


def stage_train_vae(cfg: RunConfig, out, kind: str | None = None) -> Path:
    out = Path(out)
    kind = kind or variant_decoder(cfg.variant)
    ckpt_dir = out / f"vae-{kind}"
    if ckpt_dir.exists():
        raise ConfigError(f"{ckpt_dir} already exists; stage outputs are append-only")
    records, corpus_manifest = load_corpus(out)
    _setup_determinism(cfg.seed)
    vcfg = cfg.vae_config(corpus_manifest["dataset"]["n_cols"], kind)
    model, history = train_vae(records, vcfg, cfg.seed, epochs=cfg.vae_epochs,
                               batch_size=cfg.vae_batch, lr=cfg.vae_lr)
    acc = reconstruction_accuracy(model, records)
    save_checkpoint(ckpt_dir, {
        "stage": "train-vae",
        "config": cfg.snapshot(),
        "vae_config": vcfg.__dict__,
        "seed": cfg.seed,
        "corpus_sha256": corpus_manifest["corpus_sha256"],
        "dataset_sha256": corpus_manifest["dataset"]["sha256"],
        "reconstruction": acc,
        "final_loss": history[-1],
    }, {"vae": model.state_dict()})
    write_loss_curve(history, out / f"vae-{kind}_loss.csv", out / f"vae-{kind}_loss.png",
                     f"VAE ({kind}) training loss: {cfg.data_name}")
    return ckpt_dir


def load_vae(out, kind: str) -> tuple[FeatureSetVAE, dict]:
    manifest, states = load_checkpoint(Path(out) / f"vae-{kind}")
    vcfg = VaeConfig(**manifest["vae_config"])
    model = FeatureSetVAE(vcfg)
    model.load_state_dict(states["vae"])
    model.eval()
    return model, manifest


# ---------------------------------------------------------------- train-ldm


def _encode_corpus_mu(model: FeatureSetVAE, records: list[TrainingRecord]) -> torch.Tensor:
    mus = []
    with torch.no_grad():
        for s in range(0, len(records), 64):
            batch = [r.fs for r in records[s : s + 64]]
            mus.append(model.encode(batch, sample=False).mu)
    return torch.cat(mus, dim=0)


def stage_train_ldm(cfg: RunConfig, out, kind: str | None = None) -> Path:
    out = Path(out)
    kind = kind or variant_decoder(cfg.variant)
    ckpt_dir = out / f"ldm-{kind}"
    if ckpt_dir.exists():
        raise ConfigError(f"{ckpt_dir} already exists; stage outputs are append-only")
    records, corpus_manifest = load_corpus(out)
    vae, vae_manifest = load_vae(out, kind)
    if vae_manifest["corpus_sha256"] != corpus_manifest["corpus_sha256"]:
        raise HashMismatch("corpus changed since the VAE was trained")
    ds = load_csv(cfg.data_path, cfg.data_name)
    verify_hash(cfg.data_path, corpus_manifest["dataset"]["sha256"], "dataset csv")

    _setup_determinism(cfg.seed)
    latents = _encode_corpus_mu(vae, records)
    mean = latents.mean(dim=0)
    std = latents.std(dim=0)
    std = torch.where(std > 1e-8, std, torch.ones_like(std))
    z = (latents - mean) / std
    graphs = [build_graph(evaluate(r.fs, ds.X)) for r in records]
    denoiser = Denoiser(cfg.denoiser_config())
    cond_net = ConditionNet(hidden=cfg.gcn_hidden, d_g=cfg.d_g, d_c=cfg.d_c)
    schedule = linear_schedule(cfg.t_train)
    result = train_ldm(z, graphs, denoiser, cond_net, schedule, cfg.seed,
                       epochs=cfg.ldm_epochs, batch_size=cfg.ldm_batch,
                       lr=cfg.ldm_lr, gamma_snr=cfg.gamma_snr)
    save_checkpoint(ckpt_dir, {
        "stage": "train-ldm",
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "vae_sha256": checkpoint_hash(out / f"vae-{kind}"),
        "corpus_sha256": corpus_manifest["corpus_sha256"],
        "schedule": {"t_train": cfg.t_train, "kind": "linear"},
        "gamma_snr": cfg.gamma_snr,
        "ddim_alpha_convention": "cumulative alpha-bar at both step indices",
        "gcn_training": "joint with the denoiser",
        "latent_mean": mean.numpy().tolist(),
        "latent_std": std.numpy().tolist(),
        "final_loss": result.history[-1],
    }, {"denoiser": denoiser.state_dict(), "cond": cond_net.state_dict()})
    write_loss_curve(result.history, out / f"ldm-{kind}_loss.csv",
                     out / f"ldm-{kind}_loss.png",
                     f"LDM training loss: {cfg.data_name}")
    return ckpt_dir


def load_ldm(cfg: RunConfig, out, kind: str):
    manifest, states = load_checkpoint(Path(out) / f"ldm-{kind}")
    denoiser = Denoiser(cfg.denoiser_config())
    denoiser.load_state_dict(states["denoiser"])
    denoiser.eval()
    cond_net = ConditionNet(hidden=cfg.gcn_hidden, d_g=cfg.d_g, d_c=cfg.d_c)
    cond_net.load_state_dict(states["cond"])
    cond_net.eval()
    return denoiser, cond_net, manifest


# ---------------------------------------------------------------- generate


def stage_generate(cfg: RunConfig, out, variant: str | None = None,
                   sample_seed: int | None = None) -> dict:
    """Sample candidate feature sets, score them, and write the report.

    Returns the report dictionary (also persisted as JSON).
    """
    out = Path(out)
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    seed = cfg.seed if sample_seed is None else sample_seed
    kind = variant_decoder(variant)
    records, corpus_manifest = load_corpus(out)
    vae, vae_manifest = load_vae(out, kind)
    if vae_manifest["corpus_sha256"] != corpus_manifest["corpus_sha256"]:
        raise HashMismatch("corpus changed since the VAE was trained")
    ds = load_csv(cfg.data_path, cfg.data_name)
    verify_hash(cfg.data_path, corpus_manifest["dataset"]["sha256"], "dataset csv")
    _setup_determinism(seed)

    gen_dir = out / "generate" / f"{variant}-seed{seed}"
    gen_dir.mkdir(parents=True, exist_ok=True)
    baseline = downstream_score(ds, RAW, seed).value
    y_norm_max = max(r.y_norm for r in records)
    target = 1.1 * y_norm_max

    if variant == "CS":
        cands = _generate_cs(cfg, vae, records, target)
    else:
        cands = _generate_diffusion(cfg, out, kind, variant, vae, ds, seed, target)

    cands.sort(key=lambda c: -c["predicted"])
    for c in cands[: cfg.rescore_top]:
        fs = parse(c["sequence"], ds.n_cols)
        c["actual"] = downstream_score(ds, fs, seed).value
    scored = [c for c in cands if c.get("actual") is not None]
    best = max(scored, key=lambda c: c["actual"])

    with open(gen_dir / "candidates.jsonl", "w") as fh:
        for c in cands:
            fh.write(json.dumps(
                {"sequence": c["sequence"], "predicted": c["predicted"],
                 "actual": c.get("actual")}) + "\n")
    best_fs = parse(best["sequence"], ds.n_cols)
    table = evaluate(best_fs, ds.X)
    pd.DataFrame(table, columns=[str(e) for e in best_fs.exprs]).to_csv(
        gen_dir / "transformed.csv", index=False
    )
    report = {
        "dataset": cfg.data_name,
        "variant": variant,
        "seed": seed,
        "metric": ds.metric_name,
        "raw_baseline": baseline,
        "best_score": best["actual"],
        "best_predicted": best["predicted"],
        "best_sequence": best["sequence"],
        "n_candidates": len(cands),
        "guidance_lambda": 0.0 if variant in ("NoR", "CS") else cfg.lam,
        "target_reward": target,
        "hash_chain": {
            "dataset": corpus_manifest["dataset"]["sha256"],
            "corpus": corpus_manifest["corpus_sha256"],
            "vae": checkpoint_hash(out / f"vae-{kind}"),
            "ldm": None if variant == "CS" else checkpoint_hash(out / f"ldm-{kind}"),
        },
    }
    write_json(gen_dir / "report.json", report)
    plot_candidates(cands, baseline, gen_dir / "report.png",
                    f"{cfg.data_name} {variant} seed={seed}")
    return report


def _generate_diffusion(cfg: RunConfig, out, kind: str, variant: str,
                        vae: FeatureSetVAE, ds: Dataset, seed: int,
                        target: float) -> list[dict]:
    denoiser, cond_net, ldm_manifest = load_ldm(cfg, out, kind)
    if ldm_manifest["vae_sha256"] != checkpoint_hash(Path(out) / f"vae-{kind}"):
        raise HashMismatch("VAE checkpoint changed since the LDM was trained")
    mean = torch.tensor(ldm_manifest["latent_mean"])
    std = torch.tensor(ldm_manifest["latent_std"])

    def evaluator(z_std):
        return vae.evaluator_forward(z_std * std + mean)

    with torch.no_grad():
        c = cond_net.table_embedding(ds.X).c.float()
    lam = 0.0 if variant == "NoR" else cfg.lam
    scfg = SamplerConfig(n_steps=cfg.sample_steps, lam=lam, target=target,
                         eta=cfg.eta, seed=seed)
    schedule = linear_schedule(cfg.t_train)
    z_std = ddim_sample(denoiser, c, schedule, scfg, cfg.n_candidates,
                        evaluator=None if lam == 0.0 else evaluator)
    z = z_std * std + mean
    with torch.no_grad():
        predicted = vae.evaluator_forward(z)
        if kind == "ar":
            sets = vae.decode_ablation(z, "AR")
        elif kind == "nar":
            sets = vae.decode_ablation(z, "NAR")
        else:
            sets = vae.decode_sar(z, mode="greedy")
    return [
        {"sequence": serialize(fs), "predicted": float(p)}
        for fs, p in zip(sets, predicted)
    ]


def _generate_cs(cfg: RunConfig, vae: FeatureSetVAE,
                 records: list[TrainingRecord], target: float) -> list[dict]:
    best_rec = max(records, key=lambda r: r.y_norm)
    with torch.no_grad():
        z0 = vae.encode([best_rec.fs], sample=False).mu
    z = continuous_search_latent(z0, vae.evaluator_forward,
                                 n_steps=cfg.cs_steps, lr=cfg.cs_lr)
    with torch.no_grad():
        predicted = vae.evaluator_forward(z)
        sets = vae.decode_sar(z, mode="greedy")
    return [{"sequence": serialize(sets[0]), "predicted": float(predicted[0])}]


# ---------------------------------------------------------------- bench/ablate


def ensure_stages(cfg: RunConfig, out, variant: str) -> None:
    out = Path(out)
    kind = variant_decoder(variant)
    if not (out / "corpus.jsonl").exists():
        stage_collect(cfg, out)
    if not (out / f"vae-{kind}").exists():
        stage_train_vae(cfg, out, kind)
    if variant != "CS" and not (out / f"ldm-{kind}").exists():
        stage_train_ldm(cfg, out, kind)


def _bench_cell(args):
    cfg_path, out, method, seed = args
    cfg = RunConfig.load(cfg_path)
    try:
        if method == "raw":
            ds = load_csv(cfg.data_path, cfg.data_name)
            value = downstream_score(ds, RAW, seed).value
        else:
            ensure_stages(cfg, out, method)
            value = stage_generate(cfg, out, variant=method, sample_seed=seed)["best_score"]
        return {"dataset": cfg.data_name, "method": method, "seed": seed,
                "value": value, "error": None}
    except Exception as exc:  # noqa: BLE001 - partial-failure tolerant by contract
        return {"dataset": cfg.data_name, "method": method, "seed": seed,
                "value": None, "error": f"{type(exc).__name__}: {exc}"}


def run_bench(config_paths: list, out, seeds: list[int],
              methods: tuple[str, ...] = ("raw", "full")) -> list[dict]:
    """Per-dataset per-method table with mean +- std over seeds.

    Failed cells are kept (value None, error recorded).  Independent runs
    fan out over FEATDIFF_WORKERS processes when > 1.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for cfg_path in config_paths:
        cfg = RunConfig.load(cfg_path)
        run_dir = out / cfg.data_name
        for method in methods:
            for seed in seeds:
                jobs.append((str(cfg_path), run_dir, method, seed))
    workers = int(os.environ.get("FEATDIFF_WORKERS", "1"))
    if workers > 1:
        # one process per dataset at most: stages within a run dir are shared
        from concurrent.futures import ProcessPoolExecutor

        by_dir: dict[str, list] = {}
        for job in jobs:
            by_dir.setdefault(str(job[1]), []).append(job)
        results = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_run_job_group, list(by_dir.values())):
                results.extend(chunk)
    else:
        results = [_bench_cell(job) for job in jobs]

    rows = []
    for cfg_path in config_paths:
        name = RunConfig.load(cfg_path).data_name
        for method in methods:
            vals = [r["value"] for r in results
                    if r["dataset"] == name and r["method"] == method
                    and r["value"] is not None]
            errors = [r["error"] for r in results
                      if r["dataset"] == name and r["method"] == method and r["error"]]
            rows.append({
                "dataset": name, "method": method,
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals)) if vals else None,
                "n": len(vals), "errors": errors,
            })
    write_json(out / "bench_results.json", {"cells": results, "table": rows,
                                            "seeds": seeds, "methods": list(methods)})
    pd.DataFrame([{k: r[k] for k in ("dataset", "method", "mean", "std", "n")}
                  for r in rows]).to_csv(out / "bench_table.csv", index=False)
    from .report import plot_bench

    plot_bench(rows, out / "bench_table.png", "benchmark results")
    return rows


def _run_job_group(jobs):
    return [_bench_cell(job) for job in jobs]


def run_ablation(cfg: RunConfig, out, seeds: list[int]) -> list[dict]:
    """Sweep every decoding/guidance variant on one dataset."""
    out = Path(out)
    rows = []
    for variant in VARIANTS:
        vals = []
        errors = []
        for seed in seeds:
            try:
                ensure_stages(cfg, out, variant)
                vals.append(stage_generate(cfg, out, variant=variant,
                                           sample_seed=seed)["best_score"])
            except Exception as exc:  # noqa: BLE001
                errors.append(f"{type(exc).__name__}: {exc}")
        rows.append({
            "dataset": cfg.data_name, "method": variant,
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "n": len(vals), "errors": errors,
        })
    write_json(out / "ablation_results.json", {"table": rows, "seeds": seeds})
    pd.DataFrame([{k: r[k] for k in ("dataset", "method", "mean", "std", "n")}
                  for r in rows]).to_csv(out / "ablation_table.csv", index=False)
    from .report import plot_bench

    plot_bench(rows, out / "ablation_table.png", f"ablation: {cfg.data_name}")
    return rows

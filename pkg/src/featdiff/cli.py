"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 artifact hash mismatch,
4 training divergence.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .checkpoint import HashMismatch
from .diffusion import DivergenceDetected
from .pipeline import (
    VARIANTS,
    ConfigError,
    RunConfig,
    run_ablation,
    run_bench,
    stage_collect,
    stage_generate,
    stage_train_ldm,
    stage_train_vae,
    variant_decoder,
)


def _run(fn):
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except HashMismatch as exc:
        click.echo(f"hash mismatch: {exc}", err=True)
        sys.exit(3)
    except DivergenceDetected as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(4)


def _load(config, seed, variant) -> RunConfig:
    cfg = RunConfig.load(config)
    if seed is not None:
        cfg.seed = seed
    if variant is not None:
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        cfg.variant = variant
    return cfg


config_opt = click.option("--config", required=True, type=click.Path(), help="INI run config")
seed_opt = click.option("--seed", type=int, default=None, help="override [run] seed")
variant_opt = click.option("--variant", default=None, help=f"one of {', '.join(VARIANTS)}")
out_opt = click.option("--out", required=True, type=click.Path(), help="run directory")


@click.group()
def main():
    """Reward-guided diffusion over tabular feature transformations."""


@main.command()
@config_opt
@seed_opt
@out_opt
def collect(config, seed, out):
    """Gather a training corpus of scored feature sets."""

    def go():
        cfg = _load(config, seed, None)
        path = stage_collect(cfg, out)
        click.echo(f"wrote {path}")

    _run(go)


@main.command("train-vae")
@config_opt
@seed_opt
@variant_opt
@out_opt
def train_vae_cmd(config, seed, variant, out):
    """Train the feature-set autoencoder on the collected corpus."""

    def go():
        cfg = _load(config, seed, variant)
        path = stage_train_vae(cfg, out, variant_decoder(cfg.variant))
        click.echo(f"wrote {path}")

    _run(go)


@main.command("train-ldm")
@config_opt
@seed_opt
@variant_opt
@out_opt
def train_ldm_cmd(config, seed, variant, out):
    """Train the conditioned latent diffusion model."""

    def go():
        cfg = _load(config, seed, variant)
        if cfg.variant == "CS":
            raise ConfigError("the CS variant has no diffusion stage")
        path = stage_train_ldm(cfg, out, variant_decoder(cfg.variant))
        click.echo(f"wrote {path}")

    _run(go)


@main.command()
@config_opt
@seed_opt
@variant_opt
@out_opt
def generate(config, seed, variant, out):
    """Sample, decode, score, and report candidate feature sets."""

    def go():
        cfg = _load(config, seed, variant)
        report = stage_generate(cfg, out, cfg.variant, sample_seed=cfg.seed)
        click.echo(json.dumps(report, indent=2))

    _run(go)


@main.command()
@click.option("--config", "configs", required=True, multiple=True,
              type=click.Path(), help="one INI config per dataset (repeatable)")
@click.option("--seeds", default="0,1,2", show_default=True,
              help="comma-separated seed list")
@click.option("--methods", default="raw,full", show_default=True)
@out_opt
def bench(configs, seeds, methods, out):
    """Run datasets x methods x seeds and tabulate mean +- std."""

    def go():
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        method_list = tuple(m.strip() for m in methods.split(",") if m.strip())
        for m in method_list:
            if m != "raw" and m not in VARIANTS:
                raise ConfigError(f"unknown method {m!r}")
        rows = run_bench(list(configs), out, seed_list, method_list)
        click.echo((Path(out) / "bench_table.csv").read_text())
        failed = [r for r in rows if r["errors"]]
        for r in failed:
            click.echo(f"failures in {r['dataset']}/{r['method']}: {r['errors']}", err=True)

    _run(go)


@main.command()
@config_opt
@click.option("--seeds", default="0,1,2", show_default=True)
@out_opt
def ablate(config, seeds, out):
    """Sweep the decoding/guidance variants on one dataset."""

    def go():
        cfg = RunConfig.load(config)
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        run_ablation(cfg, out, seed_list)
        click.echo((Path(out) / "ablation_table.csv").read_text())

    _run(go)


if __name__ == "__main__":
    main()

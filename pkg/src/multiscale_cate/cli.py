"""Batch command-line entry point.

One subcommand per analysis; every run writes its report files plus a
manifest.json recording the config hash, the seed, and sha256 hashes of all
inputs and outputs, so a run is reproducible from its manifest alone. Thread
count and output location are plumbing: they never change file contents.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
error.
"""
from __future__ import annotations

import argparse
import os
import sys

from ._util import sha256_file
from .config import (
    RunConfig,
    config_hash,
    load_config,
    resolve_output,
    validate_inputs,
    with_seed,
)
from .data_model import load_embeddings, load_raster, load_units, save_embeddings
from .embedding import ENCODER_EXTERNAL, ENCODER_PYRAMID, EncoderSpec, FetchContext, encode_units
from .errors import ConfigError, DataError, NumericalError
from .experiment import (
    build_scale_embeddings,
    combo_features,
    displaced_analysis,
    grid_search,
    interpretability_heatmap,
    scaling_scales,
)
from .hte_metrics import qini_pipeline
from .reporting import (
    write_gain_report,
    write_interpret_report,
    write_json,
    write_qini_report,
    write_scaling_report,
    write_sim_report,
)
from .simulation import run_design


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures routed to exit code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


_COMMAND_HELP = {
    "simulate": "perturbation study: cv R^2 per representation mode",
    "embed": "materialize per-scale embedding tables for reuse",
    "gridsearch": "RATE-ratio heatmap over scale pairs and the gain G",
    "scaling": "mean ratio as a function of how many scales are concatenated",
    "displaced": "grid search with displaced centers vs the anchored reference",
    "qini": "Qini curve of the multi-scale targeting policy",
    "interpret": "fraction of top-10 split features from the smaller scale",
}


def build_parser() -> _Parser:
    parser = _Parser(prog="mscate", description="multi-scale CATE analyses")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in _COMMAND_HELP.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", required=True, help="TOML config file")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument(
            "--threads", type=_positive_int, default=1,
            help="worker thread cap; results do not depend on it",
        )
    return parser


def _encoders(cfg: RunConfig, scales: tuple[int, ...]):
    """One pyramid spec, or a per-scale external spec backed by saved tables."""
    if cfg.encoder_kind == ENCODER_PYRAMID:
        return EncoderSpec(kind=ENCODER_PYRAMID, dim=cfg.encoder_dim, seed=cfg.seed)
    out = {}
    for s in scales:
        path = _embedding_path(cfg, s)
        if not os.path.exists(path):
            raise ConfigError(f"paths.embeddings_dir: missing table {path}")
        out[s] = EncoderSpec(kind=ENCODER_EXTERNAL, source=load_embeddings(path))
    return out


def _embedding_path(cfg: RunConfig, scale: int) -> str:
    return os.path.join(cfg.embeddings_dir, f"embeddings_s{scale}.csv")


def _require_builtin(cfg: RunConfig, why: str) -> None:
    if cfg.encoder_kind != ENCODER_PYRAMID:
        raise ConfigError(f"encoder.kind: {why} needs the built-in encoder")


def _load_inputs(cfg: RunConfig):
    return load_raster(cfg.raster), load_units(cfg.units)


def cmd_simulate(cfg: RunConfig, outdir: str, threads: int) -> list[str]:
    bundle, units = _load_inputs(cfg)
    name = "+".join(p.value for p in cfg.sim.perturbations) or "none"
    reports = run_design(
        bundle, units, cfg.sim, cfg.resolved_sim_modes(), cfg.mlp, cfg.fetch_mode
    )
    files = write_sim_report(outdir, {name: reports})
    summary = {
        str(mode): {
            "r2_mean": rep.r2_mean,
            "r2_sd": rep.r2_sd,
            "degenerate": rep.degenerate,
            "replicates": rep.n_replicates,
        }
        for mode, rep in reports.items()
    }
    path = os.path.join(outdir, "sim_summary.json")
    write_json(path, summary)
    return files + [path]


def cmd_embed(cfg: RunConfig, outdir: str, threads: int) -> list[str]:
    _require_builtin(cfg, "embed")
    bundle, units = _load_inputs(cfg)
    enc = EncoderSpec(kind=ENCODER_PYRAMID, dim=cfg.encoder_dim, seed=cfg.seed)
    ctx = FetchContext(bundle=bundle, mode=cfg.fetch_mode)
    files = []
    for s in cfg.grid.scales:
        table = encode_units(units, s, enc, ctx)
        path = os.path.join(outdir, f"embeddings_s{s}.csv")
        save_embeddings(table, path)
        files.append(path)
    return files


def cmd_gridsearch(cfg: RunConfig, outdir: str, threads: int) -> list[str]:
    bundle, units = _load_inputs(cfg)
    if cfg.grid.displaced:
        _require_builtin(cfg, "displaced-center search")
    enc = _encoders(cfg, cfg.grid.scales)
    report = grid_search(
        units, bundle, cfg.grid, enc, cfg.pipeline(), cfg.fetch_mode, threads=threads
    )
    return write_gain_report(outdir, report)


def cmd_scaling(cfg: RunConfig, outdir: str, threads: int) -> list[str]:
    bundle, units = _load_inputs(cfg)
    enc = _encoders(cfg, cfg.grid.scales)
    max_c = cfg.max_combo or len(cfg.grid.scales)
    curve = scaling_scales(
        units, bundle, cfg.grid, max_c, enc, cfg.pipeline(), cfg.fetch_mode, threads
    )
    return write_scaling_report(outdir, curve)


def cmd_displaced(cfg: RunConfig, outdir: str, threads: int) -> list[str]:
    _require_builtin(cfg, "displaced-center analysis")
    bundle, units = _load_inputs(cfg)
    enc = _encoders(cfg, cfg.grid.scales)
    report = displaced_analysis(
        units, bundle, cfg.grid, enc, cfg.pipeline(), cfg.fetch_mode, threads
    )
    files = write_gain_report(outdir, report.displaced, prefix="displaced_")
    files += write_gain_report(outdir, report.reference, prefix="reference_")
    path = os.path.join(outdir, "displaced_summary.json")
    write_json(
        path,
        {
            "mean_ratio_displaced": report.mean_ratio_displaced,
            "mean_ratio_reference": report.mean_ratio_reference,
            "delta": report.delta,
        },
    )
    return files + [path]


def cmd_qini(cfg: RunConfig, outdir: str, threads: int) -> list[str]:
    bundle, units = _load_inputs(cfg)
    enc = _encoders(cfg, cfg.grid.scales)
    embs = build_scale_embeddings(
        bundle, units, cfg.grid.scales, enc, cfg.fetch_mode
    )
    X = combo_features(embs, cfg.grid.scales, cfg.grid)
    curve = qini_pipeline(units, X, cfg.pipeline())
    files = write_qini_report(outdir, curve)
    path = os.path.join(outdir, "qini_summary.json")
    write_json(
        path,
        {
            "scales": list(cfg.grid.scales),
            "n_eval": curve.n_eval,
            "n_boot": curve.n_boot,
            "final_gain": float(curve.gain[-1]),
            "final_baseline": float(curve.baseline[-1]),
        },
    )
    return files + [path]


def cmd_interpret(cfg: RunConfig, outdir: str, threads: int) -> list[str]:
    bundle, units = _load_inputs(cfg)
    enc = _encoders(cfg, cfg.grid.scales)
    report = interpretability_heatmap(
        units, bundle, cfg.grid, enc, cfg.forest, cfg.fetch_mode, threads
    )
    return write_interpret_report(outdir, report)


_COMMANDS = {
    "simulate": cmd_simulate,
    "embed": cmd_embed,
    "gridsearch": cmd_gridsearch,
    "scaling": cmd_scaling,
    "displaced": cmd_displaced,
    "qini": cmd_qini,
    "interpret": cmd_interpret,
}


def _input_hashes(cfg: RunConfig) -> dict[str, str]:
    inputs = {}
    if cfg.raster:
        inputs["raster"] = sha256_file(cfg.raster)
        inputs["raster_header"] = sha256_file(cfg.raster + ".json")
    if cfg.units:
        inputs["units"] = sha256_file(cfg.units)
    if cfg.encoder_kind == ENCODER_EXTERNAL:
        for s in cfg.grid.scales:
            path = _embedding_path(cfg, s)
            if os.path.exists(path):
                inputs[f"embeddings_s{s}"] = sha256_file(path)
    return inputs


def _write_manifest(
    outdir: str, command: str, cfg: RunConfig, outputs: list[str]
) -> str:
    path = os.path.join(outdir, "manifest.json")
    write_json(
        path,
        {
            "command": command,
            "config": cfg.to_dict(),
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "inputs": _input_hashes(cfg),
            "outputs": {
                os.path.relpath(p, outdir).replace(os.sep, "/"): sha256_file(p)
                for p in outputs
            },
        },
    )
    return path


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
        validate_inputs(cfg)
        outdir = resolve_output(cfg, args.command, args.out)
        os.makedirs(outdir, exist_ok=True)
        outputs = _COMMANDS[args.command](cfg, outdir, args.threads)
        manifest = _write_manifest(outdir, args.command, cfg, outputs)
        for p in outputs + [manifest]:
            print(f"wrote {p}")
        return 0
    except _UsageError as e:
        print(f"mscate: error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"mscate: config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"mscate: data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"mscate: numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

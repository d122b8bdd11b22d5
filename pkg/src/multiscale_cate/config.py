"""Run configuration: TOML parsing, validation, and the config hash.

The config file is flat sections of typed keys; every key has a default and
unknown keys are rejected with their section.key path. Relative paths resolve
against the config file's directory. The config hash covers every resolved
field, so it changes iff some field changes; the --threads flag is not part
of the config and never enters the hash.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from ._util import canonical_json, sha256_bytes
from .causal_forest import ForestConfig
from .embedding import ENCODER_EXTERNAL, ENCODER_PYRAMID
from .errors import ConfigError
from .experiment import ScaleGrid
from .hte_metrics import WEIGHTING_AUTOC, WEIGHTING_QINI, PipelineConfig
from .imaging import FetchMode, PerturbationKind
from .simulation import MODE_MULTI, MlpConfig, SimDesign

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ROOT_ENV = "MSCATE_OUTPUT_ROOT"

_MISSING = object()

# section -> key -> (expected type, default). Lists give the element type.
_SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "paths": {
        "raster": (str, ""),
        "units": (str, ""),
        "embeddings_dir": (str, ""),
        "output": (str, ""),
    },
    "encoder": {
        "kind": (str, ENCODER_PYRAMID),
        "dim": (int, 64),
    },
    "grid": {
        "scales": ([int], [16, 32, 64, 128, 256, 349]),
        "reduction": (str, "raw"),
        "pca_dim": (int, 50),
        "replicates": (int, 10),
        "subset_budget": (int, 20),
        "displaced": (bool, False),
        "max_combo": (int, 0),
    },
    "forest": {
        "num_trees": (int, 2000),
        "min_node_size": (int, 5),
        "honesty_fraction": (float, 0.5),
        "subsample_fraction": (float, 0.5),
        "mtry": (int, 0),
        "nuisance_trees": (int, 0),
        "propensity": ((str, float), "sample-rate"),
    },
    "metrics": {
        "weighting": (str, WEIGHTING_AUTOC),
        "n_boot": (int, 200),
        "swap_halves": (bool, False),
    },
    "simulation": {
        "perturbations": ([str], ["mask", "edge_fade"]),
        "scales": ([int], [32, 256]),
        "modes": ([str], ["multi", "min", "max"]),
        "assignment_prob": (float, 0.5),
        "weak_prior": (bool, False),
        "mask_size": (int, 2),
        "contrast_c": (float, 2.0),
        "fade_size": (float, 0.0),
        "encoder_dim": (int, 64),
        "replicates": (int, 10),
        "epochs": (int, 200),
        "batch_size": (int, 64),
        "learning_rate": (float, 1e-3),
    },
    "run": {
        "seed": (int, 0),
        "fetch_mode": (str, "clamp"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one CLI run."""

    raster: str = ""
    units: str = ""
    embeddings_dir: str = ""
    output: str = ""
    encoder_kind: str = ENCODER_PYRAMID
    encoder_dim: int = 64
    grid: ScaleGrid = field(default_factory=ScaleGrid)
    max_combo: int = 0
    forest: ForestConfig = field(default_factory=ForestConfig)
    weighting: str = WEIGHTING_AUTOC
    n_boot: int = 200
    swap_halves: bool = False
    sim: SimDesign = field(default_factory=lambda: SimDesign(
        perturbations=(PerturbationKind.MASK, PerturbationKind.EDGE_FADE)
    ))
    sim_modes: tuple[int | str, ...] = (MODE_MULTI, "min", "max")
    mlp: MlpConfig = field(default_factory=MlpConfig)
    seed: int = 0
    fetch_mode: FetchMode = FetchMode.CLAMP

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            forest=self.forest, weighting=self.weighting, n_boot=self.n_boot,
            seed=self.seed, swap_halves=self.swap_halves,
        )

    def resolved_sim_modes(self) -> tuple[int | str, ...]:
        out: list[int | str] = []
        for m in self.sim_modes:
            if m == "min":
                out.append(min(self.sim.scales))
            elif m == "max":
                out.append(max(self.sim.scales))
            else:
                out.append(m)
        return tuple(dict.fromkeys(out))

    def to_dict(self) -> dict:
        return {
            "paths": {
                "raster": self.raster,
                "units": self.units,
                "embeddings_dir": self.embeddings_dir,
                "output": self.output,
            },
            "encoder": {"kind": self.encoder_kind, "dim": self.encoder_dim},
            "grid": {
                "scales": list(self.grid.scales),
                "reduction": self.grid.reduction,
                "pca_dim": self.grid.pca_dim,
                "replicates": self.grid.replicates,
                "subset_budget": self.grid.subset_budget,
                "displaced": self.grid.displaced,
                "max_combo": self.max_combo,
            },
            "forest": {
                "num_trees": self.forest.num_trees,
                "min_node_size": self.forest.min_node_size,
                "honesty_fraction": self.forest.honesty_fraction,
                "subsample_fraction": self.forest.subsample_fraction,
                "mtry": self.forest.mtry,
                "nuisance_trees": self.forest.nuisance_trees,
                "propensity": self.forest.propensity,
            },
            "metrics": {
                "weighting": self.weighting,
                "n_boot": self.n_boot,
                "swap_halves": self.swap_halves,
            },
            "simulation": {
                "perturbations": [p.value for p in self.sim.perturbations],
                "scales": list(self.sim.scales),
                "modes": [str(m) for m in self.sim_modes],
                "assignment_prob": self.sim.assignment_prob,
                "weak_prior": self.sim.weak_prior,
                "mask_size": self.sim.mask_size,
                "contrast_c": self.sim.contrast_c,
                "fade_size": self.sim.fade_size,
                "encoder_dim": self.sim.encoder_dim,
                "replicates": self.sim.replicates,
                "epochs": self.mlp.epochs,
                "batch_size": self.mlp.batch_size,
                "learning_rate": self.mlp.learning_rate,
            },
            "run": {"seed": self.seed, "fetch_mode": self.fetch_mode.value},
        }


def config_hash(cfg: RunConfig) -> str:
    return sha256_bytes(canonical_json(cfg.to_dict()).encode("utf-8"))


def _typecheck(section: str, key: str, value: Any, expect: Any) -> Any:
    path = f"{section}.{key}"
    if isinstance(expect, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        elem = expect[0]
        out = []
        for i, v in enumerate(value):
            out.append(_typecheck(section, f"{key}[{i}]", v, elem))
        return out
    kinds = expect if isinstance(expect, tuple) else (expect,)
    for kind in kinds:
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, bool):
            continue
        if isinstance(value, kind):
            return value
    names = "/".join(k.__name__ for k in kinds)
    raise ConfigError(f"{path}: expected {names}, got {type(value).__name__}")


def _merge(data: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    merged: dict[str, dict[str, Any]] = {}
    for section, keys in _SCHEMA.items():
        merged[section] = {k: default for k, (_, default) in keys.items()}
    for section, content in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(content, Mapping):
            raise ConfigError(f"{section}: expected a table of keys")
        for key, value in content.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
            merged[section][key] = _typecheck(
                section, key, value, _SCHEMA[section][key][0]
            )
    return merged


def _parse_perturbations(values: list[str]) -> tuple[PerturbationKind, ...]:
    out = []
    valid = {p.value: p for p in PerturbationKind}
    for v in values:
        if v not in valid:
            raise ConfigError(
                f"simulation.perturbations: unknown kind {v!r}; "
                f"valid: {sorted(valid)}"
            )
        out.append(valid[v])
    return tuple(out)


def _parse_modes(values: list[str]) -> tuple[int | str, ...]:
    out: list[int | str] = []
    for v in values:
        if v in (MODE_MULTI, "min", "max"):
            out.append(v)
        else:
            try:
                out.append(int(v))
            except ValueError:
                raise ConfigError(
                    f"simulation.modes: expected 'multi', 'min', 'max', or a "
                    f"scale integer, got {v!r}"
                ) from None
    return tuple(out)


def _resolve_path(base_dir: str, p: str) -> str:
    if not p:
        return ""
    return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))


def build_config(data: Mapping[str, Any], base_dir: str = ".") -> RunConfig:
    """RunConfig from parsed TOML data; ConfigError names the offending key."""
    merged = _merge(data)
    paths, enc = merged["paths"], merged["encoder"]
    grid_s, forest_s = merged["grid"], merged["forest"]
    metrics, sim_s, run_s = merged["metrics"], merged["simulation"], merged["run"]

    if enc["kind"] not in (ENCODER_PYRAMID, ENCODER_EXTERNAL):
        raise ConfigError(f"encoder.kind: unknown encoder {enc['kind']!r}")
    if metrics["weighting"] not in (WEIGHTING_AUTOC, WEIGHTING_QINI):
        raise ConfigError(f"metrics.weighting: unknown weighting {metrics['weighting']!r}")
    if metrics["n_boot"] < 2:
        raise ConfigError(f"metrics.n_boot: must be >= 2, got {metrics['n_boot']}")
    try:
        fetch_mode = FetchMode(run_s["fetch_mode"])
    except ValueError:
        raise ConfigError(
            f"run.fetch_mode: expected 'strict' or 'clamp', got {run_s['fetch_mode']!r}"
        ) from None

    seed = run_s["seed"]
    try:
        grid = ScaleGrid(
            scales=tuple(grid_s["scales"]),
            reduction=grid_s["reduction"],
            pca_dim=grid_s["pca_dim"],
            replicates=grid_s["replicates"],
            subset_budget=grid_s["subset_budget"],
            displaced=grid_s["displaced"],
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"grid: {e}") from None
    if not 0 <= grid_s["max_combo"] <= len(grid.scales):
        raise ConfigError(
            f"grid.max_combo: must be in [0, {len(grid.scales)}], got {grid_s['max_combo']}"
        )
    try:
        forest = ForestConfig(
            num_trees=forest_s["num_trees"],
            min_node_size=forest_s["min_node_size"],
            honesty_fraction=forest_s["honesty_fraction"],
            subsample_fraction=forest_s["subsample_fraction"],
            mtry=forest_s["mtry"] or None,
            nuisance_trees=forest_s["nuisance_trees"] or None,
            propensity=forest_s["propensity"],
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"forest: {e}") from None
    try:
        sim = SimDesign(
            perturbations=_parse_perturbations(sim_s["perturbations"]),
            scales=tuple(sim_s["scales"]),
            assignment_prob=sim_s["assignment_prob"],
            weak_prior=sim_s["weak_prior"],
            mask_size=sim_s["mask_size"],
            contrast_c=sim_s["contrast_c"],
            fade_size=sim_s["fade_size"] or None,
            encoder_dim=sim_s["encoder_dim"],
            replicates=sim_s["replicates"],
            seed=seed,
        )
        mlp = MlpConfig(
            epochs=sim_s["epochs"],
            batch_size=sim_s["batch_size"],
            learning_rate=sim_s["learning_rate"],
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"simulation: {e}") from None
    modes = _parse_modes(sim_s["modes"])
    for m in modes:
        if isinstance(m, int) and m not in sim.scales:
            raise ConfigError(
                f"simulation.modes: scale {m} not in simulation.scales {list(sim.scales)}"
            )
    if enc["dim"] < 1:
        raise ConfigError(f"encoder.dim: must be >= 1, got {enc['dim']}")
    return RunConfig(
        raster=_resolve_path(base_dir, paths["raster"]),
        units=_resolve_path(base_dir, paths["units"]),
        embeddings_dir=_resolve_path(base_dir, paths["embeddings_dir"]),
        output=_resolve_path(base_dir, paths["output"]),
        encoder_kind=enc["kind"],
        encoder_dim=enc["dim"],
        grid=grid,
        max_combo=grid_s["max_combo"],
        forest=forest,
        weighting=metrics["weighting"],
        n_boot=metrics["n_boot"],
        swap_halves=metrics["swap_halves"],
        sim=sim,
        sim_modes=modes,
        mlp=mlp,
        seed=seed,
        fetch_mode=fetch_mode,
    )


def load_config(path: str) -> RunConfig:
    """Parse and validate a TOML config file."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return build_config(data, base_dir=os.path.dirname(os.path.abspath(path)))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override the run seed, propagating it into every nested config."""
    return replace(
        cfg,
        seed=seed,
        grid=replace(cfg.grid, seed=seed),
        forest=replace(cfg.forest, seed=seed),
        sim=replace(cfg.sim, seed=seed),
        mlp=replace(cfg.mlp, seed=seed),
    )


def resolve_output(cfg: RunConfig, command: str, override: str | None = None) -> str:
    """Effective output directory; --out beats paths.output beats env-root/command.

    The directory is run plumbing like --threads: overriding it does not
    change the config hash.
    """
    if override:
        return os.path.abspath(override)
    if cfg.output:
        return cfg.output
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), command)


def validate_inputs(cfg: RunConfig, need_raster: bool = True, need_units: bool = True) -> None:
    """Existence checks for referenced inputs, with section.key paths."""
    if need_raster:
        if not cfg.raster:
            raise ConfigError("paths.raster: required but not set")
        if not os.path.exists(cfg.raster):
            raise ConfigError(f"paths.raster: file not found: {cfg.raster}")
    if need_units:
        if not cfg.units:
            raise ConfigError("paths.units: required but not set")
        if not os.path.exists(cfg.units):
            raise ConfigError(f"paths.units: file not found: {cfg.units}")
    if cfg.encoder_kind == ENCODER_EXTERNAL:
        if not cfg.embeddings_dir:
            raise ConfigError(
                "paths.embeddings_dir: required for the external encoder"
            )
        if not os.path.isdir(cfg.embeddings_dir):
            raise ConfigError(
                f"paths.embeddings_dir: directory not found: {cfg.embeddings_dir}"
            )

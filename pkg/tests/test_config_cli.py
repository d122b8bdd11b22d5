import hashlib
import json
import os

import numpy as np
import pytest

from multiscale_cate import cli
from multiscale_cate.config import (
    OUTPUT_ROOT_ENV,
    build_config,
    config_hash,
    load_config,
    resolve_output,
    validate_inputs,
    with_seed,
)
from multiscale_cate.data_model import save_raster, save_units
from multiscale_cate.errors import ConfigError, DataError, NumericalError
from multiscale_cate.imaging import FetchMode, PerturbationKind

from conftest import make_bundle, make_units


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# --- config parsing ---


def test_defaults():
    cfg = build_config({})
    assert cfg.grid.scales == (16, 32, 64, 128, 256, 349)
    assert cfg.forest.num_trees == 2000
    assert cfg.forest.mtry is None
    assert cfg.forest.nuisance_trees is None
    assert cfg.forest.propensity == "sample-rate"
    assert cfg.n_boot == 200 and cfg.weighting == "autoc"
    assert cfg.sim.perturbations == (PerturbationKind.MASK, PerturbationKind.EDGE_FADE)
    assert cfg.sim_modes == ("multi", "min", "max")
    assert cfg.fetch_mode is FetchMode.CLAMP
    assert cfg.seed == 0
    assert cfg.sim.fade_size is None


def test_unknown_section_and_key():
    with pytest.raises(ConfigError, match="rocket: unknown section"):
        build_config({"rocket": {}})
    with pytest.raises(ConfigError, match="grid.warp: unknown key"):
        build_config({"grid": {"warp": 1}})


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError, match="forest.num_trees: expected int, got str"):
        build_config({"forest": {"num_trees": "many"}})
    with pytest.raises(ConfigError, match="grid.replicates: expected int, got bool"):
        build_config({"grid": {"replicates": True}})
    with pytest.raises(ConfigError, match=r"grid.scales\[1\]: expected int"):
        build_config({"grid": {"scales": [8, "x"]}})
    with pytest.raises(ConfigError, match="grid.scales: expected a list"):
        build_config({"grid": {"scales": 8}})
    # ints promote to float
    cfg = build_config({"simulation": {"contrast_c": 3}})
    assert cfg.sim.contrast_c == 3.0
    # propensity takes either a policy name or a constant
    assert build_config({"forest": {"propensity": 0.4}}).forest.propensity == 0.4
    assert build_config({"forest": {"propensity": "forest"}}).forest.propensity == "forest"


def test_semantic_validation():
    with pytest.raises(ConfigError, match="encoder.kind"):
        build_config({"encoder": {"kind": "resnet"}})
    with pytest.raises(ConfigError, match="metrics.weighting"):
        build_config({"metrics": {"weighting": "toc"}})
    with pytest.raises(ConfigError, match="metrics.n_boot"):
        build_config({"metrics": {"n_boot": 1}})
    with pytest.raises(ConfigError, match="run.fetch_mode"):
        build_config({"run": {"fetch_mode": "wrap"}})
    with pytest.raises(ConfigError, match="grid: scales must be strictly increasing"):
        build_config({"grid": {"scales": [16, 8]}})
    with pytest.raises(ConfigError, match="grid.max_combo"):
        build_config({"grid": {"scales": [8, 16], "max_combo": 3}})
    with pytest.raises(ConfigError, match="simulation.perturbations"):
        build_config({"simulation": {"perturbations": ["blur"]}})
    with pytest.raises(ConfigError, match="simulation.modes"):
        build_config({"simulation": {"modes": ["median"]}})
    with pytest.raises(ConfigError, match="not in simulation.scales"):
        build_config({"simulation": {"scales": [32, 256], "modes": ["64"]}})
    with pytest.raises(ConfigError, match="simulation: replicates"):
        build_config({"simulation": {"replicates": 0}})
    with pytest.raises(ConfigError, match="encoder.dim"):
        build_config({"encoder": {"dim": 0}})
    with pytest.raises(ConfigError, match="forest: "):
        build_config({"forest": {"honesty_fraction": 1.5}})


def test_path_resolution():
    cfg = build_config({"paths": {"raster": "data/r.bin", "units": "/abs/u.csv"}},
                       base_dir="/base")
    assert cfg.raster == "/base/data/r.bin"
    assert cfg.units == "/abs/u.csv"
    assert cfg.embeddings_dir == ""


def test_numeric_modes_parse():
    cfg = build_config({"simulation": {"scales": [32, 256], "modes": ["multi", "32"]}})
    assert cfg.sim_modes == ("multi", 32)
    assert cfg.resolved_sim_modes() == ("multi", 32)


def test_resolved_sim_modes_dedupe():
    cfg = build_config({"simulation": {"scales": [64], "modes": ["multi", "min", "max"]}})
    assert cfg.resolved_sim_modes() == ("multi", 64)


def test_config_hash_sensitivity():
    base = config_hash(build_config({}))
    tweaks = [
        {"paths": {"output": "elsewhere"}},
        {"encoder": {"dim": 32}},
        {"grid": {"scales": [8, 16]}},
        {"grid": {"pca_dim": 10}},
        {"grid": {"max_combo": 2}},
        {"forest": {"num_trees": 100}},
        {"forest": {"propensity": 0.5}},
        {"metrics": {"n_boot": 50}},
        {"metrics": {"swap_halves": True}},
        {"simulation": {"mask_size": 8}},
        {"simulation": {"epochs": 10}},
        {"run": {"seed": 1}},
        {"run": {"fetch_mode": "strict"}},
    ]
    hashes = [config_hash(build_config(t)) for t in tweaks]
    assert base not in hashes
    assert len(set(hashes)) == len(hashes)
    # hashing is stable for identical configs
    assert config_hash(build_config({})) == base


def test_with_seed_propagates():
    cfg = with_seed(build_config({}), 9)
    assert cfg.seed == 9
    assert cfg.grid.seed == 9
    assert cfg.forest.seed == 9
    assert cfg.sim.seed == 9
    assert cfg.mlp.seed == 9
    assert config_hash(cfg) != config_hash(build_config({}))


def test_resolve_output_precedence(monkeypatch, tmp_path):
    cfg = build_config({"paths": {"output": "cfgout"}}, base_dir=str(tmp_path))
    assert resolve_output(cfg, "gridsearch", str(tmp_path / "cli")) == str(tmp_path / "cli")
    assert resolve_output(cfg, "gridsearch", None) == str(tmp_path / "cfgout")
    bare = build_config({})
    monkeypatch.setenv(OUTPUT_ROOT_ENV, "/var/msc")
    assert resolve_output(bare, "qini", None) == "/var/msc/qini"
    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert resolve_output(bare, "qini", None) == os.path.join("runs", "qini")


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.toml"))
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid\nscales=3")
    with pytest.raises(ConfigError, match="bad.toml"):
        load_config(str(bad))


def test_validate_inputs(tmp_path):
    cfg = build_config({"paths": {"raster": "r.bin", "units": "u.csv"}},
                       base_dir=str(tmp_path))
    with pytest.raises(ConfigError, match="paths.raster: file not found"):
        validate_inputs(cfg)
    with pytest.raises(ConfigError, match="paths.raster: required"):
        validate_inputs(build_config({}))
    ext = build_config({"encoder": {"kind": "external"}})
    with pytest.raises(ConfigError, match="paths.embeddings_dir: required"):
        validate_inputs(ext, need_raster=False, need_units=False)


# --- CLI integration ---


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    bundle = make_bundle(width=64, height=64, bands=2, seed=11)
    save_raster(bundle, str(root / "raster.bin"))
    rng = np.random.Generator(np.random.Philox(key=77))
    n = 80
    w = rng.integers(0, 2, n)
    y = 1.5 * w + rng.standard_normal(n)
    units = make_units(n, bundle, seed=11, margin=10, treatment=w, outcome=y)
    save_units(units, str(root / "units.csv"))
    (root / "config.toml").write_text(
        """
[paths]
raster = "raster.bin"
units = "units.csv"

[encoder]
dim = 12

[grid]
scales = [8, 16]
replicates = 2
max_combo = 2

[forest]
num_trees = 40
nuisance_trees = 30

[metrics]
n_boot = 40

[simulation]
perturbations = ["mask"]
scales = [8, 16]
modes = ["multi", "min"]
mask_size = 4
encoder_dim = 12
replicates = 1
epochs = 15
batch_size = 32

[run]
seed = 3
"""
    )
    return root


def _run(args, capsys):
    code = cli.main(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_cli_gridsearch_outputs_and_manifest(workspace, tmp_path, capsys):
    out = tmp_path / "gs"
    code, stdout, _ = _run(
        ["gridsearch", "--config", str(workspace / "config.toml"), "--out", str(out)],
        capsys,
    )
    assert code == 0
    names = {"heatmap.csv", "singles.csv", "gain.json", "cell_replicates.csv",
             "heatmap.svg", "manifest.json"}
    assert {p.name for p in out.iterdir()} == names
    assert stdout.count("wrote ") == len(names)
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest) == {"command", "config", "config_hash", "seed", "inputs", "outputs"}
    assert manifest["command"] == "gridsearch"
    assert manifest["seed"] == 3
    cfg = load_config(str(workspace / "config.toml"))
    assert manifest["config_hash"] == config_hash(cfg)
    assert manifest["inputs"]["raster"] == _sha(workspace / "raster.bin")
    assert manifest["inputs"]["raster_header"] == _sha(str(workspace / "raster.bin") + ".json")
    assert manifest["inputs"]["units"] == _sha(workspace / "units.csv")
    for rel, digest in manifest["outputs"].items():
        assert _sha(out / rel) == digest
    gain = json.loads((out / "gain.json").read_text())
    assert gain["gain"] == pytest.approx(
        gain["best_multi"]["ratio"] - gain["best_single"]["ratio"]
    )


def test_cli_thread_and_outdir_invariance(workspace, tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    cfgp = str(workspace / "config.toml")
    assert _run(["gridsearch", "--config", cfgp, "--out", str(a), "--threads", "1"], capsys)[0] == 0
    assert _run(["gridsearch", "--config", cfgp, "--out", str(b), "--threads", "2"], capsys)[0] == 0
    for name in ("heatmap.csv", "singles.csv", "gain.json", "cell_replicates.csv",
                 "heatmap.svg", "manifest.json"):
        assert _sha(a / name) == _sha(b / name), name


def test_cli_seed_override_changes_results(workspace, tmp_path, capsys):
    a = tmp_path / "s3"
    b = tmp_path / "s4"
    cfgp = str(workspace / "config.toml")
    _run(["gridsearch", "--config", cfgp, "--out", str(a)], capsys)
    _run(["gridsearch", "--config", cfgp, "--out", str(b), "--seed", "4"], capsys)
    assert _sha(a / "gain.json") != _sha(b / "gain.json")
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_hash"] != mb["config_hash"]
    assert mb["seed"] == 4


def test_cli_embed_then_external_matches_builtin(workspace, tmp_path, capsys):
    cfgp = str(workspace / "config.toml")
    emb = tmp_path / "emb"
    assert _run(["embed", "--config", cfgp, "--out", str(emb)], capsys)[0] == 0
    assert (emb / "embeddings_s8.csv").exists() and (emb / "embeddings_s16.csv").exists()
    ext_cfg = tmp_path / "ext.toml"
    base = (workspace / "config.toml").read_text()
    ext_cfg.write_text(base.replace(
        "[encoder]\ndim = 12",
        f'[encoder]\nkind = "external"\ndim = 12',
    ).replace(
        'units = "units.csv"',
        f'units = "{workspace / "units.csv"}"\nembeddings_dir = "{emb}"',
    ).replace('raster = "raster.bin"', f'raster = "{workspace / "raster.bin"}"'))
    builtin_out = tmp_path / "builtin"
    ext_out = tmp_path / "external"
    assert _run(["gridsearch", "--config", cfgp, "--out", str(builtin_out)], capsys)[0] == 0
    assert _run(["gridsearch", "--config", str(ext_cfg), "--out", str(ext_out)], capsys)[0] == 0
    for name in ("heatmap.csv", "singles.csv", "gain.json", "cell_replicates.csv"):
        assert _sha(builtin_out / name) == _sha(ext_out / name), name


def test_cli_external_missing_table(workspace, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    cfgp = tmp_path / "ext2.toml"
    cfgp.write_text(
        f"""
[paths]
raster = "{workspace / 'raster.bin'}"
units = "{workspace / 'units.csv'}"
embeddings_dir = "{empty}"

[encoder]
kind = "external"

[grid]
scales = [8, 16]
replicates = 1
"""
    )
    code, _, err = _run(["gridsearch", "--config", str(cfgp), "--out", str(tmp_path / "o")], capsys)
    assert code == 1
    assert "missing table" in err


def test_cli_simulate(workspace, tmp_path, capsys):
    out = tmp_path / "sim"
    code, _, _ = _run(
        ["simulate", "--config", str(workspace / "config.toml"), "--out", str(out)], capsys
    )
    assert code == 0
    lines = (out / "sim_results.csv").read_text().splitlines()
    assert lines[0] == "design,mode,perturbations,r2_mean,r2_sd,degenerate,replicates"
    assert len(lines) == 3  # modes: multi and 8
    assert lines[1].startswith("mask,8,mask,")
    assert lines[2].startswith("mask,multi,mask,")
    summary = json.loads((out / "sim_summary.json").read_text())
    assert set(summary) == {"multi", "8"}
    for rep in summary.values():
        assert not rep["degenerate"]
        assert rep["replicates"] == 1


def test_cli_scaling(workspace, tmp_path, capsys):
    out = tmp_path / "sc"
    code, _, _ = _run(
        ["scaling", "--config", str(workspace / "config.toml"), "--out", str(out)], capsys
    )
    assert code == 0
    lines = (out / "scaling_curve.csv").read_text().splitlines()
    assert lines[0] == "n_scales,mean_ratio"
    assert [r.split(",")[0] for r in lines[1:]] == ["1", "2"]
    subsets = (out / "scaling_subsets.csv").read_text().splitlines()
    assert subsets[0] == "n_scales,scales,mean_ratio"
    assert {r.split(",")[1] for r in subsets[1:]} == {"8", "16", "8|16"}


def test_cli_qini(workspace, tmp_path, capsys):
    out = tmp_path / "q"
    code, _, _ = _run(
        ["qini", "--config", str(workspace / "config.toml"), "--out", str(out)], capsys
    )
    assert code == 0
    lines = (out / "qini_curve.csv").read_text().splitlines()
    assert lines[0] == "spend,gain,baseline,net_gain,se"
    assert len(lines) == 41  # eval half of 80 units
    summary = json.loads((out / "qini_summary.json").read_text())
    assert summary["scales"] == [8, 16]
    assert summary["n_eval"] == 40
    assert summary["n_boot"] == 40


def test_cli_interpret(workspace, tmp_path, capsys):
    out = tmp_path / "int"
    code, _, _ = _run(
        ["interpret", "--config", str(workspace / "config.toml"), "--out", str(out)], capsys
    )
    assert code == 0
    lines = (out / "interpret_matrix.csv").read_text().splitlines()
    assert lines[0] == "scale,8,16"
    assert lines[1].startswith("8,1.0,")  # diagonal fraction is exactly 1
    assert (out / "interpret_matrix.svg").read_text().startswith("<svg ")


def test_cli_displaced(workspace, tmp_path, capsys):
    out = tmp_path / "disp"
    code, _, _ = _run(
        ["displaced", "--config", str(workspace / "config.toml"), "--out", str(out)], capsys
    )
    assert code == 0
    for prefix in ("displaced_", "reference_"):
        for name in ("heatmap.csv", "singles.csv", "gain.json", "cell_replicates.csv", "heatmap.svg"):
            assert (out / f"{prefix}{name}").exists()
    summary = json.loads((out / "displaced_summary.json").read_text())
    assert summary["delta"] == pytest.approx(
        summary["mean_ratio_displaced"] - summary["mean_ratio_reference"]
    )


def test_cli_usage_errors(workspace, capsys):
    assert _run([], capsys)[0] == 1
    assert _run(["teleport"], capsys)[0] == 1
    assert _run(["gridsearch"], capsys)[0] == 1  # --config required
    code, _, err = _run(["gridsearch", "--config", "/nope/x.toml"], capsys)
    assert code == 1
    assert "config error" in err


def test_cli_data_error_exit_2(workspace, tmp_path, capsys):
    bad_units = tmp_path / "bad_units.csv"
    bad_units.write_text("id,x,y,w,outcome\nu1,10.5,10.5,7,0.0\n")
    cfgp = tmp_path / "bad.toml"
    cfgp.write_text(
        f"""
[paths]
raster = "{workspace / 'raster.bin'}"
units = "{bad_units}"

[grid]
scales = [8]
replicates = 1
"""
    )
    code, _, err = _run(["gridsearch", "--config", str(cfgp), "--out", str(tmp_path / "o2")], capsys)
    assert code == 2
    assert "data error" in err
    assert "w must be 0 or 1" in err


def test_cli_numerical_error_exit_3(workspace, tmp_path, capsys, monkeypatch):
    def boom(cfg, outdir, threads):
        raise NumericalError("synthetic")

    monkeypatch.setitem(cli._COMMANDS, "gridsearch", boom)
    code, _, err = _run(
        ["gridsearch", "--config", str(workspace / "config.toml"),
         "--out", str(tmp_path / "o3")],
        capsys,
    )
    assert code == 3
    assert "numerical error" in err


def test_cli_env_output_root(workspace, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    monkeypatch.chdir(tmp_path)
    code, _, _ = _run(["embed", "--config", str(workspace / "config.toml")], capsys)
    assert code == 0
    assert (tmp_path / "root" / "embed" / "embeddings_s8.csv").exists()


def test_cli_inputs_unmodified(workspace, tmp_path, capsys):
    before = (_sha(workspace / "raster.bin"), _sha(workspace / "units.csv"))
    _run(["qini", "--config", str(workspace / "config.toml"), "--out", str(tmp_path / "ro")], capsys)
    after = (_sha(workspace / "raster.bin"), _sha(workspace / "units.csv"))
    assert before == after

import json
import os
import subprocess
from pathlib import Path

import pytest

import agentmixer

CONFIGS = Path(os.environ.get("AGENTMIXER_CONFIG_DIR", Path(__file__).resolve().parents[2] / "configs"))

CLIMBING = """[run]
algorithm = agentmixer
seeds = 2
eval_episodes = 3
record_wallclock = false
[env]
name = climbing
[ppo]
rollout_threads = 4
episode_length = 8
ppo_epochs = 2
"""


@pytest.fixture
def climbing_ini(tmp_path):
    path = tmp_path / "climb.ini"
    path.write_text(CLIMBING)
    return path


def test_version_and_exit_codes():
    assert agentmixer.__version__ == "0.1.0"
    assert (agentmixer.EXIT_OK, agentmixer.EXIT_VERIFY_FAILED, agentmixer.EXIT_USAGE, agentmixer.EXIT_NUMERIC) == (0, 1, 2, 3)


def test_git_blob_hash_matches_git():
    assert agentmixer.git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_normalize_config_fills_defaults_and_rejects_unknown_keys():
    text = agentmixer.normalize_config("[env]\nname = climbing\n")
    assert "ppo_epochs = 15" in text
    assert agentmixer.normalize_config(text) == text
    with pytest.raises(agentmixer.ConfigError, match="ppo.clipp"):
        agentmixer.normalize_config("[ppo]\nclipp = 0.2\n")


def test_train_eval_analyze_round_trip(tmp_path, climbing_ini):
    summary = agentmixer.train(climbing_ini, steps=64, output=tmp_path / "runs")
    assert summary["seeds"][0]["seed"] == 2
    run = tmp_path / "runs" / "climb"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    ckpt = run / "seed_2" / "final.ckpt"
    ev = agentmixer.evaluate(ckpt, climbing_ini, episodes=4)
    assert ev["episodes"] == 4
    assert ev["std"] == 0.0
    report = agentmixer.analyze(ckpt, climbing_ini)
    assert report["normalization"] == 41.0
    for key in ("epsilon_ne", "epsilon_ce", "epsilon_cce"):
        assert 0.0 <= report[key + "_normalized"] <= 1.0
        assert report[key] == pytest.approx(41.0 * report[key + "_normalized"])


def test_commands_raise_on_bad_input(tmp_path, climbing_ini):
    with pytest.raises(agentmixer.CommandError) as e:
        agentmixer.train(tmp_path / "missing.ini")
    assert e.value.code == agentmixer.EXIT_USAGE
    with pytest.raises(agentmixer.CommandError):
        agentmixer.verify("nope")


def test_analyze_product_on_climbing():
    payoff = [[11, -30, 0], [-30, 7, 0], [0, 6, 5]]
    r = agentmixer.analyze_product(payoff, [[1, 0, 0], [1, 0, 0]])
    assert r["epsilon_ce"] == 0.0
    assert r["value"] == 11.0


def test_gumbel_degeneration_at_zero_temperature():
    tv = agentmixer.temperature_degeneration_test([[0.2, 0.8], [0.5, 0.3, 0.2]], 20000, [0.0], seed=3)
    assert len(tv) == 1
    assert tv[0] <= 0.03


def test_verify_gumbel_suite_passes():
    report = agentmixer.verify("gumbel")
    assert report["pass"] is True


@pytest.mark.skipif("AGENTMIXER_CLI" not in os.environ, reason="CLI path comes from ctest")
def test_cli_usage_errors_exit_2(tmp_path):
    cli = os.environ["AGENTMIXER_CLI"]
    assert subprocess.run([cli, "verify", "nope"], capture_output=True).returncode == 2
    assert subprocess.run([cli, "train"], capture_output=True).returncode == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[ppo]\nclip = x\n")
    r = subprocess.run([cli, "train", str(bad)], capture_output=True, text=True)
    assert r.returncode == 2
    assert "ppo.clip" in r.stderr


@pytest.mark.skipif("AGENTMIXER_CLI" not in os.environ, reason="CLI path comes from ctest")
def test_cli_version():
    r = subprocess.run([os.environ["AGENTMIXER_CLI"], "--version"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "0.1.0" in r.stdout


def test_shipped_configs_parse():
    for ini in sorted(CONFIGS.glob("*.ini")):
        agentmixer.normalize_config(ini.read_text())

import pytest

from avground.config import AppConfig, ConfigError, load_config, parse_config
from avground.grammar import TaskKind
from avground.rewards import WEIGHT_PRESETS


def test_defaults():
    cfg = load_config(None)
    assert cfg == AppConfig()
    assert cfg.grpo.group_size == 6 and cfg.grpo.epsilon == 0.2 and cfg.grpo.beta == 0.04
    assert cfg.filter.min_et_ratio == 0.08 and cfg.qc_cutoff == 2.5
    assert cfg.reward_config("train").fallback == "error"
    assert cfg.reward_config("eval").fallback == "jaccard"


def test_docstring_example_loads(tmp_path):
    (tmp_path / "vectors.txt").write_text("1 2\ndog 1 0\n")
    path = tmp_path / "run.toml"
    path.write_text(
        '[rewards]\ntau = 0.6\nembeddings = "vectors.txt"\nfallback = "jaccard"\nstopwords = ["A"]\n'
        "[rewards.weights.spatial]\nformat = 1.0\ntemporal = 0.0\nobject = 2.0\nspatial = 1.0\n"
        "[grpo]\nbeta = 0.1\n[filter]\nmin_et_ratio = 0.1\n[qc]\ncutoff = 3\n"
    )
    cfg = load_config(path)
    rc = cfg.reward_config("train")
    assert rc.tau == 0.6 and rc.fallback == "jaccard" and rc.stopwords == frozenset({"a"})
    assert rc.table is not None and "dog" in rc.table.entries
    assert rc.weights[TaskKind.SPATIAL].object == 2.0
    assert rc.weights[TaskKind.TEMPORAL] == WEIGHT_PRESETS[TaskKind.TEMPORAL]
    assert cfg.grpo.beta == 0.1 and cfg.filter.min_et_ratio == 0.1 and cfg.qc_cutoff == 3.0


@pytest.mark.parametrize(
    "data",
    [
        {"reward": {}},
        {"rewards": {"taus": 0.5}},
        {"rewards": {"tau": 0.0}},
        {"rewards": {"fallback": "ignore"}},
        {"rewards": {"weights": {"audio": {}}}},
        {"rewards": {"weights": {"spatial": {"format": 1, "sound": 1}}}},
        {"grpo": {"epsilon": 2.0}},
        {"filter": {"max_events": 0}},
        {"qc": {"threshold": 2}},
    ],
)
def test_rejects_bad_config(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_bad_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[rewards\n")
    with pytest.raises(ConfigError):
        load_config(path)

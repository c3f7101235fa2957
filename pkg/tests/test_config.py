from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ensemble_teleport import config
from ensemble_teleport.config import ConfigError
from ensemble_teleport.protocol import SIX_TARGETS, TargetState
from ensemble_teleport.simulator import DecayLaw, NoiseConfig, TimingConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """\
[run]
seed = 7

[schedule]
Up = 100
"""


def test_minimal_config_uses_defaults():
    cfg = config.parse_text(MINIMAL)
    assert cfg.noise == NoiseConfig() and cfg.timing == TimingConfig()
    assert cfg.seed == 7 and cfg.targets == [TargetState.UP]


@pytest.mark.parametrize("name", ["paper.cfg", "paper-heralded.cfg", "noiseless.cfg"])
def test_shipped_configs_parse_and_round_trip(name):
    cfg = config.load(CONFIGS / name)
    again = config.parse_text(cfg.to_text())
    assert again == cfg
    assert again.hash == cfg.hash


def test_shipped_regimes():
    prep = config.load(CONFIGS / "paper.cfg")
    her = config.load(CONFIGS / "paper-heralded.cfg")
    assert prep.noise.P_A == 3e-3 and her.noise.P_A == 3e-4
    assert her.reference_noise.P_A == 3e-3
    assert replace(her.noise, P_A=3e-3) == prep.noise


finite = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@given(
    eta=finite,
    dark=st.floats(min_value=0, max_value=1e-3),
    angles=st.tuples(*[st.floats(-3.2, 3.2, allow_nan=False)] * 3),
    tau=st.floats(min_value=1, max_value=1e6),
    law=st.sampled_from(list(DecayLaw)),
    seed=st.integers(0, 2**64 - 1),
    counts=st.dictionaries(st.sampled_from(SIX_TARGETS), st.integers(1, 10**9), min_size=1),
    ref=st.one_of(st.none(), finite),
)
def test_round_trip_property(eta, dark, angles, tau, law, seed, counts, ref):
    cfg = config.ExperimentConfig(
        NoiseConfig(eta_A=eta, dark_count_prob=dark, residual_rotation=angles),
        TimingConfig(lifetime_tau=tau, decay_law=law),
        counts,
        config.RunConfig(seed=seed, reference_P_A=ref),
    )
    assert config.parse_text(cfg.to_text()) == cfg


def _error(text):
    with pytest.raises(ConfigError) as e:
        config.parse_text(text, "x.cfg")
    return e.value


def test_errors_carry_line_numbers():
    e = _error(MINIMAL + "[noise]\neta_A = 0.5\neta_B = banana\n")
    assert e.line == 8 and "eta_B" in str(e) and str(e).startswith("x.cfg:8:")
    e = _error(MINIMAL + "[noise]\nP_A = 1.5\n")
    assert e.line == 7 and "P_A" in e.message
    e = _error(MINIMAL + "[noise]\nfoo = 1\n")
    assert e.line == 7 and "unknown key" in e.message
    e = _error("[run]\nseed = 1\n[schedule]\nUp = 1\nPsi = 3\n")
    assert e.line == 5
    e = _error("[run]\nseed = 1\n[schedule]\nUp = 1\nup = 2\n")
    assert e.line == 5
    e = _error("seed = 1\n")
    assert e.line == 1
    e = _error(MINIMAL + "[noise]\nresidual_rotation = 0.1, 0.2\n")
    assert e.line == 7 and "three" in e.message


def test_timing_cross_field_error_points_at_a_key():
    e = _error(MINIMAL + "[timing]\ncycle_rate = 71.4\ntrap_duration = 12\n")
    assert e.line in (7, 8)


def test_seed_required_and_schedule_non_empty():
    assert "seed" in _error("[schedule]\nUp = 3\n").message
    assert "schedule is empty" in _error("[run]\nseed = 1\n").message
    assert "schedule is empty" in _error("[run]\nseed = 1\n[schedule]\nUp = 0\n").message
    assert "unsigned" in _error("[run]\nseed = -1\n[schedule]\nUp = 1\n").message


def test_unknown_section():
    e = _error(MINIMAL + "\n[extras]\na = 1\n")
    assert e.line == 7


def test_output_dir_precedence(monkeypatch):
    cfg = config.parse_text(MINIMAL.replace("seed = 7", "seed = 7\nout = from_file"))
    monkeypatch.delenv(config.ENV_OUT, raising=False)
    assert cfg.output_dir() == Path("from_file")
    monkeypatch.setenv(config.ENV_OUT, "from_env")
    assert cfg.output_dir() == Path("from_env")
    assert cfg.output_dir("from_flag") == Path("from_flag")


def test_hash_ignores_execution_keys_but_not_seed():
    a = config.parse_text(MINIMAL)
    b = config.parse_text(MINIMAL.replace("seed = 7", "seed = 7\nout = elsewhere\nworkers = 4"))
    c = config.parse_text(MINIMAL.replace("seed = 7", "seed = 8"))
    assert a.hash == b.hash != c.hash


def test_with_value_and_key_resolution():
    cfg = config.parse_text(MINIMAL)
    assert config.with_value(cfg, "P_A", "3e-4").noise.P_A == 3e-4
    assert config.with_value(cfg, "timing.lifetime_tau", "50").timing.lifetime_tau == 50
    assert config.with_value(cfg, "decay_law", "gauss").timing.decay_law is DecayLaw.GAUSSIAN
    with pytest.raises(KeyError):
        config.resolve_key("nonsense")
    assert len(config.documented_keys()) == sum(len(v) for v in config.KEY_DOCS.values())


def test_every_dataclass_field_is_documented():
    from dataclasses import fields

    assert [f.name for f in fields(NoiseConfig)] == list(config.KEY_DOCS["noise"])
    assert [f.name for f in fields(TimingConfig)] == list(config.KEY_DOCS["timing"])
    assert [f.name for f in fields(config.RunConfig)] == list(config.KEY_DOCS["run"])

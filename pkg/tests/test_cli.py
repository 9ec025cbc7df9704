import pytest

from hybridlab.cli import main
from hybridlab.config import ConfigError, PipelineConfig, load_config, stage_seed
from hybridlab.model import HybridPlan, load_checkpoint, parameter_hash
from hybridlab.sensitivity import read_plan

from conftest import DEFAULT_CONFIG

TINY_INI = """\
[pipeline]
seed = 3
precision = f32

[model]
layer_count = 3
hidden_dim = 16
head_count = 2
ffn_dim = 32
max_seq_len = 64

[harness]
examples_per_task = 20
seq_len = 24

[teacher]
max_steps = 40
batch_size = 8
seq_len = 24
eval_every = 20

[search]
swa_window = 4

[lora]
rank = 4
alpha = 4.0

[healing]
learning_rate = 1e-3
warmup_steps = 2
batch_size = 4
grad_accum_steps = 1
token_budget = 960
seq_len = 24
checkpoint_token_marks = 480, 960

[bench]
lengths = 16, 40
repeats = 5
tokens_per_point = 4
window = 8
hidden_dim = 16
head_count = 2
ffn_dim = 32
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def run(cmd, cfg, out, *extra):
    return main([cmd, "--config", str(cfg), "--out", str(out), *extra])


def test_default_config_loads():
    cfg = load_config(DEFAULT_CONFIG)
    assert isinstance(cfg, PipelineConfig)
    assert cfg.model.layer_count == 6 and cfg.healing.distill_weight == 0.5
    assert cfg.healing.checkpoint_token_marks == (80000, 160000, 320000, 560000)
    assert cfg.model.rng_seed == stage_seed(0, "model")
    assert load_config(DEFAULT_CONFIG, seed=5).model.rng_seed == stage_seed(5, "model")


def test_stage_seeds_are_deterministic_and_distinct():
    assert stage_seed(0, "heal") == stage_seed(0, "heal")
    assert stage_seed(0, "heal") != stage_seed(1, "heal")
    assert stage_seed(0, "heal") != stage_seed(0, "search")
    assert 0 <= stage_seed(7, "bench") < 2**32


@pytest.mark.parametrize("body, needle", [
    ("[model]\nhidden_dim = wide\n", "tiny.ini:2: [model] hidden_dim"),
    ("[model]\nwidth = 3\n", "[model] width: unknown"),
    ("[colour]\nx = 1\n", "[colour]: unknown section"),
    ("[model]\nrng_seed = 4\n", "derived"),
    ("[healing]\ndistill_weight = -1\n", "distill_weight"),
    ("[pipeline]\nprecision = f16\n", "precision"),
    ("[bench]\nrepeats = 2\n", "repeats"),
])
def test_config_errors_name_the_field(tmp_path, body, needle):
    path = tmp_path / "tiny.ini"
    path.write_text(body)
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert needle in str(exc.value)


def test_bad_config_exits_with_one(tmp_path, capsys):
    path = tmp_path / "tiny.ini"
    path.write_text("[model]\n\nhidden_dim = wide\n")
    assert run("train-teacher", path, tmp_path / "out") == 1
    assert "tiny.ini:3: [model] hidden_dim" in capsys.readouterr().err
    assert main(["eval", "--config", str(tmp_path / "missing.ini")]) == 1


def test_missing_inputs_exit_with_one(tiny_config, tmp_path):
    assert run("sensitivity", tiny_config, tmp_path / "empty") == 1
    assert run("eval", tiny_config, tmp_path / "empty") == 1


def test_invariant_violation_exits_with_two(tiny_config, tmp_path, monkeypatch, capsys):
    import hybridlab.cli as cli

    def broken(*a, **k):
        raise cli.InvariantError("synthetic")
    monkeypatch.setitem(cli.COMMANDS, "eval", broken)
    assert run("eval", tiny_config, tmp_path) == 2
    assert "invariant violated" in capsys.readouterr().err


def test_tiny_pipeline_end_to_end(tiny_config, tmp_path):
    out = tmp_path / "out"
    assert run("train-teacher", tiny_config, out) == 0
    for cmd in ("sensitivity", "search", "heal", "eval", "bench"):
        assert run(cmd, tiny_config, out) == 0, cmd
    names = {p.name for p in out.iterdir()}
    assert {"teacher.ckpt", "teacher_log.csv", "sensitivity.csv", "plan.txt", "search_log.csv", "healed.ckpt",
            "heal_log.csv", "scores.csv", "bench.csv", "healed_480.ckpt", "healed_960.ckpt"} <= names

    teacher = load_checkpoint(out / "teacher.ckpt")
    healed = load_checkpoint(out / "healed.ckpt")
    plan = read_plan(out / "plan.txt")
    assert healed.plan == plan and plan.softmax_count <= 1
    assert parameter_hash(healed.params) == parameter_hash(teacher.params)
    scores = (out / "scores.csv").read_text().splitlines()
    assert scores[0] == "checkpoint,plan,task,accuracy" and len(scores) == 1 + 2 * 4
    bench = (out / "bench.csv").read_text().splitlines()
    assert len(bench) == 1 + 4 * 2 and any(line.startswith("searched,") for line in bench)

    # determinism and stage isolation: rerunning a stage reproduces its outputs
    saved = {n: (out / n).read_bytes() for n in ("teacher.ckpt", "sensitivity.csv", "plan.txt", "healed.ckpt",
                                                 "heal_log.csv", "scores.csv")}
    for n in ("plan.txt", "healed.ckpt", "heal_log.csv", "scores.csv"):
        (out / n).unlink()
    for cmd in ("search", "heal", "eval"):
        assert run(cmd, tiny_config, out) == 0
    assert run("train-teacher", tiny_config, tmp_path / "again") == 0
    assert (tmp_path / "again" / "teacher.ckpt").read_bytes() == saved["teacher.ckpt"]
    for n, data in saved.items():
        if n != "teacher.ckpt":
            assert (out / n).read_bytes() == data, n


def test_seed_flag_changes_the_teacher(tiny_config, tmp_path):
    assert run("train-teacher", tiny_config, tmp_path / "a") == 0
    assert run("train-teacher", tiny_config, tmp_path / "b", "--seed", "4") == 0
    assert (tmp_path / "a" / "teacher.ckpt").read_bytes() != (tmp_path / "b" / "teacher.ckpt").read_bytes()


def test_explicit_input_paths(tiny_config, tmp_path):
    src = tmp_path / "src"
    assert run("train-teacher", tiny_config, src) == 0
    plan = tmp_path / "plan.txt"
    plan.write_text(HybridPlan.parse("S,W4,I").to_text() + "\n")
    out = tmp_path / "dst"
    assert run("heal", tiny_config, out, "--teacher", str(src / "teacher.ckpt"), "--plan", str(plan)) == 0
    assert load_checkpoint(out / "healed.ckpt").plan.to_text() == "S,W4,I"
    assert run("eval", tiny_config, out, "--checkpoint", str(out / "healed.ckpt")) == 0
    assert len((out / "scores.csv").read_text().splitlines()) == 1 + 4

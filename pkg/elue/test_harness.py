# ELUE/elue/test_harness.py

import json

import pytest

import harness
from config import serialize_config
from conftest import tiny_config
from envsim import load_tasks


@pytest.fixture
def workdir(tmp_path):
    cfg = tiny_config(run={"metrics_path": str(tmp_path / "train.jsonl"),
                           "checkpoint_path": str(tmp_path / "run.ckpt")})
    (tmp_path / "run.ini").write_text(serialize_config(cfg), encoding="utf-8")
    return tmp_path


def _train(workdir):
    return harness.main(["--log-level", "WARNING", "train", "--config", str(workdir / "run.ini")])


def test_sample_tasks_command(tmp_path):
    out = tmp_path / "tasks.txt"
    assert harness.main(["sample-tasks", "--family", "shifted_goal", "--n", "4", "--seed", "3",
                         "--out", str(out)]) == harness.EXIT_OK
    assert len(load_tasks(out)) == 4


def test_verify_ib_command(capsys):
    assert harness.main(["verify-ib", "--trials", "500"]) == harness.EXIT_OK
    assert "trials=500" in capsys.readouterr().out


def test_train_then_test_then_evaluate(workdir, capsys):
    assert _train(workdir) == harness.EXIT_OK
    assert (workdir / "run.ckpt").exists()
    phases = {json.loads(line)["phase"] for line in (workdir / "train.jsonl").read_text().splitlines()}
    assert phases == {"meta_train", "meta_train_eval"}

    test_metrics = workdir / "test.jsonl"
    assert harness.main(["test", "--config", str(workdir / "run.ini"), "--checkpoint", str(workdir / "run.ckpt"),
                         "--mode", "no_bel_grad", "--task-index", "1", "--metrics", str(test_metrics)]) == 0
    records = [json.loads(line) for line in test_metrics.read_text().splitlines()]
    assert records and all(r["phase"] == "meta_test" for r in records)

    tasks = workdir / "tasks.txt"
    harness.main(["sample-tasks", "--family", "radial_goal", "--n", "2", "--out", str(tasks)])
    capsys.readouterr()
    assert harness.main(["evaluate", "--checkpoint", str(workdir / "run.ckpt"), "--tasks", str(tasks),
                         "--episodes", "2"]) == harness.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [line.split(":")[0] for line in lines] == ["episode 1", "episode 2"]


def test_summarize_command(workdir, capsys):
    _train(workdir)
    capsys.readouterr()
    out = workdir / "summary.csv"
    assert harness.main(["summarize", "--metrics", str(workdir / "train.jsonl"), "--out", str(out)]) == 0
    assert out.read_text(encoding="utf-8").splitlines()[0] == "phase,episode_index,count,mean_return,std_return"
    assert harness.main(["summarize", "--metrics", str(workdir / "train.jsonl")]) == 0
    assert capsys.readouterr().out.startswith("phase,episode_index")


def test_seed_override_changes_the_checkpoint(workdir):
    _train(workdir)
    first = (workdir / "run.ckpt").read_bytes()
    assert harness.main(["train", "--config", str(workdir / "run.ini"), "--seed", "5",
                         "--out", str(workdir / "seed5.ckpt")]) == 0
    assert (workdir / "seed5.ckpt").read_bytes() != first


def test_repeated_commands_write_identical_metrics(workdir):
    ini = str(workdir / "run.ini")
    for name in ("a", "b"):
        assert harness.main(["train", "--config", ini, "--metrics", str(workdir / f"train_{name}.jsonl"),
                             "--out", str(workdir / f"{name}.ckpt")]) == 0
        assert harness.main(["test", "--config", ini, "--checkpoint", str(workdir / "a.ckpt"), "--mode", "bel_grad",
                             "--metrics", str(workdir / f"test_{name}.jsonl")]) == 0
    assert (workdir / "train_a.jsonl").read_bytes() == (workdir / "train_b.jsonl").read_bytes()
    assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()
    assert (workdir / "test_a.jsonl").read_bytes() == (workdir / "test_b.jsonl").read_bytes()


def test_config_errors_exit_with_2(workdir):
    bad = workdir / "bad.ini"
    bad.write_text("[train]\ncollection_steps = 7\n", encoding="utf-8")
    assert harness.main(["train", "--config", str(bad)]) == harness.EXIT_CONFIG
    assert harness.main(["train", "--config", str(workdir / "absent.ini")]) == harness.EXIT_CONFIG


def test_checkpoint_version_mismatch_exits_with_2(workdir):
    _train(workdir)
    ckpt = workdir / "run.ckpt"
    ckpt.write_bytes(ckpt.read_bytes().replace(b"schema_version = 1\n", b"schema_version = 9\n", 1))
    assert harness.main(["test", "--config", str(workdir / "run.ini"), "--checkpoint", str(ckpt)]) \
        == harness.EXIT_CONFIG


def test_incompatible_mode_exits_with_2(workdir):
    _train(workdir)
    assert harness.main(["test", "--config", str(workdir / "run.ini"), "--checkpoint", str(workdir / "run.ckpt"),
                         "--mode", "no_emb"]) == harness.EXIT_CONFIG


def test_runtime_errors_exit_with_3(workdir):
    assert harness.main(["test", "--config", str(workdir / "run.ini"),
                         "--checkpoint", str(workdir / "absent.ckpt")]) == harness.EXIT_RUNTIME
    bad_tasks = workdir / "tasks.txt"
    bad_tasks.write_text("maze,0,0,0,0,0\n", encoding="utf-8")
    _train(workdir)
    assert harness.main(["evaluate", "--checkpoint", str(workdir / "run.ckpt"), "--tasks", str(bad_tasks)]) \
        == harness.EXIT_RUNTIME


def test_unknown_command_is_an_argparse_error():
    with pytest.raises(SystemExit):
        harness.main(["fly"])

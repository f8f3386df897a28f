import json

import numpy as np
import pytest

from scdmd_lab import cli
from scdmd_lab.ar import MixedStepConfig
from scdmd_lab.dmd import DistillConfig, init_state
from scdmd_lab.harness import checkpoint
from scdmd_lab.harness.acceptance import CriterionResult
from scdmd_lab.harness.config import ConfigError, EvalSpec, RunConfig, config_hash, dumps, from_dict, load, loads
from scdmd_lab.harness.metrics import MetricsWriter, encode, read_records, truncate_after
from scdmd_lab.harness.report import CRITERIA_IDS, write_report
from scdmd_lab.harness.runner import OUT_ENV, RunError, default_out, run, run_name


def tiny_nonar(**kw):
    d = DistillConfig(iterations=8, batch_size=16, hidden=(8,), critic_hidden=(8,), critic_updates_per_gen_update=1)
    return RunConfig(kind="nonar", distill=d, eval=EvalSpec(n_samples=64, n_projections=8, step_counts=[1, 2]),
                     checkpoint_every=4, **kw)


def tiny_ar():
    d = DistillConfig(iterations=6, batch_size=4, hidden=(8,), critic_hidden=(8,), critic_updates_per_gen_update=1)
    mixed = MixedStepConfig(align_warmup_iters=2, align_apply_prob=1.0, sc_mode="always")
    return RunConfig(kind="ar", distill=d, mixed=mixed, eval=EvalSpec(n_samples=16, step_counts=[2], long_horizon=1),
                     checkpoint_every=3)


# config

def test_config_json_round_trip():
    cfg = tiny_ar()
    back = loads(dumps(cfg))
    assert back.to_dict() == cfg.to_dict()
    assert config_hash(back) == config_hash(cfg)


def test_config_yaml_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("kind: nonar\nseeds: [3, 4]\ndistill:\n  lambda_sc: 0.5\n  iterations: 10\n")
    cfg = load(path)
    assert cfg.seeds == [3, 4] and cfg.distill.lambda_sc == 0.5 and cfg.distill.iterations == 10


@pytest.mark.parametrize("data, where", [
    ({"nope": 1}, "nope"),
    ({"distill": {"lr_critc": 1e-3}}, "distill.lr_critc"),
    ({"mixed": {"k_max": 3}}, "mixed.k_max"),
])
def test_unknown_keys_name_their_path(data, where):
    with pytest.raises(ConfigError) as info:
        from_dict(data)
    assert info.value.path == where


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        from_dict({"kind": "bogus"})
    with pytest.raises(ConfigError):
        from_dict({"teacher": {"path": "nowhere"}})


def test_hash_is_stable_and_sensitive():
    a, b = tiny_nonar(), tiny_nonar()
    assert config_hash(a) == config_hash(b)
    b.distill.lambda_sc = 0.25
    assert config_hash(a) != config_hash(b)
    assert len(config_hash(a)) == 16


def test_with_seed_does_not_mutate():
    cfg = tiny_nonar(seeds=[0, 1])
    one = cfg.with_seed(1)
    assert one.distill.seed == 1 and cfg.seeds == [0, 1]


# checkpoint

def _state():
    cfg = tiny_nonar()
    return init_state(cfg.distill, 2)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    st = _state()
    st.step = 7
    g = np.random.default_rng(3)
    g.standard_normal(5)
    path = checkpoint.save(tmp_path / "a.ckpt", st, "abc", (g,))
    fresh, streams = checkpoint.load_into(path, _state(), "abc")
    assert fresh.step == 7
    assert fresh.generator.params.flat.tobytes() == st.generator.params.flat.tobytes()
    assert fresh.critic_opt.m.tobytes() == st.critic_opt.m.tobytes()
    assert streams[0].standard_normal(3).tobytes() == g.standard_normal(3).tobytes()


def test_checkpoint_errors(tmp_path):
    st = _state()
    path = checkpoint.save(tmp_path / "a.ckpt", st, "abc")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_into(path, _state(), "other")

    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.read(tmp_path / "short.ckpt")

    (tmp_path / "junk.ckpt").write_bytes(b"hello\n")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read(tmp_path / "junk.ckpt")

    (tmp_path / "v9.ckpt").write_bytes(raw.replace(b"SCDMDCKPT 1", b"SCDMDCKPT 9", 1))
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.read(tmp_path / "v9.ckpt")

    other = init_state(DistillConfig(hidden=(4,), critic_hidden=(8,)), 2)
    with pytest.raises(checkpoint.CheckpointError, match="parameters"):
        checkpoint.load_into(path, other)


# metrics

def test_encode_handles_numpy_and_rejects_nan():
    line = encode({"a": np.float64(1.5), "b": np.arange(2), "c": (np.int64(3),)})
    assert json.loads(line) == {"a": 1.5, "b": [0, 1], "c": [3]}
    with pytest.raises(ValueError):
        encode({"x": float("nan")})


def test_truncate_after(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path, "r", "h") as w:
        w.write({"seed": 0}, kind="header")
        for i in range(5):
            w.write({"iter": i})
        w.write({"iter": 5, "eval": {}}, kind="final")
    truncate_after(path, 3)
    recs = list(read_records(path))
    assert [r["type"] for r in recs] == ["header", "iter", "iter", "iter"]
    assert all(r["run_id"] == "r" and r["config_hash"] == "h" for r in recs)


# runner

@pytest.mark.parametrize("make", [tiny_nonar, tiny_ar])
def test_runner_determinism_and_resume(tmp_path, make):
    cfg = make()
    a = run(cfg, tmp_path / "a")[0]
    b = run(cfg, tmp_path / "b")[0]
    log = (a.directory / "metrics.jsonl").read_bytes()
    assert log == (b.directory / "metrics.jsonl").read_bytes()
    assert (a.directory / "summary.json").read_bytes() == (b.directory / "summary.json").read_bytes()

    mid = checkpoint.list_checkpoints(a.directory / "checkpoints")[0]
    run(cfg, tmp_path / "a", resume=mid)
    assert (a.directory / "metrics.jsonl").read_bytes() == log
    assert (a.directory / "final.ckpt").read_bytes() == (b.directory / "final.ckpt").read_bytes()
    assert json.loads((tmp_path / "a" / run_name(cfg) / "config.echo.json").read_text()) == cfg.to_dict()


def test_resume_rejects_other_config(tmp_path):
    cfg = tiny_nonar()
    res = run(cfg, tmp_path)[0]
    mid = checkpoint.list_checkpoints(res.directory / "checkpoints")[0]
    other = tiny_nonar()
    other.distill.lambda_sc = 0.5
    with pytest.raises(checkpoint.CheckpointError):
        run(other, tmp_path, resume=mid)
    with pytest.raises(RunError):
        run(tiny_nonar(seeds=[0, 1]), tmp_path, resume=mid)


def test_default_out_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert default_out() == tmp_path / "env"
    monkeypatch.delenv(OUT_ENV)
    assert default_out().name == "runs"


# cli

def test_cli_dry_run(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert cli.main(["train-nonar", "--dry-run", "--seeds", "3", "4"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["seeds"] == [3, 4]
    assert shown["run_dir"].startswith(str(tmp_path))
    assert len(shown["grids"]["train"]) == 8 and len(shown["grids"]["infer"]) == 4
    assert not any(tmp_path.iterdir())


def test_cli_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"distill": {"nope": 1}}')
    assert cli.main(["train-nonar", "--config", str(path), "--dry-run"]) == 2
    assert "distill.nope" in capsys.readouterr().err
    assert cli.main(["train-ar", "--config", str(path.with_name("missing.json")), "--dry-run"]) == 1


def test_cli_kind_mismatch(tmp_path):
    path = tmp_path / "ar.json"
    path.write_text('{"kind": "ar"}')
    assert cli.main(["train-nonar", "--config", str(path), "--dry-run"]) == 2


def test_cli_train_eval_sample_report(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(dumps(tiny_nonar()))
    out = tmp_path / "runs"
    assert cli.main(["train-nonar", "--config", str(cfg_path), "--out", str(out)]) == 0
    final = out / run_name(tiny_nonar()) / "seed_0" / "final.ckpt"
    assert final.exists()
    capsys.readouterr()

    assert cli.main(["eval-defect", "--checkpoint", str(final), "--samples", "32", "--out", str(tmp_path / "ev")]) == 0
    defect = json.loads((tmp_path / "ev" / "defect.json").read_text())
    assert len(defect["intervals"]) == 4 and defect["path_average"] >= 0
    capsys.readouterr()

    assert cli.main(["sample", "--checkpoint", str(final), "--samples", "5", "--k", "2"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 5 and len(rows[0].split(",")) == 2

    assert cli.main(["eval-long", "--checkpoint", str(final)]) == 1
    assert cli.main(["report", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert run_name(tiny_nonar()) in report["runs"]


# report

def test_report_lists_every_criterion_and_plots(tmp_path):
    run(tiny_nonar(), tmp_path)
    run(tiny_ar(), tmp_path)
    results = [CriterionResult(3, "unit", True, "ok", {}), CriterionResult(8, "law", False, "bad", {})]
    report = json.loads(write_report(tmp_path, results).read_text())
    assert [c["id"] for c in report["criteria"]] == list(CRITERIA_IDS)
    assert report["criteria"][2]["passed"] is True and report["criteria"][0]["passed"] is None
    assert report["all_passed"] is False
    for name, entry in report["runs"].items():
        assert entry["plots"]
        for f in entry["plots"]:
            assert (tmp_path / "plots" / f).stat().st_size > 0
        assert any(f.endswith(".png") for f in entry["plots"])
    ar = next(e for e in report["runs"].values() if e["kind"] == "ar")
    assert "energy_mean_k2" in ar["metrics"]

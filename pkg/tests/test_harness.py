import json
import math
from dataclasses import replace

import numpy as np
import pytest

from soap import tensor as T
from soap.cli import main
from soap.episodic import ClassDef, Dataset, Perturbations, SyntheticSpec, generate_synthetic_dataset
from soap.episodic.synthetic import static_spec
from soap.harness import (
    CheckpointMismatch,
    NumericalAbort,
    OptimizerConfig,
    RunConfig,
    cmd_eval,
    cmd_gen_data,
    cmd_gradcheck,
    cmd_train,
    confidence_half_width,
    evaluate,
    load_checkpoint,
    save_checkpoint,
)
from soap.model import ModelConfig, SoapNet

KINDS = ("translate-left", "translate-right", "translate-up", "translate-down", "static-textured")


def tiny_spec(seed=1, kinds=KINDS, static_only=False) -> SyntheticSpec:
    classes = []
    for split in ("train", "test"):
        for i, kind in enumerate(kinds):
            classes.append(ClassDef(name=f"{kind}-{i}-{split}", kind=kind, speed=0.0 if static_only else 0.25,
                                    size=4, texture=1 + i % 3, split=split))
    return SyntheticSpec(classes=tuple(classes), clip_length=12, H=10, W=10, clips_per_class=6, seed=seed)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    return generate_synthetic_dataset(tiny_spec(), tmp_path_factory.mktemp("data"))


def tiny_run(data_dir, **kw) -> RunConfig:
    base = dict(
        dataset=str(data_dir), n_way=3, k_shot=1, queries_per_class=1,
        F=4, C=3, H=10, W=10, c_r=4, tuple_set=(1, 2), D=8, backbone_stages=((4, 3),),
        d_k=6, d_v=6, episodes_train=4, episodes_eval=20,
        optimizer=OptimizerConfig(learning_rate=0.05), seed=3,
    )
    base.update(kw)
    return RunConfig(**base)


# ---------------------------------------------------------------- config


def test_config_round_trip(data_dir, tmp_path):
    cfg = tiny_run(data_dir, perturbations=Perturbations(any_shot_range=(1, 3), reverse_query=True))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("bad", [{"n_way": 0}, {"tuple_set": (1, 4)}, {"episodes_train": 0}, {"bogus": 1}])
def test_invalid_config_rejected(bad, data_dir):
    d = tiny_run(data_dir).to_dict()
    d.update(bad)
    with pytest.raises((ValueError, TypeError)):
        RunConfig.from_dict(d)


def test_confidence_interval():
    assert confidence_half_width(0.5, 100) == pytest.approx(1.96 * 0.05)
    assert confidence_half_width(1.0, 10) == 0.0


# ---------------------------------------------------------------- training


def test_zero_learning_rate_leaves_params_untouched(data_dir):
    cfg = tiny_run(data_dir, optimizer=OptimizerConfig(learning_rate=0.0))
    before = SoapNet(cfg.model_config(), seed=cfg.seed)
    from soap.harness import quantize_params

    quantize_params(before)
    after = cmd_train(cfg).model
    for name, p in before.params.items():
        assert after.params[name].data.tobytes() == p.data.tobytes()


def test_first_loss_near_log_n(data_dir):
    cfg = tiny_run(data_dir, n_way=5, episodes_train=1)
    for seed in range(3):
        loss = cmd_train(replace(cfg, seed=seed)).losses[0]
        assert abs(loss - math.log(5)) < 0.5


def test_training_deterministic(data_dir):
    cfg = tiny_run(data_dir)
    a, b = cmd_train(cfg).losses, cmd_train(cfg).losses
    assert a == b


def test_metrics_stream_and_checkpoint(data_dir, tmp_path):
    cfg = tiny_run(data_dir, metrics_every=2)
    res = cmd_train(cfg, tmp_path / "run")
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    records = [json.loads(l) for l in lines]
    assert [r["episode"] for r in records] == [1, 3]
    assert [r["loss"] for r in records] == [res.losses[1], res.losses[3]]
    assert (tmp_path / "run" / "params.json").exists()


def test_nan_loss_aborts_with_norms(data_dir, monkeypatch):
    cfg = tiny_run(data_dir)
    monkeypatch.setattr(SoapNet, "loss", lambda self, s, q, y: T.reduce_sum(Tensor_nan(), axes=0))
    with pytest.raises(NumericalAbort) as err:
        cmd_train(cfg)
    assert err.value.episode == 0
    assert "head.psi.weight" in err.value.norms


def Tensor_nan():
    return T.Tensor(np.array([np.nan]))


def test_dataset_too_small(data_dir):
    with pytest.raises(ValueError, match="too small"):
        cmd_train(tiny_run(data_dir, n_way=6))


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bytes(data_dir, tmp_path):
    cfg = tiny_run(data_dir)
    model = cmd_train(cfg, tmp_path / "a").model
    loaded, _ = load_checkpoint(tmp_path / "a" / "params.json")
    save_checkpoint(loaded, cfg, tmp_path / "b")
    for name in ("params.json", "params.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "params.json").read_text())
    names = [e["name"] for e in manifest["params"]]
    assert sorted(names) == sorted(model.params.names()) and len(set(names)) == len(names)


def test_loaded_eval_equals_in_memory(data_dir, tmp_path):
    cfg = tiny_run(data_dir)
    model = cmd_train(cfg, tmp_path / "run").model
    mem = cmd_eval(cfg, model)
    disk = cmd_eval(cfg, tmp_path / "run")
    assert (mem.correct, mem.predictions) == (disk.correct, disk.predictions)


def test_incompatible_checkpoint_lists_fields(data_dir, tmp_path):
    cfg = tiny_run(data_dir)
    cmd_train(cfg, tmp_path / "run")
    with pytest.raises(CheckpointMismatch) as err:
        load_checkpoint(tmp_path / "run", replace(cfg, D=12, d_k=4))
    assert set(err.value.diff) == {"D", "d_k"}


# ---------------------------------------------------------------- evaluation


def test_untrained_model_at_chance(data_dir):
    cfg = tiny_run(data_dir, n_way=5)
    model = SoapNet(cfg.model_config(), seed=0)
    rep = evaluate(model, Dataset(data_dir, "test"), cfg, episodes=2000)
    assert abs(rep.accuracy - 0.2) < 0.05


def test_zero_noise_matches_clean(data_dir):
    cfg = tiny_run(data_dir, k_shot=2)
    model = SoapNet(cfg.model_config(), seed=0)
    ds = Dataset(data_dir, "test")
    a = evaluate(model, ds, cfg, Perturbations(), episodes=50)
    b = evaluate(model, ds, cfg, Perturbations(sample_noise_ratio=0.0, frame_noise_count=0), episodes=50)
    assert a.correct == b.correct


def test_reverse_is_noop_on_static_data(tmp_path):
    root = generate_synthetic_dataset(static_spec().__class__(**{**static_spec().__dict__, "clips_per_class": 4,
                                                                 "clip_length": 8, "H": 10, "W": 10}),
                                      tmp_path / "static")
    cfg = tiny_run(root, n_way=5)
    model = SoapNet(cfg.model_config(), seed=0)
    ds = Dataset(root, "test")
    a = evaluate(model, ds, cfg, Perturbations(), episodes=40)
    b = evaluate(model, ds, cfg, Perturbations(reverse_query=True), episodes=40)
    assert a.correct == b.correct


def test_eval_summary_record(data_dir, tmp_path):
    cfg = tiny_run(data_dir)
    model = SoapNet(cfg.model_config(), seed=0)
    rep = cmd_eval(cfg, model, Perturbations(interval=2), episodes=5, out_path=tmp_path / "m.jsonl")
    rec = json.loads((tmp_path / "m.jsonl").read_text())
    assert rec["episodes"] == 5 and rec["perturbations"]["interval"] == 2
    assert rec["accuracy"] == rep.accuracy and rec["ci95"] == rep.ci95


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_passes():
    report = cmd_gradcheck(seed=0, samples=3)
    assert report.passed and report.max_rel_error < 1e-4


def test_gradcheck_empty_model_vacuous():
    from soap.gradcheck import finite_diff_check

    report = finite_diff_check(lambda: T.Tensor(1.0), {})
    assert report.passed and report.checks == []


def test_gradcheck_names_mutated_parameter(monkeypatch):
    original = T.BACKWARD_RULES["linear"]

    def flipped(g, node):
        gx, gw, *rest = original(g, node)
        return (gx, -gw if node.inputs[1].name == "head.lambda.weight" else gw, *rest)

    monkeypatch.setitem(T.BACKWARD_RULES, "linear", flipped)
    report = cmd_gradcheck(seed=0, samples=3)
    assert not report.passed
    assert "head.lambda.weight" in report.failing_params()


# ---------------------------------------------------------------- data generation and CLI


def test_gen_data_default_layout(tmp_path):
    root = cmd_gen_data(None, tmp_path / "d")
    manifest = json.loads((root / "manifest.json").read_text())
    assert len(manifest["classes"]) == 10
    assert all(len(c["clips"]) == 40 for c in manifest["classes"])
    from soap.episodic import read_clip

    clip = read_clip(root / manifest["classes"][0]["clips"][0])
    assert clip.shape == (48, 3, 32, 32)


def test_cli_end_to_end(data_dir, tmp_path, capsys):
    cfg = tiny_run(data_dir)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run"), "--quiet"]) == 0
    capsys.readouterr()
    rc = main(["eval", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "run" / "params.json"),
               "--reverse-query", "--any-shot", "1:2", "--episodes", "6"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["episodes"] == 6 and summary["perturbations"]["reverse_query"] is True
    assert summary["perturbations"]["any_shot_range"] == [1, 2]


def test_cli_validation_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_way": -1}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1


def test_cli_mismatch_exit_code(data_dir, tmp_path):
    cfg = tiny_run(data_dir)
    cmd_train(cfg, tmp_path / "run")
    other = tmp_path / "other.json"
    other.write_text(json.dumps(replace(cfg, D=12).to_dict()))
    assert main(["eval", "--config", str(other), "--checkpoint", str(tmp_path / "run"), "--episodes", "2"]) == 1


def test_cli_numerical_abort_exit_code(data_dir, tmp_path, monkeypatch):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_run(data_dir).to_dict()))
    monkeypatch.setattr(SoapNet, "loss", lambda self, s, q, y: T.reduce_sum(Tensor_nan(), axes=0))
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--samples", "2"]) == 0
    assert "PASS" in capsys.readouterr().out

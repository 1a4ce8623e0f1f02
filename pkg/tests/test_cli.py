import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from deem import cli
from deem.datamodel import deserialize_docs, save_png
from deem.synth import split_combos


def digest_tree(root):
    h = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and "run" not in p.parts:
            h[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return h


def test_synth_data_counts_and_byte_identical(tmp_path):
    assert cli.main(["synth-data", "--n-train", "100", "--n-ood", "20", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth-data", "--n-train", "100", "--n-ood", "20", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")
    assert len(deserialize_docs(tmp_path / "a" / "train.jsonl")) == 100
    labels = (tmp_path / "a" / "ood_labels.jsonl").read_text().splitlines()
    assert len(labels) == 20
    manifest = json.loads((tmp_path / "a" / "run" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["command"] == "synth-data"


def test_train_and_ood_attributes_disjoint():
    for n_off in (0, 1, 2):
        train, ood = split_combos(n_off)
        assert not {a.key for a in train} & {a.key for a in ood}
        assert len(train) + len(ood) == 32


def test_usage_and_data_exit_codes(tmp_path, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["synth-data", "--n-train", "0", "--n-ood", "1", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["evaluate", "--benchmark", str(tmp_path / "missing.jsonl"), "--answers", "x", "--out", str(tmp_path / "e")]) == cli.EXIT_DATA
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nunknown_key: 2\n")
    assert cli.main(["train", "--config", str(bad), "--stage", "S1"]) == cli.EXIT_DATA


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth-data", "--n-train", "30", "--n-ood", "4", "--seed", "1", "--size", "16", "--out", str(root / "data")]) == 0
    cfg = {
        "seed": 4, "out_dir": str(root / "runs"), "data": [{"path": str(root / "data" / "train.jsonl"), "weight": 1.0}],
        "dim": 32, "resolution": 16, "enc_stride": 4, "enc_width": 8, "lm_layers": 1, "heads": 2, "m_llm": 4, "m_enc": 4,
        "resampler_depth": 1, "dm_width": 8, "T": 100, "max_len": 96,
        "stages": {"S1": {"total_steps": 3, "warmup_steps": 1, "batch_size": 2, "max_len": 96}},
    }
    (root / "run.yaml").write_text(yaml.safe_dump(cfg))
    assert cli.main(["train", "--config", str(root / "run.yaml"), "--stage", "S1"]) == 0
    return root


def test_train_writes_manifest_and_checkpoint(trained):
    out = trained / "runs" / "S1"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["config"]["stages"]["S1"]["total_steps"] == 3
    assert (out / "S1.pt").exists() and len((out / "metrics.jsonl").read_text().splitlines()) == 3


def test_numeric_failure_exit_code(trained, monkeypatch):
    from deem import training

    def boom(*a, **k):
        raise training.NumericError("csr", float("nan"))

    monkeypatch.setattr(training, "run_stage", boom)
    assert cli.main(["train", "--config", str(trained / "run.yaml"), "--stage", "S1", "--out", str(trained / "nan")]) == cli.EXIT_NUMERIC


def test_generate_with_forced_image(trained, tmp_path):
    ckpt = trained / "runs" / "S1" / "S1.pt"
    args = ["generate", "--checkpoint", str(ckpt), "--prompt", "a red solid circle", "--force-image",
            "--max-tokens", "3", "--temperature", "0", "--steps", "5"]
    assert cli.main(args + ["--out", str(tmp_path / "g1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "g2")]) == 0
    t1 = json.loads((tmp_path / "g1" / "transcript.json").read_text())
    t2 = json.loads((tmp_path / "g2" / "transcript.json").read_text())
    assert t1 == t2 and t1["images"] == ["image_000.png"]
    assert json.loads((tmp_path / "g1" / "manifest.json").read_text())["seed"] == 0


def test_reconstruct_uses_floor_start_step(trained, tmp_path, monkeypatch):
    from deem import diffusion

    seen = {}
    real = diffusion.reconstruct_partial

    def spy(dm, schedule, px, cond, noise_frac, gen, scale):
        seen["t_star"] = schedule.start_step(noise_frac)
        return real(dm, schedule, px, cond, noise_frac, gen, scale)

    monkeypatch.setattr(diffusion, "reconstruct_partial", spy)
    save_png(np.random.default_rng(0).random((16, 16, 3)), tmp_path / "in.png")
    ckpt = trained / "runs" / "S1" / "S1.pt"
    assert cli.main(["reconstruct", "--checkpoint", str(ckpt), "--image", str(tmp_path / "in.png"),
                     "--noise-frac", "0.65", "--out", str(tmp_path / "r")]) == 0
    assert seen["t_star"] == 64
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["t_star"] == 64
    assert (tmp_path / "r" / "reconstruction.png").exists()
    save_png(np.zeros((8, 8, 3)), tmp_path / "small.png")
    assert cli.main(["reconstruct", "--checkpoint", str(ckpt), "--image", str(tmp_path / "small.png"),
                     "--out", str(tmp_path / "r2")]) == cli.EXIT_DATA


def test_benchmark_then_evaluate_with_model(trained, tmp_path):
    data = trained / "data"
    for fmt in ("yesno", "multichoice-gt-first", "multichoice-neg-first"):
        out = tmp_path / fmt
        assert cli.main(["build-benchmark", "--labels", str(data / "ood_labels.jsonl"), "--embeddings",
                         str(data / "ood_embeddings.npz"), "--format", fmt, "--out", str(out)]) == 0
        n = len((out / "benchmark.jsonl").read_text().splitlines())
        assert n == (8 if fmt == "yesno" else 4)
    ev = tmp_path / "ev"
    assert cli.main(["evaluate", "--benchmark", str(tmp_path / "yesno" / "benchmark.jsonl"), "--checkpoint",
                     str(trained / "runs" / "S1" / "S1.pt"), "--images", str(data / "ood_images.jsonl"), "--out", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["overall"]["total"] == 8
    assert (ev / "answers.jsonl").exists() and (ev / "manifest.json").exists()


def test_evaluate_missing_answers_is_data_error(trained, tmp_path):
    data = trained / "data"
    assert cli.main(["build-benchmark", "--labels", str(data / "ood_labels.jsonl"), "--embeddings",
                     str(data / "ood_embeddings.npz"), "--out", str(tmp_path / "b")]) == 0
    (tmp_path / "ans.jsonl").write_text('{"item_id": "nope", "raw_output": "yes"}\n')
    assert cli.main(["evaluate", "--benchmark", str(tmp_path / "b" / "benchmark.jsonl"), "--answers",
                     str(tmp_path / "ans.jsonl"), "--out", str(tmp_path / "e")]) == cli.EXIT_DATA

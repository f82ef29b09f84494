import json

import numpy as np
import pytest

from diffaudio.cli import main
from diffaudio.frontend import read_fbank, write_wav
from diffaudio.synthetic import make_clip

TINY = {"d_model": 16, "n_heads": 2, "n_layers": 1, "decoder_groups": 4, "n_clones": 2, "batch_size": 2, "clip_seconds": 0.5}


@pytest.fixture
def tiny_cfg(tmp_path):
    f = tmp_path / "tiny.json"
    f.write_text(json.dumps(TINY))
    return f


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_gradcheck_exits_zero(capsys, tiny_cfg):
    code, out = run(capsys, "gradcheck", "--config", tiny_cfg)
    assert code == 0
    assert json.loads(out.out)["max_relative_error"] < 1e-5


def test_pretrain_metrics_one_line_per_step(tmp_path, capsys, tiny_cfg):
    log = tmp_path / "m.jsonl"
    code, _ = run(capsys, "pretrain", "--synthetic", "--n-clips", 8, "--steps", 12, "--config", tiny_cfg, "--metrics", log, "--out", tmp_path / "ck")
    assert code == 0
    lines = log.read_text().splitlines()
    assert len(lines) == 12
    rec = json.loads(lines[-1])
    assert set(rec) == {"step", "lr", "loss_total", "loss_utt", "loss_frame"} and rec["step"] == 12
    assert (tmp_path / "ck" / "manifest.json").exists()


def test_pretrain_deterministic_under_seed(tmp_path, capsys, tiny_cfg):
    logs = []
    for i in range(2):
        log = tmp_path / f"m{i}.jsonl"
        run(capsys, "pretrain", "--synthetic", "--n-clips", 4, "--steps", 3, "--config", tiny_cfg, "--seed", 9, "--metrics", log)
        logs.append(log.read_text())
    assert logs[0] == logs[1]


def test_finetune_then_eval_beats_chance(tmp_path, capsys, tiny_cfg):
    code, _ = run(capsys, "pretrain", "--synthetic", "--n-clips", 8, "--steps", 3, "--config", tiny_cfg, "--out", tmp_path / "pre", "--metrics", tmp_path / "p.jsonl")
    assert code == 0
    code, _ = run(capsys, "finetune", "--checkpoint", tmp_path / "pre", "--synthetic", "--n-clips", 40, "--steps", 60, "--metrics", tmp_path / "f.jsonl", "--out", tmp_path / "ft")
    assert code == 0
    code, out = run(capsys, "eval", "--checkpoint", tmp_path / "ft", "--synthetic", "--n-clips", 40)
    assert code == 0
    res = json.loads(out.out)
    assert res["accuracy"] >= 0.25
    assert 0.0 <= res["mAP"] <= 1.0


def test_eval_rejects_pretrain_checkpoint(tmp_path, capsys, tiny_cfg):
    run(capsys, "pretrain", "--synthetic", "--n-clips", 4, "--steps", 1, "--config", tiny_cfg, "--out", tmp_path / "pre", "--metrics", tmp_path / "p.jsonl")
    code, out = run(capsys, "eval", "--checkpoint", tmp_path / "pre", "--synthetic")
    assert code == 2 and "fine-tuned" in out.err


def test_featurize_writes_fbank(tmp_path, capsys):
    wav = tmp_path / "a.wav"
    write_wav(wav, make_clip(0, np.random.default_rng(0), 1.0))
    code, _ = run(capsys, "featurize", wav, tmp_path / "a.fbnk")
    assert code == 0
    assert read_fbank(tmp_path / "a.fbnk").frames.shape == (98, 128)


def test_manifest_driven_finetune(tmp_path, capsys, tiny_cfg):
    rng = np.random.default_rng(1)
    lines = []
    for i in range(4):
        write_wav(tmp_path / f"c{i}.wav", make_clip(i % 4, rng, 0.5))
        lines.append(json.dumps({"path": f"c{i}.wav", "label": i % 4}))
    (tmp_path / "train.jsonl").write_text("\n".join(lines))
    code, _ = run(capsys, "finetune", "--config", tiny_cfg, "--manifest", tmp_path / "train.jsonl", "--steps", 2, "--metrics", tmp_path / "f.jsonl")
    assert code == 0


def test_inspect_attn_dump(tmp_path, capsys, tiny_cfg):
    code, _ = run(capsys, "inspect-attn", "--config", tiny_cfg, "--lambda", 0.2, "--out", tmp_path / "attn")
    assert code == 0
    m = json.loads((tmp_path / "attn" / "manifest.json").read_text())
    assert m["lambda"] == 0.2 and len(m["blobs"]) == 1 * 2 * 3
    first = m["blobs"][2]
    a = np.fromfile(tmp_path / "attn" / first["file"], dtype="<f4").reshape(first["shape"])
    np.testing.assert_allclose(a.sum(axis=1), 0.8, atol=1e-5)


def test_unknown_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--no-such-flag"])
    assert exc.value.code == 2


def test_invalid_config_exits_two(tmp_path, capsys):
    f = tmp_path / "bad.json"
    f.write_text(json.dumps({"mask_ratio": 1.5}))
    code, out = run(capsys, "gradcheck", "--config", f)
    assert code == 2 and "mask_ratio" in out.err
    code, _ = run(capsys, "pretrain", "--preset", "desk")
    assert code == 2


def test_missing_wav_exits_two(tmp_path, capsys):
    code, _ = run(capsys, "featurize", tmp_path / "none.wav", tmp_path / "o.fbnk")
    assert code == 2

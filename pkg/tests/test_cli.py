import csv
import hashlib
import io
import json
import subprocess
import sys

import pytest

from piezoskin.cli import main
from piezoskin.daq import Frame, frames_from_csv, frames_to_csv


def digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(folder.iterdir()) if p.is_file()}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_characterize_sweep_has_21_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "characterize", "eeontex", "--sweep", "--trials", 3,
                       "--cycles", 4, "--out", tmp_path)
    assert code == 0 and "hysteresis" in out
    rows = list(csv.reader(io.StringIO((tmp_path / "EeonTex_sweep.csv").read_text())))
    assert len(rows) == 1 + 21
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert [s["material"] for s in summary["substrates"]] == ["EeonTex"]


def test_characterize_repeatable(tmp_path, capsys):
    for sub in ("a", "b"):
        assert run(capsys, "characterize", "ld", "--trials", 2, "--cycles", 3,
                   "--out", tmp_path / sub)[0] == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    run(capsys, "characterize", "ld", "--trials", 2, "--cycles", 3, "--seed", 1,
        "--out", tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_recognition_pipeline(tmp_path, capsys):
    code, out, _ = run(capsys, "dataset", "recognition", "--samples", 200, "--out", tmp_path)
    assert code == 0 and out.startswith("200 rows, 20 features, 20 classes")
    data = tmp_path / "recognition_dataset.csv"
    for sub in ("m1", "m2"):
        assert run(capsys, "train", "--data", data, "--trees", 10, "--out", tmp_path / sub)[0] == 0
    assert digest(tmp_path / "m1") == digest(tmp_path / "m2")
    code, out, _ = run(capsys, "eval", "--data", data, "--model", tmp_path / "m1" / "model.json",
                       "--out", tmp_path / "ev")
    assert code == 0
    assert "chance   0.050" in out
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert metrics["n"] == 40 and metrics["chance"] == pytest.approx(0.05)
    lines = (tmp_path / "ev" / "confusion.csv").read_text().splitlines()
    assert len(lines) == 21


def test_eval_perfect_on_separable_set(tmp_path, capsys):
    data = tmp_path / "sep.csv"
    rows = ["label,v0,v1"] + [f"{i % 2},{(i % 2) * 100 + i % 7},{i % 5}" for i in range(60)]
    data.write_text("\n".join(rows) + "\n")
    run(capsys, "train", "--data", data, "--trees", 5, "--out", tmp_path)
    code, out, _ = run(capsys, "eval", "--data", data, "--model", tmp_path / "model.json",
                       "--out", tmp_path)
    assert code == 0 and "accuracy 1.000" in out


def test_contact_dataset_and_sidecar(tmp_path, capsys):
    code, _, _ = run(capsys, "dataset", "contact", "--frames", 500, "--out", tmp_path)
    assert code == 0
    side = json.loads((tmp_path / "contact_dataset.json").read_text())
    assert side["label_names"] == ["free", "contact"] and side["n_rows"] == 500


def test_grasp_outputs(tmp_path, capsys):
    code, _, _ = run(capsys, "grasp", "pitcher", "--shift", 12, 0, "--out", tmp_path)
    assert code == 0
    phases = json.loads((tmp_path / "grasp_phases.json").read_text())
    assert [p["phase"] for p in phases] == ["reach", "grasp", "lift"]
    assert phases[0]["active_taxels"] == []
    assert set(phases[1]["active_taxels"]) != set(phases[2]["active_taxels"])
    frames = frames_from_csv((tmp_path / "grasp_frames.csv").read_text())
    assert len(frames) == phases[-1]["end"]


def _frames(n=50, k=6):
    return [Frame(i, i / 100.0, [(i * 7 + j * 13) % 1024 for j in range(k)]) for i in range(n)]


def test_stream_round_trip(tmp_path, capsys):
    src = tmp_path / "f.csv"
    src.write_text(frames_to_csv(_frames()))
    assert run(capsys, "stream", "encode", src, "-o", tmp_path / "f.bin")[0] == 0
    code, _, err = run(capsys, "stream", "decode", tmp_path / "f.bin", "-o", tmp_path / "g.csv")
    assert code == 0
    assert (tmp_path / "g.csv").read_text() == src.read_text()
    assert json.loads(err)["summary"]["corrupt"] == 0


def test_stream_pipe(tmp_path):
    src = tmp_path / "f.csv"
    src.write_text(frames_to_csv(_frames(20)))
    enc = subprocess.run([sys.executable, "-m", "piezoskin.cli", "stream", "encode", str(src)],
                         capture_output=True, check=True)
    dec = subprocess.run([sys.executable, "-m", "piezoskin.cli", "stream", "decode"],
                         input=enc.stdout, capture_output=True, check=True)
    assert dec.stdout.decode() == src.read_text()


def test_stream_decode_corrupted(tmp_path, capsys):
    src = tmp_path / "f.csv"
    src.write_text(frames_to_csv(_frames()))
    run(capsys, "stream", "encode", src, "-o", tmp_path / "f.bin")
    raw = bytearray((tmp_path / "f.bin").read_bytes())
    frame_len = 2 + 2 + 1 + 2 * 6 + 1
    raw[10 * frame_len + 7] ^= 0x40
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    code, _, err = run(capsys, "stream", "decode", tmp_path / "bad.bin", "-o", tmp_path / "g.csv")
    assert code == 0
    assert json.loads(err)["summary"]["corrupt"] >= 1
    kept = frames_from_csv((tmp_path / "g.csv").read_text())
    assert len(kept) == 49 and 10 not in [f.seq for f in kept]


def test_stream_decode_garbage_is_data_error(tmp_path, capsys):
    (tmp_path / "junk.bin").write_bytes(b"\x00" * 64)
    code, _, err = run(capsys, "stream", "decode", tmp_path / "junk.bin")
    assert code == 3
    assert json.loads(err.strip().splitlines()[-1])["type"] == "ContractError"


@pytest.mark.parametrize("argv", [
    ["characterize", "--bogus"],
    ["nosuchcommand"],
    ["train", "--data", "/nonexistent/data.csv"],
    ["grasp", "teapot"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    code, _, err = run(capsys, *argv, "--out", tmp_path)
    assert code == 2
    report = json.loads(err.strip().splitlines()[-1])
    assert report["error"] == "config" and report["message"]


def test_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"samples": 60, "seed": 4}))
    code, out, _ = run(capsys, "dataset", "recognition", "--samples", 999, "--config", cfg,
                       "--out", tmp_path)
    assert code == 0 and out.startswith("60 rows")
    assert json.loads((tmp_path / "recognition_dataset.json").read_text())["split_seed"] == 4
    cfg.write_text(json.dumps({"colour": "red"}))
    assert run(capsys, "dataset", "recognition", "--config", cfg, "--out", tmp_path)[0] == 2


def test_unknown_material_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "characterize", "granite", "--out", tmp_path)
    assert code == 2
    assert json.loads(err)["error"] == "config"


def test_bad_substrate_file_is_data_error(tmp_path, capsys):
    bad = tmp_path / "subs.json"
    bad.write_text('{"substrates": {"Custom": {"model_kind": "ExpSaturating", "r_zero": 1, '
                   '"r_sat": 5, "p_char": 1, "tau_rise": 1, "tau_fall": 1}}}')
    code, _, err = run(capsys, "characterize", "--substrates", bad, "--out", tmp_path)
    assert code == 3
    assert json.loads(err)["type"] == "DomainError"

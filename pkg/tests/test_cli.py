import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from drr.cli import (
    EXIT_CORRUPT,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    main,
    read_image,
    write_image,
)
from drr.errors import DataCorruptionError
from drr.vq_codec import decode_codes, deserialize_codec, encode_image


def toy_images(n, side=16, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    imgs = []
    for _ in range(n):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        img = 0.5 + 0.4 * np.sin(2 * np.pi * (fx * xx + fy * yy)[..., None] + phase)
        imgs.append(np.clip(img + rng.normal(0, 0.03, img.shape), 0, 1))
    return np.stack(imgs)


def write_image_dir(directory, images):
    os.makedirs(directory, exist_ok=True)
    for i, img in enumerate(images):
        write_image(os.path.join(directory, f"img_{i:03d}.img"), img)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared pipeline artifacts: images -> codec -> streams -> images."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    write_image_dir(data, toy_images(10, seed=3))
    codec_path = str(root / "codec.drrc")
    code = main(["pretrain-codec", "--data", data, "--out", codec_path,
                 "--epochs", "40", "--lr", "0.002", "--seed", "5",
                 "--codebook-size", "16", "--embed-dim", "6"])
    assert code == EXIT_OK
    return {"root": root, "data": data, "codec": codec_path}


class TestImageFiles:
    def test_round_trip_is_exact_at_byte_resolution(self, tmp_path):
        img = np.random.default_rng(0).uniform(0, 1, (5, 7, 3))
        path = str(tmp_path / "a.img")
        write_image(path, img)
        back = read_image(path)
        assert back.shape == (5, 7, 3)
        assert np.max(np.abs(back - img)) <= 0.5 / 255

        write_image(path, back)
        assert np.array_equal(read_image(path), back)

    def test_header_matches_payload(self, tmp_path):
        path = str(tmp_path / "bad.img")
        with open(path, "wb") as f:
            f.write(struct.pack("<III", 4, 4, 3) + b"\x00" * 5)
        with pytest.raises(DataCorruptionError):
            read_image(path)


class TestExitCodes:
    def test_unknown_command_is_usage(self, capsys):
        assert main(["no-such-command"]) == EXIT_USAGE

    def test_missing_flag_is_usage(self, capsys):
        assert main(["pretrain-codec", "--data", "x"]) == EXIT_USAGE

    def test_missing_input_dir_is_io(self, tmp_path, capsys):
        code = main(["pretrain-codec", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "c.drrc")])
        assert code == EXIT_IO

    def test_corrupt_artifact_is_corrupt(self, tmp_path, capsys):
        path = str(tmp_path / "c.drrc")
        with open(path, "wb") as f:
            f.write(b"DRRC" + b"\x00" * 3)
        assert main(["inspect", "--file", path]) == EXIT_CORRUPT

    def test_console_entry_propagates_exit_code(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "drr.cli", "report",
             "--results", str(tmp_path / "missing.txt")],
            capture_output=True, text=True)
        assert proc.returncode == EXIT_IO


class TestPretrainCodec:
    def test_writes_frozen_codec_and_reports_mse(self, workspace, capsys):
        with open(workspace["codec"], "rb") as f:
            codec = deserialize_codec(f.read())
        assert codec.frozen
        assert codec.codebook_bottom.shape == (16, 6)

    def test_rerun_is_byte_identical(self, workspace, tmp_path, capsys):
        again = str(tmp_path / "again.drrc")
        code = main(["pretrain-codec", "--data", workspace["data"], "--out", again,
                     "--epochs", "40", "--lr", "0.002", "--seed", "5",
                     "--codebook-size", "16", "--embed-dim", "6"])
        assert code == EXIT_OK
        with open(workspace["codec"], "rb") as f1, open(again, "rb") as f2:
            assert f1.read() == f2.read()

    def test_does_not_mutate_inputs(self, workspace, tmp_path, capsys):
        before = {}
        for name in sorted(os.listdir(workspace["data"])):
            with open(os.path.join(workspace["data"], name), "rb") as f:
                before[name] = f.read()
        main(["pretrain-codec", "--data", workspace["data"],
              "--out", str(tmp_path / "c2.drrc"), "--epochs", "2",
              "--codebook-size", "16", "--embed-dim", "6"])
        for name, blob in before.items():
            with open(os.path.join(workspace["data"], name), "rb") as f:
                assert f.read() == blob


@pytest.fixture(scope="module")
def compressed(workspace):
    out = str(workspace["root"] / "streams")
    model = str(workspace["root"] / "model.drrm")
    code = main(["compress", "--codec", workspace["codec"], "--model", model,
                 "--in", workspace["data"], "--out", out,
                 "--alphabets", "5,4", "--block-len", "4",
                 "--fit-iterations", "5", "--seed", "9"])
    assert code == EXIT_OK
    return {"out": out, "model": model}


class TestCompressDecompress:
    def test_writes_streams_and_index(self, compressed):
        names = sorted(os.listdir(compressed["out"]))
        assert "index.txt" in names
        assert sum(n.endswith(".drrs") for n in names) == 10
        with open(os.path.join(compressed["out"], "index.txt")) as f:
            lines = f.read().splitlines()
        assert lines[0] == "drr-stream-set 1"
        assert len(lines) == 11

    def test_reports_bits_per_code_below_sixteen(self, workspace, compressed,
                                                 tmp_path, capsys):
        code = main(["compress", "--codec", workspace["codec"],
                     "--model", compressed["model"],
                     "--in", workspace["data"], "--out", str(tmp_path / "s2"),
                     "--seed", "9"])
        assert code == EXIT_OK
        line = [ln for ln in capsys.readouterr().out.splitlines()
                if "bits/code" in ln][0]
        assert float(line.split()[2]) < 16.0

    def test_decompress_matches_codec_round_trip(self, workspace, compressed,
                                                 tmp_path, capsys):
        recon_dir = str(tmp_path / "recon")
        code = main(["decompress", "--codec", workspace["codec"],
                     "--model", compressed["model"],
                     "--in", compressed["out"], "--out", recon_dir])
        assert code == EXIT_OK
        with open(workspace["codec"], "rb") as f:
            codec = deserialize_codec(f.read())
        for name in sorted(os.listdir(workspace["data"])):
            original = read_image(os.path.join(workspace["data"], name))
            expected = decode_codes(encode_image(original, codec), codec)
            restored = read_image(os.path.join(recon_dir, name))
            assert np.max(np.abs(restored - expected)) <= 0.5 / 255

    def test_tampered_stream_is_corrupt(self, workspace, compressed,
                                        tmp_path, capsys):
        bad_dir = tmp_path / "bad"
        bad_dir.mkdir()
        for name in os.listdir(compressed["out"]):
            with open(os.path.join(compressed["out"], name), "rb") as f:
                blob = f.read()
            if name == "stream_0000.drrs":
                blob = blob[:4] + struct.pack("<I", 999) + blob[8:]
            with open(bad_dir / name, "wb") as f:
                f.write(blob)
        code = main(["decompress", "--codec", workspace["codec"],
                     "--model", compressed["model"],
                     "--in", str(bad_dir), "--out", str(tmp_path / "r")])
        assert code == EXIT_CORRUPT


RUN_PHASES_CONFIG = """
# tiny phased run for tests
mode = drr
seed = 0
total_classes = 4
initial_classes = 2
n_phases = 1
classes_per_phase = 2
train_per_class = 6
test_per_class = 4
side = 8
data_seed = 11
codebook_size = 16
embed_dim = 6
codec_epochs = 30
epochs = 25
alphabets = 4,3
block_len = 4
fit_iterations = 2
exemplars_per_class = 4
"""


@pytest.fixture(scope="module")
def results(tmp_path_factory):
    root = tmp_path_factory.mktemp("phases")
    config = str(root / "run.conf")
    with open(config, "w") as f:
        f.write(RUN_PHASES_CONFIG)
    out = str(root / "results.txt")
    assert main(["run-phases", "--config", config, "--out", out]) == EXIT_OK
    return {"config": config, "out": out, "root": root}


class TestRunPhases:
    def test_results_file_shape(self, results):
        with open(results["out"]) as f:
            lines = f.read().splitlines()
        assert lines[0] == "drr-results 1"
        assert lines[1].startswith("config ")
        phases = [ln for ln in lines if ln.startswith("phase ")]
        assert len(phases) == 2
        assert "model_version=1" in phases[0] and "model_version=2" in phases[1]
        assert lines[-1].startswith("summary phases=1 average=")

    def test_rerun_is_byte_identical(self, results, capsys):
        again = str(results["root"] / "again.txt")
        assert main(["run-phases", "--config", results["config"],
                     "--out", again]) == EXIT_OK
        with open(results["out"], "rb") as f1, open(again, "rb") as f2:
            assert f1.read() == f2.read()

    def test_unknown_config_key_is_usage(self, tmp_path, capsys):
        config = str(tmp_path / "bad.conf")
        with open(config, "w") as f:
            f.write("modee = drr\n")
        assert main(["run-phases", "--config", config,
                     "--out", str(tmp_path / "r.txt")]) == EXIT_USAGE

    def test_report_totals_match_recomputation(self, results, capsys):
        assert main(["report", "--results", results["out"]]) == EXIT_OK
        out = capsys.readouterr().out
        with open(results["out"]) as f:
            accs = [float(p.split("accuracy=")[1].split()[0])
                    for p in f.read().splitlines() if p.startswith("phase ")]
        assert f"average (phases 1..N): {np.mean(accs[1:]):.4f}" in out
        assert f"last phase: {accs[-1]:.4f}" in out

    def test_report_rejects_tampered_summary(self, results, tmp_path, capsys):
        with open(results["out"]) as f:
            text = f.read()
        head, _, summary = text.rstrip("\n").rpartition("\n")
        key, _, _ = summary.rpartition("=")
        tampered = str(tmp_path / "tampered.txt")
        with open(tampered, "w") as f:
            f.write(head + "\n" + key + "=0.999\n")
        assert main(["report", "--results", tampered]) == EXIT_CORRUPT

    def test_report_empty_file_is_usage(self, tmp_path, capsys):
        path = str(tmp_path / "empty.txt")
        open(path, "w").close()
        assert main(["report", "--results", path]) == EXIT_USAGE


class TestInspect:
    def test_identifies_each_artifact(self, workspace, tmp_path, capsys):
        img_path = str(tmp_path / "one.img")
        write_image(img_path, toy_images(1, seed=1)[0])
        assert main(["inspect", "--file", workspace["codec"]]) == EXIT_OK
        assert "codec" in capsys.readouterr().out

        assert main(["inspect", "--file", img_path]) == EXIT_OK
        assert "raw image: 16 x 16 x 3" in capsys.readouterr().out

    def test_identifies_model_and_stream(self, workspace, tmp_path, capsys):
        out = str(tmp_path / "s")
        model = str(tmp_path / "m.drrm")
        main(["compress", "--codec", workspace["codec"], "--model", model,
              "--in", workspace["data"], "--out", out,
              "--alphabets", "4,3", "--block-len", "4",
              "--fit-iterations", "0"])
        capsys.readouterr()
        assert main(["inspect", "--file", model]) == EXIT_OK
        assert "2 records" in capsys.readouterr().out
        assert main(["inspect", "--file",
                     os.path.join(out, "stream_0000.drrs")]) == EXIT_OK
        assert "symbols" in capsys.readouterr().out

    def test_unknown_bytes_are_usage(self, tmp_path, capsys):
        path = str(tmp_path / "junk.bin")
        with open(path, "wb") as f:
            f.write(b"junkjunkjunk")
        assert main(["inspect", "--file", path]) == EXIT_USAGE

"""Tensor files, IDX data, checkpoints, metrics CSV, and the CLI."""

import json
import os

import numpy as np
import numpy.testing as npt
import pytest

from dfp import cli
from dfp.datasets import export_idx, make_dataset
from dfp.fileio import (METRICS_HEADER, load_checkpoint, read_dft,
                        read_idx_images, read_idx_labels, read_metrics,
                        restore_model, save_checkpoint, write_dft,
                        write_idx_images, write_idx_labels, write_metrics)
from dfp.layers import RunContext
from dfp.tensor import DfpTensor, QuantConfig, quantize, rounding_from_name
from dfp.training import build_model, make_quantizers, parse_config

# === tensor container ===


def test_dft_roundtrip_dfp(tmp_path):
    rng = np.random.default_rng(41)
    t = DfpTensor(rng.integers(-2047, 2048, (3, 4, 5)).astype(np.int16),
                  -9, 12)
    path = str(tmp_path / "t.dft")
    write_dft(path, t)
    back = read_dft(path)
    assert isinstance(back, DfpTensor)
    npt.assert_array_equal(back.elements, t.elements)
    assert back.shared_exponent == -9
    assert back.bit_width == 12


def test_dft_roundtrip_fp32(tmp_path):
    x = np.random.default_rng(42).standard_normal((6, 2)).astype(np.float32)
    path = str(tmp_path / "x.dft")
    write_dft(path, x)
    back = read_dft(path)
    assert isinstance(back, np.ndarray) and back.dtype == np.float32
    npt.assert_array_equal(back, x)


def test_dft_golden_bytes(tmp_path):
    # container layout frozen: magic, dtype u8, width u8, exponent i8 (DFP
    # only), rank u32 LE, dims u32 LE, little-endian payload
    path = str(tmp_path / "g.dft")
    write_dft(path, DfpTensor(np.array([[1, -2], [3, 4]], np.int16), -7, 16))
    want = bytes.fromhex(
        "44465431" "01" "10" "f9" "02000000" "0200000002000000"
        "0100feff03000400")
    assert open(path, "rb").read() == want
    write_dft(path, np.array([1.5, -2.0], np.float32))
    want = bytes.fromhex(
        "44465431" "00" "20" "01000000" "02000000" "0000c03f000000c0")
    assert open(path, "rb").read() == want


def test_dft_errors_cite_byte_offsets(tmp_path):
    good = bytes.fromhex("444654310110f90200000002000000020000000100feff03000400")
    cases = [
        (b"XXXX" + good[4:], r"bad magic at byte 0"),
        (good[:4] + b"\x07" + good[5:], r"dtype tag 7 at byte 4"),
        (good[:5] + b"\x30" + good[6:], r"bad bit width 48 at byte 5"),
        (good[:9], r"truncated rank at byte 7"),
        (good[:-4], r"truncated payload at byte 19"),
        (good + b"\x00\x00", r"2 trailing bytes after payload at byte 27"),
    ]
    path = str(tmp_path / "bad.dft")
    for blob, pattern in cases:
        with open(path, "wb") as fh:
            fh.write(blob)
        with pytest.raises(ValueError, match=pattern):
            read_dft(path)


def test_dft_rejects_other_dtypes(tmp_path):
    with pytest.raises(ValueError):
        write_dft(str(tmp_path / "x.dft"), np.zeros(3, np.float64))


# === idx ===


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(43)
    images = rng.integers(0, 256, (5, 7, 9)).astype(np.uint8)
    labels = rng.integers(0, 10, 5).astype(np.uint8)
    ip, lp = str(tmp_path / "im.idx"), str(tmp_path / "lb.idx")
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)
    npt.assert_array_equal(read_idx_images(ip), images)
    npt.assert_array_equal(read_idx_labels(lp), labels)


def test_idx_errors(tmp_path):
    path = str(tmp_path / "bad.idx")
    with open(path, "wb") as fh:
        fh.write(b"\x00\x00\x09\x99" + b"\x00" * 12)
    with pytest.raises(ValueError, match="magic"):
        read_idx_images(path)
    ok = str(tmp_path / "ok.idx")
    write_idx_images(ok, np.zeros((4, 3, 3), np.uint8))
    with open(path, "wb") as fh:
        fh.write(open(ok, "rb").read()[:-5])
    with pytest.raises(ValueError, match=r"expected 52 bytes .* has 47"):
        read_idx_images(path)


# === checkpoints ===


def _small_model(seed):
    cfg = parse_config({"layers": [
        {"type": "conv", "out_ch": 8, "kernel": 3, "pad": 1},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "fc", "out_features": 3}], "loss": "mse"})
    q = make_quantizers(cfg, seed=seed)
    ctx = RunContext(q=q)
    return build_model(cfg, (4, 6, 6), ctx, np.random.default_rng(seed)), cfg


def test_checkpoint_roundtrip(tmp_path):
    model, _ = _small_model(seed=17)
    # give the batchnorm buffers non-trivial values first
    x = np.random.default_rng(18).standard_normal((4, 4, 6, 6)).astype(np.float32)
    model.forward(x, train=True)
    ckpt = str(tmp_path / "ckpt")
    save_checkpoint(ckpt, model, manifest_extra={"note": "unit"})
    manifest, tensors = load_checkpoint(ckpt)
    assert manifest["format"] == "dfp-checkpoint-v1"
    assert manifest["note"] == "unit"

    other, _ = _small_model(seed=99)            # different init
    restore_model(other, tensors)
    for src, dst in zip(model.iter_layers(), other.iter_layers()):
        for key, val in src.params().items():
            npt.assert_array_equal(dst.params()[key], val)
        for key, val in src.buffers().items():
            npt.assert_array_equal(dst.buffers()[key], val)


def test_restore_model_shape_mismatch(tmp_path):
    model, _ = _small_model(seed=17)
    ckpt = str(tmp_path / "ckpt")
    save_checkpoint(ckpt, model, manifest_extra={})
    _, tensors = load_checkpoint(ckpt)
    cfg = parse_config({"layers": [
        {"type": "conv", "out_ch": 16, "kernel": 3, "pad": 1}], "loss": "mse"})
    q = make_quantizers(cfg, seed=1)
    other = build_model(cfg, (4, 6, 6), RunContext(q=q),
                        np.random.default_rng(1))
    with pytest.raises(ValueError):
        restore_model(other, tensors)


# === metrics csv ===


def test_metrics_roundtrip(tmp_path):
    rows = [
        {"iteration": 1, "epoch": 0, "train_loss": 0.6931471805599453,
         "val_acc": "", "overflow_count": 0, "wall_ms": 12.5},
        {"iteration": 2, "epoch": 0, "train_loss": 0.25,
         "val_acc": 0.98125, "overflow_count": 3, "wall_ms": 11.0},
    ]
    path = str(tmp_path / "m.csv")
    write_metrics(path, rows)
    first = open(path).readline().strip()
    assert first == ",".join(METRICS_HEADER)
    back = read_metrics(path)
    assert len(back) == 2
    assert back[0]["iteration"] == 1 and back[0]["val_acc"] == ""
    npt.assert_allclose(back[0]["train_loss"], rows[0]["train_loss"], rtol=1e-6)
    npt.assert_allclose(back[1]["val_acc"], 0.98125, rtol=1e-6)
    assert back[1]["overflow_count"] == 3


def test_metrics_rejects_foreign_header(tmp_path):
    path = str(tmp_path / "m.csv")
    with open(path, "w") as fh:
        fh.write("iteration,epoch,loss\n1,0,0.5\n")
    with pytest.raises(ValueError, match="header"):
        read_metrics(path)


# === datasets ===


def test_gauss2_and_linreg_handles():
    h = make_dataset("gauss2:n=64", seed=11)
    assert h.train_x.shape == (64, 2) and h.val_x.shape == (64, 2)
    assert h.in_shape == (2,) and h.n_classes == 2
    assert set(np.unique(h.train_y)) <= {0, 1}
    again = make_dataset("gauss2:n=64", seed=11)
    npt.assert_array_equal(h.train_x, again.train_x)
    assert h.checksum == again.checksum
    other = make_dataset("gauss2:n=64", seed=12)
    assert h.checksum != other.checksum

    r = make_dataset("linreg:n=32,slope=2.0,intercept=-1.0,noise=0.0", seed=4)
    assert r.n_classes == 0                       # regression targets
    assert r.train_y.shape == (32, 1)


def test_glyphs_are_deterministic_and_balanced():
    h = make_dataset("glyphs:train=40,test=20", seed=3)
    assert h.train_x.shape == (40, 1, 28, 28)
    assert h.train_x.dtype == np.float32
    counts = np.bincount(h.train_y, minlength=10)
    assert counts.min() == 4 and counts.max() == 4
    again = make_dataset("glyphs:train=40,test=20", seed=3)
    npt.assert_array_equal(h.train_x, again.train_x)
    # normalized to zero mean, unit variance over the train split
    assert abs(float(h.train_x.mean())) < 1e-5
    npt.assert_allclose(float(h.train_x.std()), 1.0, atol=1e-4)


def test_export_idx_reload(tmp_path):
    h = make_dataset("glyphs:train=32,test=16", seed=3)
    d = str(tmp_path / "idx")
    export_idx(h, d)
    assert sorted(os.listdir(d)) == [
        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte"]
    back = make_dataset(d, seed=99)
    npt.assert_array_equal(back.train_y, h.train_y)
    npt.assert_array_equal(back.val_y, h.val_y)
    # pixel values pass through uint8, so equality holds to 1/255 resolution
    npt.assert_allclose(back.train_x, h.train_x, atol=0.02)
    twice = make_dataset(d, seed=1)
    assert twice.checksum == back.checksum


def test_make_dataset_rejects_unknown_source():
    with pytest.raises(ValueError):
        make_dataset("imagenet:n=10", seed=0)


# === cli ===


def test_cli_quantize_matches_library(tmp_path, capsys):
    rng = np.random.default_rng(51)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    src = str(tmp_path / "in.dft")
    dst = str(tmp_path / "out.dft")
    write_dft(src, x)
    rc = cli.main(["quantize", "--in", src, "--out", dst, "--bits", "12",
                   "--round", "nearest", "--pre-shift", "1"])
    assert rc == 0
    assert "shared_exponent" in capsys.readouterr().out
    got = read_dft(dst)
    want = quantize(x, QuantConfig(12, rounding_from_name("nearest"), 1))
    npt.assert_array_equal(got.elements, want.elements)
    assert got.shared_exponent == want.shared_exponent
    assert got.bit_width == 12


def test_cli_quantize_stochastic_seeded(tmp_path):
    rng = np.random.default_rng(52)
    x = rng.standard_normal(100).astype(np.float32)
    src = str(tmp_path / "in.dft")
    write_dft(src, x)
    outs = []
    for run in range(2):
        dst = str(tmp_path / f"o{run}.dft")
        assert cli.main(["quantize", "--in", src, "--out", dst,
                         "--round", "stochastic", "--seed", "9"]) == 0
        outs.append(read_dft(dst))
    npt.assert_array_equal(outs[0].elements, outs[1].elements)
    want = quantize(x, QuantConfig(16, rounding_from_name("stochastic", seed=9), 0))
    npt.assert_array_equal(outs[0].elements, want.elements)


def test_cli_quantize_rejects_quantized_input(tmp_path, capsys):
    src = str(tmp_path / "in.dft")
    write_dft(src, DfpTensor(np.array([1], np.int16), 0, 16))
    rc = cli.main(["quantize", "--in", src, "--out", str(tmp_path / "o.dft")])
    assert rc == 2
    assert "already quantized" in capsys.readouterr().err


def test_cli_quantize_missing_file(tmp_path, capsys):
    rc = cli.main(["quantize", "--in", str(tmp_path / "nope.dft"),
                   "--out", str(tmp_path / "o.dft")])
    assert rc == 2


def test_cli_bench_gemm(tmp_path, capsys):
    csv = str(tmp_path / "b.csv")
    rc = cli.main(["bench-gemm", "--m", "8", "--n", "16", "--k", "64",
                   "--trials", "2", "--out", csv])
    assert rc == 0
    lines = open(csv).read().strip().splitlines()
    header = lines[0].split(",")
    assert lines[0] == capsys.readouterr().out.strip().splitlines()[0]
    assert len(lines) == 3
    row = dict(zip(header, lines[1].split(",")))
    assert float(row["analytic_ratio"]) == float(row["measured_ratio"])
    assert float(row["rel_err"]) < 1e-3
    assert int(row["overflow_count"]) == 0


def test_cli_bench_gemm_strict_infeasible(tmp_path, capsys):
    rc = cli.main(["bench-gemm", "--m", "4", "--n", "16", "--k", "64",
                   "--icblk", "64", "--policy", "strict", "--pre-shift", "1"])
    assert rc == 2
    assert "safe_chain_length" in capsys.readouterr().err


def test_cli_bench_conv(tmp_path, capsys):
    rc = cli.main(["bench-conv", "--spec", "16,16,8,8,3,3,1,1",
                   "--batch", "2", "--engine", "instructions"])
    assert rc == 0
    out = capsys.readouterr().out.strip().splitlines()
    row = dict(zip(out[0].split(","), out[1].split(",")))
    assert float(row["rel_err"]) < 1e-3
    assert int(row["k"]) == 16 * 9


def test_cli_bench_conv_bad_spec(capsys):
    rc = cli.main(["bench-conv", "--spec", "16,16,8,8,3"])
    assert rc == 2
    assert "--spec" in capsys.readouterr().err


MLP_JSON = {
    "layers": [{"type": "fc", "out_features": 16, "precision": "fp32"},
               {"type": "relu"},
               {"type": "fc", "out_features": 2, "precision": "fp32"}],
    "loss": "softmax_xent", "epochs": 2, "batch_size": 16, "base_lr": 0.1,
}


def test_cli_train_and_resolved_replay(tmp_path, capsys):
    cfg_path = str(tmp_path / "mlp.json")
    with open(cfg_path, "w") as fh:
        json.dump(MLP_JSON, fh)
    out1 = str(tmp_path / "run1.csv")
    rc = cli.main(["train", "--config", cfg_path, "--data", "gauss2:n=256",
                   "--precision", "fp32", "--seed", "5", "--out", out1])
    assert rc == 0
    assert "final val acc" in capsys.readouterr().out
    rows1 = read_metrics(out1)
    assert len(rows1) == 32                     # 16 batches x 2 epochs
    assert rows1[-1]["val_acc"] >= 0.9          # separable blobs

    resolved = out1 + ".resolved.json"
    assert os.path.exists(resolved)
    meta = json.load(open(resolved))
    assert meta["resolved_run"] and meta["seed"] == 5
    assert meta["precision"] == "fp32"

    # replaying the resolved file reproduces every column except wall time
    out2 = str(tmp_path / "run2.csv")
    rc = cli.main(["train", "--config", resolved, "--data", "ignored",
                   "--seed", "99", "--out", out2])
    assert rc == 0
    rows2 = read_metrics(out2)
    strip = lambda r: {k: v for k, v in r.items() if k != "wall_ms"}
    assert [strip(r) for r in rows1] == [strip(r) for r in rows2]


def test_cli_train_checkpoint(tmp_path):
    cfg_path = str(tmp_path / "mlp.json")
    with open(cfg_path, "w") as fh:
        json.dump(dict(MLP_JSON, epochs=1), fh)
    ckpt = str(tmp_path / "ckpt")
    rc = cli.main(["train", "--config", cfg_path, "--data", "gauss2:n=64",
                   "--precision", "fp32", "--seed", "1",
                   "--out", str(tmp_path / "m.csv"), "--checkpoint", ckpt])
    assert rc == 0
    manifest, tensors = load_checkpoint(ckpt)
    assert manifest["format"] == "dfp-checkpoint-v1"
    assert "fc1" in tensors and "W" in tensors["fc1"]


def test_cli_train_bad_config(tmp_path, capsys):
    cfg_path = str(tmp_path / "bad.json")
    with open(cfg_path, "w") as fh:
        json.dump(dict(MLP_JSON, loss="hinge"), fh)
    rc = cli.main(["train", "--config", cfg_path, "--data", "gauss2:n=64",
                   "--out", str(tmp_path / "m.csv")])
    assert rc == 2
    assert "hinge" in capsys.readouterr().err


def test_cli_compare_exit_codes(tmp_path, capsys):
    rows = [
        {"iteration": i + 1, "epoch": i // 4, "train_loss": 1.0 / (i + 1),
         "val_acc": "" if (i + 1) % 4 else 0.9 + 0.01 * (i // 4),
         "overflow_count": 0, "wall_ms": 1.0}
        for i in range(8)
    ]
    a = str(tmp_path / "a.csv")
    write_metrics(a, rows)
    b = str(tmp_path / "b.csv")
    write_metrics(b, rows)
    assert cli.main(["compare", "--a", a, "--b", b]) == 0
    assert "PASS" in capsys.readouterr().out

    drift = [dict(r) for r in rows]
    for r in drift:
        r["train_loss"] *= 3.0
        if r["val_acc"] != "":
            r["val_acc"] -= 0.2
    write_metrics(b, drift)
    assert cli.main(["compare", "--a", a, "--b", b]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])

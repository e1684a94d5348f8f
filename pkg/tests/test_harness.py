import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vltrim.errors import CheckpointError, ConfigError
from vltrim.graph import toy_cnn
from vltrim.harness import checkpoint as ck
from vltrim.harness.cli import main
from vltrim.harness.config import parse_config
from vltrim.harness.datasets import cached_classification_set, load_dataset, save_dataset
from vltrim.harness.metrics import MetricsWriter, read_metrics
from vltrim.harness.pnm import decode_pnm, encode_pnm, read_mask, write_pnm
from vltrim.harness.runs import rng_streams, run_distill, run_pretrain, run_trim, vl_config
from vltrim.synthworld import gen_classification_set
from vltrim.train import eval_loss, predict_logits
from vltrim.vl_blocks import VLModel

TINY_VL = """
model.conv_widths = 4, 4
model.d_text = 8
model.n_hat = 8
model.embed_dim = 8
model.det_hidden = 8
data.n_regions = 2
data.eval_scenes = 4
optim.batch_size = 2
optim.eval_interval = 1
"""

TINY_CLS = """
distill.teacher_widths = 8, 8
distill.student_widths = 4, 4
distill.n_teacher = 64
distill.n_train = 64
distill.n_val = 32
distill.teacher_epochs = 1
distill.epochs = 1
distill.compare_seeds = 1
trim.widths = 6, 6
trim.n_train = 64
trim.n_val = 32
trim.baseline_epochs = 1
trim.warmup_steps = 1
trim.epochs_per_iter = 1
trim.final_epochs = 1
trim.target_rate = 0.6
trim.timing_batch = 8
trim.timing_repeats = 1
"""


# -- config -----------------------------------------------------------------


def test_desk_defaults():
    cfg = parse_config("")
    assert cfg.run.preset == "desk" and cfg.optim.batch_size == 16 and cfg.optim.max_iters == 2000


def test_full_scale_preset():
    cfg = parse_config("run.preset = paper-scale\n")
    assert (cfg.optim.batch_size, cfg.optim.lr, cfg.optim.max_iters) == (80, 0.001, 300_000)
    assert cfg.model.max_regions == 80 and cfg.trim_warmup_steps() == 100_000


def test_lines_override_preset_and_comments():
    cfg = parse_config("run.preset = paper-scale\noptim.batch_size = 4  # small\n\n# comment\n")
    assert cfg.optim.batch_size == 4


@pytest.mark.parametrize(
    "text",
    [
        "optim.bogus = 1",
        "nosection.lr = 1",
        "lr = 1",
        "optim.lr = 0",
        "optim.lr = 2",
        "optim.batch_size = 0",
        "optim.batch_size = 1.5",
        "optim.lr = nan",
        "optim.lr = abc",
        "optim.lr = 0.1\noptim.lr = 0.2",
        "optim.lr 0.1",
        "= 3",
        "run.preset = huge",
        "trim.target_rate = 1",
        "model.conv_widths = ",
        "model.conv_widths = 4, 0",
        "distill.teacher_pool = avg",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_text_round_trip():
    cfg = parse_config("run.preset = paper-scale\nmodel.conv_widths = 3, 5, 7\ndistill.prompt_label = lane edge\n")
    again = parse_config(cfg.to_text())
    assert again == cfg and again.to_text() == cfg.to_text()
    assert "run.out" not in cfg.to_text(include_out=False)


def test_warmup_scales_with_schedule():
    assert parse_config("optim.max_iters = 3000").trim_warmup_steps() == 1000
    assert parse_config("trim.warmup_steps = 7").trim_warmup_steps() == 7


# -- checkpoint -------------------------------------------------------------


def sample_tensors(rng):
    return {
        "scalar": np.array(3.25),
        "vec32": rng.normal(size=5).astype(np.float32),
        "mat": rng.normal(size=(2, 3)),
        "cube": rng.normal(size=(2, 1, 4)).astype(np.float32),
        "empty": np.zeros((0, 3)),
    }


def test_checkpoint_round_trip_bit_exact():
    tensors = sample_tensors(np.random.default_rng(0))
    back = ck.decode(ck.encode(ck.Checkpoint(tensors, "a = 1\nb = é\n", 2**40 + 3)))
    assert set(back.tensors) == set(tensors)
    for name, arr in tensors.items():
        got = back.tensors[name]
        assert got.dtype == arr.dtype and got.shape == arr.shape and got.tobytes() == arr.tobytes()
    assert back.config == "a = 1\nb = é\n" and back.seed == 2**40 + 3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=0, max_size=3), st.sampled_from(["float32", "float64"]), st.integers(0, 2**63))
def test_checkpoint_round_trip_property(dims, dtype, seed):
    arr = np.random.default_rng(seed % 2**32).normal(size=tuple(dims)).astype(dtype)
    back = ck.decode(ck.encode(ck.Checkpoint({"t": arr}, "", seed)))
    assert back.tensors["t"].tobytes() == arr.tobytes() and back.tensors["t"].shape == arr.shape and back.seed == seed


def test_checkpoint_bytes_independent_of_insertion_order():
    t = sample_tensors(np.random.default_rng(1))
    rev = dict(reversed(list(t.items())))
    assert ck.encode(ck.Checkpoint(t, "x", 1)) == ck.encode(ck.Checkpoint(rev, "x", 1))


def test_checkpoint_header_layout():
    data = ck.encode(ck.Checkpoint({"w": np.array([1.0, 2.0])}, "cfg", 9))
    assert data[:4] == b"VLTC"
    assert struct.unpack("<II", data[4:12]) == (1, 1)
    assert struct.unpack("<I", data[12:16]) == (1,) and data[16:17] == b"w"
    assert struct.unpack("<IQ", data[17:29]) == (1, 2) and data[29] == 2
    assert np.frombuffer(data[30:46], "<f8").tolist() == [1.0, 2.0]
    assert struct.unpack("<I", data[46:50]) == (3,) and data[50:53] == b"cfg"
    assert struct.unpack("<Q", data[53:]) == (9,)


def test_checkpoint_corruptions():
    good = ck.encode(ck.Checkpoint({"w": np.ones((2, 2))}, "c", 0))
    bad_version = good[:4] + struct.pack("<I", 2) + good[8:]
    for blob in (b"", b"XXXX" + good[4:], bad_version, good[:-1], good[:20], good + b"\0"):
        with pytest.raises(CheckpointError):
            ck.decode(blob)
    bad_tag = bytearray(good)
    bad_tag[29] = 7
    with pytest.raises(CheckpointError):
        ck.decode(bytes(bad_tag))


def test_checkpoint_rejects_integer_tensors():
    with pytest.raises(CheckpointError):
        ck.encode(ck.Checkpoint({"i": np.arange(3)}, "", 0))


def test_checkpoint_file_io(tmp_path):
    path = tmp_path / "m.vltc"
    ck.save(path, ck.Checkpoint({"a": np.eye(2)}, "", 5))
    assert ck.load(path).tensors["a"].tolist() == [[1, 0], [0, 1]]
    with pytest.raises(CheckpointError):
        ck.load(tmp_path / "missing.vltc")


def test_dataset_cache(tmp_path):
    data = gen_classification_set(3, 4, 12)
    save_dataset(tmp_path / "d.vltc", data)
    back = load_dataset(tmp_path / "d.vltc")
    assert back.images.tobytes() == data.images.tobytes() and back.labels.tolist() == data.labels.tolist()
    assert back.n_classes == 4
    first = cached_classification_set(tmp_path, 3, 4, 12)
    assert len(list(tmp_path.glob("cls_*.vltc"))) == 1
    second = cached_classification_set(tmp_path, 3, 4, 12)
    assert first.images.tobytes() == second.images.tobytes()
    ck.save(tmp_path / "other.vltc", ck.Checkpoint({"x": np.ones(2)}, "", 0))
    with pytest.raises(CheckpointError):
        load_dataset(tmp_path / "other.vltc")


# -- images and metrics -----------------------------------------------------


@pytest.mark.parametrize("binary", [True, False])
@pytest.mark.parametrize("shape", [(5, 7), (4, 3, 3)])
def test_pnm_round_trip(binary, shape):
    img = np.random.default_rng(0).integers(0, 256, size=shape).astype(np.uint8)
    data = encode_pnm(img, binary)
    assert data[:2] == {(2, True): b"P5", (2, False): b"P2", (3, True): b"P6", (3, False): b"P3"}[(len(shape), binary)]
    assert np.array_equal(decode_pnm(data), img)


def test_pnm_comment_in_header():
    assert decode_pnm(b"P2\n# note\n2 1\n9\n0 9\n").tolist() == [[0, 9]]


@pytest.mark.parametrize(
    "blob", [b"P7\n1 1\n255\n\0", b"P5\n2 2\n255\n\0", b"P2\n1 1\n5\n9\n", b"P5\n0 2\n255\n", b"P2\nx 1\n255\n0\n", b"P5\n2"]
)
def test_pnm_malformed(blob):
    with pytest.raises(ConfigError):
        decode_pnm(blob)


def test_read_mask_threshold(tmp_path):
    img = np.array([[0, 127, 128, 255]], dtype=np.uint8)
    write_pnm(tmp_path / "m.pgm", img)
    assert read_mask(tmp_path / "m.pgm").tolist() == [[False, False, True, True]]
    with pytest.raises(ConfigError):
        read_mask(tmp_path / "nope.pgm")


def test_metrics_json_lines(tmp_path):
    w = MetricsWriter(tmp_path / "m.jsonl")
    w.emit("train", 3, loss=np.float64(0.5), bad=float("nan"))
    w.emit("eval", 4, r1=1.0)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert [json.loads(ln)["event"] for ln in lines] == ["train", "eval"]
    assert read_metrics(tmp_path / "m.jsonl")[0] == {"event": "train", "step": 3, "loss": 0.5, "bad": "nan"}


def test_rng_streams_deterministic_and_distinct():
    a, b = rng_streams(11), rng_streams(11)
    draws = {name: g.random(4).tolist() for name, g in a.items()}
    assert draws == {name: g.random(4).tolist() for name, g in b.items()}
    assert len({tuple(v) for v in draws.values()}) == len(draws)
    assert rng_streams(12)["data"].random() != rng_streams(11)["data"].random()


# -- runs and CLI -----------------------------------------------------------


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_zero_iteration_pretrain_matches_init(tmp_path):
    cfg = parse_config(TINY_VL + "optim.max_iters = 0\nrun.seed = 4\n")
    res = run_pretrain(cfg, tmp_path)
    saved = ck.load(res.out / "model.vltc")
    init = VLModel(vl_config(cfg), rng_streams(4)["init"]).state_dict()
    assert set(saved.tensors) == set(init)
    assert all(saved.tensors[k].tobytes() == init[k].tobytes() for k in init)
    assert saved.seed == 4 and parse_config(saved.config) == cfg


def test_pretrain_byte_identical_across_runs(tmp_path):
    cfg = parse_config(TINY_VL + "optim.max_iters = 2\n")
    a, b = run_pretrain(cfg, tmp_path / "a"), run_pretrain(cfg, tmp_path / "b")
    for name in ("model.vltc", "metrics.jsonl", "summary.json"):
        assert (a.out / name).read_bytes() == (b.out / name).read_bytes()
    other = run_pretrain(parse_config(TINY_VL + "optim.max_iters = 2\nrun.seed = 1\n"), tmp_path / "c")
    assert (other.out / "model.vltc").read_bytes() != (a.out / "model.vltc").read_bytes()


def test_distill_identical_student_has_zero_loss():
    data = gen_classification_set(0, 4, 16)
    teacher = toy_cnn(np.random.default_rng(0), (4, 4), 4, (3, 16, 16), pool="flatten")
    student = teacher.copy()
    assert eval_loss(student, data, predict_logits(teacher, data.images), tau=2.0, task_weight=0.0) == pytest.approx(0.0, abs=1e-12)


def test_distill_run_records_prompt_label(tmp_path):
    res = run_distill(parse_config(TINY_CLS), tmp_path)
    records = read_metrics(res.out / "metrics.jsonl")
    assert any(r["event"] == "metadata" and r["prompt_label"] == "curb line" for r in records)
    assert res.status == "ok" and res.summary["student_params"] < res.summary["teacher_params"]
    assert (res.out / "teacher.vltc").exists() and (res.out / "student.vltc").exists()


def test_distill_student_must_be_smaller(tmp_path):
    with pytest.raises(ConfigError):
        run_distill(parse_config(TINY_CLS + "distill.student_widths = 8, 8\n"), tmp_path)


def test_trim_tiny_run(tmp_path):
    res = run_trim(parse_config(TINY_CLS), tmp_path)
    assert res.status in ("reached", "unreached")
    assert 0 < res.summary["final_ratio"] <= 1 and (res.out / "timing.json").exists()
    records = read_metrics(res.out / "metrics.jsonl")
    assert records[-1]["event"] == "summary" and (res.out / "timings.jsonl").exists()


def test_cli_bad_config_exit_2(tmp_path, capsys):
    assert main(["pretrain", "--config", write_cfg(tmp_path, "optim.lr = -1\n"), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["pretrain", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["eval", "--config", write_cfg(tmp_path, "run.task = pretrain\n", "t.cfg")]) == 2


def test_cli_truncated_checkpoint_exit_2(tmp_path):
    good = ck.encode(ck.Checkpoint({"w": np.ones(3)}, "", 0))
    (tmp_path / "bad.vltc").write_bytes(good[:-5])
    cfg = write_cfg(tmp_path, f"eval.checkpoint = {tmp_path / 'bad.vltc'}\n")
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_cli_bad_mask_exit_2(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n4 4\n255\n\0")
    cfg = write_cfg(tmp_path, f"freespace.mask = {tmp_path / 'm.pgm'}\n")
    assert main(["freespace", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_cli_gradcheck_exit_codes(tmp_path):
    ok = write_cfg(tmp_path, "gradcheck.instances = 1\n", "ok.cfg")
    assert main(["gradcheck", "--config", ok, "--out", str(tmp_path / "a")]) == 0
    bad = write_cfg(tmp_path, "gradcheck.instances = 1\ngradcheck.corrupt = matmul\n", "bad.cfg")
    assert main(["gradcheck", "--config", bad, "--out", str(tmp_path / "b")]) == 3


def test_cli_freespace_success(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "freespace.d_safe = 0.5\n")
    assert main(["freespace", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert "freespace: ok" in capsys.readouterr().out
    assert (tmp_path / "o" / "free_polygon.txt").read_text().startswith("# polygon 0 exterior")
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["safe_area_m2"] > 0


def test_cli_eval_of_pretrained_checkpoint(tmp_path):
    cfg_text = TINY_VL + "optim.max_iters = 1\n"
    assert main(["pretrain", "--config", write_cfg(tmp_path, cfg_text), "--out", str(tmp_path / "p")]) == 0
    ev = write_cfg(tmp_path, cfg_text + f"eval.checkpoint = {tmp_path / 'p' / 'model.vltc'}\n", "e.cfg")
    assert main(["eval", "--config", ev, "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "summary.json").read_text())["kind"] == "retrieval"

"""End-to-end tests of the command line interface.

Commands run in-process through ``main(argv)`` so stdout/stderr land in
capsys and exit codes come back as return values. A small synthetic
dataset is generated once per module and threaded through the full
pipeline: gen-synthetic -> train -> encode -> index -> search/eval.
"""

from __future__ import annotations

import hashlib
import io
import json
import sys

import pytest

from dualtok import Modality, load_index, read_feature_file, write_feature_file
from dualtok.cli import main


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


GEN_ARGS = [
    "gen-synthetic", "--pairs", "12", "--concepts", "6",
    "--concepts-per-sample", "2", "--tokens-per-sample", "4",
    "--latent-dim", "8", "--image-dim", "8", "--text-dim", "8",
    "--noise-std", "0.05", "--seed", "3",
]

TRAIN_ARGS = [
    "--num-layers", "1", "--num-heads", "2", "--model-dim", "8",
    "--output-dim", "8", "--epochs", "2", "--batch-size", "4",
    "--lr", "1e-3", "--seed", "0",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, checkpoint, encoded features and indexes for the module."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(GEN_ARGS + ["--out-dir", str(data)]) == 0

    run_dir = root / "run"
    assert main([
        "train", "--images", str(data / "images.tgf"),
        "--texts", str(data / "texts.tgf"), "--gt", str(data / "pairs.tsv"),
        *TRAIN_ARGS, "--out-dir", str(run_dir),
    ]) == 0
    ckpt = run_dir / "checkpoint.tgp"

    enc_img = root / "images.enc.tgf"
    enc_txt = root / "texts.enc.tgf"
    for src, dst in ((data / "images.tgf", enc_img), (data / "texts.tgf", enc_txt)):
        assert main(["encode", "--input", str(src), "--checkpoint", str(ckpt),
                     "--output", str(dst)]) == 0

    img_idx = root / "images.tgi"
    txt_idx = root / "texts.tgi"
    assert main(["index", "--input", str(enc_img), "--output", str(img_idx),
                 "--checkpoint", str(ckpt)]) == 0
    assert main(["index", "--input", str(enc_txt), "--output", str(txt_idx)]) == 0

    return {
        "data": data, "run": run_dir, "checkpoint": ckpt,
        "enc_img": enc_img, "enc_txt": enc_txt,
        "img_idx": img_idx, "txt_idx": txt_idx,
    }


# ---------------------------------------------------------------- parsing

def test_help_exits_zero(capsys):
    code, out, _ = run(["--help"], capsys)
    assert code == 0
    assert "gen-synthetic" in out


def test_subcommand_help_exits_zero(capsys):
    code, out, _ = run(["train", "--help"], capsys)
    assert code == 0
    assert "--epochs" in out


def test_no_command_prints_help(capsys):
    code, _, err = run([], capsys)
    assert code == 1
    assert "usage" in err


def test_unknown_command(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1
    assert "error:" in err


def test_unknown_flag(capsys):
    code, _, err = run(GEN_ARGS + ["--nope", "1"], capsys)
    assert code == 1
    assert "error:" in err
    assert "dualtok --help" in err


def test_bad_choice_is_usage_error(capsys):
    code, _, err = run(["search", "--index", "x", "--query", "y",
                        "--mode", "warp"], capsys)
    assert code == 1
    assert "invalid choice" in err


# ---------------------------------------------------------- gen-synthetic

def test_gen_synthetic_is_byte_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(GEN_ARGS + ["--out-dir", str(a)], capsys)[0] == 0
    assert run(GEN_ARGS + ["--out-dir", str(b)], capsys)[0] == 0
    for name in ("images.tgf", "texts.tgf", "pairs.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_synthetic_reports_files(tmp_path, capsys):
    code, _, err = run(GEN_ARGS + ["--out-dir", str(tmp_path / "d")], capsys)
    assert code == 0
    assert err.count("wrote") == 3


# ----------------------------------------------------------------- ingest

SAMPLE_JSONL = (
    '{"id": 1, "modality": "image", "global": [1, 0, 0], "tokens": [[0, 1, 0]]}\n'
    '{"id": 2, "modality": "image", "global": [0, 1, 0], "tokens": [[0, 0, 1]]}\n'
)


def test_ingest_from_file(tmp_path, capsys):
    src = tmp_path / "in.jsonl"
    src.write_text(SAMPLE_JSONL, encoding="utf-8")
    out = tmp_path / "out.tgf"
    code, _, err = run(["ingest", "--input", str(src), "--output", str(out)], capsys)
    assert code == 0
    assert "2 samples" in err
    with open(out, "rb") as f:
        samples = read_feature_file(f)
    assert [s.id for s in samples] == [1, 2]
    assert samples[0].modality is Modality.IMAGE


def test_ingest_from_stdin(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO(SAMPLE_JSONL))
    out = tmp_path / "out.tgf"
    assert run(["ingest", "--input", "-", "--output", str(out)], capsys)[0] == 0
    with open(out, "rb") as f:
        assert len(read_feature_file(f)) == 2


def test_ingest_bad_json_exit_2(tmp_path, capsys):
    src = tmp_path / "in.jsonl"
    src.write_text("not json\n", encoding="utf-8")
    code, _, err = run(["ingest", "--input", str(src),
                        "--output", str(tmp_path / "o.tgf")], capsys)
    assert code == 2
    assert "line 1" in err


# ------------------------------------------------------------------ train

def test_train_writes_checkpoint_and_history(workspace, capsys):
    assert workspace["checkpoint"].exists()
    history = (workspace["run"] / "history.tsv").read_text(encoding="utf-8")
    lines = history.strip().splitlines()
    assert lines[0].startswith("epoch\t")
    assert len(lines) == 3  # header + one row per epoch


def test_train_prints_history(workspace, tmp_path, capsys):
    data = workspace["data"]
    code, out, _ = run([
        "train", "--images", str(data / "images.tgf"),
        "--texts", str(data / "texts.tgf"), "--gt", str(data / "pairs.tsv"),
        *TRAIN_ARGS[:-2], "--seed", "1", "--epochs", "1",
        "--out-dir", str(tmp_path / "r"),
    ], capsys)
    assert code == 0
    assert out.splitlines()[0].startswith("epoch\t")


def test_train_missing_file_exit_2(tmp_path, capsys):
    code, _, err = run([
        "train", "--images", str(tmp_path / "absent.tgf"),
        "--texts", str(tmp_path / "absent.tgf"), "--gt", str(tmp_path / "p.tsv"),
        "--out-dir", str(tmp_path / "r"),
    ], capsys)
    assert code == 2
    assert "error:" in err


def test_train_bad_batch_size_exit_1(workspace, tmp_path, capsys):
    data = workspace["data"]
    code, _, err = run([
        "train", "--images", str(data / "images.tgf"),
        "--texts", str(data / "texts.tgf"), "--gt", str(data / "pairs.tsv"),
        "--batch-size", "1", "--out-dir", str(tmp_path / "r"),
    ], capsys)
    assert code == 1
    assert "batch" in err


def test_train_divergence_exit_3(workspace, tmp_path, capsys):
    data = workspace["data"]
    code, _, err = run([
        "train", "--images", str(data / "images.tgf"),
        "--texts", str(data / "texts.tgf"), "--gt", str(data / "pairs.tsv"),
        "--num-layers", "1", "--num-heads", "2", "--model-dim", "8",
        "--output-dim", "8", "--epochs", "3", "--batch-size", "4",
        "--lr", "1e160", "--out-dir", str(tmp_path / "r"),
    ], capsys)
    assert code == 3
    assert "epoch" in err


# --------------------------------------------------------- encode / index

def test_encode_output_dims(workspace):
    with open(workspace["enc_img"], "rb") as f:
        samples = read_feature_file(f)
    assert len(samples) == 12
    assert all(s.token_dim == 8 for s in samples)
    assert all(s.global_dim == 8 for s in samples)


def test_index_digest_stamping(workspace):
    with open(workspace["img_idx"], "rb") as f:
        idx = load_index(f)
    expected = hashlib.sha256(workspace["checkpoint"].read_bytes()).digest()
    assert idx.digest == expected
    with open(workspace["txt_idx"], "rb") as f:
        assert load_index(f).digest == bytes(32)


def test_index_corrupt_input_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.tgf"
    bad.write_bytes(b"garbage bytes that are not a feature file")
    code, _, err = run(["index", "--input", str(bad),
                        "--output", str(tmp_path / "o.tgi")], capsys)
    assert code == 2
    assert "error:" in err


# ----------------------------------------------------------------- search

def make_query_file(workspace, tmp_path, count=2):
    with open(workspace["enc_txt"], "rb") as f:
        samples = read_feature_file(f)
    path = tmp_path / "queries.tgf"
    with open(path, "wb") as f:
        write_feature_file(samples[:count], f)
    return path, [s.id for s in samples[:count]]


def test_search_two_stage_output(workspace, tmp_path, capsys):
    qfile, qids = make_query_file(workspace, tmp_path)
    code, out, _ = run(["search", "--index", str(workspace["img_idx"]),
                        "--query", str(qfile), "--k", "5"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == f"# query {qids[0]}"
    blocks = [ln for ln in lines if ln.startswith("# query")]
    assert blocks == [f"# query {i}" for i in qids]
    entries = [ln.split("\t") for ln in lines if not ln.startswith("#")]
    assert len(entries) == 2 * 5
    for ident, score, stage in entries:
        int(ident)
        float(score)
        assert stage == "rerank"


def test_search_exhaustive_modes(workspace, tmp_path, capsys):
    qfile, _ = make_query_file(workspace, tmp_path, count=1)
    for mode in ("global", "local", "mixed"):
        code, out, _ = run(["search", "--index", str(workspace["img_idx"]),
                            "--query", str(qfile), "--mode", mode], capsys)
        assert code == 0
        entries = [ln.split("\t") for ln in out.splitlines()
                   if not ln.startswith("#")]
        assert len(entries) == 12  # exhaustive over the whole gallery
        assert {e[2] for e in entries} == {mode}
        scores = [float(e[1]) for e in entries]
        assert scores == sorted(scores, reverse=True)


def test_search_bad_theta_exit_1(workspace, tmp_path, capsys):
    qfile, _ = make_query_file(workspace, tmp_path, count=1)
    code, _, err = run(["search", "--index", str(workspace["img_idx"]),
                        "--query", str(qfile), "--theta", "1.5"], capsys)
    assert code == 1
    assert "theta" in err


def test_search_missing_index_exit_2(tmp_path, capsys):
    code, _, err = run(["search", "--index", str(tmp_path / "no.tgi"),
                        "--query", str(tmp_path / "no.tgf")], capsys)
    assert code == 2
    assert "error:" in err


# ------------------------------------------------------------------- eval

def test_eval_tsv(workspace, capsys):
    code, out, _ = run(["eval", "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--gt", str(workspace["data"] / "pairs.tsv")], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# mode=two-stage")
    assert lines[1] == "direction\tr@1\tr@5\tr@10\tqueries"
    assert lines[2].startswith("text_to_image\t")
    assert lines[3].startswith("image_to_text\t")
    assert "seconds" not in out


def test_eval_json(workspace, capsys):
    code, out, _ = run(["eval", "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--gt", str(workspace["data"] / "pairs.tsv"),
                        "--format", "json"], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["mode"] == "two-stage"
    assert set(report["timing"]) == {"total_seconds", "per_query_seconds"}
    assert report["text_to_image"]["queries"] == 12


def test_eval_id_mismatch_exit_2(workspace, tmp_path, capsys):
    gt = tmp_path / "gt.tsv"
    gt.write_text("0\t999\n", encoding="utf-8")
    code, _, err = run(["eval", "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--gt", str(gt)], capsys)
    assert code == 2
    assert "999" in err


# ------------------------------------------------------------------ sweep

def test_sweep_theta(workspace, capsys):
    code, out, _ = run(["sweep", "--param", "theta", "--values", "0,0.5,1",
                        "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--gt", str(workspace["data"] / "pairs.tsv")], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("theta\t")
    assert len(lines) == 4
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["0", "0.5", "1"]


def test_sweep_k(workspace, capsys):
    code, out, _ = run(["sweep", "--param", "k", "--values", "1,5,12",
                        "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--gt", str(workspace["data"] / "pairs.tsv")], capsys)
    assert code == 0
    assert len(out.splitlines()) == 4


def test_sweep_unparseable_values_exit_1(workspace, capsys):
    code, _, err = run(["sweep", "--param", "theta", "--values", "0.5,zap",
                        "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--gt", str(workspace["data"] / "pairs.tsv")], capsys)
    assert code == 1
    assert "--values" in err


def test_sweep_sigma_needs_raw_features(workspace, capsys):
    code, _, err = run(["sweep", "--param", "sigma", "--values", "0.3",
                        "--gt", str(workspace["data"] / "pairs.tsv")], capsys)
    assert code == 1
    assert "--images" in err


def test_sweep_sigma_retrains(workspace, capsys):
    data = workspace["data"]
    code, out, _ = run([
        "sweep", "--param", "sigma", "--values", "0.3,inf",
        "--gt", str(data / "pairs.tsv"),
        "--images", str(data / "images.tgf"), "--texts", str(data / "texts.tgf"),
        "--num-layers", "1", "--num-heads", "2", "--model-dim", "8",
        "--output-dim", "8", "--epochs", "1", "--batch-size", "4",
    ], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("sigma\t")
    assert len(lines) == 3


# ------------------------------------------------------------------ bench

def test_bench_tsv(workspace, capsys):
    code, out, _ = run(["bench", "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--queries", "3", "--k", "5"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "# threads=1"
    assert lines[1] == "# gallery_sizes image=12 text=12"
    assert lines[2] == "# query_counts image=3 text=3"
    assert lines[3] == "mode\tqueries\ttotal_seconds\tper_query_ms"
    assert [ln.split("\t")[0] for ln in lines[4:]] == [
        "global", "local", "mixed", "two-stage"]


def test_bench_json_subset_of_modes(workspace, capsys):
    code, out, _ = run(["bench", "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--modes", "global,two-stage", "--queries", "2",
                        "--format", "json"], capsys)
    assert code == 0
    report = json.loads(out)
    assert [t["mode"] for t in report["modes"]] == ["global", "two-stage"]
    assert report["threads"] == 1


def test_bench_unknown_mode_exit_1(workspace, capsys):
    code, _, err = run(["bench", "--image-index", str(workspace["img_idx"]),
                        "--text-index", str(workspace["txt_idx"]),
                        "--modes", "warp"], capsys)
    assert code == 1
    assert "warp" in err


# ----------------------------------------------------------------- ablate

def ablate_args(workspace):
    data = workspace["data"]
    return [
        "ablate", "--images", str(data / "images.tgf"),
        "--texts", str(data / "texts.tgf"), "--gt", str(data / "pairs.tsv"),
        "--num-layers", "1", "--num-heads", "2", "--model-dim", "8",
        "--output-dim", "8", "--epochs", "1", "--batch-size", "4",
        "--k", "12",
    ]


def test_ablate_table_and_determinism(workspace, capsys):
    code, first, _ = run(ablate_args(workspace), capsys)
    assert code == 0
    lines = first.splitlines()
    assert lines[0].split("\t") == [
        "task", "loss_variant", "t2i_r@1", "t2i_r@5", "t2i_r@10",
        "i2t_r@1", "i2t_r@5", "i2t_r@10"]
    assert len(lines) == 7  # header + 3 tasks x 2 variants
    assert [ln.split("\t")[:2] for ln in lines[1:]] == [
        ["global", "consistency"], ["global", "triplet"],
        ["local", "consistency"], ["local", "triplet"],
        ["joint", "consistency"], ["joint", "triplet"]]

    code, second, _ = run(ablate_args(workspace), capsys)
    assert code == 0
    assert second == first

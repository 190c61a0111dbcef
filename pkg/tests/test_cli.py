import json
import subprocess
import sys

import pytest

from capcond.cli import main


def run(argv, capsys):
    status = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return status, out, err


@pytest.fixture
def synth(tmp_path, capsys):
    data = tmp_path / "data"
    status, out, _ = run(["synth-data", "--n-images", 40, "--output-dir", data], capsys)
    assert status == 0 and json.loads(out)["images"] == 40
    return data


def train_flags(data, **over):
    flags = {"dataset": data / "dataset.json", "features": data / "features.bin",
             "kind": "merge", "layer-size": 8, "max-epochs": 3, "min-frequency": 1,
             "minibatch-size": 8, "normalize-image": "no", "beam-width": 2}
    flags.update(over)
    return [x for k, v in flags.items() for x in (f"--{k}", v)]


class TestCountParams:
    def test_preset_prints_count_and_ratio(self, capsys):
        status, out, _ = run(["count-params", "--preset", "merge-flickr8k"], capsys)
        assert status == 0
        lines = out.splitlines()
        assert lines[0] == "merge: 1600747 parameters"
        assert lines[1] == "init-inject/merge ratio: 3.9198 (6274539 / 1600747)"

    def test_explicit_dimensions(self, capsys):
        status, out, _ = run(["count-params", "--kind", "merge", "--layer-size", 2,
                              "--vocab-size", 3, "--image-dim", 4], capsys)
        assert status == 0 and out.strip() == "merge: 61 parameters"

    def test_missing_arguments(self, capsys):
        status, _, err = run(["count-params", "--kind", "merge"], capsys)
        assert status == 2 and json.loads(err)["error"] == "usage"


class TestErrors:
    def test_unknown_flag(self, capsys):
        status, _, err = run(["train", "--bogus", 1], capsys)
        payload = json.loads(err)
        assert status == 2 and payload == {"error": "usage", "message": payload["message"],
                                           "status": 2}
        assert "bogus" in payload["message"]

    def test_missing_config_file(self, tmp_path, capsys):
        status, _, err = run(["train", "--config", tmp_path / "nope.json"], capsys)
        assert status == 2 and "config" in json.loads(err)["message"]

    def test_missing_dataset(self, tmp_path, capsys):
        status, _, err = run(["train", "--dataset", tmp_path / "none.json",
                              "--features", tmp_path / "none.bin"], capsys)
        assert status == 2 and "dataset" in json.loads(err)["message"]

    def test_invalid_setting(self, synth, capsys):
        status, _, err = run(["train", *train_flags(synth, **{"layer-size": 0})], capsys)
        assert status == 2 and "layer_size" in json.loads(err)["message"]

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"colour": "red"}))
        status, _, err = run(["train", "--config", tmp_path / "c.json"], capsys)
        assert status == 2 and "colour" in json.loads(err)["message"]

    def test_corrupt_dataset_is_data_error(self, tmp_path, capsys):
        (tmp_path / "d.json").write_text("{")
        (tmp_path / "c.jsonl").write_text("")
        status, _, err = run(["evaluate", "--captions", tmp_path / "c.jsonl",
                              "--dataset", tmp_path / "d.json"], capsys)
        assert status == 1 and json.loads(err)["error"] == "data"

    def test_console_script_exit_status(self):
        proc = subprocess.run([sys.executable, "-m", "capcond.cli", "count-params"],
                              capture_output=True, text=True)
        assert proc.returncode == 2 and json.loads(proc.stderr)["status"] == 2


class TestPipeline:
    def test_train_is_bit_identical(self, synth, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["train", *train_flags(synth), "--seed", 4, "--output-dir", out],
                       capsys)[0] == 0
            assert run(["generate", "--model", out / "model.ccm", "--split", "val",
                        "--output-dir", out], capsys)[0] == 0
            outs.append(out)
        for artifact in ("model.ccm", "captions.jsonl", "epoch_log.csv"):
            assert (outs[0] / artifact).read_bytes() == (outs[1] / artifact).read_bytes()

    def test_config_file_and_flag_override(self, synth, tmp_path, capsys):
        cfg = {"dataset": str(synth / "dataset.json"), "features": str(synth / "features.bin"),
               "kind": "par_inject", "layer_size": 6, "max_epochs": 1, "min_frequency": 1}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert run(["train", "--config", tmp_path / "c.json", "--layer_size", 5,
                    "--output-dir", out], capsys)[0] == 0
        run_info = json.loads((out / "run.json").read_text())
        assert run_info["experiment"]["layer_size"] == 5
        assert run_info["experiment"]["kind"] == "par_inject" and run_info["seed"] == 1

    def test_output_dir_from_environment(self, synth, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CAPCOND_OUTPUT_DIR", str(tmp_path / "env"))
        assert run(["train", *train_flags(synth, **{"max-epochs": 1})], capsys)[0] == 0
        assert (tmp_path / "env" / "model.ccm").exists()

    def test_evaluate_references_as_candidates(self, synth, tmp_path, capsys):
        ds = json.loads((synth / "dataset.json").read_text())
        rows = [{"image_id": im["id"], "tokens": im["captions"][0]}
                for im in ds["images"] if im["split"] == "test"]
        path = tmp_path / "caps.jsonl"
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        status, out, _ = run(["evaluate", "--captions", path, "--dataset", synth / "dataset.json",
                              "--min-frequency", 1, "--output-dir", tmp_path], capsys)
        metrics = json.loads(out)
        assert status == 0
        assert metrics["BLEU-1"] == pytest.approx(1.0) and metrics["BLEU-4"] == pytest.approx(1.0)
        assert metrics["ROUGE-L"] == pytest.approx(1.0)
        assert json.loads((tmp_path / "evaluation.json").read_text())["metrics"] == metrics

    def test_evaluate_unknown_references(self, synth, tmp_path, capsys):
        ds = json.loads((synth / "dataset.json").read_text())
        test = [im for im in ds["images"] if im["split"] == "test"]
        rows = [{"image_id": im["id"], "tokens": im["captions"][0]} for im in test]
        path = tmp_path / "caps.jsonl"
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        base = ["evaluate", "--captions", path, "--dataset", synth / "dataset.json",
                "--min-frequency", 25, "--output-dir", tmp_path]
        surface = json.loads(run(base, capsys)[1])
        mapped = json.loads(run([*base, "--unknown-references"], capsys)[1])
        # only "a" and "is" occur 25 times in training; 2 of 5 reference words survive
        assert surface["BLEU-1"] == pytest.approx(1.0)
        assert mapped["BLEU-1"] == pytest.approx(0.4)

    def test_retrieve_and_probe(self, synth, tmp_path, capsys):
        out = tmp_path / "m"
        run(["train", *train_flags(synth, **{"max-epochs": 1}), "--output-dir", out], capsys)
        status, text, _ = run(["retrieve", "--model", out / "model.ccm", "--split", "val",
                               "--output-dir", out], capsys)
        rec = json.loads(text)
        assert status == 0 and rec["R@1"] <= rec["R@5"] <= rec["R@10"]
        status, text, _ = run(["probe", "--model", out / "model.ccm", "--split", "val",
                               "--caption-len", 5, "--repetitions", 3, "--output-dir", out],
                              capsys)
        assert status == 0 and json.loads(text)["std_over_positions"] < 1e-5
        lines = (out / "retention.csv").read_text().splitlines()
        assert lines[0] == "position,mean_distance" and len(lines) == 7
        assert json.loads((out / "retention.run.json").read_text())["caption_len"] == 5

    def test_run_then_report(self, synth, tmp_path, capsys):
        runs = tmp_path / "runs"
        for kind in ("merge", "init_inject"):
            status, _, _ = run(["run", *train_flags(synth, kind=kind, **{"max-epochs": 1}),
                                "--seeds", "1,2", "--split", "val",
                                "--output-dir", runs / kind], capsys)
            assert status == 0
            assert (runs / kind / "seed-2" / "metrics.json").exists()
        status, out, _ = run(["report", runs, "--output-dir", tmp_path / "rep"], capsys)
        assert status == 0
        header = out.splitlines()[0]
        assert header == "| metric | init_inject | merge |"
        first = (tmp_path / "rep" / "report.json").read_bytes()
        run(["report", runs, "--output-dir", tmp_path / "rep"], capsys)
        assert (tmp_path / "rep" / "report.json").read_bytes() == first

    def test_search_hparams_small_budget(self, synth, tmp_path, capsys):
        out = tmp_path / "search"
        argv = ["search-hparams", *train_flags(synth), "--n-random", 2, "--layer-sizes", "4",
                "--stage-epochs", 1, "--max-evaluations", 3, "--output-dir", out]
        status, text, _ = run(argv, capsys)
        best = json.loads(text)
        assert status == 0 and set(best) >= {"combination", "epochs", "beam", "cider"}
        journal = (out / "journal.jsonl").read_text().splitlines()
        assert len(journal) == 3
        # with no fresh evaluations allowed, a rerun replays the journal exactly
        argv[argv.index("--max-evaluations") + 1] = 0
        status, text2, _ = run(argv, capsys)
        assert status == 0 and json.loads(text2) == best
        assert len((out / "journal.jsonl").read_text().splitlines()) == 3

    def test_convert_karpathy(self, tmp_path, capsys):
        raw = {"images": [{"filename": "a.jpg", "imgid": 0, "split": "train",
                           "sentences": [{"tokens": ["a", "dog"]}]}]}
        (tmp_path / "k.json").write_text(json.dumps(raw))
        status, out, _ = run(["convert-karpathy", "--karpathy-json", tmp_path / "k.json",
                              "--output-dir", tmp_path / "o"], capsys)
        assert status == 0 and json.loads(out)["images"] == 1
        assert (tmp_path / "o" / "dataset.json").exists()

import io
import json


import pytest
from fastapi.testclient import TestClient
from scipy.io import wavfile

from peloc import server, supervision
from peloc.cli import main
from peloc.supervision import MockAnnotator, annotate, load_proposals


@pytest.fixture(scope="module")
def review_corpus(mini_corpus):
    """Mini corpus with mock proposals written beside the manifest."""
    root = mini_corpus["root"]
    if not (root / "proposals.jsonl").exists():
        annotator = MockAnnotator(jitter_s=2.0, seed=5)
        proposals = []
        for s in mini_corpus["sessions"]:
            proposals.extend(annotate(s, "text", annotator))
        supervision.save_proposals(proposals, root / "proposals.jsonl")
    return root


class TestCliHelp:
    @pytest.mark.parametrize("cmd", ["synth", "annotate", "review-serve", "verify",
                                     "train", "grid", "eval", "report"])
    def test_help_exits_zero_and_shows_defaults(self, cmd, capsys):
        assert main([cmd, "--help"]) == 0
        out = capsys.readouterr().out
        assert "default:" in out

    def test_unknown_flag_exits_one(self, capsys):
        assert main(["synth", "--bogus"]) == 1

    def test_unknown_command_exits_one(self):
        assert main(["frobnicate"]) == 1


class TestCliSynthAnnotateVerify:
    def test_synth_writes_corpus(self, tmp_path, capsys):
        code = main(["--config", str(self._cfg(tmp_path)), "synth"])
        assert code == 0
        out = capsys.readouterr().out
        assert "3 sessions" in out
        assert (tmp_path / "c" / "manifest.json").exists()
        assert len(list((tmp_path / "c" / "audio").glob("*.wav"))) == 3

    def _cfg(self, tmp_path):
        # tiny sessions keep the CLI test fast; config file exercises the
        # flag > file > default precedence path
        cfg = {"synth": {"n": 3, "seed": 3, "out": str(tmp_path / "c"), "preset": "desk"}}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_flag_overrides_config_file(self, tmp_path, capsys):
        code = main(["--config", str(self._cfg(tmp_path)), "synth", "--out", str(tmp_path / "d")])
        assert code == 0
        assert (tmp_path / "d" / "manifest.json").exists()

    def test_annotate_and_verify_round_trip(self, tmp_path, capsys, monkeypatch):
        main(["--config", str(self._cfg(tmp_path)), "synth"])
        corpus = str(tmp_path / "c")
        assert main(["annotate", "--corpus", corpus, "--annotator", "mock"]) == 0
        proposals = load_proposals(tmp_path / "c" / "proposals.jsonl")
        assert len(proposals) == 9  # 3 sessions x 3 phases
        monkeypatch.setattr("sys.stdin", io.StringIO("a\n" * 9))
        assert main(["verify", "--corpus", corpus]) == 0
        out = capsys.readouterr().out
        assert "timestamps 100.00%" in out
        log = (tmp_path / "c" / "verdicts.jsonl").read_text().strip().splitlines()
        assert len(log) == 9

    def test_bad_annotator_name(self, tmp_path):
        main(["--config", str(self._cfg(tmp_path)), "synth"])
        assert main(["annotate", "--corpus", str(tmp_path / "c"), "--annotator", "oracle"]) == 1


@pytest.fixture(scope="module")
def client(review_corpus):
    app = server.create_app(review_corpus, tolerance_s=5.0)
    return TestClient(app)


class TestReviewApi:
    def test_queue_lists_pending(self, client):
        q = client.get("/api/queue").json()
        assert q["total"] == 9
        assert q["pending"] + q["reviewed"] == 9
        item = q["items"][0]
        assert {"id", "session_id", "phase", "start_s", "stop_s", "status"} <= set(item)

    def test_proposal_detail_with_excerpts(self, client):
        pid = client.get("/api/queue").json()["items"][0]["id"]
        p = client.get(f"/api/proposal/{pid}").json()
        assert p["id"] == pid
        assert isinstance(p["start_excerpt"], list) and p["start_excerpt"]
        assert isinstance(p["stop_excerpt"], list)
        spans = [s for s in p["start_excerpt"]]
        assert all(abs(s["start"] - p["start_s"]) <= 60.0 + 10 for s in spans)

    def test_unknown_proposal_404(self, client):
        assert client.get("/api/proposal/nope:P9").status_code == 404

    def test_audio_slice_is_valid_wav(self, client, review_corpus):
        q = client.get("/api/queue").json()
        item = q["items"][0]
        r = client.get(f"/api/proposal/{item['id']}/audio", params={"pad": 15})
        assert r.status_code == 200
        assert r.headers["content-type"] == "audio/wav"
        rate, data = wavfile.read(io.BytesIO(r.content))
        assert rate == 16000
        lo = max(0.0, item["start_s"] - 15.0)
        hi = item["start_s"] + 15.0
        assert len(data) == pytest.approx((hi - lo) * 16000, abs=2)

    def test_audio_pad_clamped_at_session_start(self, client):
        q = client.get("/api/queue").json()
        p1 = next(i for i in q["items"] if i["phase"] == "P1")
        r = client.get(f"/api/proposal/{p1['id']}/audio", params={"pad": 1e5})
        assert r.status_code == 200
        rate, data = wavfile.read(io.BytesIO(r.content))
        assert rate == 16000 and len(data) > 0

    def test_audio_end_boundary(self, client):
        item = client.get("/api/queue").json()["items"][0]
        r = client.get(f"/api/proposal/{item['id']}/audio",
                       params={"pad": 5, "boundary": "end"})
        assert r.status_code == 200
        assert float(r.headers["X-Clip-Start-S"]) == pytest.approx(item["stop_s"] - 5.0, abs=0.01)

    def test_verdict_accept_then_stats(self, client):
        item = client.get("/api/queue").json()["items"][0]
        r = client.post(f"/api/proposal/{item['id']}/verdict",
                        json={"decision": "accept", "rater_id": "t"})
        assert r.status_code == 200
        stats = client.get("/api/stats").json()
        assert stats["timestamp_accuracy"] == 1.0
        assert stats["n_labels"] >= 1

    def test_double_verdict_conflict_409(self, client):
        items = client.get("/api/queue").json()["items"]
        pid = items[1]["id"]
        first = client.post(f"/api/proposal/{pid}/verdict",
                            json={"decision": "correct", "corrected_start_s": 10.0,
                                  "corrected_stop_s": 20.0, "rater_id": "t"})
        assert first.status_code == 200
        second = client.post(f"/api/proposal/{pid}/verdict",
                             json={"decision": "correct", "corrected_start_s": 11.0,
                                   "corrected_stop_s": 21.0, "rater_id": "t"})
        assert second.status_code == 409

    def test_malformed_verdict_400(self, client):
        pid = client.get("/api/queue").json()["items"][2]["id"]
        r = client.post(f"/api/proposal/{pid}/verdict", json={"rater_id": "t"})
        assert r.status_code == 400
        assert any("decision" in e["field"] for e in r.json()["detail"])
        r2 = client.post(f"/api/proposal/{pid}/verdict",
                         json={"decision": "correct", "rater_id": "t"})
        assert r2.status_code == 400

    def test_restart_reproduces_stats(self, client, review_corpus):
        before = client.get("/api/stats").json()
        fresh = TestClient(server.create_app(review_corpus, tolerance_s=5.0))
        assert fresh.get("/api/stats").json() == before
        q_before = client.get("/api/queue").json()
        q_fresh = fresh.get("/api/queue").json()
        assert q_before["pending"] == q_fresh["pending"]


@pytest.fixture(scope="module")
def run_dir(mini_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_runs")
    code = main([
        "train", "--corpus", str(mini_corpus["root"]), "--out", str(out),
        "--window", "30", "--model", "lora2", "--seed", "42",
        "--ratios", "0.3333333333333333,0.3333333333333333,0.3333333333333334",
        "--epochs", "1", "--pretrain-steps", "0",
        "--train-per-boundary", "1", "--test-per-boundary", "1"])
    assert code == 0
    return out


class TestCliTrainEvalReport:
    def test_train_outputs(self, run_dir, mini_corpus, capsys):
        assert (run_dir / "cell_30s_lora2_s42.json").exists()
        assert (run_dir / "ckpt_30s_lora2_s42" / "config.json").exists()

    def test_eval_checkpoint(self, run_dir, mini_corpus, capsys):
        code = main(["eval", "--checkpoint", str(run_dir / "ckpt_30s_lora2_s42"),
                     "--corpus", str(mini_corpus["root"]),
                     "--ratios", "0.3333333333333333,0.3333333333333333,0.3333333333333334", "--test-per-boundary", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "test split" in out and "P1" in out

    def test_report_from_cells(self, run_dir, capsys):
        code = main(["report", "--results", str(run_dir), "--format", "both"])
        assert code == 0
        out = capsys.readouterr().out
        assert "lora2" in out
        assert (run_dir / "report.txt").exists()
        assert (run_dir / "report.csv").exists()

    def test_report_missing_dir(self, tmp_path):
        assert main(["report", "--results", str(tmp_path)]) == 1


class TestCliGrid:
    def test_single_cell_grid(self, mini_corpus, tmp_path, capsys):
        code = main([
            "grid", "--corpus", str(mini_corpus["root"]), "--out", str(tmp_path),
            "--windows", "30", "--configs", "lora8", "--seeds", "42",
            "--ratios", "0.3333333333333333,0.3333333333333333,0.3333333333333334",
            "--epochs", "1", "--pretrain-steps", "0",
            "--train-per-boundary", "1", "--test-per-boundary", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "lora8" in out and "30s" in out
        assert (tmp_path / "cell_30s_lora8_s42.json").exists()
        assert (tmp_path / "report.txt").exists()
        assert (tmp_path / "report.csv").exists()


class TestSchedulePeakLogging:
    def test_train_logs_lr_peak_at_ten_percent(self, mini_corpus, tmp_path, capsys):
        code = main([
            "train", "--corpus", str(mini_corpus["root"]), "--out", str(tmp_path),
            "--window", "30", "--model", "head", "--seed", "1",
            "--ratios", "0.3333333333333333,0.3333333333333333,0.3333333333333334", "--epochs", "1", "--pretrain-steps", "0",
            "--train-per-boundary", "1", "--test-per-boundary", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "lr peaks at 0.0001" in out
        assert "10% of steps" in out

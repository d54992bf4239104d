import json

import numpy as np
import pytest

from dualkv.cli import main, read_rollouts


def _write_rollouts(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


@pytest.fixture
def rollout_file(tmp_path):
    rng = np.random.default_rng(0)
    records = []
    for pid in range(2):
        prompt = [int(t) for t in rng.integers(0, 50, 4)]
        for _ in range(4):
            records.append(
                dict(
                    prompt_id=f"q{pid}",
                    prompt_tokens=prompt,
                    response_tokens=[int(t) for t in rng.integers(0, 50, int(rng.integers(1, 5)))],
                    advantage=float(rng.normal()),
                )
            )
    path = tmp_path / "rollouts.jsonl"
    _write_rollouts(path, records)
    return path, records


class TestVerifyCommand:
    def test_passing_suite_exits_zero(self, capsys):
        assert main(["verify", "--suite", "pipeline", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "checks passed" in out

    def test_kernel_suite_reports_case_counts(self, capsys):
        assert main(["verify", "--suite", "kernel", "--seed", "7", "--cases", "50"]) == 0
        out = capsys.readouterr().out
        assert "50/50 cases within bound" in out

    def test_unknown_suite_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--suite", "bogus"])
        assert exc.value.code == 2

    def test_records_format_is_parseable(self, capsys):
        assert main(["verify", "--suite", "precision", "--format", "records"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        records = [json.loads(line) for line in lines]
        assert records[-1]["kind"] == "summary"
        assert all("name" in r for r in records if r["kind"] == "check")

    def test_deterministic_given_seed(self, capsys):
        main(["verify", "--suite", "precision", "--seed", "5"])
        first = capsys.readouterr().out
        main(["verify", "--suite", "precision", "--seed", "5"])
        second = capsys.readouterr().out
        assert first == second


class TestAnalyzeCommand:
    def test_reference_rho(self, capsys):
        assert main(["analyze", "--n", "32", "--p", "16384", "--r", "2048"]) == 0
        out = capsys.readouterr().out
        assert "rho = 7.2000" in out
        assert "note:" in out  # the formula/pair-ratio discrepancy is flagged

    def test_degenerate_no_sharing(self, capsys):
        assert main(["analyze", "--n", "1", "--p", "100", "--r", "100"]) == 0
        out = capsys.readouterr().out
        assert "rho = 1.0000" in out
        assert "kv=0 MB q=0 MB lse=0 MB total=0 MB" in out

    def test_memory_preset(self, capsys):
        assert main(["analyze", "--n", "8", "--p", "16384", "--r", "2048",
                     "--dims", "qwen3-8b"]) == 0
        assert "total=1423 MB" in capsys.readouterr().out

    def test_rejects_nonpositive(self, capsys):
        assert main(["analyze", "--n", "0", "--p", "10", "--r", "10"]) == 2

    def test_records_mode(self, capsys):
        assert main(["analyze", "--n", "8", "--p", "2048", "--r", "2048",
                     "--format", "records"]) == 0
        records = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        by_kind = {r["kind"]: r for r in records}
        assert by_kind["rho"]["value"] == pytest.approx(1.7777, abs=1e-3)
        assert by_kind["kernel_memory_saved_bytes"]["total"] > 0


class TestPackCommand:
    def test_round_trip(self, tmp_path, rollout_file, capsys):
        path, records = rollout_file
        out_path = tmp_path / "manifests.jsonl"
        rc = main(["pack", "--input", str(path), "--mode", "dualkv", "--mb", "4",
                   "--out", str(out_path)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "rho=" in stdout
        manifests = [json.loads(l) for l in open(out_path)]
        assert len(manifests) == 2  # one group of four per micro-batch
        # unpack the manifests back into (prompt, response, advantage) triples
        recovered = []
        for m in manifests:
            ids = m["token_ids"]
            for g in m["groups"]:
                prompt = ids[g["context_start"]: g["context_start"] + g["context_span"]]
                for i, adv in enumerate(g["advantages"]):
                    s = g["resp_start"] + g["resp_cu"][i]
                    e = g["resp_start"] + g["resp_cu"][i + 1]
                    recovered.append((g["prompt_id"], tuple(prompt), tuple(ids[s:e]), adv))
        original = [
            (r["prompt_id"], tuple(r["prompt_tokens"]), tuple(r["response_tokens"]),
             r["advantage"])
            for r in records
        ]
        assert sorted(recovered) == sorted(original)

    def test_inconsistent_prompt_named(self, tmp_path, rollout_file, capsys):
        path, records = rollout_file
        records[1]["prompt_tokens"] = [1, 2, 3]
        bad = tmp_path / "bad.jsonl"
        _write_rollouts(bad, records)
        rc = main(["pack", "--input", str(bad), "--mode", "dualkv", "--mb", "4",
                   "--out", str(tmp_path / "x.jsonl")])
        assert rc == 1
        assert "'q0'" in capsys.readouterr().err

    def test_oversized_group_rejected(self, tmp_path, rollout_file, capsys):
        path, _ = rollout_file
        rc = main(["pack", "--input", str(path), "--mode", "dualkv", "--mb", "3",
                   "--out", str(tmp_path / "x.jsonl")])
        assert rc == 1
        assert "co-located" in capsys.readouterr().err

    def test_standard_mode_chunks_freely(self, tmp_path, rollout_file):
        path, _ = rollout_file
        out_path = tmp_path / "std.jsonl"
        rc = main(["pack", "--input", str(path), "--mode", "standard", "--mb", "3",
                   "--out", str(out_path)])
        assert rc == 0
        manifests = [json.loads(l) for l in open(out_path)]
        assert sum(len(g["advantages"]) for m in manifests for g in m["groups"]) == 8

    def test_read_rollouts_groups_in_order(self, rollout_file):
        path, records = rollout_file
        groups = read_rollouts(str(path))
        assert [g.prompt_id for g in groups] == ["q0", "q1"]
        assert all(g.num_responses == 4 for g in groups)


class TestBenchCommand:
    def test_small_configuration_runs(self, capsys):
        rc = main(["bench", "--n", "2", "--p", "64", "--r", "32", "--bn", "16",
                   "--reps", "1", "--warmup", "0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "measured speedup" in out and "predicted" in out

    def test_oversized_configuration_fails_cleanly(self, capsys):
        rc = main(["bench", "--n", "512", "--p", "200000", "--r", "200000",
                   "--heads", "64", "--dim", "256", "--reps", "1"])
        assert rc == 1
        assert "budget" in capsys.readouterr().err

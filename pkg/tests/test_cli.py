import json
import subprocess
import sys

import numpy as np
import pytest

from sparseevo.cli import main
from sparseevo.container import load_image, save_image
from sparseevo.image import ImageTensor
from sparseevo.oracle import CentroidOracle
from tests.conftest import grid_image


def _kv(captured_out):
    pairs = {}
    for line in captured_out.strip().splitlines():
        key, _, value = line.partition(" ")
        pairs[key] = value
    return pairs


@pytest.fixture
def centroid_setup(tmp_path):
    """Three 1x6x6 centroid class images on disk plus a boundary source."""
    rng = np.random.default_rng(4321)
    cents = [ImageTensor(rng.integers(0, 256, (1, 6, 6)) / 255.0) for _ in range(3)]
    cdir = tmp_path / "classes"
    cdir.mkdir()
    for i, c in enumerate(cents):
        save_image(c, cdir / f"class{i}.img")
    oracle = CentroidOracle(cents)
    mix = ImageTensor(np.rint((0.55 * cents[0].data + 0.45 * cents[1].data) * 255) / 255)
    label = oracle.predict(mix)
    src_path = tmp_path / "source.img"
    save_image(mix, src_path)
    start_paths = {}
    for i, c in enumerate(cents):
        start_paths[i] = tmp_path / f"start{i}.img"
        save_image(c, start_paths[i])
    return {
        "dir": cdir,
        "oracle_spec": f"toy:centroid:{cdir}",
        "source": src_path,
        "label": label,
        "starts": start_paths,
        "centroids": cents,
        "tmp": tmp_path,
    }


class TestAttackCommand:
    def test_sparse_evo_end_to_end(self, centroid_setup, capsys, tmp_path):
        env = centroid_setup
        start = env["starts"][1 if env["label"] != 1 else 0]
        out_img = tmp_path / "adv.img"
        trace_csv = tmp_path / "trace.csv"
        code = main([
            "attack", "sparse-evo",
            "--source", str(env["source"]),
            "--start", str(start),
            "--oracle", env["oracle_spec"],
            "--budget", "120",
            "--seed", "3",
            "--init-rate", "0.05",
            "--mutation-rate", "0.1",
            "--out", str(out_img),
            "--trace", str(trace_csv),
        ])
        assert code == 0
        fields = _kv(capsys.readouterr().out)
        assert fields["success"] == "true"
        assert fields["queries"] == "120"
        assert fields["setup_queries"] == "2"
        assert 0.0 < float(fields["sparsity"]) <= 1.0
        assert int(fields["pixels"]) == round(float(fields["sparsity"]) * 36)
        adv = load_image(out_img)
        fresh = CentroidOracle(env["centroids"])
        assert fresh.predict(adv) != env["label"]
        lines = trace_csv.read_text().splitlines()
        assert lines[0] == "query,best_fitness,best_sparsity"
        assert len(lines) == 121

    def test_pointwise_and_source_label_check(self, centroid_setup, capsys):
        env = centroid_setup
        start = env["starts"][1 if env["label"] != 1 else 0]
        code = main([
            "attack", "pointwise",
            "--source", str(env["source"]),
            "--start", str(start),
            "--source-label", str(env["label"]),
            "--oracle", env["oracle_spec"],
            "--budget", "60",
            "--np", "2",
        ])
        assert code == 0
        fields = _kv(capsys.readouterr().out)
        assert fields["success"] == "true"
        assert fields["queries"] == "60"

    def test_wrong_source_label_exits_2(self, centroid_setup, capsys):
        env = centroid_setup
        wrong = (env["label"] + 1) % 3
        code = main([
            "attack", "pointwise",
            "--source", str(env["source"]),
            "--source-label", str(wrong),
            "--oracle", env["oracle_spec"],
            "--budget", "10",
        ])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_targeted_attack(self, centroid_setup, capsys):
        env = centroid_setup
        target = (env["label"] + 1) % 3
        code = main([
            "attack", "sparse-evo",
            "--mode", "targeted",
            "--source", str(env["source"]),
            "--start", str(env["starts"][target]),
            "--target-label", str(target),
            "--oracle", env["oracle_spec"],
            "--budget", "100",
            "--init-rate", "0.05",
            "--mutation-rate", "0.1",
        ])
        assert code == 0
        assert _kv(capsys.readouterr().out)["success"] == "true"

    def test_targeted_needs_start_and_target(self, centroid_setup, capsys):
        env = centroid_setup
        code = main([
            "attack", "sparse-evo",
            "--mode", "targeted",
            "--source", str(env["source"]),
            "--oracle", env["oracle_spec"],
            "--budget", "50",
        ])
        assert code == 2
        assert "target-label" in capsys.readouterr().err

    def test_untargeted_without_start_uses_noise_init(self, tmp_path, capsys):
        source = ImageTensor(np.random.default_rng(99).integers(0, 256, (1, 6, 6)) / 255.0)
        src = tmp_path / "s.img"
        save_image(source, src)
        code = main([
            "attack", "sparse-evo",
            "--source", str(src),
            "--oracle", "toy:linear:12",
            "--classes", "5",
            "--budget", "150",
            "--seed", "0",
            "--init-rate", "0.05",
            "--mutation-rate", "0.1",
        ])
        assert code == 0
        fields = _kv(capsys.readouterr().out)
        assert fields["success"] == "true"
        assert fields["queries"] == "150"  # noise trials included

    def test_budget_too_small_for_noise_init_exits_1(self, tmp_path, capsys):
        source = ImageTensor(np.random.default_rng(99).integers(0, 256, (1, 6, 6)) / 255.0)
        src = tmp_path / "s.img"
        save_image(source, src)
        code = main([
            "attack", "sparse-evo",
            "--source", str(src),
            "--oracle", "toy:linear:0",  # needs ~63 noise trials
            "--classes", "5",
            "--budget", "5",
            "--seed", "0",
        ])
        assert code == 1
        assert "no adversarial starting image" in capsys.readouterr().err

    def test_missing_file_exits_2(self, capsys):
        code = main([
            "attack", "sparse-evo",
            "--source", "/nonexistent/source.img",
            "--oracle", "toy:linear:0",
            "--budget", "10",
        ])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestInitCommand:
    def test_salt_pepper_success(self, tmp_path, capsys):
        source = ImageTensor(np.random.default_rng(99).integers(0, 256, (1, 6, 6)) / 255.0)
        src = tmp_path / "s.img"
        save_image(source, src)
        out = tmp_path / "start.img"
        code = main([
            "init", "salt-pepper",
            "--source", str(src),
            "--oracle", "toy:linear:12",
            "--classes", "5",
            "--seed", "0",
            "--out", str(out),
        ])
        assert code == 0
        fields = _kv(capsys.readouterr().out)
        assert fields["density"] == "0.01"
        assert fields["queries"] == "1"
        assert fields["setup_queries"] == "1"
        assert out.exists()
        load_image(out)  # the written container parses back

    def test_budget_exhaustion_exits_1(self, tmp_path, capsys):
        source = ImageTensor(np.random.default_rng(99).integers(0, 256, (1, 6, 6)) / 255.0)
        src = tmp_path / "s.img"
        save_image(source, src)
        code = main([
            "init", "salt-pepper",
            "--source", str(src),
            "--oracle", "toy:linear:0",
            "--classes", "5",
            "--seed", "0",
            "--budget", "3",
        ])
        assert code == 1
        assert "initialization failed" in capsys.readouterr().err


class TestProjectCommand:
    def test_l0_shrinks_support(self, centroid_setup, capsys, tmp_path):
        env = centroid_setup
        adv_path = env["starts"][1 if env["label"] != 1 else 0]
        out = tmp_path / "proj.img"
        code = main([
            "project", "l0",
            "--source", str(env["source"]),
            "--adv", str(adv_path),
            "--oracle", env["oracle_spec"],
            "--out", str(out),
        ])
        assert code == 0
        fields = _kv(capsys.readouterr().out)
        k = int(fields["k"])
        assert 0 < k < 36
        assert float(fields["sparsity"]) == k / 36
        assert int(fields["queries"]) <= 7  # ceil(log2(36)) + 1
        projected = load_image(out)
        fresh = CentroidOracle(env["centroids"])
        assert fresh.predict(projected) != env["label"]

    def test_rejects_non_adversarial_input(self, centroid_setup, capsys):
        env = centroid_setup
        code = main([
            "project", "l0",
            "--source", str(env["source"]),
            "--adv", str(env["source"]),  # not adversarial at all
            "--oracle", env["oracle_spec"],
        ])
        assert code == 2
        assert "does not meet the goal" in capsys.readouterr().err


def _write_eval_inputs(env, tmp_path):
    cents = env["centroids"]
    oracle = CentroidOracle(cents)
    save_image(cents[1], tmp_path / "start.img")
    entries = []
    for i, w in enumerate((0.52, 0.56, 0.60)):
        mix = ImageTensor(np.rint((w * cents[0].data + (1 - w) * cents[1].data) * 255) / 255)
        save_image(mix, tmp_path / f"mix{i}.img")
        entries.append({
            "id": f"p{i}",
            "source_path": f"mix{i}.img",
            "source_label": oracle.predict(mix),
            "start_path": "start.img",
        })
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps(entries), encoding="utf-8")
    attacks = tmp_path / "attacks.toml"
    attacks.write_text(
        '[[attacks]]\nname = "se"\nkind = "sparse-evo"\n'
        'init_rate = 0.05\nmutation_rate = 0.1\n'
        '\n[[attacks]]\nname = "pw"\nkind = "pointwise"\n',
        encoding="utf-8",
    )
    return pairs, attacks


class TestEvalCommand:
    def test_eval_writes_all_outputs(self, centroid_setup, capsys, tmp_path):
        env = centroid_setup
        pairs, attacks = _write_eval_inputs(env, tmp_path)
        out = tmp_path / "out"
        code = main([
            "eval",
            "--pairs", str(pairs),
            "--attacks", str(attacks),
            "--budgets", "25,50",
            "--thresholds", "0.2,0.5",
            "--master-seed", "5",
            "--oracle", env["oracle_spec"],
            "--out", str(out),
        ])
        assert code == 0
        stdout = capsys.readouterr().out
        assert stdout.splitlines()[0] == (
            "attack,budget,cells,q1_sparsity,median_sparsity,q3_sparsity,"
            "asr@0.2,asr@0.5"
        )
        records = (out / "records.csv").read_text().splitlines()
        assert len(records) == 1 + 12  # header + 2 attacks x 3 pairs x 2 budgets
        assert (out / "timings.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert {g["attack"] for g in summary["groups"]} == {"se", "pw"}
        assert summary["failed"] == []
        assert (out / "se" / "p0" / "25" / "trace.csv").exists()
        assert (out / "pw" / "p2" / "50" / "trace.csv").exists()

    def test_eval_is_byte_deterministic(self, centroid_setup, capsys, tmp_path):
        env = centroid_setup
        pairs, attacks = _write_eval_inputs(env, tmp_path)
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = main([
                "eval",
                "--pairs", str(pairs),
                "--attacks", str(attacks),
                "--budgets", "30",
                "--master-seed", "9",
                "--oracle", env["oracle_spec"],
                "--out", str(out),
            ])
            assert code == 0
            outputs.append((out / "records.csv").read_bytes())
        capsys.readouterr()
        assert outputs[0] == outputs[1]

    def test_report_reads_back_eval_output(self, centroid_setup, capsys, tmp_path):
        env = centroid_setup
        pairs, attacks = _write_eval_inputs(env, tmp_path)
        out = tmp_path / "out"
        main([
            "eval",
            "--pairs", str(pairs),
            "--attacks", str(attacks),
            "--budgets", "25",
            "--master-seed", "5",
            "--oracle", env["oracle_spec"],
            "--out", str(out),
        ])
        capsys.readouterr()
        assert main(["report", "--in", str(out), "--thresholds", "0.2"]) == 0
        csv_text = capsys.readouterr().out
        assert csv_text.splitlines()[0].endswith("asr@0.2")
        assert main(["report", "--in", str(out), "--format", "json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["groups"]) == 2

    def test_sweep_names_variants(self, centroid_setup, capsys, tmp_path):
        env = centroid_setup
        pairs, attacks = _write_eval_inputs(env, tmp_path)
        out = tmp_path / "sweep"
        code = main([
            "sweep",
            "--pairs", str(pairs),
            "--attacks", str(attacks),
            "--attack", "se",
            "--axis", "mutation_rate",
            "--values", "0.05,0.2",
            "--budgets", "25",
            "--master-seed", "5",
            "--oracle", env["oracle_spec"],
            "--out", str(out),
        ])
        assert code == 0
        capsys.readouterr()
        text = (out / "records.csv").read_text()
        assert "se@mutation_rate=0.05" in text
        assert "se@mutation_rate=0.2" in text

    def test_sweep_unknown_attack_exits_2(self, centroid_setup, capsys, tmp_path):
        env = centroid_setup
        pairs, attacks = _write_eval_inputs(env, tmp_path)
        code = main([
            "sweep",
            "--pairs", str(pairs),
            "--attacks", str(attacks),
            "--attack", "nope",
            "--axis", "mutation_rate",
            "--values", "0.1",
            "--budgets", "25",
            "--oracle", env["oracle_spec"],
            "--out", str(tmp_path / "x"),
        ])
        assert code == 2
        assert "not found" in capsys.readouterr().err


def test_console_entry_points_exist():
    result = subprocess.run(
        [sys.executable, "-m", "sparseevo", "--help"],
        capture_output=True, text=True, timeout=60,
    )
    assert result.returncode == 0
    for name in ("attack", "eval", "sweep", "report", "toy-server"):
        assert name in result.stdout
    script = subprocess.run(
        ["sparseevo", "--help"], capture_output=True, text=True, timeout=60
    )
    assert script.returncode == 0

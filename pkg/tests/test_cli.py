"""Command-line behavior: determinism, exit codes, output contracts."""

import json

import numpy as np
import pytest

from tokenvit import fileio
from tokenvit.cli import main
from tokenvit.kernels import Rng

TOY_CONFIG = {
    "model": {"depth": 4, "dim": 16, "heads": 2, "mlp_ratio": 2.0, "patch": 8,
              "resolution": 32, "num_classes": 10},
    "locations": [2, 3],
    "keep_rate": 0.7,
    "strategy": "topk",
    "fusion": True,
    "seed": 11,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TOY_CONFIG))
    return str(path)


@pytest.fixture
def vanilla_config_path(tmp_path):
    doc = {k: v for k, v in TOY_CONFIG.items() if k not in ("locations", "keep_rate")}
    path = tmp_path / "vanilla.json"
    path.write_text(json.dumps(doc))
    return str(path)


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestForward:
    def test_prints_five_ranked_classes(self, capsys, config_path):
        code, out, _ = run_cli(capsys, "forward", "--config", config_path,
                               "--random-input")
        assert code == 0
        lines = [l for l in out.splitlines() if l.startswith(("1.", "2.", "3.", "4.", "5."))]
        assert len(lines) == 5
        assert all("class" in l and "logit" in l for l in lines)

    def test_deterministic_given_seed(self, capsys, config_path):
        _, out1, _ = run_cli(capsys, "forward", "--config", config_path,
                             "--random-input")
        _, out2, _ = run_cli(capsys, "forward", "--config", config_path,
                             "--random-input")
        assert out1 == out2

    def test_keep_rate_one_matches_vanilla(self, capsys, config_path,
                                           vanilla_config_path):
        _, rate_one, _ = run_cli(capsys, "forward", "--config", config_path,
                                 "--random-input", "--keep-rate", "1.0")
        _, vanilla, _ = run_cli(capsys, "forward", "--config", vanilla_config_path,
                                "--random-input")
        assert rate_one == vanilla

    def test_conflicting_inputs_usage_error(self, capsys, config_path, tmp_path):
        img = tmp_path / "x.ppm"
        fileio.write_ppm(np.zeros((32, 32, 3)), img)
        code, _, err = run_cli(capsys, "forward", "--config", config_path,
                               "--image", str(img), "--random-input")
        assert code == 2
        assert "usage error" in err

    def test_missing_input_usage_error(self, capsys, config_path):
        code, _, _ = run_cli(capsys, "forward", "--config", config_path)
        assert code == 2

    def test_emit_trace(self, capsys, config_path, tmp_path):
        trace = tmp_path / "trace.json"
        code, _, _ = run_cli(capsys, "forward", "--config", config_path,
                             "--random-input", "--emit-trace", str(trace))
        assert code == 0
        doc = json.loads(trace.read_text())
        assert len(doc["layers"]) == 4
        assert {e["layer"] for e in doc["events"]} == {2, 3}

    def test_cross_process_byte_identical(self, config_path):
        import subprocess
        import sys
        cmd = [sys.executable, "-m", "tokenvit", "forward", "--config",
               config_path, "--random-input"]
        first = subprocess.run(cmd, capture_output=True, check=True)
        second = subprocess.run(cmd, capture_output=True, check=True)
        assert first.stdout == second.stdout

    def test_weights_file_used(self, capsys, config_path, tmp_path):
        from tokenvit import model
        from tokenvit.model import ModelConfig
        config = ModelConfig(**TOY_CONFIG["model"])
        w = model.init_random(config, Rng(99))
        wpath = tmp_path / "w.evwt"
        fileio.save_weights(w, wpath)
        code, out, _ = run_cli(capsys, "forward", "--config", config_path,
                               "--weights", str(wpath), "--random-input")
        assert code == 0
        _, out_seeded, _ = run_cli(capsys, "forward", "--config", config_path,
                                   "--random-input")
        assert out != out_seeded  # different weights, different logits


class TestMacs:
    def test_deit_s_published_point(self, capsys):
        code, out, _ = run_cli(capsys, "macs", "--arch", "deit-s", "--resolution",
                               "224", "--keep-rate", "0.7", "--locations", "4,7,10")
        assert code == 0
        first = out.splitlines()[0]
        value = float(first.split(" G")[0])
        assert abs(value - 3.0) <= 0.15
        reduction = float(first.split("(")[1].split("%")[0])
        assert abs(-reduction - 35.0) <= 2.0

    def test_keep_rate_one_prints_baseline(self, capsys):
        code, out, _ = run_cli(capsys, "macs", "--arch", "deit-s",
                               "--keep-rate", "1.0")
        assert code == 0
        assert out.splitlines()[0] == "4.6 G"

    def test_invalid_arch_exit_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["macs", "--arch", "deit-xl"])
        assert exc.value.code == 2

    def test_config_plan_locations_used(self, capsys, config_path):
        # run config pins locations [2, 3]; the fallback for depth 4 would be
        # [2, 3, 4] and would shrink the final stage too
        code, out, _ = run_cli(capsys, "macs", "--config", config_path,
                               "--keep-rate", "0.5")
        assert code == 0
        counts = out.splitlines()[2].split(":")[1].strip().split(",")
        assert len(counts) == 4  # toy config depth
        assert counts[0] != counts[1]   # reorganized at layer 2
        assert counts[2] == counts[3]   # but not at layer 4

    def test_resolution_override_with_config(self, capsys, config_path):
        code, out, _ = run_cli(capsys, "macs", "--config", config_path,
                               "--resolution", "64", "--keep-rate", "1.0")
        assert code == 0
        _, out_base, _ = run_cli(capsys, "macs", "--config", config_path,
                                 "--keep-rate", "1.0")
        total = int(out.splitlines()[1].split(":")[1])
        total_base = int(out_base.splitlines()[1].split(":")[1])
        assert total > total_base  # 64 px vs 32 px


class TestSweep:
    def test_csv_rows_monotone(self, capsys, tmp_path):
        csv_path = tmp_path / "sweep.csv"
        code, _, _ = run_cli(capsys, "sweep", "--arch", "deit-s", "--keep-rates",
                             "0.5,0.6,0.7,0.8,0.9", "--csv", str(csv_path))
        assert code == 0
        rows = fileio.parse_cost_csv(csv_path)
        assert len(rows) == 5
        totals = [r["total_gmacs"] for r in rows]
        assert totals == sorted(totals)

    def test_threads_equivalent(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run_cli(capsys, "sweep", "--arch", "deit-s", "--keep-rates", "0.5,0.7",
                "--resolutions", "224,256", "--csv", str(a), "--threads", "1")
        run_cli(capsys, "sweep", "--arch", "deit-s", "--keep-rates", "0.5,0.7",
                "--resolutions", "224,256", "--csv", str(b), "--threads", "4")
        assert a.read_bytes() == b.read_bytes()


class TestBench:
    def test_repeats_below_three_usage_error(self, capsys, config_path):
        code, _, err = run_cli(capsys, "bench", "--config", config_path,
                               "--repeats", "2")
        assert code == 2
        assert "usage error" in err

    def test_twenty_repeats_emit_twenty_samples(self, capsys, config_path):
        code, out, _ = run_cli(capsys, "bench", "--config", config_path,
                               "--repeats", "20", "--warmup-iters", "1")
        assert code == 0
        doc = json.loads(out)
        assert len(doc["baseline"]["samples_s"]) == 20
        assert len(doc["reorganized"]["samples_s"]) == 20
        assert doc["speedup"] > 0
        assert {"mean_s", "stddev_s"} <= set(doc["baseline"])

    def test_evit_threads_env_sets_default(self, monkeypatch):
        from tokenvit.cli import build_parser
        monkeypatch.setenv("EVIT_THREADS", "7")
        args = build_parser().parse_args(["sweep", "--arch", "deit-s"])
        assert args.threads == 7

    def test_keep_rate_one_ratio_near_unity(self, capsys, tmp_path):
        # per-forward time must dwarf timer noise for the ratio to mean anything
        path = tmp_path / "bench.json"
        path.write_text(json.dumps({
            "model": {"depth": 6, "dim": 96, "heads": 6, "mlp_ratio": 4.0,
                      "patch": 16, "resolution": 160, "num_classes": 10},
            "locations": [2, 4], "keep_rate": 1.0, "seed": 3}))
        code, out, _ = run_cli(capsys, "bench", "--config", str(path),
                               "--repeats", "5")
        assert code == 0
        doc = json.loads(out)
        assert 0.7 < doc["speedup"] < 1.3  # same work both sides, noise only


class TestMask:
    def test_overlay_written(self, capsys, config_path, tmp_path):
        img = tmp_path / "in.ppm"
        fileio.write_ppm(Rng(3).uniform(32 * 32 * 3).reshape(32, 32, 3), img)
        out_path = tmp_path / "overlay.ppm"
        code, _, _ = run_cli(capsys, "mask", "--config", config_path, "--image",
                             str(img), "--layer", "2", "--out", str(out_path))
        assert code == 0
        original = fileio.read_ppm(img)
        overlay = fileio.read_ppm(out_path)
        changed = (np.abs(original - overlay).sum(axis=2) > 0)
        assert changed.any() and not changed.all()
        # darkened pixels form whole 8x8 patches
        assert int(changed.sum()) % 64 == 0

    def test_non_reorg_layer_usage_error(self, capsys, config_path, tmp_path):
        img = tmp_path / "in.ppm"
        fileio.write_ppm(np.zeros((32, 32, 3)), img)
        code, _, _ = run_cli(capsys, "mask", "--config", config_path, "--image",
                             str(img), "--layer", "1", "--out",
                             str(tmp_path / "o.ppm"))
        assert code == 2


class TestPlan:
    def test_locations_printed(self, capsys):
        code, out, _ = run_cli(capsys, "plan", "--depth", "12", "--reorg-layers", "3")
        assert code == 0
        assert "locations: 4,7,10" in out

    def test_schedule_midpoint(self, capsys):
        code, out, _ = run_cli(capsys, "plan", "--depth", "12", "--reorg-layers", "3",
                               "--keep-rate", "0.7", "--warmup-steps", "100",
                               "--step", "50")
        assert code == 0
        assert "0.85" in out

    def test_indivisible_depth_failure(self, capsys):
        code, _, err = run_cli(capsys, "plan", "--depth", "12", "--reorg-layers", "4")
        assert code == 1
        assert "error" in err


class TestAblate:
    def test_drop_rate_zero_matches_plain_forward(self, capsys, vanilla_config_path):
        _, plain, _ = run_cli(capsys, "forward", "--config", vanilla_config_path,
                              "--random-input")
        _, ablated, _ = run_cli(capsys, "ablate", "--config", vanilla_config_path,
                                "--random-input", "--drop-rate", "0.0")
        plain_lines = [l for l in plain.splitlines() if l[:2] == "1."]
        ablated_lines = [l for l in ablated.splitlines() if l[:2] == "1."]
        assert plain_lines == ablated_lines

    def test_drop_all_but_cls(self, capsys, vanilla_config_path):
        code, out, _ = run_cli(capsys, "ablate", "--config", vanilla_config_path,
                               "--random-input", "--drop-indices",
                               ",".join(str(i) for i in range(1, 17)))
        assert code == 0
        assert "tokens after input ablation: 1" in out

    def test_random_drop_reproducible(self, capsys, vanilla_config_path):
        args = ("ablate", "--config", vanilla_config_path, "--random-input",
                "--drop-rate", "0.5", "--by", "random")
        _, out1, _ = run_cli(capsys, *args)
        _, out2, _ = run_cli(capsys, *args)
        assert out1 == out2

    def test_attentiveness_guided_drop(self, capsys, vanilla_config_path):
        code, out, _ = run_cli(capsys, "ablate", "--config", vanilla_config_path,
                               "--random-input", "--drop-rate", "0.3", "--by",
                               "attentiveness")
        assert code == 0
        assert "tokens after input ablation: 17" in out  # dropped in-network instead

    def test_invalid_indices_failure(self, capsys, vanilla_config_path):
        code, _, _ = run_cli(capsys, "ablate", "--config", vanilla_config_path,
                             "--random-input", "--drop-indices", "0")
        assert code == 2


class TestVerifyCommand:
    def test_single_suite_green(self, capsys):
        code, out, _ = run_cli(capsys, "verify", "--suite", "reorg", "--trials", "10")
        assert code == 0
        assert "0 failed" in out

    def test_unknown_suite_exit_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["verify", "--suite", "nope"])
        assert exc.value.code == 2

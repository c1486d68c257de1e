import json

import numpy as np
import pytest

from magrev.cli import main
from magrev.detector import DetectionMap, TrainingSample, build_label_mask, save_training_set
from magrev.ppsp import PpspWeights
from magrev.sensor_io import load_trace_csv, save_trace_csv
from magrev.signals import SensorTrace


@pytest.fixture
def sensing_config(tmp_path):
    doc = {
        "motor": {
            "period_s": 0.02,  # 3000 RPM
            "harmonics": [[1, 1.0, 0.0], [2, 0.5, 0.7], [3, 0.25, 1.9]],
        },
        "geometry": {
            "sensor_positions_cm": [
                [-12.0, 30.0], [-4.0, 30.0], [4.0, 30.0], [12.0, 30.0]
            ],
        },
        "noise": {
            "mains_components": [[60.0, 0.0005]],
            "broadband_sigma": 0.0005,
            "shared_fraction": 0.0,
        },
    }
    path = tmp_path / "sensing.json"
    path.write_text(json.dumps(doc))
    return path


def simulate(tmp_path, sensing_config, name="sim", extra=()):
    out = tmp_path / name
    code = main([
        "simulate", "--config", str(sensing_config), "--seed", "7",
        "--duration", "1.0", "--out", str(out), *extra,
    ])
    assert code == 0
    return out


class TestSimulate:
    def test_writes_capture_files(self, tmp_path, sensing_config):
        out = simulate(tmp_path, sensing_config)
        assert (out / "trace.wav").exists()
        assert (out / "trace.csv").exists()
        meta = json.loads((out / "meta.json").read_text())
        assert meta["command"] == "simulate"
        assert meta["n_channels"] == 4
        trace = load_trace_csv(out / "trace.csv")
        assert trace.n_channels == 4
        assert trace.sample_rate_hz == 8192.0

    def test_byte_identical_reruns(self, tmp_path, sensing_config):
        a = simulate(tmp_path, sensing_config, "a")
        b = simulate(tmp_path, sensing_config, "b")
        for name in ("trace.wav", "trace.csv", "meta.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_seed_is_required(self, tmp_path, sensing_config):
        code = main([
            "simulate", "--config", str(sensing_config),
            "--out", str(tmp_path / "x"),
        ])
        assert code == 2

    def test_config_is_required(self, tmp_path):
        assert main(["simulate", "--seed", "1", "--out", str(tmp_path / "x")]) == 2

    def test_missing_config_file_is_io_error(self, tmp_path):
        code = main([
            "simulate", "--config", str(tmp_path / "absent.json"),
            "--seed", "1", "--out", str(tmp_path / "x"),
        ])
        assert code == 3

    def test_bad_section_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"motor": {"period_s": -5.0, "harmonics": []}}))
        code = main([
            "simulate", "--config", str(path), "--seed", "1",
            "--out", str(tmp_path / "x"),
        ])
        assert code == 2

    def test_set_overrides_nested_config(self, tmp_path, sensing_config):
        out = tmp_path / "quiet"
        code = main([
            "simulate", "--config", str(sensing_config), "--seed", "7",
            "--duration", "1.0", "--out", str(out),
            "--set", "noise.broadband_sigma=0.0",
            "--set", "noise.mains_components=[]",
        ])
        assert code == 0
        meta = json.loads((out / "meta.json").read_text())
        assert meta["config"]["noise"]["broadband_sigma"] == 0.0


class TestEstimate:
    def test_estimates_simulated_capture(self, tmp_path, sensing_config, capsys):
        sim = simulate(tmp_path, sensing_config)
        out = tmp_path / "est"
        code = main([
            "estimate", "--trace", str(sim / "trace.csv"), "--out", str(out),
        ])
        assert code == 0
        doc = json.loads((out / "estimate.json").read_text())
        assert len(doc["estimates"]) == 1
        assert abs(doc["estimates"][0]["rpm"] - 3000.0) <= 1.2
        csv_lines = (out / "estimate.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "rpm,fine_hz,coarse_hz,confidence,flags"
        assert len(csv_lines) == 2
        assert "RPM" in capsys.readouterr().out

    def test_wav_input_gives_same_speed(self, tmp_path, sensing_config):
        sim = simulate(tmp_path, sensing_config)
        out = tmp_path / "est_wav"
        code = main([
            "estimate", "--trace", str(sim / "trace.wav"), "--out", str(out),
        ])
        assert code == 0
        doc = json.loads((out / "estimate.json").read_text())
        assert abs(doc["estimates"][0]["rpm"] - 3000.0) <= 1.2

    def test_multi_on_single_motor_reports_shortfall(self, tmp_path, sensing_config):
        # noiseless capture: the mains line would otherwise stand in as a
        # legitimate second periodic source
        sim = simulate(
            tmp_path, sensing_config, extra=(
                "--set", "noise.broadband_sigma=0.0",
                "--set", "noise.mains_components=[]",
            ),
        )
        out = tmp_path / "multi"
        code = main([
            "estimate", "--trace", str(sim / "trace.csv"), "--multi", "2",
            "--out", str(out),
        ])
        assert code == 0
        doc = json.loads((out / "estimate.json").read_text())
        assert len(doc["estimates"]) == 1
        assert "harmonic_shortfall" in doc["estimates"][0]["flags"]

    def test_weights_flag_selects_network_detector(self, tmp_path, sensing_config):
        samples = make_sample_dir(tmp_path)
        net = tmp_path / "net"
        assert main([
            "train", "--samples", str(samples), "--seed", "5",
            "--out", str(net), "--set", "epochs=1", *TINY_NET_SETS,
        ]) == 0
        sim = simulate(tmp_path, sensing_config)
        # 64-bin weights against the default 1024-bin band: only the network
        # detector can notice the mismatch; the threshold detector would have
        # silently succeeded
        code = main([
            "estimate", "--trace", str(sim / "trace.wav"),
            "--weights", str(net / "weights.ppsp"),
            "--out", str(tmp_path / "est_net"),
        ])
        assert code == 2
        # with matching bins the network runs, and meta records the switch
        out = tmp_path / "det_net"
        code = main([
            "detect", "--trace", str(sim / "trace.wav"),
            "--weights", str(net / "weights.ppsp"),
            "--set", "input_bins=64", "--out", str(out),
        ])
        assert code == 0
        meta = json.loads((out / "meta.json").read_text())
        assert meta["pipeline"]["detector"] == "network"

    def test_unknown_pipeline_key_is_config_error(self, tmp_path, sensing_config):
        sim = simulate(tmp_path, sensing_config)
        code = main([
            "estimate", "--trace", str(sim / "trace.csv"),
            "--out", str(tmp_path / "x"), "--set", "bogus_knob=1",
        ])
        assert code == 2

    def test_missing_trace_is_io_error(self, tmp_path):
        code = main([
            "estimate", "--trace", str(tmp_path / "absent.csv"),
            "--out", str(tmp_path / "x"),
        ])
        assert code == 3

    def test_flat_trace_is_pipeline_error(self, tmp_path):
        flat = SensorTrace(channels=np.zeros((4, 8192)), sample_rate_hz=8192.0)
        path = tmp_path / "flat.csv"
        save_trace_csv(flat, path)
        code = main([
            "estimate", "--trace", str(path), "--out", str(tmp_path / "x"),
        ])
        assert code == 4

    def test_set_adjusts_pipeline(self, tmp_path, sensing_config):
        sim = simulate(tmp_path, sensing_config)
        out = tmp_path / "coarse_only"
        code = main([
            "estimate", "--trace", str(sim / "trace.csv"), "--out", str(out),
            "--set", "gamma=1",
        ])
        assert code == 0
        doc = json.loads((out / "estimate.json").read_text())
        assert doc["pipeline"]["gamma"] == 1
        est = doc["estimates"][0]
        assert est["fine_hz"] == est["coarse_hz"]


class TestDenoiseAndDetect:
    def test_denoise_writes_spectrum(self, tmp_path, sensing_config):
        sim = simulate(tmp_path, sensing_config)
        out = tmp_path / "den"
        code = main([
            "denoise", "--trace", str(sim / "trace.csv"), "--out", str(out),
        ])
        assert code == 0
        enhanced = load_trace_csv(out / "enhanced.csv")
        assert enhanced.n_channels == 1
        spectrum_lines = (out / "spectrum.csv").read_text().strip().splitlines()
        assert len(spectrum_lines) > 100

    def test_detect_writes_loadable_map(self, tmp_path, sensing_config):
        sim = simulate(tmp_path, sensing_config)
        out = tmp_path / "det"
        code = main([
            "detect", "--trace", str(sim / "trace.csv"), "--out", str(out),
        ])
        assert code == 0
        dmap = DetectionMap.load_csv(out / "detection.csv")
        detected = dmap.detected_frequencies()
        # the 50 Hz fundamental (or a neighborhood bin) must be flagged
        assert np.any(np.abs(detected - 50.0) <= 1.0)


def make_sample_dir(tmp_path, n_bins=64):
    rng = np.random.default_rng(3)
    freqs = np.arange(float(n_bins))
    samples = []
    for f0 in (9.0, 13.0):
        mask = build_label_mask(f0, freqs, delta_f=0.25)
        features = 0.05 * rng.uniform(size=n_bins)
        features[np.flatnonzero(mask)] = 1.0
        samples.append(
            TrainingSample(
                features=features, mask=mask, bin_frequencies=freqs,
                fundamental_hz=f0,
            )
        )
    directory = tmp_path / "samples"
    save_training_set(samples, directory)
    return directory


TINY_NET_SETS = [
    "--set", "network.input_bins=64",
    "--set", "network.encoder_levels=2",
    "--set", "network.filters_per_conv=4",
    "--set", "network.multiscale_kernel_widths=[3,7]",
    "--set", "network.pyramid_pool_kernels=[1,2,4]",
]


class TestTrain:
    def test_tiny_training_run(self, tmp_path):
        samples = make_sample_dir(tmp_path)
        out = tmp_path / "run"
        code = main([
            "train", "--samples", str(samples), "--seed", "5",
            "--out", str(out), "--set", "epochs=3", *TINY_NET_SETS,
        ])
        assert code == 0
        weights = PpspWeights.load(out / "weights.ppsp")
        assert weights.config.input_bins == 64
        history = (out / "history.csv").read_text().strip().splitlines()
        assert history[0] == "epoch,loss"
        assert len(history) == 4

    def test_reruns_are_byte_identical(self, tmp_path):
        samples = make_sample_dir(tmp_path)
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = main([
                "train", "--samples", str(samples), "--seed", "5",
                "--out", str(out), "--set", "epochs=2", *TINY_NET_SETS,
            ])
            assert code == 0
            outs.append(out)
        for name in ("weights.ppsp", "history.csv", "meta.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name

    def test_unknown_key_is_config_error(self, tmp_path):
        samples = make_sample_dir(tmp_path)
        code = main([
            "train", "--samples", str(samples), "--seed", "5",
            "--out", str(tmp_path / "x"), "--set", "optimizer=sgd",
        ])
        assert code == 2

    def test_missing_samples_dir_is_io_error(self, tmp_path):
        code = main([
            "train", "--samples", str(tmp_path / "absent"), "--seed", "5",
            "--out", str(tmp_path / "x"),
        ])
        assert code == 3

    def test_seed_is_required(self, tmp_path):
        samples = make_sample_dir(tmp_path)
        code = main([
            "train", "--samples", str(samples), "--out", str(tmp_path / "x"),
        ])
        assert code == 2

    def test_inconsistent_synthesis_band_is_config_error(self, tmp_path, capsys):
        # default speed range puts fundamentals far above a 64-bin band
        code = main([
            "train", "--seed", "0", "--out", str(tmp_path / "x"),
            "--set", "count=4", *TINY_NET_SETS,
        ])
        assert code == 2
        assert "band" in capsys.readouterr().err


class TestSermap:
    def test_small_map(self, tmp_path, capsys):
        out = tmp_path / "map"
        code = main([
            "sermap", "--delta-t-ms", "4.0", "--out", str(out),
            "--set", "duration_s=0.25", "--set", "step_cm=4.0",
        ])
        assert code == 0
        lines = (out / "sermap.csv").read_text().strip().splitlines()
        assert lines[0].startswith("y_cm\\x_cm,")
        assert "peak" in capsys.readouterr().out

    def test_unknown_key_is_config_error(self, tmp_path):
        code = main([
            "sermap", "--delta-t-ms", "4.0", "--out", str(tmp_path / "x"),
            "--set", "grid=fine",
        ])
        assert code == 2


class TestBench:
    def test_tiny_benchmark_is_deterministic(self, tmp_path):
        cfg = tmp_path / "scenario.json"
        cfg.write_text(json.dumps({
            "duration_s": 1.0,
            "distances_cm": [5.0, 45.0],
            "speeds_rpm": [3000.0],
            "trials_per_cell": 1,
        }))
        outs = []
        for name in ("b1", "b2"):
            out = tmp_path / name
            code = main([
                "bench", "--config", str(cfg), "--seed", "11",
                "--out", str(out),
            ])
            assert code == 0
            outs.append(out)
        for name in ("trials.csv", "aggregate.csv", "summary.json", "meta.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name

    def test_unknown_scenario_key_is_config_error(self, tmp_path):
        cfg = tmp_path / "scenario.json"
        cfg.write_text(json.dumps({"warp_factor": 9}))
        code = main([
            "bench", "--config", str(cfg), "--seed", "11",
            "--out", str(tmp_path / "x"),
        ])
        assert code == 2

import numpy as np
import pytest

from fedsim.algorithms import ClientState, HyperParams, ServerState
from fedsim.engine import (
    ConfigError,
    ExperimentConfig,
    World,
    init_world,
    load_model_vector,
    run_experiment,
    run_round,
    sample_active_clients,
    save_model_vector,
    write_metrics_csv,
    METRICS_HEADER,
)
from fedsim.numerics import ParamVector, QuadraticFed
from fedsim.partition import quadratic_optimum


def quad_config(**overrides):
    base = {
        "algorithm": "fedsmoo",
        "task": "quadratic",
        "quad_dim": 4,
        "m": 4,
        "n": 4,
        "K": 5,
        "T": 20,
        "eta": 0.05,
        "eta_decay": 1.0,
        "beta": 1.0,
        "r": 1e-4,
        "eval_cadence": 1,
        "master_seed": 5,
    }
    base.update(overrides)
    return ExperimentConfig.from_mapping(base)


def synth_config(**overrides):
    base = {
        "algorithm": "fedavg",
        "task": "synth",
        "model": "logistic",
        "num_classes": 4,
        "input_dim": 6,
        "train_size": 400,
        "test_size": 100,
        "class_separation": 3.0,
        "noise": 0.8,
        "partition": "dirichlet",
        "dirichlet_u": 0.5,
        "with_replacement": True,
        "m": 5,
        "n": 2,
        "K": 3,
        "batch_size": 20,
        "T": 12,
        "eta": 0.2,
        "eta_decay": 0.998,
        "eval_cadence": 3,
        "master_seed": 2,
    }
    base.update(overrides)
    return ExperimentConfig.from_mapping(base)


class TestSampling:
    def test_full_participation(self):
        assert sample_active_clients(7, 7, 0, 1) == list(range(7))

    def test_deterministic(self):
        a = sample_active_clients(30, 6, 12, 99)
        b = sample_active_clients(30, 6, 12, 99)
        assert a == b
        assert a == sorted(a)

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError):
            sample_active_clients(5, 6, 0, 0)

    def test_long_run_frequencies(self):
        counts = np.zeros(100)
        for t in range(10000):
            for cid in sample_active_clients(100, 10, t, 7):
                counts[cid] += 1
        freqs = counts / 10000
        assert np.all(freqs >= 0.09)
        assert np.all(freqs <= 0.11)


class TestRunRound:
    def test_golden_composition(self):
        # two quadratic clients with centers 1 and 3 reproduce the
        # hand-derived aggregate w = 0.42 in a single round
        cfg = quad_config(m=2, n=2, quad_dim=1, K=1, eta=0.1, beta=1.0, r=0.1, T=1)
        world = init_world(cfg)
        world.models = [QuadraticFed(np.array([1.0])), QuadraticFed(np.array([3.0]))]
        metrics = run_round(world, 0)
        assert world.server.w.values[0] == pytest.approx(0.42, abs=1e-15)
        assert metrics.round == 0
        assert metrics.upload_vectors_cum == 4
        assert metrics.download_vectors_cum == 4

    def test_grad_norm_two_ways(self):
        cfg = quad_config(T=3)
        world = init_world(cfg)
        c_bar = quadratic_optimum(world.models)
        for t in range(3):
            metrics = run_round(world, t)
            w_bar = np.mean([r.w_i.values for r in world.last_returns], axis=0)
            analytic = float(np.sum((w_bar - c_bar) ** 2))
            assert metrics.grad_norm_sq == pytest.approx(analytic, abs=1e-12)

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigError):
            quad_config(K=0)


class TestRunExperiment:
    def test_t_zero_empty_series(self):
        summary, rows, world = run_experiment(quad_config(T=0))
        assert rows == []
        assert summary.rounds_completed == 0
        assert np.all(world.server.w.values == 0.0)

    def test_deterministic_csv(self, tmp_path):
        cfg = synth_config()
        run_experiment(cfg, out_dir=tmp_path / "a")
        run_experiment(cfg, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b
        assert a.decode().splitlines()[0] == METRICS_HEADER

    def test_inactive_clients_untouched(self):
        cfg = synth_config(m=6, n=2, T=1)
        world = init_world(cfg)
        before = {
            i: (
                world.clients[i].lambda_i.values.copy(),
                world.clients[i].perturb.mu.values.copy(),
                world.clients[i].control_variate.values.copy(),
            )
            for i in range(6)
        }
        run_round(world, 0)
        active = set(sample_active_clients(6, 2, 0, cfg.master_seed))
        for i in range(6):
            if i in active:
                continue
            st = world.clients[i]
            assert np.array_equal(st.lambda_i.values, before[i][0])
            assert np.array_equal(st.perturb.mu.values, before[i][1])
            assert np.array_equal(st.control_variate.values, before[i][2])
            assert st.last_seen_round == -1

    def test_divergence_emits_status_row(self, tmp_path):
        # eta far beyond 2/curvature doubles the residual every local step
        cfg = quad_config(algorithm="fedavg", eta=3.0, K=100, T=8)
        summary, rows, _ = run_experiment(cfg, out_dir=tmp_path)
        assert summary.status == "diverged"
        text = (tmp_path / "metrics.csv").read_text().splitlines()
        assert text[-1].endswith("diverged")

    def test_artifacts_written(self, tmp_path):
        cfg = synth_config(T=4)
        summary, _, world = run_experiment(cfg, out_dir=tmp_path)
        for name in ("metrics.csv", "summary.json", "model.fspv", "clients.npz", "config.effective"):
            assert (tmp_path / name).exists()
        back = load_model_vector(tmp_path / "model.fspv")
        assert np.array_equal(back.values, world.server.w.values)
        assert back.layer_shapes == world.server.w.layer_shapes


class TestModelVectorIO:
    def test_roundtrip_with_shapes(self, tmp_path):
        pv = ParamVector(np.arange(10.0), ((2, 3), (4, 1)))
        path = tmp_path / "m.fspv"
        save_model_vector(path, pv)
        back = load_model_vector(path)
        assert np.array_equal(back.values, pv.values)
        assert back.layer_shapes == ((2, 3), (4, 1))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fspv"
        path.write_bytes(b"WHAT" + b"\x00" * 24)
        with pytest.raises(ValueError):
            load_model_vector(path)


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_mapping({"algorithm": "fedavg", "typo_key": 3})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_mapping({"T": "many"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_mapping({"algorithm": "sgd"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_mapping({"m": 2, "n": 5})

    def test_file_roundtrip(self, tmp_path):
        cfg = synth_config(T=7, eta=0.125)
        path = tmp_path / "config.effective"
        cfg.to_file(path)
        back = ExperimentConfig.from_file(path)
        assert back == cfg

    def test_file_parse_and_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nalgorithm = feddyn\nT = 3\nm = 4\nn = 4\n")
        cfg = ExperimentConfig.from_file(path, overrides=["T=5", "beta=2.5"])
        assert cfg.algorithm == "feddyn"
        assert cfg.T == 5
        assert cfg.beta == 2.5

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file("/nonexistent/path.cfg")

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("algorithm fedavg\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(path)

"""Experiment orchestration: deterministic client sampling, the round loop,
metric collection and artifact IO.

Every run is a pure function of its ExperimentConfig (including the master
seed): client sampling, batch order and model init all draw from seed
streams derived as (master_seed, round, client_id, salt), so re-running a
config reproduces the metrics byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .algorithms import (
    ALGORITHMS,
    COMM_VECTORS,
    Broadcast,
    ClientState,
    DivergenceError,
    HyperParams,
    ServerState,
    local_round,
    server_round,
)
from .diagnostics import consistency
from .numerics import Batch, LogisticRegression, MLP, ParamVector, grad, loss
from .partition import (
    LabeledDataset,
    dirichlet_partition,
    load_dataset,
    pathological_partition,
    synth_quadratic_federation,
    synth_classification,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RoundMetrics",
    "ExperimentSummary",
    "World",
    "sample_active_clients",
    "init_world",
    "run_round",
    "run_experiment",
    "write_metrics_csv",
    "METRICS_HEADER",
    "save_model_vector",
    "load_model_vector",
]

# Seed-stream salts; never reuse one for two purposes.
_SALT_DATA = 101
_SALT_PART = 102
_SALT_INIT = 103
_SALT_SAMPLE = 104
_SALT_BATCH = 105

_MODEL_MAGIC = b"FSPV"
_MODEL_VERSION = 1

METRICS_HEADER = (
    "round,eta,train_loss,grad_norm_sq,test_acc,consistency,"
    "upload_vectors_cum,download_vectors_cum,status"
)


class ConfigError(ValueError):
    """Bad configuration file, key, or value."""


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (coercer, default). The flat key=value config format admits exactly
# these keys; anything else is a hard error so hyperparameter typos cannot
# pass silently.
CONFIG_SCHEMA = {
    "algorithm": (str, "fedavg"),
    "task": (str, "synth"),
    "dataset_path": (str, ""),
    "test_path": (str, ""),
    "model": (str, "logistic"),
    "hidden_sizes": (str, "32"),
    "num_classes": (int, 10),
    "input_dim": (int, 20),
    "train_size": (int, 2000),
    "test_size": (int, 500),
    "class_separation": (float, 3.0),
    "noise": (float, 1.0),
    "quad_dim": (int, 10),
    "center_spread": (float, 1.0),
    "partition": (str, "dirichlet"),
    "dirichlet_u": (float, 0.1),
    "pathological_c": (int, 3),
    "with_replacement": (_parse_bool, True),
    "m": (int, 10),
    "n": (int, 10),
    "eta": (float, 0.1),
    "eta_decay": (float, 0.998),
    "beta": (float, 10.0),
    "r": (float, 0.1),
    "K": (int, 5),
    "batch_size": (int, 50),
    "T": (int, 10),
    "server_lr": (float, 0.1),
    "alpha_cm": (float, 0.1),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.99),
    "adam_eps": (float, 1e-3),
    "disable_proximal": (_parse_bool, False),
    "master_seed": (int, 0),
    "eval_cadence": (int, 1),
    "out_dir": (str, ""),
}

_TASKS = ("synth", "quadratic", "dataset_file")
_MODELS = ("logistic", "mlp")
_PARTITIONS = ("dirichlet", "pathological")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved experiment settings."""

    algorithm: str
    task: str
    dataset_path: str
    test_path: str
    model: str
    hidden_sizes: str
    num_classes: int
    input_dim: int
    train_size: int
    test_size: int
    class_separation: float
    noise: float
    quad_dim: int
    center_spread: float
    partition: str
    dirichlet_u: float
    pathological_c: int
    with_replacement: bool
    m: int
    n: int
    eta: float
    eta_decay: float
    beta: float
    r: float
    K: int
    batch_size: int
    T: int
    server_lr: float
    alpha_cm: float
    adam_beta1: float
    adam_beta2: float
    adam_eps: float
    disable_proximal: bool
    master_seed: int
    eval_cadence: int
    out_dir: str

    @classmethod
    def from_mapping(cls, mapping) -> "ExperimentConfig":
        values = {}
        for key, raw in mapping.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            coerce, _ = CONFIG_SCHEMA[key]
            try:
                values[key] = coerce(raw) if not isinstance(raw, bool) else raw
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
        for key, (_, default) in CONFIG_SCHEMA.items():
            values.setdefault(key, default)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides=None) -> "ExperimentConfig":
        mapping = {}
        try:
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    text = line.strip()
                    if not text or text.startswith("#"):
                        continue
                    if "=" not in text:
                        raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                    key, _, value = text.partition("=")
                    mapping[key.strip()] = value.strip()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if overrides:
            mapping.update(parse_overrides(overrides))
        return cls.from_mapping(mapping)

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.task not in _TASKS:
            raise ConfigError(f"task must be one of {_TASKS}")
        if self.model not in _MODELS:
            raise ConfigError(f"model must be one of {_MODELS}")
        if self.partition not in _PARTITIONS:
            raise ConfigError(f"partition must be one of {_PARTITIONS}")
        if self.eval_cadence < 1:
            raise ConfigError("eval_cadence must be >= 1")
        try:
            self.hyper()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def hyper(self) -> HyperParams:
        return HyperParams(
            eta=self.eta,
            eta_decay=self.eta_decay,
            beta=self.beta,
            r=self.r,
            K=self.K,
            batch_size=self.batch_size,
            T=self.T,
            m=self.m,
            n=self.n,
            server_lr=self.server_lr,
            alpha_cm=self.alpha_cm,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            disable_proximal=self.disable_proximal,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        data.update(changes)
        return ExperimentConfig.from_mapping(data)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    def to_file(self, path):
        with open(path, "w") as fh:
            for key in sorted(CONFIG_SCHEMA):
                value = getattr(self, key)
                if isinstance(value, bool):
                    value = "true" if value else "false"
                fh.write(f"{key} = {value}\n")


def parse_overrides(pairs):
    """Parse repeated KEY=VALUE strings into a mapping (keys must be known)."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not KEY=VALUE")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value.strip()
    return out


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    eta: float
    train_loss: float
    grad_norm_sq: float
    test_acc: float
    consistency: float
    upload_vectors_cum: int
    download_vectors_cum: int
    status: str = "ok"

    def csv_row(self) -> str:
        return (
            f"{self.round},{self.eta!r},{self.train_loss!r},{self.grad_norm_sq!r},"
            f"{self.test_acc!r},{self.consistency!r},{self.upload_vectors_cum},"
            f"{self.download_vectors_cum},{self.status}"
        )


@dataclass
class ExperimentSummary:
    status: str
    rounds_completed: int
    final_test_acc: float | None
    best_test_acc: float | None
    final_train_loss: float | None
    min_grad_norm_sq: float | None
    final_grad_norm_sq: float | None
    final_consistency: float | None
    upload_vectors_total: int
    download_vectors_total: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


@dataclass
class World:
    """Mutable state of one experiment between rounds."""

    config: ExperimentConfig
    hyper: HyperParams
    kind: str
    server: ServerState
    clients: dict
    models: list
    client_indices: list | None
    train: LabeledDataset | None
    test: LabeledDataset | None
    upload_cum: int = 0
    download_cum: int = 0
    last_returns: list = field(default_factory=list)

    @property
    def shared_model(self):
        return self.models[0]


_DUMMY_FEATURES = np.zeros((1, 1))
_DUMMY_LABELS = np.zeros(1, dtype=np.int64)


def sample_active_clients(m, n, round_idx, master_seed):
    """Uniform sample of n of m client ids, sorted; deterministic per (seed, round)."""
    if not 1 <= n <= m:
        raise ValueError("need 1 <= n <= m")
    rng = np.random.default_rng([master_seed, round_idx, _SALT_SAMPLE])
    return sorted(int(i) for i in rng.choice(m, size=n, replace=False))


def _mlp_init(sizes, master_seed):
    rng = np.random.default_rng([master_seed, _SALT_INIT])
    blocks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / math.sqrt(fan_in)
        blocks.append(rng.uniform(-scale, scale, size=fan_in * fan_out))
    return np.concatenate(blocks)


def _build_dataset(config):
    if config.task == "synth":
        total = synth_classification(
            config.num_classes,
            config.input_dim,
            config.train_size + config.test_size,
            config.class_separation,
            config.noise,
            seed=[config.master_seed, _SALT_DATA],
        )
        train = LabeledDataset(
            total.features[: config.train_size],
            total.labels[: config.train_size],
            config.num_classes,
        )
        test = None
        if config.test_size > 0:
            test = LabeledDataset(
                total.features[config.train_size :],
                total.labels[config.train_size :],
                config.num_classes,
            )
        return train, test
    train = load_dataset(config.dataset_path)
    test = load_dataset(config.test_path) if config.test_path else None
    return train, test


def init_world(config: ExperimentConfig) -> World:
    """Build the initial world: data, partition, models, zeroed states."""
    hyper = config.hyper()
    if config.task == "quadratic":
        models = synth_quadratic_federation(
            config.m, config.quad_dim, config.center_spread, seed=[config.master_seed, _SALT_DATA]
        )
        w0 = ParamVector.zeros(config.quad_dim)
        train = test = None
        client_indices = None
    else:
        train, test = _build_dataset(config)
        if config.model == "mlp":
            hidden = [int(s) for s in config.hidden_sizes.split(",") if s.strip()]
            sizes = [train.input_dim, *hidden, train.num_classes]
            model = MLP(sizes)
            w0 = ParamVector(_mlp_init(sizes, config.master_seed), model.layer_shapes)
        else:
            model = LogisticRegression(train.input_dim, train.num_classes)
            w0 = ParamVector.zeros(model.d, model.layer_shapes)
        if config.partition == "dirichlet":
            plan = dirichlet_partition(
                train.labels,
                train.num_classes,
                config.m,
                config.dirichlet_u,
                config.with_replacement,
                seed=[config.master_seed, _SALT_PART],
            )
        else:
            plan = pathological_partition(
                train.labels,
                train.num_classes,
                config.m,
                config.pathological_c,
                config.with_replacement,
                seed=[config.master_seed, _SALT_PART],
            )
        models = [model] * config.m
        client_indices = [plan.client_indices(i) for i in range(config.m)]

    clients = {
        i: ClientState.fresh(i, w0.d, w0.layer_shapes, hyper.r) for i in range(config.m)
    }
    return World(
        config=config,
        hyper=hyper,
        kind=config.algorithm,
        server=ServerState.fresh(w0),
        clients=clients,
        models=models,
        client_indices=client_indices,
        train=train,
        test=test,
    )


def _batch_stream(features, labels, indices, batch_size, rng):
    count = indices.size
    if count == 0:
        raise ValueError("client has no samples")
    while True:
        perm = rng.permutation(indices)
        if count <= batch_size:
            yield Batch(features[perm], labels[perm])
            continue
        for start in range(0, count - batch_size + 1, batch_size):
            chunk = perm[start : start + batch_size]
            yield Batch(features[chunk], labels[chunk])


def _quad_stream():
    batch = Batch(_DUMMY_FEATURES, _DUMMY_LABELS)
    while True:
        yield batch


def _client_stream(world, client_id, round_idx):
    if world.train is None:
        return _quad_stream()
    rng = np.random.default_rng(
        [world.config.master_seed, round_idx, client_id, _SALT_BATCH]
    )
    return _batch_stream(
        world.train.features,
        world.train.labels,
        world.client_indices[client_id],
        world.hyper.batch_size,
        rng,
    )


def _global_objective(world, values):
    """FL objective: mean over clients of their full-batch loss/gradient."""
    m = world.config.m
    total_loss = 0.0
    total_grad = np.zeros_like(values)
    pv = world.server.w.like(values)
    for i in range(m):
        model = world.models[i]
        if world.train is None:
            batch = Batch(_DUMMY_FEATURES, _DUMMY_LABELS)
        else:
            idx = world.client_indices[i]
            batch = Batch(world.train.features[idx], world.train.labels[idx])
        total_loss += loss(model, pv, batch)
        total_grad += grad(model, pv, batch).values
    return total_loss / m, total_grad / m


def _test_accuracy(world):
    if world.test is None:
        return 0.0
    model = world.shared_model
    predicted = model.predict(world.server.w.values, world.test.features)
    return float(np.mean(predicted == world.test.labels))


def run_round(world: World, round_idx: int, evaluate: bool = True):
    """Advance one communication round in place; optionally evaluate metrics.

    Test accuracy is measured at the post-aggregation global model; the
    training loss and squared gradient norm at the plain client average; the
    consistency metric against the model broadcast this round.
    """
    hyper = world.hyper
    config = world.config
    eta_t = hyper.eta * hyper.eta_decay**round_idx
    active = sample_active_clients(config.m, config.n, round_idx, config.master_seed)
    broadcast = Broadcast(
        w=world.server.w, s=world.server.s, c=world.server.c, momentum=world.server.momentum
    )
    returns = []
    for client_id in active:
        stream = _client_stream(world, client_id, round_idx)
        try:
            ret, new_state = local_round(
                world.kind,
                world.clients[client_id],
                world.models[client_id],
                broadcast,
                hyper,
                stream,
                eta_t,
            )
        except DivergenceError as exc:
            raise exc.with_round(round_idx) from None
        new_state.last_seen_round = round_idx
        world.clients[client_id] = new_state
        returns.append(ret)

    world.server = server_round(world.kind, world.server, returns, hyper, config.m, eta_t)
    world.download_cum += len(active) * COMM_VECTORS[world.kind][0]
    world.upload_cum += sum(ret.upload_vector_count for ret in returns)
    world.last_returns = returns

    if not evaluate:
        return None
    w_bar = np.mean(np.stack([ret.w_i.values for ret in returns]), axis=0)
    train_loss, mean_grad = _global_objective(world, w_bar)
    metrics = RoundMetrics(
        round=round_idx,
        eta=eta_t,
        train_loss=train_loss,
        grad_norm_sq=float(mean_grad @ mean_grad),
        test_acc=_test_accuracy(world),
        consistency=consistency([ret.w_i for ret in returns], broadcast.w),
        upload_vectors_cum=world.upload_cum,
        download_vectors_cum=world.download_cum,
    )
    return metrics


def run_experiment(config: ExperimentConfig, out_dir=None):
    """Run T rounds; returns (summary, metric rows, world).

    Artifacts (metrics.csv, summary.json, model.fspv, clients.npz,
    config.effective) are written when ``out_dir`` is given. On divergence
    the run stops, emits a status row and reports status "diverged".
    """
    world = init_world(config)
    rows = []
    status = "ok"
    completed = 0
    for t in range(config.T):
        evaluate = (t % config.eval_cadence == 0) or (t == config.T - 1)
        try:
            metrics = run_round(world, t, evaluate)
        except DivergenceError as exc:
            eta_t = config.eta * config.eta_decay**t
            rows.append(
                RoundMetrics(
                    round=t,
                    eta=eta_t,
                    train_loss=float("nan"),
                    grad_norm_sq=float("nan"),
                    test_acc=float("nan"),
                    consistency=float("nan"),
                    upload_vectors_cum=world.upload_cum,
                    download_vectors_cum=world.download_cum,
                    status="diverged",
                )
            )
            status = "diverged"
            break
        completed = t + 1
        if metrics is not None:
            rows.append(metrics)

    ok_rows = [row for row in rows if row.status == "ok"]
    last = ok_rows[-1] if ok_rows else None
    summary = ExperimentSummary(
        status=status,
        rounds_completed=completed,
        final_test_acc=last.test_acc if last else None,
        best_test_acc=max(row.test_acc for row in ok_rows) if ok_rows else None,
        final_train_loss=last.train_loss if last else None,
        min_grad_norm_sq=min(row.grad_norm_sq for row in ok_rows) if ok_rows else None,
        final_grad_norm_sq=last.grad_norm_sq if last else None,
        final_consistency=last.consistency if last else None,
        upload_vectors_total=world.upload_cum,
        download_vectors_total=world.download_cum,
    )
    if out_dir is not None:
        _write_artifacts(config, world, rows, summary, out_dir)
    return summary, rows, world


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")


def _write_artifacts(config, world, rows, summary, out_dir):
    import os

    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(summary.to_json() + "\n")
    save_model_vector(os.path.join(out_dir, "model.fspv"), world.server.w)
    config.to_file(os.path.join(out_dir, "config.effective"))
    states = world.clients
    np.savez(
        os.path.join(out_dir, "clients.npz"),
        lambdas=np.stack([states[i].lambda_i.values for i in sorted(states)]),
        mus=np.stack([states[i].perturb.mu.values for i in sorted(states)]),
        controls=np.stack([states[i].control_variate.values for i in sorted(states)]),
        last_seen=np.array([states[i].last_seen_round for i in sorted(states)]),
    )


def save_model_vector(path, pv: ParamVector):
    """Write a ParamVector in the flat binary model format."""
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<IQI", _MODEL_VERSION, pv.d, len(pv.layer_shapes)))
        for rows, cols in pv.layer_shapes:
            fh.write(struct.pack("<II", rows, cols))
        fh.write(pv.values.astype("<f8").tobytes())


def load_model_vector(path) -> ParamVector:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MODEL_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, d, n_layers = struct.unpack("<IQI", fh.read(16))
        if version != _MODEL_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        shapes = tuple(struct.unpack("<II", fh.read(8)) for _ in range(n_layers))
        values = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
    return ParamVector(values, shapes)

"""Federated training, unlearning, and capture of the gradient pair the
attacker exploits.

The default unlearning mode is `simulated`: both gradient snapshots are taken
at the same trained model (the pre-unlearning gradient over D_f u D_r, the
post-unlearning gradient over D_r alone). `retrain` reruns federated training
from the initial model with the forgotten samples removed from every shard.
The union batch is always ordered [D_f; D_r], matching the slice convention
of the reconstruction stage.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import LabeledDataset, Partition
from .engine import FlatGradient, param_grad
from .errors import ConfigError
from .models import ArchSpec, Model, load_params, save_params
from .seeds import child_rng


@dataclass
class FedConfig:
    clients: int = 10
    rounds: int = 1
    local_epochs: int = 1
    local_lr: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if min(self.clients, self.local_epochs, self.batch_size) < 1:
            raise ConfigError("clients, local_epochs, batch_size must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.local_lr <= 0:
            raise ConfigError("local_lr must be positive")


@dataclass
class UnlearnScenario:
    full_set: LabeledDataset          # D_f u D_r
    forget_indices: np.ndarray        # positions of D_f inside full_set
    mode: str = "simulated"           # simulated | retrain
    forget_global: np.ndarray | None = None  # D_f positions in the training set

    def __post_init__(self):
        self.forget_indices = np.asarray(self.forget_indices, dtype=np.int64)
        if self.mode not in ("simulated", "retrain"):
            raise ConfigError(f"unknown unlearning mode {self.mode!r}")
        n = len(self.full_set)
        if self.forget_indices.size != np.unique(self.forget_indices).size:
            raise ConfigError("forget_indices contains duplicates")
        if self.forget_indices.size and (
            self.forget_indices.min() < 0 or self.forget_indices.max() >= n
        ):
            raise ConfigError("forget_indices outside the full set")

    @property
    def remain_indices(self) -> np.ndarray:
        mask = np.ones(len(self.full_set), dtype=bool)
        mask[self.forget_indices] = False
        return np.flatnonzero(mask)

    def forget_set(self) -> LabeledDataset:
        return self.full_set.subset(self.forget_indices, "D_f")

    def remain_set(self) -> LabeledDataset:
        return self.full_set.subset(self.remain_indices, "D_r")

    def union_batch(self) -> tuple:
        """Images and labels ordered [D_f; D_r]."""
        order = np.concatenate([self.forget_indices, self.remain_indices])
        return self.full_set.images[order], self.full_set.labels[order]


@dataclass
class CapturedPair:
    theta_star: Model
    theta_u: Model
    g_pre: FlatGradient   # over D_f u D_r at theta_star
    g_post: FlatGradient  # over D_r at theta_u
    mode: str = "simulated"


def _client_pass(model: Model, dataset: LabeledDataset, shard: np.ndarray, config: FedConfig, round_idx: int, client: int) -> np.ndarray:
    values = model.values.copy()
    for epoch in range(config.local_epochs):
        rng = child_rng(config.seed, "shuffle", round_idx, client, epoch)
        order = shard[rng.permutation(shard.size)]
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            stepped = model.with_values(values)
            g = param_grad(stepped, dataset.images[batch], dataset.labels[batch])
            values = values - config.local_lr * g.values
    return values


def train_federated(model0: Model, dataset: LabeledDataset, partition: Partition, config: FedConfig) -> Model:
    """FedAvg: seeded-shuffle local SGD per client, uniform parameter average."""
    config.validate()
    if partition.num_clients != config.clients:
        raise ConfigError(
            f"partition has {partition.num_clients} clients, config says {config.clients}"
        )
    model = model0
    for rnd in range(config.rounds):
        client_values = []
        for client, shard in enumerate(partition.client_indices):
            if shard.size == 0:
                warnings.warn(f"client {client} has an empty shard; skipped this round")
                continue
            client_values.append(_client_pass(model, dataset, shard, config, rnd, client))
        if not client_values:
            raise ConfigError("every client shard is empty")
        model = model.with_values(np.mean(client_values, axis=0))
    return model


def unlearn(
    model0: Model,
    theta_star: Model,
    scenario: UnlearnScenario,
    dataset: LabeledDataset,
    partition: Partition,
    config: FedConfig,
) -> Model:
    """simulated -> theta_star itself; retrain -> FedAvg rerun without D_f."""
    if scenario.mode == "simulated":
        return theta_star
    if scenario.remain_indices.size == 0:
        raise ConfigError("retrain mode needs a nonempty remaining set")
    if scenario.forget_global is None:
        raise ConfigError("retrain mode needs forget_global indices into the training set")
    drop = set(np.asarray(scenario.forget_global, dtype=np.int64).tolist())
    kept = Partition(
        [np.array([i for i in shard if int(i) not in drop], dtype=np.int64) for shard in partition.client_indices]
    )
    return train_federated(model0, dataset, kept, config)


def capture_pair(theta_star: Model, theta_u: Model, scenario: UnlearnScenario) -> CapturedPair:
    """Full-batch mean gradients at the two final models."""
    if theta_star.spec != theta_u.spec:
        raise ConfigError("models must share an architecture")
    if scenario.remain_indices.size == 0:
        raise ConfigError("capture needs a nonempty remaining set for the post gradient")
    union_x, union_y = scenario.union_batch()
    remain = scenario.remain_set()
    g_pre = param_grad(theta_star, union_x, union_y)
    g_post = param_grad(theta_u, remain.images, remain.labels)
    return CapturedPair(theta_star, theta_u, g_pre, g_post, scenario.mode)


# ------------------------------------------------------------- serialization


def _save_gradient(grad: FlatGradient, path) -> None:
    import struct

    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", grad.values.size))
        fh.write(grad.values.astype("<f8").tobytes())


def _load_gradient(path, layout) -> FlatGradient:
    import struct

    raw = Path(path).read_bytes()
    (count,) = struct.unpack("<Q", raw[:8])
    values = np.frombuffer(raw[8 : 8 + 8 * count], dtype="<f8").astype(np.float64)
    return FlatGradient(values, tuple(layout))


def save_pair(pair: CapturedPair, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(pair.theta_star, directory / "theta_star.bin")
    save_params(pair.theta_u, directory / "theta_u.bin")
    _save_gradient(pair.g_pre, directory / "g_pre.bin")
    _save_gradient(pair.g_post, directory / "g_post.bin")
    spec = pair.theta_star.spec
    manifest = {
        "mode": pair.mode,
        "arch": spec.name,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "width_scale": spec.width_scale,
        "model_seeds": [pair.theta_star.seed, pair.theta_u.seed],
        "dim": pair.theta_star.dim,
        "gradient_capture": "single full-batch mean gradients at the final models",
    }
    (directory / "capture.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_pair(directory) -> CapturedPair:
    directory = Path(directory)
    manifest = json.loads((directory / "capture.json").read_text())
    spec = ArchSpec(
        manifest["arch"],
        tuple(manifest["input_shape"]),
        manifest["num_classes"],
        manifest["width_scale"],
    )
    seeds = manifest["model_seeds"]
    theta_star = load_params(directory / "theta_star.bin", spec, seeds[0])
    theta_u = load_params(directory / "theta_u.bin", spec, seeds[1])
    g_pre = _load_gradient(directory / "g_pre.bin", theta_star.layout)
    g_post = _load_gradient(directory / "g_post.bin", theta_u.layout)
    return CapturedPair(theta_star, theta_u, g_pre, g_post, manifest["mode"])

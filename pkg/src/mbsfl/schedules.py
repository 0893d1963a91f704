"""Learning-rate schedules and the training configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .exceptions import ConfigError
from .nn import LayerSpec, check_specs

ALGORITHMS = ("minibatch_sfl", "fedavg", "sfl_v2", "centralized", "minibatch_sgd")


def gamma(S: float, mu: float, E: int, M: int) -> float:
    """Schedule offset ``max(8S/mu - 1, E*M)``."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    return max(8.0 * S / mu - 1.0, float(E * M))


def lr_at(i: int, mu: float, gamma_: float) -> float:
    """Diminishing step size ``2 / (mu (gamma + i))``."""
    if i < 0:
        raise ValueError("step index must be nonnegative")
    return 2.0 / (mu * (gamma_ + i))


@dataclass
class ScheduleParams:
    mode: str = "constant"
    constant_lr: float = 0.01
    mu: float = 1.0
    S: float = 1.0

    def __post_init__(self):
        if self.mode not in ("constant", "diminishing"):
            raise ConfigError("schedule.mode", f"unknown mode {self.mode!r}")
        if not self.mu > 0:
            raise ConfigError("schedule.mu", "must be positive")
        if self.S < self.mu:
            raise ConfigError("schedule.S", f"smoothness {self.S} below strong convexity {self.mu}")

    def rate(self, i: int, E: int, M: int) -> float:
        """Learning rate indexed like ``eta^i`` (SGD step ``i+1`` uses ``rate(i)``)."""
        if self.mode == "constant":
            return self.constant_lr
        return lr_at(i, self.mu, gamma(self.S, self.mu, E, M))


@dataclass
class TrainConfig:
    """Everything a training run needs apart from the data.

    Defaults follow the reference setup: 5 local epochs, batch size 32 and a
    constant learning rate of 0.01.
    """

    layer_specs: list
    n_clients: int = 10
    rounds: int = 1
    local_epochs: int = 5
    batches_per_epoch: int = 1
    batch_size: int = 32
    cut_layer: int = 1
    algorithm: str = "minibatch_sfl"
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    seed: int = 0
    init_seed: int = 0
    r: float = 0.0
    weights_mode: str = "by_size"
    log_every_step: bool = False
    log_client_grads: bool = False
    log_lemma_terms: bool = False
    log_params: bool = False
    variance_window: int | None = None
    sfl_v2_shuffle: bool = False

    def __post_init__(self):
        self.layer_specs = [s if isinstance(s, LayerSpec) else LayerSpec(*s) for s in self.layer_specs]
        check_specs(self.layer_specs)
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleParams(**self.schedule)
        for key in ("n_clients", "rounds", "local_epochs", "batches_per_epoch", "batch_size"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, "must be at least 1")
        if not 0 <= self.cut_layer <= len(self.layer_specs):
            raise ConfigError("cut_layer", f"{self.cut_layer} outside [0, {len(self.layer_specs)}]")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"unknown algorithm {self.algorithm!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_specs)

    @property
    def total_steps(self) -> int:
        return self.rounds * self.local_epochs * self.batches_per_epoch

    @property
    def window(self) -> int:
        return self.variance_window or self.batches_per_epoch

    def rate(self, i: int) -> float:
        return self.schedule.rate(i, self.local_epochs, self.batches_per_epoch)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layer_specs"] = [[s.input_dim, s.output_dim, s.activation] for s in self.layer_specs]
        return out

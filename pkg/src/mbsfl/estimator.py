"""scikit-learn style wrappers around the split-training simulator.

``fit`` partitions the training set over simulated clients (non-IID ratio
``r``), trains with the chosen algorithm and keeps the final global model.
"""
from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .algorithms import run_algorithm
from .data import Dataset, partition_noniid
from .nn import LayerSpec, predict_output
from .schedules import ScheduleParams, TrainConfig


class _SplitTrainingBase(BaseEstimator):
    def __init__(self, hidden_layer_sizes=(32, 32), activation="relu", cut_layer=1, algorithm="minibatch_sfl",
                 n_clients=10, r=0.0, rounds=20, local_epochs=5, batches_per_epoch=5, batch_size=32,
                 learning_rate=0.01, lr_schedule="constant", mu=1.0, S=1.0, weights_mode="by_size", random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.cut_layer = cut_layer
        self.algorithm = algorithm
        self.n_clients = n_clients
        self.r = r
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batches_per_epoch = batches_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.mu = mu
        self.S = S
        self.weights_mode = weights_mode
        self.random_state = random_state

    def _specs(self, n_in: int, n_out: int, head: str) -> list:
        dims = [n_in, *self.hidden_layer_sizes, n_out]
        acts = [self.activation] * (len(dims) - 2) + [head]
        return [LayerSpec(a, b, act) for a, b, act in zip(dims[:-1], dims[1:], acts)]

    def _train(self, dataset: Dataset, specs: list):
        seed = int(self.random_state)
        config = TrainConfig(
            specs, n_clients=self.n_clients, rounds=self.rounds, local_epochs=self.local_epochs,
            batches_per_epoch=self.batches_per_epoch, batch_size=self.batch_size, cut_layer=self.cut_layer,
            algorithm=self.algorithm, seed=seed, init_seed=seed, r=self.r, weights_mode=self.weights_mode,
            schedule=ScheduleParams(self.lr_schedule, self.learning_rate, self.mu, self.S),
        )
        shards = partition_noniid(dataset, self.n_clients, self.r, self.weights_mode, seed)
        self.run_log_ = run_algorithm(config, dataset, shards)
        self.model_ = self.run_log_.final_model
        self.n_features_in_ = dataset.features.shape[1]
        return self

    def _output(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_output(self.model_, X)


class MiniBatchSFLClassifier(ClassifierMixin, _SplitTrainingBase):
    """Softmax classifier trained by simulated split federated learning."""

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        dataset = Dataset(X, encoded, len(self.classes_))
        return self._train(dataset, self._specs(X.shape[1], len(self.classes_), "softmax_xent_head"))

    def predict_proba(self, X):
        return softmax(self._output(X), axis=1)

    def predict(self, X):
        out = self._output(X)
        return self.classes_[np.argmax(out, axis=1)]


class MiniBatchSFLRegressor(RegressorMixin, _SplitTrainingBase):
    """Least-squares regressor trained by simulated split federated learning.

    With ``r > 0`` the samples are sorted by target before the label-skewed
    blocks are cut.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._1d = y.ndim == 1
        targets = y.reshape(len(y), -1).astype(np.float64)
        order = np.argsort(targets[:, 0], kind="stable")  # label-skew blocks follow the first target
        dataset = Dataset(X[order], targets[order], None)
        return self._train(dataset, self._specs(X.shape[1], targets.shape[1], "identity"))

    def predict(self, X):
        out = self._output(X)
        return out[:, 0] if self._1d else out

"""Baseline classifiers: nearest neighbors, linear SVM, shallow neural net.

All three share the same contract: ``fit_classifier(kind, train, options)``
returns a fitted model exposing ``predict(x)``, ``predict_batch(X)`` and
``accuracy(test)``. Everything is deterministic given the options seed.

These are intentionally plain implementations - the experiments measure
how much generated features move a *reasonable* baseline, so simplicity
and reproducibility matter more than squeezing out the last accuracy
point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datasets import LabeledDataset
from .errors import InputError

KNN = "knn"
SVM = "svm"
MLP = "mlp"


@dataclass(frozen=True)
class KnnOptions:
    k: int = 1


@dataclass(frozen=True)
class SvmOptions:
    c: float = 1.0
    epochs: int = 500
    tol: float = 1e-8


@dataclass(frozen=True)
class MlpOptions:
    """Shallow net options; hidden_units=None means "match input width".

    By default a validation fraction is held out of the training split and
    training stops once validation loss has not improved for ``patience``
    epochs (the weights revert to the best-validation epoch). That mirrors
    how off-the-shelf shallow-net trainers behave and is what makes them
    data-hungry at small N. Set ``validation_fraction=0`` to train on the
    full split with a pure loss-improvement stop.
    """

    hidden_units: Optional[int] = None
    epochs: int = 300
    learning_rate: float = 1.0
    l2_penalty: float = 0.01
    tol: float = 1e-6
    validation_fraction: float = 0.15
    patience: int = 10
    min_epochs: int = 20  # early stop cannot fire before this many epochs
    seed: int = 0


def _check_train(train: LabeledDataset) -> None:
    if train.n_samples == 0:
        raise InputError("training set is empty")
    if not np.all(np.isfinite(train.features)):
        raise InputError("training features contain NaN or infinity")


def _check_query(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d,):
        raise InputError(f"query has shape {x.shape}, model expects ({d},)")
    return x


class _BaseModel:
    kind: str
    n_features: int

    def predict(self, x) -> int:
        raise NotImplementedError

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.array([self.predict(row) for row in X], dtype=np.int64)

    def accuracy(self, test: LabeledDataset) -> float:
        if test.n_samples == 0:
            raise InputError("test set is empty")
        predictions = self.predict_batch(test.features)
        return float(np.mean(predictions == test.labels))


class KnnModel(_BaseModel):
    """k nearest neighbors with Euclidean distance and majority vote.

    Distance ties at the neighborhood boundary resolve by training-row
    order (stable sort); vote ties resolve toward the lowest class id.
    """

    kind = KNN

    def __init__(self, train: LabeledDataset, options: KnnOptions):
        _check_train(train)
        self.x_train = train.features.copy()
        self.y_train = train.labels.copy()
        self.k = min(options.k, train.n_samples)
        self.n_features = train.n_features
        self.classes = train.classes

    def predict(self, x) -> int:
        return int(self.predict_batch(_check_query(x, self.n_features)[None, :])[0])

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise InputError(
                f"query batch has shape {X.shape}, expected (*, {self.n_features})"
            )
        d2 = (
            (X * X).sum(axis=1, keepdims=True)
            - 2.0 * X @ self.x_train.T
            + (self.x_train * self.x_train).sum(axis=1)
        )
        neighbor_rows = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        votes = self.y_train[neighbor_rows]
        if self.k == 1:
            return votes[:, 0].copy()
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, row in enumerate(votes):
            ids, counts = np.unique(row, return_counts=True)
            out[i] = ids[np.argmax(counts)]  # unique is sorted: lowest id wins ties
        return out


class SvmModel(_BaseModel):
    """Linear one-vs-rest SVM trained by deterministic subgradient descent.

    Minimizes lambda/2 ||w||^2 + mean hinge loss per class, with
    lambda = 1 / (C * n) and step schedule 1 / (lambda (t + n)). The warm
    offset keeps the first full-batch steps bounded (a bare 1/(lambda t)
    schedule overshoots and never recovers). The bias is unregularized.
    """

    kind = SVM

    def __init__(self, train: LabeledDataset, options: SvmOptions):
        _check_train(train)
        X, y = train.features, train.labels
        self.classes = train.classes
        self.n_features = train.n_features
        n, d = X.shape
        n_classes = self.classes.shape[0]
        targets = np.where(y[None, :] == self.classes[:, None], 1.0, -1.0)  # (C, n)
        lam = 1.0 / (options.c * n)
        W = np.zeros((n_classes, d))
        b = np.zeros(n_classes)
        for t in range(1, options.epochs + 1):
            eta = 1.0 / (lam * (t + n))
            margins = targets * (X @ W.T + b).T  # (C, n)
            viol = (margins < 1.0) * targets  # (C, n)
            grad_w = lam * W - (viol @ X) / n
            grad_b = -viol.mean(axis=1)
            W = W - eta * grad_w
            b = b - eta * grad_b
            if eta * np.linalg.norm(grad_w) < options.tol:
                break
        self.weights = W
        self.biases = b

    def decision(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T + self.biases

    def predict(self, x) -> int:
        x = _check_query(x, self.n_features)
        return int(self.classes[int(np.argmax(self.decision(x[None, :])[0]))])

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.classes[np.argmax(self.decision(X), axis=1)]


def _one_hot(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    return (labels[:, None] == classes[None, :]).astype(np.float64)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mlp_init(d: int, h: int, c: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h)),
        "b1": np.zeros(h),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, c)),
        "b2": np.zeros(c),
    }


def mlp_loss_and_grads(params: dict, X: np.ndarray, Y: np.ndarray, l2: float):
    """Cross-entropy + L2 objective and its analytic gradients.

    Exposed at module level so the gradients can be checked against
    finite differences.
    """
    n = X.shape[0]
    hidden = np.tanh(X @ params["w1"] + params["b1"])
    probs = _softmax(hidden @ params["w2"] + params["b2"])
    ce = -np.log(np.maximum((probs * Y).sum(axis=1), 1e-300)).mean()
    loss = ce + 0.5 * l2 * ((params["w1"] ** 2).sum() + (params["w2"] ** 2).sum())
    dlogits = (probs - Y) / n
    grads = {
        "w2": hidden.T @ dlogits + l2 * params["w2"],
        "b2": dlogits.sum(axis=0),
    }
    dhidden = (dlogits @ params["w2"].T) * (1.0 - hidden * hidden)
    grads["w1"] = X.T @ dhidden + l2 * params["w1"]
    grads["b1"] = dhidden.sum(axis=0)
    return loss, grads, probs


class MlpModel(_BaseModel):
    """One-hidden-layer net: tanh hidden, softmax output, cross-entropy loss.

    Trained full-batch with a halving backoff whenever a step would raise
    the penalized loss, which keeps the loss curve monotone and the fit
    deterministic. With a validation fraction (the default) training stops
    once validation loss stops improving and the weights revert to the
    best-validation epoch; otherwise it runs to the epoch cap or until the
    loss improvement drops below ``tol``.
    """

    kind = MLP

    def __init__(
        self,
        train: LabeledDataset,
        options: MlpOptions,
        init_params: dict | None = None,
    ):
        _check_train(train)
        self.classes = train.classes
        self.n_features = train.n_features
        self.options = options
        hidden = options.hidden_units or train.n_features
        X, Y = train.features, _one_hot(train.labels, self.classes)
        x_val = y_val = None
        if options.validation_fraction > 0.0 and train.n_samples >= 2:
            rng = np.random.default_rng(options.seed)
            order = rng.permutation(train.n_samples)
            n_val = int(round(options.validation_fraction * train.n_samples))
            n_val = min(max(n_val, 1), train.n_samples - 1)
            x_val, y_val = X[order[:n_val]], Y[order[:n_val]]
            X, Y = X[order[n_val:]], Y[order[n_val:]]
        if init_params is None:
            params = mlp_init(train.n_features, hidden, self.classes.shape[0], options.seed)
        else:
            params = {k: v.copy() for k, v in init_params.items()}
            if params["w1"].shape[0] != train.n_features:
                raise InputError(
                    f"initial weights expect {params['w1'].shape[0]} features, "
                    f"training set has {train.n_features}"
                )
        self.loss_history: list[float] = []
        loss, grads, _ = mlp_loss_and_grads(params, X, Y, options.l2_penalty)
        best_val = self._val_loss(params, x_val, y_val)
        best_params = {k: v.copy() for k, v in params.items()}
        stale = 0
        lr = options.learning_rate
        for epoch in range(options.epochs):
            self.loss_history.append(loss)
            halved = False
            while True:
                candidate = {k: params[k] - lr * grads[k] for k in params}
                new_loss, new_grads, _ = mlp_loss_and_grads(
                    candidate, X, Y, options.l2_penalty
                )
                if new_loss <= loss:
                    break
                lr *= 0.5
                halved = True
                if lr < 1e-12:
                    candidate = None
                    break
            if candidate is None:
                break  # no descent direction left at any usable step size
            params, grads = candidate, new_grads
            if not halved:
                lr = min(lr * 1.05, options.learning_rate)
            if x_val is not None:
                val = self._val_loss(params, x_val, y_val)
                if epoch + 1 < options.min_epochs:
                    # grace period: early stopping not armed yet; it would
                    # otherwise revert to a barely trained net whenever the
                    # validation set is a handful of rows
                    best_val = val
                    best_params = {k: v.copy() for k, v in params.items()}
                    stale = 0
                elif val < best_val - 1e-12:
                    best_val = val
                    best_params = {k: v.copy() for k, v in params.items()}
                    stale = 0
                else:
                    stale += 1
                    if stale > options.patience:
                        loss = new_loss
                        break
            if loss - new_loss < options.tol:
                loss = new_loss
                break
            loss = new_loss
        self.loss_history.append(loss)
        self.params = best_params if x_val is not None else params

    @staticmethod
    def _val_loss(params, x_val, y_val):
        if x_val is None:
            return float("inf")
        hidden = np.tanh(x_val @ params["w1"] + params["b1"])
        probs = _softmax(hidden @ params["w2"] + params["b2"])
        return -np.log(np.maximum((probs * y_val).sum(axis=1), 1e-300)).mean()

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        hidden = np.tanh(X @ self.params["w1"] + self.params["b1"])
        return _softmax(hidden @ self.params["w2"] + self.params["b2"])

    def predict(self, x) -> int:
        x = _check_query(x, self.n_features)
        return int(self.classes[int(np.argmax(self.predict_proba(x[None, :])[0]))])

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]


_OPTION_TYPES = {KNN: KnnOptions, SVM: SvmOptions, MLP: MlpOptions}
_MODEL_TYPES = {KNN: KnnModel, SVM: SvmModel, MLP: MlpModel}


def default_options(kind: str, **overrides):
    return _OPTION_TYPES[kind](**overrides)


def fit_classifier(kind: str, train: LabeledDataset, options=None, **model_kwargs):
    """Uniform entry point: fit a classifier of the given kind."""
    if kind not in _MODEL_TYPES:
        raise InputError(f"unknown classifier kind {kind!r}")
    if options is None:
        options = _OPTION_TYPES[kind]()
    return _MODEL_TYPES[kind](train, options, **model_kwargs)


def model_to_dict(model: _BaseModel) -> dict:
    """JSON-serializable audit dump of a fitted model."""
    if model.kind == KNN:
        state = {
            "k": model.k,
            "x_train": model.x_train.tolist(),
            "y_train": model.y_train.tolist(),
        }
    elif model.kind == SVM:
        state = {
            "classes": model.classes.tolist(),
            "weights": model.weights.tolist(),
            "biases": model.biases.tolist(),
        }
    else:
        state = {
            "classes": model.classes.tolist(),
            "params": {k: v.tolist() for k, v in model.params.items()},
        }
    return {"kind": model.kind, "n_features": model.n_features, "state": state}

"""Feature generators and cyborg dataset assembly.

Every generator consumes a training split, learns whatever state it needs,
and then maps any sample to 10 new features. The "cyborg" datasets append
those features to the raw ones (or replace them outright). Four generator
families are provided:

* ``mothnet`` - readout rates of the trained olfactory network,
* ``pca`` - projections onto the top 10 principal modes,
* ``pls`` - projections onto 10 partial-least-squares modes (uses labels),
* ``nn_out`` - log-probabilities from a shallow net trained on the split.

Generated features are min-max rescaled to [0, 1] using training-split
ranges before they are handed to a classifier; raw pixels are already in
that range, and unscaled log-probabilities or firing rates would dominate
Euclidean distances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import classifiers, network
from .classifiers import MlpModel, MlpOptions
from .datasets import LabeledDataset
from .errors import InputError, StateError

MOTHNET = "mothnet"
MOTHNET_PASSTHROUGH = "mothnet_passthrough"
PCA = "pca"
PLS = "pls"
NN_OUT = "nn_out"
NONE = "none"

N_NEW_FEATURES = 10

APPEND = "append"
REPLACE = "replace"


@dataclass(frozen=True)
class AugmentPolicy:
    """How generated features join the original ones."""

    mode: str = APPEND  # "append" | "replace"
    rescale: bool = True

    def __post_init__(self):
        if self.mode not in (APPEND, REPLACE):
            raise InputError(f"unknown augment mode {self.mode!r}")


class FeatureGenerator:
    """Shared fit/transform contract; subclasses fill in ``_fit``/``_transform``."""

    kind = "base"
    n_new_features = N_NEW_FEATURES

    def __init__(self):
        self.fitted = False
        self.feature_min = None
        self.feature_max = None

    def fit(self, train: LabeledDataset) -> "FeatureGenerator":
        if train.n_samples < 1:
            raise InputError("cannot fit a feature generator on an empty split")
        self._fit(train)
        self.fitted = True
        generated = self.transform(train.features)
        self.feature_min = generated.min(axis=0)
        self.feature_max = generated.max(axis=0)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise StateError(f"{self.kind} generator used before fit")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        out = self._transform(X[None, :] if single else X)
        return out[0] if single else out

    def rescaled(self, X: np.ndarray) -> np.ndarray:
        """Transform then min-max scale by the stored training ranges."""
        out = self.transform(X)
        span = self.feature_max - self.feature_min
        span = np.where(span > 0, span, 1.0)
        return (out - self.feature_min) / span

    def _fit(self, train: LabeledDataset) -> None:
        raise NotImplementedError

    def _transform(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class NoneGenerator(FeatureGenerator):
    """Placeholder for baseline runs; augmentation passes data through."""

    kind = NONE

    def fit(self, train: LabeledDataset) -> "NoneGenerator":
        self.fitted = True
        return self

    def _transform(self, X: np.ndarray) -> np.ndarray:
        return np.zeros((X.shape[0], 0))


class PcaGenerator(FeatureGenerator):
    """Projections onto the top principal modes of the centered split.

    Components are sign-fixed (largest-magnitude entry positive). If the
    split has fewer non-degenerate directions than requested, the missing
    projections are zero and ``degenerate`` is set.
    """

    kind = PCA

    def __init__(self):
        super().__init__()
        self.mean = None
        self.components = None  # (n_new_features, d)
        self.degenerate = False

    def _fit(self, train: LabeledDataset) -> None:
        if train.n_samples < 2:
            raise InputError("PCA needs at least two samples")
        X = train.features
        self.mean = X.mean(axis=0)
        centered = X - self.mean
        _, svals, vt = np.linalg.svd(centered, full_matrices=False)
        rank_tol = (svals[0] if svals.size else 0.0) * 1e-10
        components = np.zeros((self.n_new_features, X.shape[1]))
        usable = min(self.n_new_features, int((svals > rank_tol).sum()))
        for i in range(usable):
            v = vt[i]
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            components[i] = v
        if usable < self.n_new_features:
            self.degenerate = True
            warnings.warn(
                f"PCA found only {usable} non-degenerate modes; "
                f"padding {self.n_new_features - usable} with zeros",
                stacklevel=3,
            )
        self.components = components

    def _transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) @ self.components.T


class PlsGenerator(FeatureGenerator):
    """Partial least squares (two-block NIPALS, X deflation, one-hot targets).

    Scores for new samples come from the rotation matrix
    R = W (P^T W)^{-1}, so ``transform`` is a single affine map.
    """

    kind = PLS

    def __init__(self):
        super().__init__()
        self.mean = None
        self.rotation = None  # (d, n_new_features)
        self.x_weights = None  # (d, n_new_features), unit-norm NIPALS weights
        self.degenerate = False

    def _fit(self, train: LabeledDataset) -> None:
        if train.n_samples < 2:
            raise InputError("PLS needs at least two samples")
        if train.classes.shape[0] < 2:
            raise InputError("PLS needs at least two classes")
        X = train.features.copy()
        self.mean = X.mean(axis=0)
        X -= self.mean
        Y = (train.labels[:, None] == train.classes[None, :]).astype(np.float64)
        Y = Y - Y.mean(axis=0)
        d = X.shape[1]
        weights = np.zeros((d, self.n_new_features))
        loadings = np.zeros((d, self.n_new_features))
        usable = 0
        for comp in range(self.n_new_features):
            if np.linalg.norm(X) < 1e-12 or np.linalg.norm(Y) < 1e-12:
                break
            u = Y[:, int(np.argmax((Y * Y).sum(axis=0)))].copy()
            w = np.zeros(d)
            for _ in range(500):
                w_new = X.T @ u
                norm = np.linalg.norm(w_new)
                if norm < 1e-12:
                    break
                w_new /= norm
                t = X @ w_new
                tt = t @ t
                if tt < 1e-12:
                    break
                q = Y.T @ t / tt
                qq = q @ q
                if qq < 1e-12:
                    break
                u_new = Y @ q / qq
                done = np.linalg.norm(w_new - w) < 1e-10
                w, u = w_new, u_new
                if done:
                    break
            if np.linalg.norm(w) < 1e-12:
                break
            t = X @ w
            tt = t @ t
            if tt < 1e-12:
                break
            p = X.T @ t / tt
            X = X - np.outer(t, p)
            weights[:, comp] = w
            loadings[:, comp] = p
            usable += 1
        if usable < self.n_new_features:
            self.degenerate = True
            warnings.warn(
                f"PLS deflation degenerated after {usable} components; "
                f"padding the rest with zeros",
                stacklevel=3,
            )
        self.x_weights = weights
        self.rotation = np.zeros((d, self.n_new_features))
        if usable:
            w_use = weights[:, :usable]
            p_use = loadings[:, :usable]
            self.rotation[:, :usable] = w_use @ np.linalg.pinv(p_use.T @ w_use)

    def _transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) @ self.rotation


class NnOutputGenerator(FeatureGenerator):
    """Log-probabilities of a shallow net trained on the split."""

    kind = NN_OUT
    LOG_EPS = 1e-12

    def __init__(self, options: MlpOptions | None = None):
        super().__init__()
        self.options = options or MlpOptions()
        self.model: MlpModel | None = None

    def _fit(self, train: LabeledDataset) -> None:
        self.model = MlpModel(train, self.options)

    def _transform(self, X: np.ndarray) -> np.ndarray:
        # fewer classes than feature slots: missing columns sit at log(eps)
        probs = self.model.predict_proba(X)
        out = np.full((X.shape[0], self.n_new_features), np.log(self.LOG_EPS))
        cols = min(self.n_new_features, probs.shape[1])
        out[:, :cols] = np.log(probs[:, :cols] + self.LOG_EPS)
        return out


class MothnetGenerator(FeatureGenerator):
    """Readout rates of the trained olfactory network as features."""

    kind = MOTHNET

    def __init__(self, template: network.NetworkTemplate, seed: int = 0):
        super().__init__()
        self.template = template
        if template.al_mode == network.PASSTHROUGH_AL:
            self.kind = MOTHNET_PASSTHROUGH
        self.seed = seed
        self.instance: network.NetworkInstance | None = None
        self.stats: network.ReadoutStats | None = None

    def _fit(self, train: LabeledDataset) -> None:
        self.instance = network.generate_instance(self.template, self.seed)
        self.stats = network.train(self.instance, train, seed=self.seed)

    def _transform(self, X: np.ndarray) -> np.ndarray:
        return network.extract_features_batch(self.instance, X)

    def standalone_accuracy(self, test: LabeledDataset) -> float:
        """Accuracy of the network's own log-likelihood classifier."""
        if not self.fitted:
            raise StateError("generator used before fit")
        predicted = network.predict_batch(self.instance, self.stats, test.features)
        return float(np.mean(predicted == test.labels))


def pretrain_mlp(
    source: LabeledDataset, target: LabeledDataset, options: MlpOptions | None = None
) -> MlpModel:
    """Transfer learning for the shallow net: fit on source, then on target.

    The source-trained weights become the initialization of the target fit,
    so both datasets must share a feature dimension.
    """
    options = options or MlpOptions()
    if source.n_features != target.n_features:
        raise InputError(
            f"source has {source.n_features} features, target {target.n_features}"
        )
    first = MlpModel(source, options)
    return MlpModel(target, options, init_params=first.params)


def augment(
    base: LabeledDataset, gen: FeatureGenerator, policy: AugmentPolicy
) -> LabeledDataset:
    """Assemble the cyborg dataset for one split.

    The generator must have been fitted on the corresponding training
    split only; its stored rescale ranges are applied verbatim here, so
    train and test splits go through the identical map.
    """
    if gen.kind == NONE:
        return base
    if not gen.fitted:
        raise StateError(f"{gen.kind} generator used before fit")
    generated = gen.rescaled(base.features) if policy.rescale else gen.transform(base.features)
    # test-split values can fall just outside the training ranges; clamp so
    # the non-negativity contract of LabeledDataset survives augmentation
    generated = np.maximum(generated, 0.0)
    if policy.mode == REPLACE:
        features = generated
    else:
        features = np.hstack([base.features, generated])
    return LabeledDataset(features, base.labels.copy())


def fit_generator(
    kind: str,
    train: LabeledDataset,
    seed: int = 0,
    template: network.NetworkTemplate | None = None,
    mlp_options: MlpOptions | None = None,
) -> FeatureGenerator:
    """Factory covering every generator kind with sensible defaults."""
    if kind == NONE:
        return NoneGenerator().fit(train)
    if kind == PCA:
        return PcaGenerator().fit(train)
    if kind == PLS:
        return PlsGenerator().fit(train)
    if kind == NN_OUT:
        options = mlp_options or MlpOptions(seed=seed)
        return NnOutputGenerator(options).fit(train)
    if kind in (MOTHNET, MOTHNET_PASSTHROUGH):
        template = template or network.NetworkTemplate(n_features=train.n_features)
        if template.n_features != train.n_features:
            template = replace(template, n_features=train.n_features)
        if kind == MOTHNET_PASSTHROUGH:
            template = replace(template, al_mode=network.PASSTHROUGH_AL)
        return MothnetGenerator(template, seed=seed).fit(train)
    raise InputError(f"unknown feature generator kind {kind!r}")


def generator_to_dict(gen: FeatureGenerator) -> dict:
    """JSON-serializable audit dump of a fitted generator."""
    if not gen.fitted:
        raise StateError("cannot serialize an unfitted generator")
    state: dict = {}
    if gen.kind == PCA:
        state = {
            "mean": gen.mean.tolist(),
            "components": gen.components.tolist(),
            "degenerate": gen.degenerate,
        }
    elif gen.kind == PLS:
        state = {
            "mean": gen.mean.tolist(),
            "rotation": gen.rotation.tolist(),
            "degenerate": gen.degenerate,
        }
    elif gen.kind == NN_OUT:
        state = classifiers.model_to_dict(gen.model)
    elif gen.kind in (MOTHNET, MOTHNET_PASSTHROUGH):
        tpl = gen.template
        state = {
            "template": dict(tpl.__dict__),
            "seed": gen.seed,
            "w_mb_readout": gen.instance.w_mb_readout.tolist(),
        }
    payload = {"kind": gen.kind, "state": state}
    if gen.feature_min is not None:
        payload["feature_min"] = gen.feature_min.tolist()
        payload["feature_max"] = gen.feature_max.tolist()
    return payload

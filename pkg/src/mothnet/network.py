"""The insect-olfactory feature generator network.

Architecture, front to back:

* input layer: each feature feeds one unit of a competitive-inhibition
  layer (the AL) through a private non-negative gain. AL units try to
  dampen each other via all-to-all lateral inhibition.
* sparse expansion: the AL projects through a sparse random matrix
  (~15% non-zero) into a much larger layer (the MB). A global-inhibition
  rule lets only the strongest fraction of MB units fire, so MB codes are
  sparse and high-dimensional.
* readouts: one densely-connected readout unit per class. Only the
  connections into the readouts (and optionally into the MB) are plastic;
  they learn by a local Hebbian rule - grow when both ends fire, decay
  multiplicatively when the pair is silent.

All weights and firing rates are non-negative at all times. The AL
dynamics run as a discrete-time rectified firing-rate iteration with
optional Gaussian noise; reported rates are time-averages over the second
half of the window, by which point the iteration has settled.

Readout activations of a trained network double as generated features for
downstream classifiers, and a per-class Gaussian log-likelihood over the
readouts turns the network into a standalone classifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import LabeledDataset
from .errors import ConfigError, InputError

NORMAL_AL = "normal"
PASSTHROUGH_AL = "passthrough"

# Variance floor for readout statistics: keeps single-sample classes from
# producing zero-variance Gaussians and infinite log-densities, and stops
# the wild per-coordinate variance estimates of 2..3-sample classes from
# dominating the log-likelihood. The floor combines a scale-relative term
# with a fraction of the global readout variance.
VARIANCE_FLOOR_REL = 1e-6
VARIANCE_FLOOR_GLOBAL = 0.05
VARIANCE_FLOOR_ABS = 1e-12


@dataclass(frozen=True)
class NetworkTemplate:
    """Distributional recipe from which concrete network instances are drawn.

    ``al_inhibition`` defaults to 0.75 / n_features, which keeps the
    lateral inhibition loop contractive while leaving competition strong
    enough to sharpen the AL code. Each connection class draws uniform
    weights from its own range, scaled by 1/sqrt(effective fan-in); the
    ranges are bounded away from zero so no feature or connection is
    accidentally erased at birth. Defaults were calibrated once against
    the benchmark accuracy bands and then frozen.
    """

    n_features: int
    n_mb: int = 2500
    n_readouts: int = 10
    al_inhibition: float | None = None  # beta; None -> 0.75 / n_features
    al_mb_density: float = 0.15  # rho, fraction of non-zero AL->MB entries
    mb_active_fraction: float = 0.10  # s, fraction of MB units allowed to fire
    hebbian_growth: float = 0.002  # alpha
    hebbian_decay: float = 0.001  # delta, multiplicative decay per presentation
    al_mb_learning_rate: float = 0.0  # slow plasticity of AL->MB (0 = frozen)
    n_timesteps: int = 20
    noise_std: float = 0.01
    al_mode: str = NORMAL_AL
    supervised_boost: float = 1.0  # target home-readout rate during training
    readout_inhibition: float = 1.0  # lateral competition among readouts
    gain_range: tuple = (0.75, 1.25)  # feature->AL input gains
    lateral_range: tuple = (0.5, 1.5)  # AL lateral inhibition weights
    al_mb_range: tuple = (0.5, 1.5)  # AL->MB weights (on the sparse support)
    readout_init_scale: float = 0.01  # shrinks the symmetry-breaking readout init
    training_passes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_features < 1 or self.n_mb < 1 or self.n_readouts < 1:
            raise ConfigError("layer sizes must be positive")
        if not 0.0 < self.al_mb_density <= 1.0:
            raise ConfigError("al_mb_density must lie in (0, 1]")
        if not 0.0 < self.mb_active_fraction < 1.0:
            raise ConfigError("mb_active_fraction must lie in (0, 1)")
        for name in ("hebbian_growth", "al_mb_learning_rate", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.hebbian_decay < 1.0:
            raise ConfigError("hebbian_decay must lie in [0, 1)")
        if self.al_inhibition is not None and self.al_inhibition < 0:
            raise ConfigError("al_inhibition must be >= 0")
        if self.n_timesteps < 1:
            raise ConfigError("n_timesteps must be >= 1")
        if self.al_mode not in (NORMAL_AL, PASSTHROUGH_AL):
            raise ConfigError(f"unknown al_mode {self.al_mode!r}")
        if self.readout_inhibition < 0:
            raise ConfigError("readout_inhibition must be >= 0")
        for name in ("gain_range", "lateral_range", "al_mb_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must satisfy 0 <= low <= high")

    @property
    def beta(self) -> float:
        if self.al_inhibition is not None:
            return self.al_inhibition
        return 0.75 / self.n_features

    @property
    def mb_top_k(self) -> int:
        return int(np.ceil(self.mb_active_fraction * self.n_mb))


@dataclass
class NetworkInstance:
    """A concrete sampled network: connectivity maps plus synaptic weights."""

    template: NetworkTemplate
    input_gains: np.ndarray  # (d,) >= 0, the diagonal feature->AL map
    w_al_lateral: np.ndarray  # (d, d) >= 0, zero diagonal
    w_al_mb: np.ndarray  # (n_mb, d) >= 0, sparse support
    w_mb_readout: np.ndarray  # (n_readouts, n_mb) >= 0


@dataclass
class NetworkResponse:
    """Time-averaged firing rates for one stimulus presentation."""

    al_rates: np.ndarray  # (d,)
    mb_rates: np.ndarray  # (n_mb,), at most ceil(s * n_mb) non-zero
    readout_rates: np.ndarray  # (n_readouts,)


@dataclass
class ReadoutStats:
    """Per-class Gaussian statistics of readout rates on the training set."""

    classes: np.ndarray  # (C,) sorted class ids
    means: np.ndarray  # (C, n_readouts)
    variances: np.ndarray  # (C, n_readouts), floored above zero
    counts: np.ndarray  # (C,)
    variance_floor: float


def generate_instance(template: NetworkTemplate, seed: int | None = None) -> NetworkInstance:
    """Sample a concrete network from a template's weight distributions.

    Draw order is fixed, so one seed pins every weight bit-for-bit.
    """
    rng = np.random.default_rng(template.seed if seed is None else seed)
    d, m = template.n_features, template.n_mb
    gains = rng.uniform(*template.gain_range, size=d)
    lateral = rng.uniform(*template.lateral_range, size=(d, d))
    np.fill_diagonal(lateral, 0.0)
    support = rng.random(size=(m, d)) < template.al_mb_density
    fan_in_mb = max(template.al_mb_density * d, 1.0)
    w_al_mb = rng.uniform(*template.al_mb_range, size=(m, d)) / np.sqrt(fan_in_mb)
    w_al_mb[~support] = 0.0
    fan_in_ro = max(template.mb_active_fraction * m, 1.0)
    w_mb_readout = (
        rng.uniform(0.0, 1.0, size=(template.n_readouts, m))
        * (template.readout_init_scale / np.sqrt(fan_in_ro))
    )
    return NetworkInstance(template, gains, lateral, w_al_mb, w_mb_readout)


# ---------------------------------------------------------------------------
# Forward dynamics
# ---------------------------------------------------------------------------


def _al_rates_batch(
    inst: NetworkInstance, x: np.ndarray, mode: str, rng: np.random.Generator | None
) -> np.ndarray:
    """Time-averaged AL rates for a (B, d) stimulus batch."""
    tpl = inst.template
    drive = np.maximum(x * inst.input_gains, 0.0)
    noisy = rng is not None and tpl.noise_std > 0.0
    if mode == PASSTHROUGH_AL and not noisy:
        return drive
    steps = tpl.n_timesteps
    tail_start = steps // 2
    beta = 0.0 if mode == PASSTHROUGH_AL else tpl.beta
    f = np.zeros_like(drive)
    acc = np.zeros_like(drive)
    for t in range(steps):
        pre = drive - beta * (f @ inst.w_al_lateral.T)
        if noisy:
            pre = pre + rng.normal(0.0, tpl.noise_std, size=pre.shape)
        f = np.maximum(pre, 0.0)
        if t >= tail_start:
            acc += f
    return acc / (steps - tail_start)


def _mb_fire(pre: np.ndarray, k: int) -> np.ndarray:
    """Global inhibition: only the k strongest units per row fire.

    Units tied with the cut-off value stay silent, so at most k fire.
    Winners fire at a saturated unit rate, so the sparse layer emits a
    set-membership code (which conjunctions of inputs were strong) rather
    than re-encoding the drive magnitudes.
    """
    m = pre.shape[-1]
    if k >= m:
        return (pre > 0.0).astype(np.float64)
    theta = np.partition(pre, m - k - 1, axis=-1)[..., m - k - 1 : m - k]
    return (pre > np.maximum(theta, 0.0)).astype(np.float64)


def _readout_compete(drive: np.ndarray, gamma: float) -> np.ndarray:
    """Lateral competition among readouts: each unit is inhibited by the
    mean rate of the others. Implements response contrast (effectively
    signed comparisons) with purely non-negative synapses."""
    n = drive.shape[-1]
    if gamma == 0.0 or n < 2:
        return np.maximum(drive, 0.0)
    total = drive.sum(axis=-1, keepdims=True)
    return np.maximum(drive - gamma * (total - drive) / (n - 1), 0.0)


def _forward_batch(
    inst: NetworkInstance, x: np.ndarray, mode: str, rng=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    al = _al_rates_batch(inst, x, mode, rng)
    mb = _mb_fire(al @ inst.w_al_mb.T, inst.template.mb_top_k)
    readout = _readout_compete(
        mb @ inst.w_mb_readout.T, inst.template.readout_inhibition
    )
    return al, mb, readout


def evolve(
    inst: NetworkInstance,
    x: np.ndarray,
    mode: str | None = None,
    rng: np.random.Generator | None = None,
) -> NetworkResponse:
    """Present one stimulus and return time-averaged firing rates.

    ``mode`` overrides the template's AL mode; pass ``rng`` to enable the
    template's Gaussian rate noise (evaluation paths leave it off so that
    features and predictions are deterministic).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (inst.template.n_features,):
        raise InputError(
            f"stimulus has shape {x.shape}, expected ({inst.template.n_features},)"
        )
    if not np.all(np.isfinite(x)):
        raise InputError("stimulus contains NaN or infinity")
    mode = mode or inst.template.al_mode
    al, mb, readout = _forward_batch(inst, x[None, :], mode, rng)
    return NetworkResponse(al[0], mb[0], readout[0])


# ---------------------------------------------------------------------------
# Hebbian plasticity
# ---------------------------------------------------------------------------


def _hebbian_matrix(w, pre_rates, post_rates, growth, decay):
    """Grow co-active pairs by growth*f_pre*f_post, decay the silent ones."""
    outer = np.outer(post_rates, pre_rates)
    return np.where(outer > 0.0, w + growth * outer, w * (1.0 - decay))


def hebbian_update(
    inst: NetworkInstance, response: NetworkResponse, readout_rates=None
) -> None:
    """Apply one Hebbian step in place.

    MB->readout weights always update; AL->MB weights update only when the
    template's slow learning rate is non-zero (frozen otherwise).
    ``readout_rates`` substitutes the post-synaptic rates for the readout
    update - training uses it to inject the supervised drive.
    """
    tpl = inst.template
    post = response.readout_rates if readout_rates is None else readout_rates
    inst.w_mb_readout = _hebbian_matrix(
        inst.w_mb_readout, response.mb_rates, post, tpl.hebbian_growth, tpl.hebbian_decay
    )
    if tpl.al_mb_learning_rate > 0.0:
        inst.w_al_mb = _hebbian_matrix(
            inst.w_al_mb,
            response.al_rates,
            response.mb_rates,
            tpl.al_mb_learning_rate,
            tpl.hebbian_decay,
        )


def _readout_stats(inst: NetworkInstance, train: LabeledDataset) -> ReadoutStats:
    """Per-class readout statistics with frozen weights and no noise."""
    _, _, readouts = _forward_batch(inst, train.features, inst.template.al_mode)
    classes = train.classes
    means = np.zeros((classes.shape[0], inst.template.n_readouts))
    variances = np.zeros_like(means)
    counts = np.zeros(classes.shape[0], dtype=np.int64)
    for i, c in enumerate(classes):
        rows = readouts[train.labels == c]
        counts[i] = rows.shape[0]
        means[i] = rows.mean(axis=0)
        variances[i] = rows.var(axis=0)
    scale = float(np.abs(means).mean())
    floor = max(
        VARIANCE_FLOOR_REL * scale * scale,
        VARIANCE_FLOOR_GLOBAL * float(readouts.var()),
        VARIANCE_FLOOR_ABS,
    )
    return ReadoutStats(classes, means, np.maximum(variances, floor), counts, floor)


def train(
    inst: NetworkInstance, train_set: LabeledDataset, seed: int | None = None
) -> ReadoutStats:
    """Train in place by one supervised Hebbian pass and return readout stats.

    Samples are shuffled per pass (deterministically by ``seed``, defaulting
    to the template seed). During each update the home-class readout is
    driven at the rate still missing from its target response,
    max(supervised_boost - current rate, 0), while the other readouts stay
    silent. This is an octopamine-like reinforcement carrying a reward
    prediction error: growth is strong while the rewarded readout
    under-predicts its class and tapers off as it saturates, so weights
    converge instead of compounding. (Driving the home readout merely
    *above* the others leaves the all-pairs growth term in a positive
    feedback loop: weights explode and no readout ever specializes.)
    Statistics are collected afterwards with frozen weights and noise off.
    """
    if train_set.n_samples == 0:
        raise InputError("training set is empty")
    tpl = inst.template
    classes = train_set.classes
    if classes.shape[0] > tpl.n_readouts:
        raise InputError(
            f"{classes.shape[0]} classes but only {tpl.n_readouts} readouts"
        )
    readout_of = {int(c): i for i, c in enumerate(classes)}
    rng = np.random.default_rng(tpl.seed if seed is None else seed)
    supervision = np.zeros(tpl.n_readouts)
    for _ in range(tpl.training_passes):
        order = rng.permutation(train_set.n_samples)
        for row in order:
            response = evolve(inst, train_set.features[row], rng=rng)
            home = readout_of[int(train_set.labels[row])]
            supervision[:] = 0.0
            supervision[home] = max(
                tpl.supervised_boost - response.readout_rates[home], 0.0
            )
            hebbian_update(inst, response, readout_rates=supervision)
    return _readout_stats(inst, train_set)


# ---------------------------------------------------------------------------
# Prediction and feature extraction
# ---------------------------------------------------------------------------


def _log_likelihood_scores(stats: ReadoutStats, readouts: np.ndarray) -> np.ndarray:
    """(B, C) Gaussian log-density of readout rows under each class."""
    diff = readouts[:, None, :] - stats.means[None, :, :]
    var = stats.variances[None, :, :]
    return -0.5 * (np.log(2.0 * np.pi * var) + diff * diff / var).sum(axis=2)


def predict(
    inst: NetworkInstance, stats: ReadoutStats, x: np.ndarray
) -> tuple[int, np.ndarray]:
    """Classify one stimulus via readout log-likelihood.

    Returns (class id, per-class score vector); ties break toward the
    lowest class id.
    """
    response = evolve(inst, np.asarray(x, dtype=np.float64))
    scores = _log_likelihood_scores(stats, response.readout_rates[None, :])[0]
    return int(stats.classes[int(np.argmax(scores))]), scores


def predict_batch(inst: NetworkInstance, stats: ReadoutStats, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _, _, readouts = _forward_batch(inst, x, inst.template.al_mode)
    scores = _log_likelihood_scores(stats, readouts)
    return stats.classes[np.argmax(scores, axis=1)]


def extract_features(inst: NetworkInstance, x: np.ndarray) -> np.ndarray:
    """Deterministic readout rates for one stimulus (the generated features)."""
    return evolve(inst, np.asarray(x, dtype=np.float64)).readout_rates


def extract_features_batch(inst: NetworkInstance, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("stimulus batch contains NaN or infinity")
    _, _, readouts = _forward_batch(inst, x, inst.template.al_mode)
    return readouts


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_instance(path, inst: NetworkInstance, stats: ReadoutStats | None = None) -> None:
    """Persist template, weights and (optionally) readout stats to one npz."""
    tpl = inst.template
    arrays = {
        "template_json": np.frombuffer(
            json.dumps(tpl.__dict__, sort_keys=True).encode(), dtype=np.uint8
        ),
        "input_gains": inst.input_gains,
        "w_al_lateral": inst.w_al_lateral,
        "w_al_mb": inst.w_al_mb,
        "w_mb_readout": inst.w_mb_readout,
    }
    if stats is not None:
        arrays.update(
            stats_classes=stats.classes,
            stats_means=stats.means,
            stats_variances=stats.variances,
            stats_counts=stats.counts,
            stats_floor=np.array([stats.variance_floor]),
        )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **arrays)


def load_instance(path) -> tuple[NetworkInstance, ReadoutStats | None]:
    with np.load(path) as data:
        tpl_dict = json.loads(bytes(data["template_json"]).decode())
        tpl_dict["al_inhibition"] = tpl_dict.get("al_inhibition")
        template = NetworkTemplate(**tpl_dict)
        inst = NetworkInstance(
            template,
            data["input_gains"],
            data["w_al_lateral"],
            data["w_al_mb"],
            data["w_mb_readout"],
        )
        stats = None
        if "stats_means" in data:
            stats = ReadoutStats(
                data["stats_classes"],
                data["stats_means"],
                data["stats_variances"],
                data["stats_counts"],
                float(data["stats_floor"][0]),
            )
    return inst, stats

"""Training loop: Adam with a stepped learning-rate decay, atom-count aware
target normalization, periodic validation with early stopping, and MAE
evaluation with a bootstrap percentile estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DataError, NumericalError
from .graphs import MolecularGraph, batch_graphs
from .model import ModelConfig, ModelParams, loss_and_gradients, predict


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    decay_factor: float = 0.96
    decay_every: int = 100_000
    batch_size: int = 32
    max_steps: int = 10_000_000
    eval_every: int = 50_000
    patience_steps: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        for name in ("lr0", "decay_factor", "decay_every", "batch_size",
                     "max_steps", "eval_every", "patience_steps"):
            if getattr(self, name) <= 0 and name != "lr0":
                raise ValueError(f"{name} must be positive")
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if self.eval_every > self.patience_steps:
            raise ValueError("eval_every must not exceed patience_steps")


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate used for gradient step ``step`` (0-based)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return config.lr0 * config.decay_factor ** (step // config.decay_every)


@dataclass(frozen=True)
class NormalizationStats:
    """Target scaling fitted on the training split.

    ``per_atom`` mode (used with a summed readout) divides targets by atom
    count before estimating the mean, so each atom's summed contribution has
    comparable scale; ``plain`` mode is ordinary standardization.
    """

    mu_hat: float
    sigma_hat: float
    mode: str

    def normalize(self, targets, n_atoms) -> np.ndarray:
        t = np.asarray(targets, dtype=np.float64)
        n = np.asarray(n_atoms, dtype=np.float64)
        if self.mode == "per_atom":
            return (t - n * self.mu_hat) / self.sigma_hat
        return (t - self.mu_hat) / self.sigma_hat

    def denormalize(self, predictions, n_atoms) -> np.ndarray:
        p = np.asarray(predictions, dtype=np.float64)
        n = np.asarray(n_atoms, dtype=np.float64)
        if self.mode == "per_atom":
            return p * self.sigma_hat + n * self.mu_hat
        return p * self.sigma_hat + self.mu_hat

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "NormalizationStats":
        return cls(**obj)


def fit_normalization(targets, n_atoms, mode: str) -> NormalizationStats:
    """Estimate target mean/stddev on the training split.

    Uses the divide-by-N convention for the standard deviation in both modes.
    """
    t = np.asarray(targets, dtype=np.float64)
    n = np.asarray(n_atoms, dtype=np.float64)
    if t.ndim != 1 or len(t) < 2:
        raise DataError("need at least 2 targets to fit normalization")
    if mode not in ("per_atom", "plain"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    values = t / n if mode == "per_atom" else t
    mu = float(values.mean())
    sigma = float(values.std())
    if sigma < 1e-12:
        raise DataError("degenerate targets: standard deviation below 1e-12")
    return NormalizationStats(mu, sigma, mode)


def normalization_mode_for(config: ModelConfig) -> str:
    return "per_atom" if config.readout_agg == "sum" else "plain"


class AdamState:
    """First/second moment accumulators plus the bias-correction step count."""

    def __init__(self, params: ModelParams, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.arrays.items()}
        self.v = {name: np.zeros_like(a) for name, a in params.arrays.items()}


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One Adam update, in place. Rejects non-finite gradients by name."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, arr in params.arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class GraphDataset:
    """Graphs paired with raw (unnormalized) targets."""

    graphs: list[MolecularGraph]
    targets: np.ndarray
    ids: list[str] | None = None

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.graphs) != len(self.targets):
            raise DataError("one target per graph required")

    def __len__(self) -> int:
        return len(self.graphs)

    def n_atoms(self) -> np.ndarray:
        return np.array([g.n_nodes for g in self.graphs], dtype=np.float64)


@dataclass
class TrainResult:
    params: ModelParams
    stats: NormalizationStats
    log: list[tuple[int, float, float, float]]
    best_step: int
    best_val_mae: float
    steps_run: int
    aborted: bool = False


def _val_mae(params, config, stats, dataset: GraphDataset, chunk: int = 128) -> float:
    preds = predict_dataset(params, config, dataset, chunk)
    denorm = stats.denormalize(preds, dataset.n_atoms())
    return float(np.abs(denorm - dataset.targets).mean())


def predict_dataset(params: ModelParams, config: ModelConfig,
                    dataset: GraphDataset, chunk: int = 128) -> np.ndarray:
    """Normalized-scale predictions for every graph, evaluated in batches."""
    out = np.empty(len(dataset))
    for start in range(0, len(dataset), chunk):
        graphs = dataset.graphs[start:start + chunk]
        out[start:start + len(graphs)] = predict(batch_graphs(graphs), params, config)
    return out


def train(
    train_set: GraphDataset,
    val_set: GraphDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_hook=None,
) -> TrainResult:
    """Optimize on MSE over normalized targets with periodic validation.

    The best-validation parameters are retained; training stops when
    validation MAE (in raw target units) has not improved for
    ``patience_steps`` gradient steps, at ``max_steps``, or on a non-finite
    loss (abort, keeping the last good parameters).
    """
    stats = fit_normalization(
        train_set.targets, train_set.n_atoms(), normalization_mode_for(model_config)
    )
    norm_targets = stats.normalize(train_set.targets, train_set.n_atoms())
    params = ModelParams.initialize(model_config, train_config.seed)
    adam = AdamState(params)
    rng = np.random.default_rng(train_config.seed)

    best_params = params.copy()
    best_val = math.inf
    best_step = 0
    log: list[tuple[int, float, float, float]] = []
    running: list[float] = []
    step = 0
    aborted = False

    done = False
    while not done:
        for idx in _epoch_batches(rng, len(train_set), train_config.batch_size):
            graph = batch_graphs([train_set.graphs[i] for i in idx])
            lr = lr_at(step, train_config)
            loss, grads, _ = loss_and_gradients(graph, params, model_config, norm_targets[idx])
            if not math.isfinite(loss):
                aborted = True
                done = True
                break
            adam_step(params, grads, adam, lr)
            step += 1
            running.append(loss)
            if step % train_config.eval_every == 0:
                val_mae = _val_mae(params, model_config, stats, val_set)
                row = (step, lr, float(np.mean(running)), val_mae)
                log.append(row)
                running.clear()
                if log_hook is not None:
                    log_hook(row)
                if val_mae < best_val:
                    best_val = val_mae
                    best_step = step
                    best_params = params.copy()
                elif step - best_step >= train_config.patience_steps:
                    done = True
                    break
            if step >= train_config.max_steps:
                done = True
                break
    if math.isinf(best_val):
        # No evaluation happened (max_steps below eval_every): keep the final
        # parameters so short smoke runs still produce a usable checkpoint.
        best_params = params.copy()
        best_step = step
        best_val = _val_mae(params, model_config, stats, val_set) if len(val_set) else math.nan
    return TrainResult(best_params, stats, log, best_step, best_val, step, aborted)


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    stats: NormalizationStats,
    dataset: GraphDataset,
    unit_scale: float = 1.0,
    bootstrap_samples: int = 100_000,
    seed: int = 0,
) -> dict:
    """MAE in (scaled) target units plus a bootstrap 95th percentile of the
    MAE under resampling of the evaluation set with replacement."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds = predict_dataset(params, config, dataset)
    denorm = stats.denormalize(preds, dataset.n_atoms())
    errors = np.abs(denorm - dataset.targets) * unit_scale
    mae = float(errors.mean())
    rng = np.random.default_rng(seed)
    n = len(errors)
    means = np.empty(bootstrap_samples)
    chunk = max(1, int(2e7) // max(n, 1))
    for start in range(0, bootstrap_samples, chunk):
        stop = min(start + chunk, bootstrap_samples)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = errors[idx].mean(axis=1)
    return {
        "mae": mae,
        "bootstrap_95th": float(np.percentile(means, 95.0)),
        "count": n,
    }


def training_log_csv(path, log) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,train_loss,val_mae\n")
        for step, lr, loss, val in log:
            fh.write(f"{step},{lr!r},{loss!r},{val!r}\n")


def edge_update_comparison(
    train_set: GraphDataset,
    val_set: GraphDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds,
) -> dict:
    """Paired runs with and without edge updates under identical seeds.

    Returns per-seed validation MAEs and the number of seeds where the
    edge-update model wins, for the controlled two-model comparison.
    """
    rows = []
    wins = 0
    for seed in seeds:
        tc = TrainConfig(**{**asdict(train_config), "seed": int(seed)})
        with_updates = train(
            train_set, val_set,
            ModelConfig(**{**model_config.to_dict(), "edge_updates": True,
                           "rbf": model_config.rbf}),
            tc,
        )
        without = train(
            train_set, val_set,
            ModelConfig(**{**model_config.to_dict(), "edge_updates": False,
                           "rbf": model_config.rbf}),
            tc,
        )
        rows.append(
            {"seed": int(seed), "val_mae_with": with_updates.best_val_mae,
             "val_mae_without": without.best_val_mae}
        )
        if with_updates.best_val_mae < without.best_val_mae:
            wins += 1
    return {"rows": rows, "wins": wins, "n_seeds": len(rows)}

"""Estimator-style facades over the window pipeline.

Both classes follow the fit/predict/get_params/set_params convention so they
drop into generic model-selection loops: constructor arguments are stored
verbatim, learned state lives in trailing-underscore attributes, and fit
returns self. Inputs are (n, w, 44) windows with (n, 3) targets; pass
`subjects` to fit for a subject-level validation split, otherwise the split
is over windows.
"""
from __future__ import annotations

import numpy as np

from . import schema
from .edmd import EdmdConfig, EdmdModel, fit_dictionary, fit_edmd
from .model import AblationFlags, ArchConfig, NkmModel
from .optim import OptimConfig
from .training import (LossConfig, evaluate_predictions, train)


def check_windows(X, window: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != schema.N_FEATURES:
        raise ValueError(f"expected (n, w, {schema.N_FEATURES}) windows, "
                         f"got {X.shape}")
    if window is not None and X.shape[1] != window:
        raise ValueError(f"expected window width {window}, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("windows contain non-finite entries")
    return X


def check_targets(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_rows, schema.N_TARGETS):
        raise ValueError(f"expected ({n_rows}, {schema.N_TARGETS}) targets, "
                         f"got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite entries")
    return y


class _ParamsMixin:
    _param_names: tuple[str, ...] = ()

    def get_params(self, deep: bool = True) -> dict:
        return {n: getattr(self, n) for n in self._param_names}

    def set_params(self, **kwargs):
        for k, v in kwargs.items():
            if k not in self._param_names:
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self


def _window_val_split(n: int, subjects, val_frac: float, seed: int
                      ) -> np.ndarray:
    """Boolean validation mask, grouped by subject when ids are given."""
    rng = np.random.default_rng(seed)
    if subjects is not None:
        subjects = list(subjects)
        if len(subjects) != n:
            raise ValueError("subjects must align with windows")
        uniq = list(dict.fromkeys(subjects))
        order = rng.permutation(len(uniq))
        n_val = max(1, int(round(val_frac * len(uniq))))
        if n_val >= len(uniq):
            raise ValueError("validation split would consume every subject")
        val_set = {uniq[i] for i in order[:n_val]}
        return np.array([s in val_set for s in subjects])
    n_val = max(1, int(round(val_frac * n)))
    if n_val >= n:
        raise ValueError("validation split would consume every window")
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_val]] = True
    return mask


class NkmForecaster(_ParamsMixin):
    """Learned lifting with attention control; one-visit-ahead scores."""

    _param_names = ("d_z", "n_heads", "window", "dropout", "n_refine_blocks",
                    "n_decoder_blocks", "lambda_koop", "eta", "rho", "lr",
                    "weight_decay", "batch_size", "epochs", "mode",
                    "ablation", "val_frac", "seed")

    def __init__(self, d_z: int = 16, n_heads: int = 4, window: int = 3,
                 dropout: float = 0.1, n_refine_blocks: int = 5,
                 n_decoder_blocks: int = 3, lambda_koop: float = 0.1,
                 eta: float = 0.01, rho: float = 0.95, lr: float = 4e-4,
                 weight_decay: float = 1e-3, batch_size: int = 128,
                 epochs: int = 200, mode: str = "joint",
                 ablation: str = "full", val_frac: float = 0.2,
                 seed: int = 0):
        self.d_z = d_z
        self.n_heads = n_heads
        self.window = window
        self.dropout = dropout
        self.n_refine_blocks = n_refine_blocks
        self.n_decoder_blocks = n_decoder_blocks
        self.lambda_koop = lambda_koop
        self.eta = eta
        self.rho = rho
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.mode = mode
        self.ablation = ablation
        self.val_frac = val_frac
        self.seed = seed

    def _arch(self) -> ArchConfig:
        return ArchConfig(d_z=self.d_z, n_heads=self.n_heads,
                          window=self.window, dropout=self.dropout,
                          n_refine_blocks=self.n_refine_blocks,
                          n_decoder_blocks=self.n_decoder_blocks)

    def fit(self, X, y, subjects=None) -> "NkmForecaster":
        X = check_windows(X, self.window)
        y = check_targets(y, X.shape[0])
        val = _window_val_split(X.shape[0], subjects, self.val_frac, self.seed)
        from .data import Windows
        ids = list(subjects) if subjects is not None \
            else [f"w{i}" for i in range(X.shape[0])]
        starts = np.zeros(X.shape[0], dtype=np.int64)
        tr = Windows(X[~val], y[~val],
                     [s for s, m in zip(ids, val) if not m], starts[~val])
        va = Windows(X[val], y[val],
                     [s for s, m in zip(ids, val) if m], starts[val])
        self.model_ = NkmModel(self._arch(), seed=self.seed,
                               ablation=AblationFlags.from_name(self.ablation))
        result = train(self.model_, tr, va,
                       OptimConfig(lr=self.lr, weight_decay=self.weight_decay,
                                   batch_size=self.batch_size,
                                   epochs=self.epochs),
                       LossConfig(lambda_koop=self.lambda_koop, eta=self.eta,
                                  rho=self.rho),
                       mode=self.mode, seed=self.seed)
        self.history_ = result.history
        self.best_val_ = result.best_val
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ValueError("NkmForecaster is not fitted")
        return self.model_.predict(check_windows(X, self.window))

    def score(self, X, y) -> float:
        """Mean Pearson r across the three scores."""
        X = check_windows(X, self.window)
        y = check_targets(y, X.shape[0])
        return evaluate_predictions(y, self.predict(X),
                                    schema.TARGET_COLUMNS).mean_pearson


class EdmdForecaster(_ParamsMixin):
    """RBF-lifted linear operator fit on in-window visit pairs; the readout
    maps the one-step-advanced lift of the last visit to the targets."""

    _param_names = ("n_centers", "include_identity", "include_constant",
                    "alpha", "readout_alpha", "seed")

    def __init__(self, n_centers: int = 100, include_identity: bool = True,
                 include_constant: bool = True, alpha: float = 0.0,
                 readout_alpha: float = 1e-6, seed: int = 0):
        self.n_centers = n_centers
        self.include_identity = include_identity
        self.include_constant = include_constant
        self.alpha = alpha
        self.readout_alpha = readout_alpha
        self.seed = seed

    def fit(self, X, y, subjects=None) -> "EdmdForecaster":
        X = check_windows(X)
        y = check_targets(y, X.shape[0])
        cfg = EdmdConfig(n_centers=self.n_centers,
                         include_identity=self.include_identity,
                         include_constant=self.include_constant,
                         alpha=self.alpha, readout_alpha=self.readout_alpha,
                         seed=self.seed)
        model = EdmdModel(cfg)
        rows = X.reshape(-1, X.shape[2])
        model.dictionary = fit_dictionary(rows, cfg)
        pre = model.dictionary.lift(X[:, :-1].reshape(-1, X.shape[2]))
        nxt = model.dictionary.lift(X[:, 1:].reshape(-1, X.shape[2]))
        model.K = fit_edmd(pre, nxt, cfg.alpha)
        psi = model.advance(model.dictionary.lift(X[:, -1]), tau=1)
        reg = cfg.readout_alpha * np.eye(psi.shape[1])
        model.readout = np.linalg.solve(psi.T @ psi + reg, psi.T @ y)
        self.model_ = model
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ValueError("EdmdForecaster is not fitted")
        return self.model_.predict(check_windows(X))

    def score(self, X, y) -> float:
        X = check_windows(X)
        y = check_targets(y, X.shape[0])
        return evaluate_predictions(y, self.predict(X),
                                    schema.TARGET_COLUMNS).mean_pearson

"""Classical EDMD baseline: RBF lifting, Gram-matrix solve, ridge readout.

Snapshot pairs are consecutive same-subject visits. The operator solves
    G = (1/m) X^T X,  A = (1/m) Y^T X,  K = A G^+        (alpha = 0)
                                        K = A (G + aI)^-1 (alpha > 0)
in the lifted space, so psi(x') ~= K psi(x). A ridge readout maps a lifted
visit to that visit's three scores; forecasting lifts the last input visit,
advances tau steps, and applies the readout.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import VisitTable, Windows
from .linalg import pinv


@dataclass
class EdmdConfig:
    n_centers: int = 100
    include_identity: bool = True
    include_constant: bool = True
    alpha: float = 0.0            # Gram ridge in the operator solve
    readout_alpha: float = 1e-6   # ridge for the score readout
    seed: int = 0

    def __post_init__(self):
        if self.n_centers < 0:
            raise ValueError("n_centers must be >= 0")
        if self.alpha < 0 or self.readout_alpha < 0:
            raise ValueError("ridge strengths must be >= 0")
        if self.n_centers == 0 and not (self.include_identity
                                        or self.include_constant):
            raise ValueError("dictionary would be empty")


@dataclass
class RbfDictionary:
    centers: np.ndarray          # (n_c, n_features)
    bandwidth: float
    include_identity: bool
    include_constant: bool

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def lifted_dim(self) -> int:
        d = self.centers.shape[0]
        if self.include_identity:
            d += self.centers.shape[1]
        if self.include_constant:
            d += 1
        return d

    @property
    def identity_slice(self) -> slice:
        if not self.include_identity:
            raise ValueError("dictionary has no identity block")
        n_c = self.centers.shape[0]
        return slice(n_c, n_c + self.centers.shape[1])

    def lift(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.centers.shape[1]:
            raise ValueError("rows must match the dictionary's feature width")
        if not np.all(np.isfinite(X)):
            raise ValueError("lift input contains non-finite entries")
        parts = []
        if self.centers.shape[0] > 0:
            d2 = (np.sum(X * X, axis=1)[:, None]
                  + np.sum(self.centers * self.centers, axis=1)[None, :]
                  - 2.0 * X @ self.centers.T)
            np.maximum(d2, 0.0, out=d2)
            parts.append(np.exp(-d2 / (2.0 * self.bandwidth ** 2)))
        if self.include_identity:
            parts.append(X)
        if self.include_constant:
            parts.append(np.ones((X.shape[0], 1)))
        return np.concatenate(parts, axis=1)


def fit_dictionary(X: np.ndarray, cfg: EdmdConfig) -> RbfDictionary:
    """Seeded uniform subsample of rows as centers; median pairwise distance
    as bandwidth (1.0 when fewer than two distinct centers)."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    n_c = min(cfg.n_centers, X.shape[0])
    if n_c > 0:
        idx = np.sort(rng.choice(X.shape[0], size=n_c, replace=False))
        centers = X[idx].copy()
    else:
        centers = np.zeros((0, X.shape[1]))
    bandwidth = 1.0
    if n_c >= 2:
        d2 = (np.sum(centers * centers, axis=1)[:, None]
              + np.sum(centers * centers, axis=1)[None, :]
              - 2.0 * centers @ centers.T)
        iu = np.triu_indices(n_c, k=1)
        med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
        if med > 0.0:
            bandwidth = med
    return RbfDictionary(centers, bandwidth, cfg.include_identity,
                         cfg.include_constant)


def fit_edmd(X_lifted: np.ndarray, Y_lifted: np.ndarray, alpha: float = 0.0
             ) -> np.ndarray:
    """Operator from snapshot matrices with rows psi(x_i), psi(y_i)."""
    X_lifted = np.asarray(X_lifted, dtype=np.float64)
    Y_lifted = np.asarray(Y_lifted, dtype=np.float64)
    if X_lifted.shape != Y_lifted.shape or X_lifted.ndim != 2:
        raise ValueError("snapshot matrices must be matching 2-D arrays")
    m = X_lifted.shape[0]
    if m < 1:
        raise ValueError("need at least one snapshot pair")
    G = X_lifted.T @ X_lifted / m
    A = Y_lifted.T @ X_lifted / m
    if alpha > 0.0:
        return A @ np.linalg.inv(G + alpha * np.eye(G.shape[0]))
    return A @ pinv(G)


def _snapshot_rows(table: VisitTable) -> tuple[np.ndarray, np.ndarray]:
    """Consecutive same-subject visit pairs, visit-sorted (loader order)."""
    xs, ys = [], []
    ids = np.asarray(table.subject_ids)
    for sid in table.unique_subjects():
        rows = np.flatnonzero(ids == sid)
        rows = rows[np.argsort(table.visits[rows], kind="stable")]
        if rows.size >= 2:
            xs.append(table.X[rows[:-1]])
            ys.append(table.X[rows[1:]])
    if not xs:
        raise ValueError("no consecutive visit pairs in table")
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


class EdmdModel:
    """Fit on a preprocessed (finite-valued) visit table; forecast windows."""

    def __init__(self, cfg: EdmdConfig | None = None):
        self.cfg = cfg if cfg is not None else EdmdConfig()
        self.dictionary: RbfDictionary | None = None
        self.K: np.ndarray | None = None
        self.readout: np.ndarray | None = None   # (lifted_dim, 3)

    @property
    def fitted(self) -> bool:
        return self.K is not None

    def _require_fitted(self):
        if not self.fitted:
            raise ValueError("EdmdModel is not fitted")

    def fit(self, table: VisitTable) -> "EdmdModel":
        if not np.all(np.isfinite(table.X)):
            raise ValueError("fit requires imputed (finite) features")
        self.dictionary = fit_dictionary(table.X, self.cfg)
        x_rows, y_rows = _snapshot_rows(table)
        self.K = fit_edmd(self.dictionary.lift(x_rows),
                          self.dictionary.lift(y_rows), self.cfg.alpha)
        keep = np.all(np.isfinite(table.Y), axis=1)
        if not np.any(keep):
            raise ValueError("no rows with observed targets for the readout")
        psi = self.dictionary.lift(table.X[keep])
        Y = table.Y[keep]
        reg = self.cfg.readout_alpha * np.eye(psi.shape[1])
        self.readout = np.linalg.solve(psi.T @ psi + reg, psi.T @ Y)
        return self

    def lift(self, X: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return self.dictionary.lift(X)

    def advance(self, psi: np.ndarray, tau: int = 1) -> np.ndarray:
        """tau applications of the operator to lifted rows."""
        self._require_fitted()
        if tau < 0:
            raise ValueError("tau must be >= 0")
        out = np.asarray(psi, dtype=np.float64)
        for _ in range(tau):
            out = out @ self.K.T
        return out

    def forecast(self, x_last: np.ndarray, tau: int = 1) -> np.ndarray:
        """Targets read out after advancing the lifted last visit tau steps."""
        self._require_fitted()
        psi = self.dictionary.lift(np.atleast_2d(x_last))
        return self.advance(psi, tau) @ self.readout

    def predict(self, X: np.ndarray) -> np.ndarray:
        """(B, w, n_features) windows -> (B, 3) next-visit scores."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError("expected (B, w, n_features) windows")
        return self.forecast(X[:, -1, :], tau=1)

    def predict_windows(self, windows: Windows) -> np.ndarray:
        return self.predict(windows.X)

    def spectral_norm(self) -> float:
        self._require_fitted()
        return float(np.linalg.svd(self.K, compute_uv=False)[0])


# ---- checkpointing (same manifest + raw float64 scheme as the NKM) --------

_EDMD_ARRAYS = ("centers", "K", "readout")


def save_edmd(model: EdmdModel, stem: str | Path) -> None:
    model._require_fitted()
    stem = Path(stem)
    arrays = {"centers": model.dictionary.centers, "K": model.K,
              "readout": model.readout}
    manifest = {
        "format_version": 1,
        "kind": "edmd",
        "config": asdict(model.cfg),
        "bandwidth": model.dictionary.bandwidth,
        "include_identity": model.dictionary.include_identity,
        "include_constant": model.dictionary.include_constant,
        "array_shapes": {k: list(arrays[k].shape) for k in _EDMD_ARRAYS},
    }
    stem.with_suffix(".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    flat = np.concatenate([arrays[k].ravel() for k in _EDMD_ARRAYS])
    flat.astype("<f8").tofile(stem.with_suffix(".bin"))


def load_edmd(stem: str | Path) -> EdmdModel:
    stem = Path(stem)
    mpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not mpath.exists() or not bpath.exists():
        raise FileNotFoundError(f"missing checkpoint file for {stem}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("kind") != "edmd":
        raise ValueError("manifest is not an EDMD checkpoint")
    shapes = {k: tuple(v) for k, v in manifest["array_shapes"].items()}
    flat = np.fromfile(bpath, dtype="<f8")
    want = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != want:
        raise ValueError(f"binary holds {flat.size} values, manifest says {want}")
    model = EdmdModel(EdmdConfig(**manifest["config"]))
    pos = 0
    out = {}
    for k in _EDMD_ARRAYS:
        n = int(np.prod(shapes[k]))
        out[k] = flat[pos:pos + n].reshape(shapes[k]).copy()
        pos += n
    model.dictionary = RbfDictionary(out["centers"], manifest["bandwidth"],
                                     manifest["include_identity"],
                                     manifest["include_constant"])
    model.K = out["K"]
    model.readout = out["readout"]
    return model

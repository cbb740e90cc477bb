"""Composite loss, covariance-form Koopman updates, training loops, metrics.

Loss per batch of windows:
    L = L_pred + lambda * L_koop + R_spec
    L_pred   mean over windows of the squared prediction error
    L_koop   mean over in-window transitions of ||z' - K z - c||^2
    R_spec   eta * max(0, ||K||^2 - rho^2)^2 with a differentiable
             power-iteration norm estimate

Two modes: "joint" puts every parameter under AdamW; "alternating" runs the
AdamW step on everything except K, then moves K along the closed-form
covariance gradient of lambda * L_koop and projects it to ||K||_2 <= rho.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FoldData, VisitTable, Windows, materialize_fold, subject_kfold
from .linalg import pinv, spectral_norm_differentiable
from .model import ABLATION_SETUPS, AblationFlags, ArchConfig, NkmModel
from .optim import AdamW, EarlyStopper, OptimConfig, PlateauScheduler, clip_global_norm
from .tensor import Tensor, add, mul, relu, square, sub, tsum


@dataclass
class LossConfig:
    lambda_koop: float = 0.1
    eta: float = 0.01
    rho: float = 0.95
    power_iters: int = 10
    power_seed: int = 0

    def __post_init__(self):
        if self.lambda_koop < 0 or self.eta < 0:
            raise ValueError("lambda_koop and eta must be >= 0")
        if not (0.0 < self.rho):
            raise ValueError("rho must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")


def composite_loss(model: NkmModel, X: np.ndarray, y: np.ndarray,
                   cfg: LossConfig, train: bool = False,
                   rng: np.random.Generator | None = None):
    """Returns (total Tensor, parts dict, ForwardOut).

    The reported parts satisfy total == (L_pred + lambda*L_koop) + R_spec
    bitwise, in that association order.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != X.shape[0]:
        raise ValueError("targets must be (B, n_targets) aligned with windows")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite entries")
    fwd = model.forward(X, train=train, rng=rng)

    diff = sub(fwd.pred, Tensor(y))
    l_pred = mul(tsum(square(diff)), 1.0 / X.shape[0])

    w = model.arch.window
    B = X.shape[0]
    resid_sq = None
    for t in range(w - 1):
        r = sub(fwd.z_refs[t + 1], model.koopman_step(fwd.z_refs[t], fwd.control))
        s = tsum(square(r))
        resid_sq = s if resid_sq is None else add(resid_sq, s)
    l_koop = mul(resid_sq, 1.0 / (B * (w - 1)))

    eta = 0.0 if model.ablation.no_spectral_reg else cfg.eta
    if eta > 0.0:
        sig = spectral_norm_differentiable(model.K, iters=cfg.power_iters,
                                           seed=cfg.power_seed)
        hinge = relu(sub(square(sig), cfg.rho ** 2))
        r_spec = mul(square(hinge), eta)
    else:
        r_spec = Tensor(0.0)

    total = add(add(l_pred, mul(l_koop, cfg.lambda_koop)), r_spec)
    parts = {"L_pred": float(l_pred.data), "L_koop": float(l_koop.data),
             "R_spec": float(r_spec.data)}
    for name, val in parts.items():
        if not math.isfinite(val):
            raise RuntimeError(f"non-finite loss component {name}")
    return total, parts, fwd


# ---- covariance-form updates ---------------------------------------------

def koopman_covariances(z_refs: list[np.ndarray], control: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack in-window transitions into (C_zz, C_z'z, C_cz), each averaged
    over the M = B*(w-1) pairs."""
    Zt = np.concatenate(z_refs[:-1], axis=0)
    Zn = np.concatenate(z_refs[1:], axis=0)
    Cc = np.tile(control, (len(z_refs) - 1, 1))
    M = Zt.shape[0]
    return Zt.T @ Zt / M, Zn.T @ Zt / M, Cc.T @ Zt / M


def model_covariances(model: NkmModel, X: np.ndarray):
    fwd = model.forward(X)
    return koopman_covariances([z.data for z in fwd.z_refs], fwd.control.data)


def koopman_grad_closed_form(K: np.ndarray, covs, lambda_koop: float) -> np.ndarray:
    """d(lambda * L_koop)/dK = 2 lambda (K C_zz + C_cz - C_z'z)."""
    c_zz, c_nz, c_cz = covs
    return 2.0 * lambda_koop * (K @ c_zz + c_cz - c_nz)


def koopman_fixed_point(covs) -> np.ndarray:
    """K* = (C_z'z - C_cz) C_zz^+, the stationary point of L_koop."""
    c_zz, c_nz, c_cz = covs
    return (c_nz - c_cz) @ pinv(c_zz)


def _safe_koopman_step_size(c_zz: np.ndarray, lambda_koop: float) -> float:
    if lambda_koop <= 0.0:
        return 0.0
    smax = float(np.linalg.eigvalsh((c_zz + c_zz.T) / 2.0)[-1])
    if smax <= 0.0:
        return 0.0
    return 0.5 / (lambda_koop * smax)


# ---- training loop --------------------------------------------------------

@dataclass
class TrainResult:
    model: NkmModel
    history: list[dict]
    best_epoch: int
    best_val: float
    mode: str
    seed: int

    def report(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "best_epoch": self.best_epoch,
                "best_val": self.best_val, "epochs": self.history}


def _val_loss(model: NkmModel, windows: Windows, cfg: LossConfig) -> float:
    total, _, _ = composite_loss(model, windows.X, windows.y, cfg)
    return float(total.data)


def train(model: NkmModel, train_windows: Windows, val_windows: Windows,
          optim_cfg: OptimConfig | None = None, loss_cfg: LossConfig | None = None,
          mode: str = "joint", seed: int = 0, project_final: bool = True
          ) -> TrainResult:
    """Minibatch training with plateau lr decay, early stopping, and
    best-validation parameter restore. Deterministic given (seed, data)."""
    if mode not in ("joint", "alternating"):
        raise ValueError("mode must be 'joint' or 'alternating'")
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("train and val window sets must be non-empty")
    optim_cfg = optim_cfg if optim_cfg is not None else OptimConfig()
    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()

    opt = AdamW(model.params, optim_cfg)
    sched = PlateauScheduler(opt, optim_cfg.plateau_factor, optim_cfg.plateau_patience)
    stopper = EarlyStopper(optim_cfg.early_stop_patience)
    rng = np.random.default_rng(seed)
    n = len(train_windows)
    bs = min(optim_cfg.batch_size, n)
    history: list[dict] = []
    best_params = model.params.copy_values()
    best_val = np.inf
    best_epoch = -1

    for epoch in range(optim_cfg.epochs):
        perm = rng.permutation(n)
        sums = {"L_pred": 0.0, "L_koop": 0.0, "R_spec": 0.0}
        n_batches = 0
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            model.params.zero_grad()
            try:
                total, parts, fwd = composite_loss(
                    model, train_windows.X[idx], train_windows.y[idx],
                    loss_cfg, train=True, rng=rng)
            except RuntimeError as err:
                raise RuntimeError(f"epoch {epoch}: {err}") from None
            total.backward()
            if mode == "alternating":
                model.K.grad = None
            clip_global_norm(model.params, optim_cfg.clip_norm)
            opt.step()
            if mode == "alternating":
                covs = koopman_covariances([z.data for z in fwd.z_refs],
                                           fwd.control.data)
                g = koopman_grad_closed_form(model.K.data, covs,
                                             loss_cfg.lambda_koop)
                model.K.data = model.K.data - _safe_koopman_step_size(
                    covs[0], loss_cfg.lambda_koop) * g
                model.project_spectral(loss_cfg.rho)
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1

        val = _val_loss(model, val_windows, loss_cfg)
        history.append({"epoch": epoch,
                        "L_pred": sums["L_pred"] / n_batches,
                        "L_koop": sums["L_koop"] / n_batches,
                        "R_spec": sums["R_spec"] / n_batches,
                        "val_loss": val, "lr": opt.lr})
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = model.params.copy_values()
        sched.step(val)
        if stopper.update(epoch, val):
            break

    model.params.load_values(best_params)
    if project_final:
        model.project_spectral(loss_cfg.rho)
    return TrainResult(model, history, best_epoch, best_val, mode, seed)


# ---- evaluation -----------------------------------------------------------

def _rank_average_ties(v: np.ndarray) -> np.ndarray:
    idx = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    sv = v[idx]
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[idx[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """(coefficient, degenerate). Constant input reports 0 with the flag set."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        return 0.0, True
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    return float(np.dot(dx, dy) / (sx * sy)), False


def spearman(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    if np.asarray(x).size < 2:
        return 0.0, True
    return pearson(_rank_average_ties(np.asarray(x, dtype=np.float64)),
                   _rank_average_ties(np.asarray(y, dtype=np.float64)))


@dataclass
class EvalMetrics:
    targets: list[str]
    pearson: dict[str, float]
    spearman: dict[str, float]
    mae: dict[str, float]
    rmse: dict[str, float]
    degenerate: dict[str, bool]

    @property
    def mean_pearson(self) -> float:
        return float(np.mean([self.pearson[t] for t in self.targets]))

    @property
    def mean_mae(self) -> float:
        return float(np.mean([self.mae[t] for t in self.targets]))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([self.rmse[t] for t in self.targets]))

    def rows(self, setup: str) -> list[dict]:
        return [{"setup": setup, "target": t,
                 "pearson": self.pearson[t], "spearman": self.spearman[t],
                 "mae": self.mae[t], "rmse": self.rmse[t]}
                for t in self.targets]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(y_true: np.ndarray, y_pred: np.ndarray,
                         targets: list[str]) -> EvalMetrics:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ValueError("y_true and y_pred must be matching (n, n_targets)")
    pe, sp, mae, rmse, dg = {}, {}, {}, {}, {}
    for j, t in enumerate(targets):
        a, b = y_true[:, j], y_pred[:, j]
        r, d1 = pearson(a, b)
        rho, d2 = spearman(a, b)
        pe[t] = r
        sp[t] = rho
        dg[t] = bool(d1 or d2)
        err = b - a
        mae[t] = float(np.mean(np.abs(err)))
        rmse[t] = float(np.sqrt(np.mean(err * err)))
    return EvalMetrics(list(targets), pe, sp, mae, rmse, dg)


def evaluate(model: NkmModel, windows: Windows) -> EvalMetrics:
    from . import schema
    return evaluate_predictions(windows.y, model.predict(windows.X),
                                schema.TARGET_COLUMNS)


# ---- cross-validation and ablations ---------------------------------------

@dataclass
class FoldOutcome:
    fold: int
    metrics: EvalMetrics
    result: TrainResult | None = None


@dataclass
class CvResult:
    setup: str
    folds: list[FoldOutcome]

    def fold_mean_pearson(self) -> list[float]:
        return [f.metrics.mean_pearson for f in self.folds]

    def mean_pearson(self) -> float:
        return float(np.mean(self.fold_mean_pearson()))

    def std_pearson(self) -> float:
        return float(np.std(self.fold_mean_pearson()))

    def rows(self) -> list[dict]:
        out = []
        for f in self.folds:
            for row in f.metrics.rows(self.setup):
                out.append({"fold": f.fold, **row})
        return out


def run_cv(table: VisitTable, arch: ArchConfig | None = None,
           optim_cfg: OptimConfig | None = None, loss_cfg: LossConfig | None = None,
           k: int = 5, seed: int = 0, mode: str = "joint",
           ablation: AblationFlags | None = None, setup_name: str = "full",
           w: int = 3, val_frac: float = 0.2) -> CvResult:
    """Subject-stratified k-fold train/evaluate; fully seeded."""
    arch = arch if arch is not None else ArchConfig()
    folds = subject_kfold(table.unique_subjects(), k=k, seed=seed)
    outcomes: list[FoldOutcome] = []
    for f, test_subjects in enumerate(folds):
        fd: FoldData = materialize_fold(table, test_subjects, seed=seed + f,
                                        w=w, val_frac=val_frac)
        model = NkmModel(arch, seed=seed + f, ablation=ablation)
        res = train(model, fd.train, fd.val, optim_cfg, loss_cfg,
                    mode=mode, seed=seed + f)
        outcomes.append(FoldOutcome(f, evaluate(res.model, fd.test), res))
    return CvResult(setup_name, outcomes)


def run_edmd_cv(table: VisitTable, edmd_cfg=None, k: int = 5, seed: int = 0,
                w: int = 3, val_frac: float = 0.2) -> CvResult:
    """EDMD baseline under the same fold protocol: fit on the preprocessed
    train+val visit table, score the held-out test windows."""
    from . import schema
    from .edmd import EdmdConfig, EdmdModel
    edmd_cfg = edmd_cfg if edmd_cfg is not None else EdmdConfig()
    folds = subject_kfold(table.unique_subjects(), k=k, seed=seed)
    outcomes: list[FoldOutcome] = []
    for f, test_subjects in enumerate(folds):
        fd = materialize_fold(table, test_subjects, seed=seed + f, w=w,
                              val_frac=val_frac)
        fit_table = table.subset_subjects(fd.train_subjects + fd.val_subjects)
        fit_table = fit_table.with_features(
            fd.preprocessor.transform(fit_table.X))
        model = EdmdModel(edmd_cfg).fit(fit_table)
        metrics = evaluate_predictions(fd.test.y,
                                       model.predict_windows(fd.test),
                                       schema.TARGET_COLUMNS)
        outcomes.append(FoldOutcome(f, metrics))
    return CvResult("edmd_rbf", outcomes)


def run_ablation(table: VisitTable, setups: list[str] | None = None,
                 arch: ArchConfig | None = None,
                 optim_cfg: OptimConfig | None = None,
                 loss_cfg: LossConfig | None = None,
                 k: int = 5, seed: int = 0, mode: str = "joint") -> list[CvResult]:
    """One CvResult per setup, same folds and seeds across setups."""
    setups = list(ABLATION_SETUPS) if setups is None else list(setups)
    results = []
    for name in setups:
        flags = AblationFlags.from_name(name)
        results.append(run_cv(table, arch=arch, optim_cfg=optim_cfg,
                              loss_cfg=loss_cfg, k=k, seed=seed, mode=mode,
                              ablation=flags, setup_name=name))
    return results

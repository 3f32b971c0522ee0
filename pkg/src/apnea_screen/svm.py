"""Soft-margin RBF-kernel SVM for per-epoch NOR/APN classification.

Training balances classes by uniformly duplicating the minority rows,
standardizes features to zero mean and unit variance (dropping zero-variance
columns), and solves the dual with an SMO solver. Two interchangeable solver
backends exist: a Cython extension (``apnea_screen._smo``) and a pure-numpy
fallback (``apnea_screen._smo_py``); the compiled one is picked at import
when available.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ApneaScreenError
from .recording_store import APN, NOR

logger = logging.getLogger(__name__)

try:
    from . import _smo as _compiled_backend
except ImportError:  # extension not built: pure-python solver only
    _compiled_backend = None
from . import _smo_py as _python_backend

DEFAULT_TOL = 1e-3
DEFAULT_MAX_UPDATES = 10**6

# Violation level above which a capped run is reported as non-converged.
NO_CONVERGENCE_VIOLATION = 1e-2

MODEL_FORMAT_VERSION = 1


class SingleClassInput(ApneaScreenError):
    pass


class DimensionMismatch(ApneaScreenError):
    pass


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    gamma: Union[float, str] = "auto"

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if isinstance(self.gamma, str):
            if self.gamma != "auto":
                raise ValueError("gamma must be a positive number or 'auto'")
        elif self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class TrainingSet:
    rows: np.ndarray  # standardized, (n, d_kept)
    labels: np.ndarray  # +1 (APN) / -1 (NOR)
    mean: np.ndarray  # per original feature column
    std: np.ndarray
    kept: np.ndarray  # boolean mask over original columns


@dataclass(frozen=True)
class TrainedModel:
    support_vectors: np.ndarray  # standardized rows with alpha > 0
    alphas: np.ndarray  # in (0, C]
    labels: np.ndarray  # +1 / -1 per support vector
    bias: float
    gamma: float
    C: float
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray
    n_features_in: int
    converged: bool
    backend: str
    # Full multiplier vector aligned with the training rows; kept for KKT
    # diagnostics, not serialized.
    train_alphas: np.ndarray | None = None


def available_backends() -> list[str]:
    names = ["python"]
    if _compiled_backend is not None:
        names.insert(0, "compiled")
    return names


def default_backend() -> str:
    return "compiled" if _compiled_backend is not None else "python"


def _get_backend(name: str):
    if name == "auto":
        name = default_backend()
    if name == "compiled":
        if _compiled_backend is None:
            raise ValueError("compiled SMO backend is not available")
        return _compiled_backend
    if name == "python":
        return _python_backend
    raise ValueError(f"unknown backend {name!r}")


def balance_classes(rows: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Duplicate whole passes of the minority class (rows cycled in order)
    until the counts differ by less than one minority-class size; the
    majority class is untouched. Deterministic."""
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int((labels > 0).sum())
    n_neg = int((labels < 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("both NOR and APN examples are required")
    minority = 1.0 if n_pos < n_neg else -1.0
    n_min, n_maj = min(n_pos, n_neg), max(n_pos, n_neg)
    extra_passes = (n_maj - n_min) // n_min
    if extra_passes == 0:
        return rows, labels
    min_rows = rows[labels == minority]
    min_labels = labels[labels == minority]
    rows_out = np.concatenate([rows] + [min_rows] * extra_passes)
    labels_out = np.concatenate([labels] + [min_labels] * extra_passes)
    return rows_out, labels_out


def standardize(rows: np.ndarray, labels: np.ndarray) -> TrainingSet:
    """Build a TrainingSet: per-feature standardization from these rows,
    zero-variance columns dropped (recorded in the ``kept`` mask)."""
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if not np.isfinite(rows).all():
        raise ValueError("training rows contain NaN/Inf")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    kept = std > 0
    if not kept.any():
        raise ValueError("every feature column is constant; nothing to train on")
    dropped = int((~kept).sum())
    if dropped:
        logger.debug("dropping %d zero-variance feature column(s)", dropped)
    scaled = (rows[:, kept] - mean[kept]) / std[kept]
    return TrainingSet(rows=scaled, labels=labels, mean=mean, std=std, kept=kept)


def train(
    tset: TrainingSet,
    C: float = 1.0,
    gamma: Union[float, str] = "auto",
    tol: float = DEFAULT_TOL,
    max_updates: int = DEFAULT_MAX_UPDATES,
    backend: str = "auto",
) -> TrainedModel:
    """Solve the dual on a balanced, standardized training set.

    gamma="auto" resolves to 1/d on standardized features (the usual
    1 / (d * mean feature variance) convention, which is 1/d after
    standardization). A run that hits the update cap with a violation above
    NO_CONVERGENCE_VIOLATION still returns a model, flagged non-converged.
    """
    rows, labels = tset.rows, tset.labels
    n, d = rows.shape
    if n < 2:
        raise SingleClassInput("need at least two training rows")
    if (labels > 0).sum() == 0 or (labels < 0).sum() == 0:
        raise SingleClassInput("both NOR and APN examples are required")
    gamma_value = 1.0 / d if gamma == "auto" else float(gamma)

    impl = _get_backend(backend)
    alpha, bias, updates, violation, converged = impl.solve(
        rows, labels, float(C), gamma_value, float(tol), int(max_updates)
    )
    if not converged and violation > NO_CONVERGENCE_VIOLATION:
        logger.warning(
            "SMO hit the %d-update cap with KKT violation %.3g (tol %.3g); model flagged",
            max_updates,
            violation,
            tol,
        )
    else:
        converged = True

    sv = alpha > 0
    return TrainedModel(
        support_vectors=rows[sv].copy(),
        alphas=alpha[sv].copy(),
        labels=labels[sv].copy(),
        bias=float(bias),
        gamma=gamma_value,
        C=float(C),
        mean=tset.mean.copy(),
        std=tset.std.copy(),
        kept=tset.kept.copy(),
        n_features_in=len(tset.kept),
        converged=bool(converged),
        backend=getattr(impl, "BACKEND_NAME", "python"),
        train_alphas=alpha,
    )


def fit(
    rows: np.ndarray,
    labels: np.ndarray,
    cfg: SvmConfig = SvmConfig(),
    tol: float = DEFAULT_TOL,
    max_updates: int = DEFAULT_MAX_UPDATES,
    backend: str = "auto",
) -> TrainedModel:
    """balance -> standardize -> train, on raw feature rows."""
    rows_b, labels_b = balance_classes(rows, labels)
    tset = standardize(rows_b, labels_b)
    return train(tset, C=cfg.C, gamma=cfg.gamma, tol=tol, max_updates=max_updates, backend=backend)


def _standardize_inputs(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features_in:
        raise DimensionMismatch(
            f"expected {model.n_features_in} features, got {X.shape[1]}"
        )
    kept = model.kept
    return (X[:, kept] - model.mean[kept]) / model.std[kept]


def decision_function(model: TrainedModel, X: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Margins f(x) = sum_i alpha_i y_i K(sv_i, x) + b for raw feature rows."""
    Xs = _standardize_inputs(model, X)
    sv = model.support_vectors
    coef = model.alphas * model.labels
    sv_sq = np.einsum("ij,ij->i", sv, sv)
    out = np.empty(len(Xs))
    for lo in range(0, len(Xs), chunk):
        block = Xs[lo : lo + chunk]
        d2 = sv_sq[None, :] + np.einsum("ij,ij->i", block, block)[:, None] - 2.0 * block @ sv.T
        out[lo : lo + chunk] = np.exp(-model.gamma * d2) @ coef + model.bias
    return out


def predict(model: TrainedModel, features: np.ndarray) -> tuple[str, float]:
    """Classify one raw feature vector; APN iff the margin is positive."""
    margin = float(decision_function(model, np.asarray(features, dtype=np.float64)[None, :])[0])
    return (APN if margin > 0 else NOR, margin)


def kkt_violation(model: TrainedModel, tset: TrainingSet) -> float:
    """Maximum KKT violation of the model over its own training set (the
    rows must be the ones the model was trained on, in order)."""
    if model.train_alphas is None or len(model.train_alphas) != len(tset.rows):
        raise ValueError("model does not carry multipliers for this training set")
    sv = model.support_vectors
    coef = model.alphas * model.labels
    sv_sq = np.einsum("ij,ij->i", sv, sv)
    rows = tset.rows
    d2 = sv_sq[None, :] + np.einsum("ij,ij->i", rows, rows)[:, None] - 2.0 * rows @ sv.T
    f = np.exp(-model.gamma * d2) @ coef + model.bias
    yf = tset.labels * f

    alpha = model.train_alphas
    at_zero = alpha <= 0
    at_c = alpha >= model.C
    free = ~(at_zero | at_c)
    viol = np.zeros(len(rows))
    viol[at_zero] = np.maximum(0.0, 1.0 - yf[at_zero])
    viol[at_c] = np.maximum(0.0, yf[at_c] - 1.0)
    viol[free] = np.abs(yf[free] - 1.0)
    return float(viol.max()) if len(viol) else 0.0


def dual_objective(model: TrainedModel) -> float:
    """Value of the dual objective sum(alpha) - 0.5 a'Qa at the solution."""
    coef = model.alphas * model.labels
    sv = model.support_vectors
    sv_sq = np.einsum("ij,ij->i", sv, sv)
    K = np.exp(-model.gamma * (sv_sq[:, None] + sv_sq[None, :] - 2.0 * sv @ sv.T))
    return float(model.alphas.sum() - 0.5 * coef @ K @ coef)


def model_digest(model: TrainedModel) -> str:
    """Stable hash of everything that defines the trained decision function."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.support_vectors).tobytes())
    h.update(np.ascontiguousarray(model.alphas).tobytes())
    h.update(np.ascontiguousarray(model.labels).tobytes())
    h.update(np.ascontiguousarray(model.mean).tobytes())
    h.update(np.ascontiguousarray(model.std).tobytes())
    h.update(np.ascontiguousarray(model.kept.astype(np.uint8)).tobytes())
    h.update(repr((model.bias, model.gamma, model.C, model.n_features_in)).encode())
    return h.hexdigest()


def save_model(model: TrainedModel, path) -> None:
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "gamma": model.gamma,
        "C": model.C,
        "bias": model.bias,
        "support_vectors": model.support_vectors.tolist(),
        "alphas": model.alphas.tolist(),
        "labels": model.labels.tolist(),
        "standardization": {
            "mean": model.mean.tolist(),
            "std": model.std.tolist(),
            "kept": model.kept.astype(bool).tolist(),
        },
        "n_features_in": model.n_features_in,
        "converged": model.converged,
        "backend": model.backend,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> TrainedModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format {payload.get('format_version')!r}")
    std = payload["standardization"]
    return TrainedModel(
        support_vectors=np.asarray(payload["support_vectors"], dtype=np.float64),
        alphas=np.asarray(payload["alphas"], dtype=np.float64),
        labels=np.asarray(payload["labels"], dtype=np.float64),
        bias=float(payload["bias"]),
        gamma=float(payload["gamma"]),
        C=float(payload["C"]),
        mean=np.asarray(std["mean"], dtype=np.float64),
        std=np.asarray(std["std"], dtype=np.float64),
        kept=np.asarray(std["kept"], dtype=bool),
        n_features_in=int(payload["n_features_in"]),
        converged=bool(payload["converged"]),
        backend=str(payload["backend"]),
    )

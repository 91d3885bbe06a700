"""Post-processing debiasing on a trained model.

INLP: iteratively fit linear probes for the protected attribute on frozen
hidden representations, project their row space out, and refit the final
classifier on the projected representations. Gate-soft: grid-search a prior
over group-specific heads at inference time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DegenerateProbeError, MethodInapplicableError, ShapeError
from .evaluation import dto, evaluate_predictions
from .training import GateModel, gate_soft_logits


# ---------------------------------------------------------------------------
# Linear probes (multinomial logistic regression, full-batch GD)

def fit_softmax_head(H: np.ndarray, labels: np.ndarray, num_classes: int,
                     steps: int = 500, lr: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Zero-initialized multinomial logistic regression; returns (W, b).

    Zero init keeps the class rows of W summing to zero throughout, so for
    binary labels the row space has rank 1 (sound for nullspace removal)."""
    H = np.asarray(H, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n, h = H.shape
    W = np.zeros((num_classes, h))
    b = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels] = 1.0
    for _ in range(steps):
        probs = nn.softmax(H @ W.T + b)
        err = (probs - onehot) / n
        W -= lr * err.T @ H
        b -= lr * err.sum(axis=0)
    return W, b


def fit_linear_probe(H: np.ndarray, g: np.ndarray,
                     steps: int = 500, lr: float = 0.1) -> tuple[np.ndarray, float]:
    """Protected-attribute probe; returns (W [num_groups x h], train accuracy)."""
    g = np.asarray(g, dtype=int)
    groups = np.unique(g)
    if groups.size < 2:
        raise DegenerateProbeError("probe needs at least two groups present")
    num_groups = int(g.max()) + 1
    if H.shape[0] < num_groups:
        raise DegenerateProbeError("fewer instances than groups")
    W, b = fit_softmax_head(H, g, num_groups, steps=steps, lr=lr)
    preds = (H @ W.T + b).argmax(axis=1)
    return W, float(np.mean(preds == g))


def majority_baseline(labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=int)
    return float(np.bincount(labels).max() / labels.size)


# ---------------------------------------------------------------------------
# Nullspace projection

def _orthonormal_rows(W: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt with re-orthogonalization; dependent rows dropped."""
    basis: list[np.ndarray] = []
    for row in np.asarray(W, dtype=float):
        v = row.copy()
        for _ in range(2):  # re-orthogonalize for numerical robustness
            for q in basis:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > tol:
            basis.append(v / norm)
    return np.array(basis) if basis else np.zeros((0, W.shape[1]))


def nullspace_projection(W: np.ndarray) -> np.ndarray:
    """Projection onto the orthogonal complement of rowspace(W)."""
    W = np.asarray(W, dtype=float)
    h = W.shape[1]
    if np.linalg.norm(W) < 1e-12:
        warnings.warn("probe weights are numerically zero; returning identity")
        return np.eye(h)
    B = _orthonormal_rows(W)
    return np.eye(h) - B.T @ B


@dataclass
class Projection:
    P: np.ndarray
    iterations_applied: int
    probe_accuracies: list[float] = field(default_factory=list)


def inlp(H_train: np.ndarray, g_train: np.ndarray, max_iterations: int,
         probe_steps: int = 500, probe_lr: float = 0.1) -> Projection:
    """Iterative nullspace projection over frozen representations.

    Each iteration probes the projected data, records the probe accuracy,
    and removes the probe's row space (accumulated in the original space, so
    the returned P is an exact symmetric idempotent projection)."""
    H_train = np.asarray(H_train, dtype=float)
    h = H_train.shape[1]
    P = np.eye(h)
    rows: list[np.ndarray] = []
    accs: list[float] = []
    for _ in range(max_iterations):
        W, acc = fit_linear_probe(H_train @ P, g_train, steps=probe_steps, lr=probe_lr)
        accs.append(acc)
        if np.linalg.norm(W) < 1e-12:
            break
        rows.extend(W @ P)  # probe directions mapped back to the original space
        B = _orthonormal_rows(np.array(rows))
        P = np.eye(h) - B.T @ B
    return Projection(P=P, iterations_applied=len(accs), probe_accuracies=accs)


def hidden_representations(model, X: np.ndarray) -> np.ndarray:
    net = model.base if isinstance(model, GateModel) else model
    return nn.forward(net, X).hidden


@dataclass
class ProjectedClassifier:
    """Frozen encoder -> projection -> freshly fit linear softmax layer."""

    model: object
    P: np.ndarray
    W: np.ndarray
    b: np.ndarray

    def logits(self, X: np.ndarray) -> np.ndarray:
        H = hidden_representations(self.model, X) @ self.P.T
        return H @ self.W.T + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.logits(X).argmax(axis=1)


def apply_inlp_and_refit(model, P: np.ndarray, train_ds, num_classes: int,
                         steps: int = 500, lr: float = 0.1) -> ProjectedClassifier:
    """Fit a fresh final layer on P-projected hidden states; the original
    model is untouched."""
    H = hidden_representations(model, train_ds.X)
    if P.shape != (H.shape[1], H.shape[1]):
        raise ShapeError(f"projection shape {P.shape} does not match hidden dim {H.shape[1]}")
    W, b = fit_softmax_head(H @ P.T, train_ds.y, num_classes, steps=steps, lr=lr)
    return ProjectedClassifier(model=model, P=P, W=W, b=b)


def save_projection(path, projection: Projection):
    with open(path, "wb") as f:
        np.savez(f, magic=np.array("fairkit-inlp-v1"), P=projection.P,
                 iterations=np.array(projection.iterations_applied),
                 probe_accuracies=np.array(projection.probe_accuracies))


def load_projection(path) -> Projection:
    with np.load(path, allow_pickle=False) as z:
        return Projection(P=z["P"], iterations_applied=int(z["iterations"]),
                          probe_accuracies=[float(a) for a in z["probe_accuracies"]])


# ---------------------------------------------------------------------------
# Gate-soft prior search

@dataclass(frozen=True)
class GatePrior:
    prior: tuple[float, ...]

    def __post_init__(self):
        p = np.array(self.prior)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("prior must be a probability vector")


def _simplex_grid(num_groups: int, resolution: int):
    """All points with coordinates k/(resolution-1) summing to 1."""
    total = resolution - 1

    def rec(remaining, parts):
        if parts == 1:
            yield (remaining,)
            return
        for k in range(remaining + 1):
            for rest in rec(remaining - k, parts - 1):
                yield (k, *rest)

    for combo in rec(total, num_groups):
        yield tuple(k / total for k in combo)


def gate_soft_search(model: GateModel, dev_ds, grid_resolution: int = 11,
                     utopia: tuple[float, float] = (1.0, 1.0)) -> tuple[GatePrior, float]:
    """Grid search over the group simplex minimizing dev DTO; ties broken
    toward the uniform prior. Returns (prior, best DTO)."""
    if not isinstance(model, GateModel) or model.num_groups < 1:
        raise MethodInapplicableError("gate-soft needs a model with group heads")
    if grid_resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    uniform = np.full(model.num_groups, 1.0 / model.num_groups)
    best = None
    for prior in _simplex_grid(model.num_groups, grid_resolution):
        p = np.array(prior)
        preds = gate_soft_logits(model, dev_ds.X, p).argmax(axis=1)
        report = evaluate_predictions(preds, dev_ds.y, dev_ds.g,
                                      dev_ds.num_classes, dev_ds.num_groups)
        d = dto((report.performance, report.fairness), utopia)
        tie_break = float(np.linalg.norm(p - uniform))
        key = (d, tie_break)
        if best is None or key < best[0]:
            best = (key, prior)
    return GatePrior(prior=best[1]), best[0][0]

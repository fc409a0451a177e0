"""Centroid-distance and attention-autoencoder anomaly detectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import InsufficientDataError
from .optim import Adam, TrainConfig, TrainHistory, batches, check_finite, uniform_init
from .tensorio import load_tensors, save_tensors

ATTN_DK = 64
DEFAULT_K = 4
BENIGN, ATTACK = "benign", "attack"


# -- k-means ---------------------------------------------------------------------------------

@dataclass
class CentroidModel:
    centroids: np.ndarray
    seed: int = 0
    inertia: float = 0.0
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def save(self, path: str | Path) -> None:
        save_tensors(path, {"centroids": self.centroids},
                     {"model": "kmeans", "seed": self.seed, "inertia": self.inertia, "n_iter": self.n_iter})

    @classmethod
    def load(cls, path: str | Path) -> "CentroidModel":
        tensors, meta = load_tensors(path)
        return cls(tensors["centroids"], meta.get("seed", 0), meta.get("inertia", 0.0), meta.get("n_iter", 0))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(X), p=d2 / total)
        else:
            idx = rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def fit_kmeans(X: np.ndarray, k: int = DEFAULT_K, seed: int = 0, tol: float = 1e-6,
               max_iter: int = 300) -> CentroidModel:
    """Lloyd iterations from a seeded k-means++ start."""
    X = np.asarray(X, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(X) < k:
        raise ValueError(f"need at least k={k} points, got {len(X)}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        assign = _sq_dists(X, C).argmin(axis=1)
        history.append(float(((X - C[assign]) ** 2).sum()))
        new = C.copy()
        for j in range(k):
            members = X[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift < tol:
            break
    d2 = _sq_dists(X, C)
    inertia = float(d2.min(axis=1).sum())
    history.append(inertia)
    return CentroidModel(C, seed, inertia, n_iter, history)


def cluster_score(model: CentroidModel, z: np.ndarray) -> np.ndarray | float:
    """Distance to the nearest centroid, for one vector or a batch of rows."""
    z = np.asarray(z, dtype=float)
    Z = np.atleast_2d(z)
    if Z.shape[1] != model.centroids.shape[1]:
        raise ValueError("dimension mismatch between scores and centroids")
    out = np.empty(len(Z))
    for start in range(0, len(Z), 2048):
        chunk = Z[start:start + 2048]
        out[start:start + 2048] = np.sqrt(_sq_dists(chunk, model.centroids).min(axis=1))
    return float(out[0]) if z.ndim == 1 else out


# -- PCA -------------------------------------------------------------------------------------

@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # (dims, d), rows orthonormal
    explained: np.ndarray
    mean: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) @ self.components.T


def pca_project(X: np.ndarray, dims: int = 2) -> PCAResult:
    X = np.asarray(X, dtype=float)
    if len(X) < 2:
        raise InsufficientDataError("PCA needs at least two rows")
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / len(X)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    comps = vecs[:, :dims].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = vals.sum()
    explained = vals[:dims] / total if total > 0 else np.zeros(dims)
    return PCAResult(Xc @ comps.T, comps, explained, mean)


# -- attention autoencoder -------------------------------------------------------------------

AE_SHAPES: dict[str, tuple[int, ...]] = {
    "W1": (64, 128), "b1": (64,),
    "W_Q": (64, 64), "W_K": (64, 64), "W_V": (64, 64),
    "W2": (8, 64), "b2": (8,),
    "W3": (64, 8), "b3": (64,),
    "W4": (128, 64), "b4": (128,),
}


@dataclass
class AttentionAutoencoder:
    params: dict[str, np.ndarray]
    attention: str = "as_written"  # or "tokenized" (ablation, forward only)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in AE_SHAPES.items():
            arr = np.asarray(self.params[name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr
        if self.attention not in ("as_written", "tokenized"):
            raise ValueError(f"unknown attention mode {self.attention!r}")

    @classmethod
    def init(cls, seed: int = 0, attention: str = "as_written") -> "AttentionAutoencoder":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in AE_SHAPES.items():
            params[name] = uniform_init(rng, shape) if len(shape) == 2 else np.zeros(shape)
        return cls(params, attention, {"seed": seed})

    @classmethod
    def zeros(cls) -> "AttentionAutoencoder":
        return cls({name: np.zeros(shape) for name, shape in AE_SHAPES.items()})

    def copy(self) -> "AttentionAutoencoder":
        return AttentionAutoencoder({k: v.copy() for k, v in self.params.items()}, self.attention, dict(self.meta))

    def save(self, path: str | Path) -> None:
        save_tensors(path, self.params, {**self.meta, "model": "attention_autoencoder",
                                         "attention": self.attention})

    @classmethod
    def load(cls, path: str | Path) -> "AttentionAutoencoder":
        tensors, meta = load_tensors(path)
        return cls(tensors, meta.get("attention", "as_written"), meta)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def self_attention(h: np.ndarray, W_Q: np.ndarray, W_K: np.ndarray, W_V: np.ndarray,
                   mode: str = "as_written") -> np.ndarray:
    """Single-head attention over one 64-vector (or a batch of rows).

    As written, the score is one scalar per vector, its softmax is exactly 1
    and the output equals ``W_V h``.  ``tokenized`` treats the 64 entries as
    64 one-dimensional tokens instead.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        Q, K, V = (W_Q @ h)[None], (W_K @ h)[None], (W_V @ h)[None]
    else:
        Q, K, V = h @ W_Q.T, h @ W_K.T, h @ W_V.T
    if mode == "as_written":
        alpha = np.sum(Q * K, axis=1, keepdims=True) / np.sqrt(ATTN_DK)
        weight = _softmax(alpha[:, :, None], axis=1)[:, :, 0]  # softmax over a single logit
        out = weight * V
    elif mode == "tokenized":
        scores = Q[:, :, None] * K[:, None, :]
        out = np.einsum("bij,bj->bi", _softmax(scores, axis=2), V)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    return out[0] if h.ndim == 1 else out


def _forward(ae: AttentionAutoencoder, Z: np.ndarray):
    p = ae.params
    a1 = Z @ p["W1"].T + p["b1"]
    h1 = np.maximum(a1, 0.0)
    Q, K = h1 @ p["W_Q"].T, h1 @ p["W_K"].T
    V = h1 @ p["W_V"].T
    if ae.attention == "as_written":
        alpha = np.sum(Q * K, axis=1, keepdims=True) / np.sqrt(ATTN_DK)
        s = _softmax(alpha[:, :, None], axis=1)[:, :, 0]
        attn = s * V
    else:
        s = alpha = None
        attn = self_attention(h1, p["W_Q"], p["W_K"], p["W_V"], "tokenized")
    r = np.maximum(attn, 0.0)
    zenc = r @ p["W2"].T + p["b2"]
    a3 = zenc @ p["W3"].T + p["b3"]
    h3 = np.maximum(a3, 0.0)
    zhat = h3 @ p["W4"].T + p["b4"]
    return zhat, (Z, a1, h1, Q, K, V, s, attn, r, zenc, a3, h3)


def ae_forward(ae: AttentionAutoencoder, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    zhat, _ = _forward(ae, np.atleast_2d(z))
    return zhat[0] if z.ndim == 1 else zhat


def _backward(ae: AttentionAutoencoder, dzhat: np.ndarray, cache) -> dict[str, np.ndarray]:
    if ae.attention != "as_written":
        raise NotImplementedError("gradients are only defined for the as-written attention")
    p = ae.params
    Z, a1, h1, Q, K, V, s, attn, r, zenc, a3, h3 = cache
    g = {"W4": dzhat.T @ h3, "b4": dzhat.sum(axis=0)}
    da3 = (dzhat @ p["W4"]) * (a3 > 0)
    g["W3"], g["b3"] = da3.T @ zenc, da3.sum(axis=0)
    dzenc = da3 @ p["W3"]
    g["W2"], g["b2"] = dzenc.T @ r, dzenc.sum(axis=0)
    dattn = (dzenc @ p["W2"]) * (attn > 0)
    # attn = s * V with s = softmax of one logit; ds/dalpha = s - s^2 = 0
    dV = dattn * s
    ds = np.sum(dattn * V, axis=1, keepdims=True)
    dalpha = ds * (s - s * s)
    dQ = dalpha * K / np.sqrt(ATTN_DK)
    dK = dalpha * Q / np.sqrt(ATTN_DK)
    g["W_V"], g["W_Q"], g["W_K"] = dV.T @ h1, dQ.T @ h1, dK.T @ h1
    dh1 = dV @ p["W_V"] + dQ @ p["W_Q"] + dK @ p["W_K"]
    da1 = dh1 * (a1 > 0)
    g["W1"], g["b1"] = da1.T @ Z, da1.sum(axis=0)
    return g


def reconstruction_error(ae: AttentionAutoencoder, z: np.ndarray) -> np.ndarray | float:
    """||zhat - z||^2 / 128 per input."""
    z = np.asarray(z, dtype=float)
    Z = np.atleast_2d(z)
    zhat, _ = _forward(ae, Z)
    err = np.sum((zhat - Z) ** 2, axis=1) / Z.shape[1]
    return float(err[0]) if z.ndim == 1 else err


def ae_loss_and_grads(ae: AttentionAutoencoder, Z: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean reconstruction error of a batch and its parameter gradients."""
    zhat, cache = _forward(ae, Z)
    diff = zhat - Z
    n, d = Z.shape
    loss = float(np.sum(diff ** 2) / (n * d))
    return loss, _backward(ae, 2.0 * diff / (n * d), cache)


def train_autoencoder(Z: np.ndarray, config: TrainConfig = TrainConfig(),
                      ae: AttentionAutoencoder | None = None) -> tuple[AttentionAutoencoder, TrainHistory]:
    Z = np.asarray(Z, dtype=float)
    if len(Z) == 0:
        raise InsufficientDataError("no benign embeddings to train on")
    ae = ae.copy() if ae is not None else AttentionAutoencoder.init(config.seed)
    opt = Adam(ae.params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed + 1)
    history = TrainHistory()
    for epoch in range(config.epochs):
        total = 0.0
        for b, idx in enumerate(batches(len(Z), config.batch_size, rng)):
            loss, grads = ae_loss_and_grads(ae, Z[idx])
            check_finite("autoencoder", ae.params, loss, epoch, b)
            history.batch_loss.append(loss)
            opt.step(grads)
            total += loss * len(idx)
        check_finite("autoencoder", ae.params, 0.0, epoch, -1)
        history.epoch_loss.append(total / len(Z))
    ae.meta = {**ae.meta, "seed": config.seed, "lr": config.lr, "epochs": config.epochs,
               "batch_size": config.batch_size}
    return ae, history


# -- thresholding ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdModel:
    tau: float
    percentile: float
    count: int
    mean: float
    p50: float
    p95: float
    p99: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def percentile(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics at rank q/100 * (n - 1)."""
    x = np.sort(np.asarray(values, dtype=float))
    if len(x) == 0:
        raise InsufficientDataError("percentile of an empty sample")
    pos = q / 100.0 * (len(x) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(x) - 1)
    return float(x[lo] + (pos - lo) * (x[hi] - x[lo]))


def calibrate_threshold(errors: np.ndarray, q: float = 95.0) -> ThresholdModel:
    errors = np.asarray(errors, dtype=float)
    if len(errors) < 20:
        raise InsufficientDataError(f"threshold calibration needs >= 20 benign errors, got {len(errors)}")
    if not 0 <= q <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    return ThresholdModel(percentile(errors, q), q, len(errors), float(errors.mean()),
                          percentile(errors, 50), percentile(errors, 95), percentile(errors, 99))


def classify(score, tau: float):
    """'attack' iff score > tau; vectorized over arrays."""
    if np.ndim(score) == 0:
        return ATTACK if score > tau else BENIGN
    return np.where(np.asarray(score) > tau, ATTACK, BENIGN)

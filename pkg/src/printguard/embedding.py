"""Sentence encoders, the trainable projection head and contrastive training."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .features import SEPARATOR, sentence_digest
from .optim import Adam, TrainConfig, TrainHistory, batches, check_finite, uniform_init
from .tensorio import load_tensors, save_tensors

EMBED_DIM = 384
PROJ_HIDDEN = 256
PROJ_DIM = 128
COLLAPSE_COSINE = 0.999


class EncoderLookupError(KeyError):
    pass


class UndefinedCosineError(ValueError):
    pass


class CollapseWarning(UserWarning):
    pass


class SentenceEncoder(Protocol):
    dim: int

    def encode(self, sentence: str) -> np.ndarray: ...

    def encode_batch(self, sentences: Sequence[str]) -> np.ndarray: ...


class HashedEncoder:
    """Deterministic feature-hashing encoder producing unit vectors in R^384.

    Each token is hashed to ``nnz`` signed coordinates.  Keys are tokens of
    their own; numeric values become key-scoped tokens on asinh grids at
    several resolutions, split linearly between the two nearest grid points,
    so nearby numbers share most of their mass.  Non-numeric values are
    hashed verbatim.
    """

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM, nnz: int = 8,
                 resolutions: Sequence[float] = (1.0, 0.25, 0.0625)):
        if nnz < 1 or nnz > dim:
            raise ValueError("nnz must lie in [1, dim]")
        self.seed, self.dim, self.nnz = seed, dim, nnz
        self.resolutions = tuple(float(r) for r in resolutions)
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def config(self) -> dict:
        return {"kind": "hashed", "seed": self.seed, "dim": self.dim, "nnz": self.nnz,
                "resolutions": list(self.resolutions)}

    def token(self, token: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(token)
        if hit is not None:
            return hit
        raw = hashlib.blake2b(f"{self.seed}\x1f{token}".encode(), digest_size=4 * self.nnz).digest()
        words = np.frombuffer(raw, dtype="<u4")
        idx = (words % self.dim).astype(np.intp)
        sign = np.where((words >> 31) & 1, -1.0, 1.0)
        self._cache[token] = (idx, sign)
        return idx, sign

    def tokens(self, sentence: str) -> list[tuple[str, float]]:
        """Weighted token list for ``sentence``."""
        out: list[tuple[str, float]] = []
        for part in sentence.split(SEPARATOR):
            key, eq, value = part.partition("=")
            out.append((key, 1.0))
            if not eq:
                continue
            try:
                number = float(value)
            except ValueError:
                number = math.nan
            if not math.isfinite(number):
                out.append((f"{key}={value}", 1.0))
                continue
            u = math.asinh(number)
            for r in self.resolutions:
                g = u / r
                lo = math.floor(g)
                w = g - lo
                out.append((f"{key}@{r:g}:{lo}", 1.0 - w))
                out.append((f"{key}@{r:g}:{lo + 1}", w))
        return out

    def encode(self, sentence: str) -> np.ndarray:
        if not sentence:
            raise ValueError("cannot encode an empty sentence")
        vec = np.zeros(self.dim)
        for tok, weight in self.tokens(sentence):
            if weight == 0.0:
                continue
            idx, sign = self.token(tok)
            np.add.at(vec, idx, weight * sign)
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def encode_batch(self, sentences: Sequence[str]) -> np.ndarray:
        return np.array([self.encode(s) for s in sentences]).reshape(len(sentences), self.dim)


class ExternalEncoder:
    """Precomputed 384-d vectors keyed by sentence digest."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int = EMBED_DIM):
        self.dim = dim
        self.vectors = {}
        for digest, vec in vectors.items():
            arr = np.asarray(vec, dtype=float)
            if arr.shape != (dim,):
                raise ValueError(f"vector for {digest} has shape {arr.shape}, expected ({dim},)")
            self.vectors[digest] = arr

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ExternalEncoder":
        vectors = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                obj = json.loads(line)
                vectors[obj["digest"]] = obj["vector"]
        return cls(vectors)

    def config(self) -> dict:
        return {"kind": "external", "dim": self.dim, "count": len(self.vectors)}

    def encode(self, sentence: str) -> np.ndarray:
        if not sentence:
            raise ValueError("cannot encode an empty sentence")
        digest = sentence_digest(sentence)
        try:
            return self.vectors[digest].copy()
        except KeyError:
            raise EncoderLookupError(f"no external vector for sentence digest {digest}") from None

    def encode_batch(self, sentences: Sequence[str]) -> np.ndarray:
        return np.array([self.encode(s) for s in sentences]).reshape(len(sentences), self.dim)


def encode(encoder: SentenceEncoder, sentence: str) -> np.ndarray:
    return encoder.encode(sentence)


# -- corruption ---------------------------------------------------------------------------

SYNONYMS: dict[str, str] = {
    "extruder": "toolhead",
    "bed": "heatbed",
    "chamber": "enclosure",
    "mcu": "controller",
    "print": "job",
    "buffer": "queue",
    "gcode": "command",
    "sys": "host",
    "cpu": "processor",
    "mem": "memory",
    "bytes": "octets",
    "send": "transmit",
    "receive": "rx",
    "rtt": "roundtrip",
    "rto": "timeout",
    "flow": "feed",
    "sd": "card",
    "temp": "temperature",
    "pwm": "duty",
}


@dataclass(frozen=True)
class CorruptionPolicy:
    key_swaps: int = 1
    value_rate: float = 0.1
    jitter: float = 0.05

    def __post_init__(self):
        if self.key_swaps < 0 or not 0 <= self.value_rate <= 1 or self.jitter < 0:
            raise ValueError("invalid corruption policy")


def synonym(key: str) -> str | None:
    for word, replacement in SYNONYMS.items():
        if word in key:
            return key.replace(word, replacement, 1)
    return None


def _seed_words(seed: int, sentence: str) -> list[int]:
    digest = hashlib.sha256(sentence.encode()).digest()
    return [seed & 0xFFFFFFFF, *np.frombuffer(digest[:16], dtype="<u4").tolist()]


def corrupt(sentence: str, seed: int, policy: CorruptionPolicy = CorruptionPolicy()) -> str:
    """Domain-aware perturbation: synonym key swaps and small value jitter."""
    rng = np.random.default_rng(_seed_words(seed, sentence))
    pairs = [part.partition("=") for part in sentence.split(SEPARATOR)]
    keys = [k for k, _, _ in pairs]
    values = [v for _, _, v in pairs]
    swappable = [i for i, k in enumerate(keys) if synonym(k) is not None]
    changed = False

    n_swaps = min(policy.key_swaps, len(swappable))
    for i in rng.choice(swappable, size=n_swaps, replace=False) if n_swaps else []:
        keys[int(i)] = synonym(keys[int(i)])
        changed = True

    def jitter(i: int) -> bool:
        text = values[i]
        try:
            number = float(text)
        except ValueError:
            return False
        decimals = len(text.split(".")[1]) if "." in text else 0
        factor = 1.0 + rng.uniform(-policy.jitter, policy.jitter)
        new = f"{number * factor:.{decimals}f}"
        if new != text:
            values[i] = new
            return True
        return False

    for i in range(len(values)):
        if pairs[i][1] and rng.random() < policy.value_rate:
            changed |= jitter(i)

    if not changed:
        remaining = [i for i in swappable if synonym(keys[i]) is not None and keys[i] == pairs[i][0]]
        if remaining:
            i = int(rng.choice(remaining))
            keys[i] = synonym(keys[i])
        else:
            # no synonym available: bump the last digit of one value
            numeric = [i for i in range(len(values)) if pairs[i][1] and values[i]]
            if not numeric:
                raise ValueError("sentence offers nothing to corrupt")
            i = int(rng.choice(numeric))
            values[i] = values[i][:-1] + str((int(values[i][-1]) + 1) % 10) \
                if values[i][-1].isdigit() else values[i] + "0"
    return SEPARATOR.join(f"{k}{eq}{v}" for k, (_, eq, _), v in zip(keys, pairs, values))


# -- projection head ------------------------------------------------------------------------

@dataclass
class ProjectionHead:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    meta: dict = field(default_factory=dict)

    SHAPES = {"W1": (PROJ_HIDDEN, EMBED_DIM), "b1": (PROJ_HIDDEN,),
              "W2": (PROJ_DIM, PROJ_HIDDEN), "b2": (PROJ_DIM,)}

    def __post_init__(self):
        for name, shape in self.SHAPES.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @classmethod
    def init(cls, seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        return cls(uniform_init(rng, (PROJ_HIDDEN, EMBED_DIM)), np.zeros(PROJ_HIDDEN),
                   uniform_init(rng, (PROJ_DIM, PROJ_HIDDEN)), np.zeros(PROJ_DIM), {"seed": seed})

    @classmethod
    def zeros(cls) -> "ProjectionHead":
        return cls(*(np.zeros(s) for s in cls.SHAPES.values()))

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(*(p.copy() for p in self.params().values()), dict(self.meta))

    def forward(self, H: np.ndarray) -> tuple[np.ndarray, tuple]:
        A = H @ self.W1.T + self.b1
        R = np.maximum(A, 0.0)
        Z = R @ self.W2.T + self.b2
        return Z, (H, A, R)

    def backward(self, dZ: np.ndarray, cache: tuple) -> dict[str, np.ndarray]:
        H, A, R = cache
        dR = dZ @ self.W2
        dA = dR * (A > 0)
        return {"W1": dA.T @ H, "b1": dA.sum(axis=0), "W2": dZ.T @ R, "b2": dZ.sum(axis=0)}

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        save_tensors(path, self.params(), {**self.meta, **(meta or {}), "model": "projection_head"})

    @classmethod
    def load(cls, path: str | Path) -> "ProjectionHead":
        tensors, meta = load_tensors(path)
        return cls(tensors["W1"], tensors["b1"], tensors["W2"], tensors["b2"], meta)


def project(head: ProjectionHead, h: np.ndarray) -> np.ndarray:
    """z = W2 relu(W1 h + b1) + b2 for one vector or a batch of rows."""
    h = np.asarray(h, dtype=float)
    z, _ = head.forward(np.atleast_2d(h))
    return z[0] if h.ndim == 1 else z


def contrastive_loss(z: np.ndarray, zp: np.ndarray) -> float:
    """1 - cos(z, z'); a single zero vector counts as cosine 0."""
    z, zp = np.asarray(z, dtype=float), np.asarray(zp, dtype=float)
    na, nb = np.linalg.norm(z), np.linalg.norm(zp)
    if na == 0 and nb == 0:
        raise UndefinedCosineError("cosine undefined for two zero vectors")
    if na == 0 or nb == 0:
        return 1.0
    cos = float(np.dot(z, zp) / (na * nb))
    return 1.0 - min(1.0, max(-1.0, cos))


def cosine_loss_grad(Z: np.ndarray, Zp: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean of 1 - cos over rows and its gradient w.r.t. both inputs."""
    na = np.linalg.norm(Z, axis=1, keepdims=True)
    nb = np.linalg.norm(Zp, axis=1, keepdims=True)
    if ((na == 0) & (nb == 0)).any():
        raise UndefinedCosineError("cosine undefined for two zero vectors")
    safe_a = np.where(na > 0, na, 1.0)
    safe_b = np.where(nb > 0, nb, 1.0)
    live = (na > 0) & (nb > 0)
    cos = np.where(live, np.sum(Z * Zp, axis=1, keepdims=True) / (safe_a * safe_b), 0.0)
    n = len(Z)
    loss = float(np.mean(1.0 - cos))
    dZ = -(Zp / (safe_a * safe_b) - cos * Z / safe_a ** 2) / n
    dZp = -(Z / (safe_a * safe_b) - cos * Zp / safe_b ** 2) / n
    return loss, np.where(live, dZ, 0.0), np.where(live, dZp, 0.0)


def pair_loss_and_grads(head: ProjectionHead, H: np.ndarray, Hc: np.ndarray):
    """Batch loss of (clean, corrupted) pairs through the shared head."""
    Z, cache = head.forward(H)
    Zc, cache_c = head.forward(Hc)
    loss, dZ, dZc = cosine_loss_grad(Z, Zc)
    g1 = head.backward(dZ, cache)
    g2 = head.backward(dZc, cache_c)
    grads = {k: g1[k] + g2[k] for k in g1}
    return loss, grads, Z


def mean_pairwise_cosine(Z: np.ndarray) -> float:
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    U = Z / np.where(norms > 0, norms, 1.0)
    n = len(U)
    if n < 2:
        return 1.0
    G = U @ U.T
    return float((G.sum() - np.trace(G)) / (n * (n - 1)))


def corrupted_pairs(sentences: Sequence[str], encoder: SentenceEncoder, seed: int,
                    policy: CorruptionPolicy = CorruptionPolicy()) -> tuple[np.ndarray, np.ndarray]:
    """Encodings of every sentence and of one fixed corrupted view per sentence."""
    clean = encoder.encode_batch(sentences)
    views = [corrupt(s, seed + i, policy) for i, s in enumerate(sentences)]
    return clean, encoder.encode_batch(views)


def train_projection(sentences: Sequence[str], encoder: SentenceEncoder,
                     config: TrainConfig = TrainConfig(),
                     policy: CorruptionPolicy = CorruptionPolicy(),
                     head: ProjectionHead | None = None,
                     pairs: tuple[np.ndarray, np.ndarray] | None = None,
                     ) -> tuple[ProjectionHead, TrainHistory]:
    """Contrastive training of the projection head on benign sentences only."""
    if not len(sentences) and pairs is None:
        raise ValueError("no training sentences")
    H, Hc = pairs if pairs is not None else corrupted_pairs(sentences, encoder, config.seed, policy)
    head = head.copy() if head is not None else ProjectionHead.init(config.seed)
    params = head.params()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed + 1)
    history = TrainHistory()
    for epoch in range(config.epochs):
        losses = []
        collapsed = False
        for b, idx in enumerate(batches(len(H), config.batch_size, rng)):
            loss, grads, Z = pair_loss_and_grads(head, H[idx], Hc[idx])
            check_finite("projection head", params, loss, epoch, b)
            history.batch_loss.append(loss)
            history.batch_variance.append(float(Z.var(axis=0).mean()))
            if len(idx) > 1 and mean_pairwise_cosine(Z) > COLLAPSE_COSINE:
                collapsed = True
            opt.step(grads)
            losses.append(loss * len(idx))
        check_finite("projection head", params, 0.0, epoch, -1)
        history.epoch_loss.append(float(sum(losses) / len(H)))
        if collapsed:
            msg = f"epoch {epoch}: mean pairwise cosine above {COLLAPSE_COSINE}; embeddings may be collapsing"
            history.warnings.append(msg)
            warnings.warn(msg, CollapseWarning, stacklevel=2)
    head.meta = {**head.meta, "seed": config.seed, "lr": config.lr, "epochs": config.epochs,
                 "batch_size": config.batch_size}
    return head, history

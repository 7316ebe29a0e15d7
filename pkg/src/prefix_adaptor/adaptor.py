"""Residual one-hidden-layer MLP applied on top of frozen embeddings.

The adapted embedding is ``x + W2 @ act(W1 @ x + b1) + b2``. The output layer
starts at exactly zero so a fresh adaptor is the identity map.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, FormatError

WEIGHTS_VERSION = 1
ACTIVATIONS = ("tanh", "identity")


@dataclass
class MlpAdaptor:
    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (d, h)
    b2: np.ndarray  # (d,)
    activation: str = "tanh"

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise FormatError(f"unknown activation {self.activation!r}")
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (d, h) or self.b2.shape != (d,):
            raise DimMismatch(
                f"inconsistent parameter shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )
        for name, p in self.params().items():
            if not np.all(np.isfinite(p)):
                raise FormatError(f"non-finite values in {name}")

    @property
    def dim(self) -> int:
        return int(self.w1.shape[1])

    @property
    def hidden_dim(self) -> int:
        return int(self.w1.shape[0])

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "MlpAdaptor":
        return MlpAdaptor(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.activation)

    def __call__(self, x):
        return adapt(self, x)


def init_adaptor(d: int, hidden_dim: int | None = None, seed: int = 0, activation: str = "tanh") -> MlpAdaptor:
    """Fresh adaptor: uniform(-1/sqrt(d), 1/sqrt(d)) first layer, zero output layer."""
    if d < 1:
        raise ValueError("d must be positive")
    h = d if hidden_dim is None else hidden_dim
    if h < 1:
        raise ValueError("hidden_dim must be positive")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    w1 = rng.uniform(-scale, scale, size=(h, d))
    b1 = rng.uniform(-scale, scale, size=h)
    return MlpAdaptor(w1, b1, np.zeros((d, h)), np.zeros(d), activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else z


def _act_grad(hidden: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the activation output
    return 1.0 - hidden * hidden if kind == "tanh" else np.ones_like(hidden)


def _check_input(f: MlpAdaptor, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != f.dim:
        raise DimMismatch(f"adaptor expects dimension {f.dim}, got shape {x.shape}")
    return x2, single


def adapt(f: MlpAdaptor, x) -> np.ndarray:
    """Apply the adaptor to one vector or to each row of a batch (float64 result)."""
    x2, single = _check_input(f, x)
    hidden = _act(x2 @ f.w1.T + f.b1, f.activation)
    out = x2 + (hidden @ f.w2.T + f.b2)
    return out[0] if single else out


def adapt_backward(f: MlpAdaptor, x, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode gradients through ``adapt``.

    ``upstream`` is dLoss/d(adapted output) with the same shape as ``x``.
    Gradients are summed over batch rows. Returns ``(param_grads, grad_x)``
    where ``grad_x`` includes the identity term of the skip connection.
    """
    x2, single = _check_input(f, x)
    g = np.asarray(upstream, dtype=np.float64)
    g2 = g[None, :] if g.ndim == 1 else g
    if g2.shape != x2.shape:
        raise DimMismatch(f"upstream shape {g.shape} does not match input {x2.shape}")
    hidden = _act(x2 @ f.w1.T + f.b1, f.activation)
    grad_w2 = g2.T @ hidden
    grad_b2 = g2.sum(axis=0)
    dz = (g2 @ f.w2) * _act_grad(hidden, f.activation)
    grad_w1 = dz.T @ x2
    grad_b1 = dz.sum(axis=0)
    grad_x = g2 + dz @ f.w1
    grads = {"w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2}
    return grads, (grad_x[0] if single else grad_x)


def weights_to_dict(f: MlpAdaptor) -> dict:
    return {
        "version": WEIGHTS_VERSION,
        "d": f.dim,
        "h": f.hidden_dim,
        "activation": f.activation,
        "w1": f.w1.tolist(),
        "b1": f.b1.tolist(),
        "w2": f.w2.tolist(),
        "b2": f.b2.tolist(),
    }


def save_weights(f: MlpAdaptor, path: str | os.PathLike) -> None:
    # float repr round-trips float64 exactly, so reloads are bit-identical
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(weights_to_dict(f), fh, separators=(",", ":"))
        fh.write("\n")


def load_weights(path: str | os.PathLike, expected_dim: int | None = None) -> MlpAdaptor:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise FormatError(f"{path}: empty weight file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    if doc.get("version") != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weight file version {doc.get('version')!r}")
    try:
        d, h = int(doc["d"]), int(doc["h"])
        arrays = {k: np.asarray(doc[k], dtype=np.float64) for k in ("w1", "b1", "w2", "b2")}
        activation = doc["activation"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed field ({exc})") from None
    if arrays["w1"].shape != (h, d):
        raise DimMismatch(f"{path}: w1 has shape {arrays['w1'].shape}, header says ({h}, {d})")
    if expected_dim is not None and d != expected_dim:
        raise DimMismatch(f"{path}: adaptor dimension {d}, expected {expected_dim}")
    return MlpAdaptor(activation=activation, **arrays)

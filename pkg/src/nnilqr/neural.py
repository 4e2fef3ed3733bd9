"""Learned one-step dynamics: a whitened 2x64 ReLU network trained by MSE.

The network maps ``(x_t, u_t) -> x_{t+1}``. Inputs and outputs are both
whitened with statistics from the training split; forward passes and
Jacobians are computed in original units.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plants import DynamicsModel

log = logging.getLogger(__name__)

HIDDEN = 64
MODEL_FORMAT = "nnilqr.mlp"
MODEL_VERSION = 1

PLATFORM_CHANNELS = {
    "gem": (("v", "phi_dot"), ("pedal", "brake", "phi_dot_cmd"), 1.0 / 30.0),
    "warthog": (("v", "omega"), ("v_cmd", "omega_cmd"), 1.0 / 20.0),
}


@dataclass(frozen=True)
class Whitener:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, floor: float = 1e-8) -> "Whitener":
        data = np.asarray(data, dtype=float)
        return cls(mean=data.mean(axis=0), std=np.maximum(data.std(axis=0), floor))

    def transform(self, data):
        return (data - self.mean) / self.std

    def inverse(self, data):
        return data * self.std + self.mean


@dataclass
class MlpModel(DynamicsModel):
    """Two hidden ReLU layers of width 64 with linear output.

    Weight matrices are stored as ``(fan_out, fan_in)``.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    input_whitener: Whitener
    output_whitener: Whitener
    n: int
    m: int
    dt: float = 1.0
    platform: str = ""

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

    @classmethod
    def init(
        cls,
        n: int,
        m: int,
        rng: np.random.Generator,
        input_whitener: Whitener | None = None,
        output_whitener: Whitener | None = None,
        dt: float = 1.0,
        platform: str = "",
    ) -> "MlpModel":
        """He-initialized network; whiteners default to the identity."""
        d = n + m
        sizes = [d, HIDDEN, HIDDEN, n]
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            Ws.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(
            Ws[0], bs[0], Ws[1], bs[1], Ws[2], bs[2],
            input_whitener or Whitener(np.zeros(d), np.ones(d)),
            output_whitener or Whitener(np.zeros(n), np.ones(n)),
            n=n, m=m, dt=dt, platform=platform,
        )

    @property
    def layer_sizes(self) -> list[int]:
        return [self.W1.shape[1], self.W1.shape[0], self.W2.shape[0], self.W3.shape[0]]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "MlpModel":
        return MlpModel(
            *(getattr(self, k).copy() for k in self.PARAM_NAMES),
            self.input_whitener, self.output_whitener,
            n=self.n, m=self.m, dt=self.dt, platform=self.platform,
        )

    def is_finite(self) -> bool:
        arrays = list(self.params().values()) + [
            self.input_whitener.mean, self.input_whitener.std,
            self.output_whitener.mean, self.output_whitener.std,
        ]
        return all(np.all(np.isfinite(a)) for a in arrays)

    # -- evaluation -----------------------------------------------------------

    def _check(self, x, u):
        if x.shape[-1] != self.n or u.shape[-1] != self.m:
            raise ValueError(
                f"expected state dim {self.n} and control dim {self.m}, got {x.shape[-1]} and {u.shape[-1]}"
            )

    def _hidden(self, z):
        """Whitened input batch -> (pre-activations, activations) of both hidden layers."""
        z1 = z @ self.W1.T + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.W2.T + self.b2
        h2 = np.maximum(z2, 0.0)
        return z1, h1, z2, h2

    def predict(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Batched unwhitened prediction of the next state."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        self._check(X, U)
        z = self.input_whitener.transform(np.hstack([X, U]))
        h2 = self._hidden(z)[3]
        return self.output_whitener.inverse(h2 @ self.W3.T + self.b3)

    def forward(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        self._check(x, u)
        iw, ow = self.input_whitener, self.output_whitener
        z = (np.concatenate((x, u)) - iw.mean) / iw.std
        h1 = self.W1 @ z + self.b1
        np.maximum(h1, 0.0, out=h1)
        h2 = self.W2 @ h1 + self.b2
        np.maximum(h2, 0.0, out=h2)
        return (self.W3 @ h2 + self.b3) * ow.std + ow.mean

    def step(self, x, u, t=0):
        return self.forward(x, u)

    def jacobians_batch(self, X: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Analytic Jacobians for a batch: shapes (B, n, n) and (B, n, m).

        The ReLU derivative at exactly zero is taken as 0.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        self._check(X, U)
        z = self.input_whitener.transform(np.hstack([X, U]))
        z1, _, z2, _ = self._hidden(z)
        g1 = (z1 > 0.0).astype(float)
        g2 = (z2 > 0.0).astype(float)
        # J = diag(s_out) W3 diag(g2) W2 diag(g1) W1 diag(1/s_in)
        A = (self.W3 * self.output_whitener.std[:, None])[None, :, :] * g2[:, None, :]
        A = A @ self.W2
        A = A * g1[:, None, :]
        J = A @ (self.W1 / self.input_whitener.std[None, :])
        return J[:, :, : self.n], J[:, :, self.n :]

    def jacobians(self, x, u, t=0):
        fx, fu = self.jacobians_batch(x, u)
        return fx[0], fu[0]

    def linearize(self, X, U):
        return self.jacobians_batch(np.asarray(X)[: len(U)], U)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "platform": self.platform,
            "dt": self.dt,
            "n": self.n,
            "m": self.m,
            "layer_sizes": self.layer_sizes,
            "activation": "relu",
            "whiten_outputs": True,
            "weights": [self.W1.tolist(), self.W2.tolist(), self.W3.tolist()],
            "biases": [self.b1.tolist(), self.b2.tolist(), self.b3.tolist()],
            "input_whitener": {"mean": self.input_whitener.mean.tolist(), "std": self.input_whitener.std.tolist()},
            "output_whitener": {"mean": self.output_whitener.mean.tolist(), "std": self.output_whitener.std.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} model file")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        W = [np.asarray(w, dtype=float) for w in d["weights"]]
        b = [np.asarray(v, dtype=float) for v in d["biases"]]
        n, m = int(d["n"]), int(d["m"])
        if [W[0].shape[1], W[0].shape[0], W[1].shape[0], W[2].shape[0]] != [n + m, HIDDEN, HIDDEN, n]:
            raise ValueError(f"unexpected layer sizes {d.get('layer_sizes')}")
        iw, ow = d["input_whitener"], d["output_whitener"]
        return cls(
            W[0], b[0], W[1], b[1], W[2], b[2],
            Whitener(np.asarray(iw["mean"], float), np.asarray(iw["std"], float)),
            Whitener(np.asarray(ow["mean"], float), np.asarray(ow["std"], float)),
            n=n, m=m, dt=float(d["dt"]), platform=d.get("platform", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def mlp_forward(model: MlpModel, x, u) -> np.ndarray:
    return model.forward(x, u)


def mlp_jacobians(model: MlpModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    return model.jacobians(x, u)


def mse_loss(model: MlpModel, Zin: np.ndarray, Tout: np.ndarray) -> float:
    """Mean squared error in whitened output units for whitened inputs ``Zin``."""
    h2 = model._hidden(Zin)[3]
    r = h2 @ model.W3.T + model.b3 - Tout
    return float(np.mean(r * r))


def mlp_backward(model: MlpModel, Zin: np.ndarray, Tout: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients of :func:`mse_loss` on one batch.

    ``Zin`` and ``Tout`` are already whitened, as during training.
    """
    B = Zin.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    z1, h1, z2, h2 = model._hidden(Zin)
    r = h2 @ model.W3.T + model.b3 - Tout
    loss = float(np.mean(r * r))
    d_out = 2.0 * r / r.size
    grads = {"W3": d_out.T @ h2, "b3": d_out.sum(axis=0)}
    d2 = (d_out @ model.W3) * (z2 > 0.0)
    grads["W2"] = d2.T @ h1
    grads["b2"] = d2.sum(axis=0)
    d1 = (d2 @ model.W2) * (z1 > 0.0)
    grads["W1"] = d1.T @ Zin
    grads["b1"] = d1.sum(axis=0)
    return loss, grads


# -- datasets ---------------------------------------------------------------


@dataclass
class TransitionDataset:
    """Rows of ``(x_t, u_t, x_{t+1})``; ``episode_id`` marks contiguous recordings."""

    X: np.ndarray
    U: np.ndarray
    X_next: np.ndarray
    episode_id: np.ndarray
    platform: str
    dt: float

    def __post_init__(self) -> None:
        for name in ("X", "U", "X_next"):
            a = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, a if a.ndim == 2 else a.reshape(len(a), -1))
        self.episode_id = np.asarray(self.episode_id, dtype=int)
        rows = {len(self.X), len(self.U), len(self.X_next), len(self.episode_id)}
        if len(rows) != 1:
            raise ValueError("dataset columns have different lengths")
        if self.X.shape[1] != self.X_next.shape[1]:
            raise ValueError("state and next-state dimensions differ")
        for name in ("X", "U", "X_next"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"dataset column group {name} contains non-finite values")

    def __len__(self) -> int:
        return len(self.X)

    @classmethod
    def from_trajectories(cls, episodes, platform: str, dt: float) -> "TransitionDataset":
        """Build from per-episode ``(states (T+1, n), controls (T, m))`` pairs.

        Pairs are formed only inside an episode, never across boundaries.
        """
        X, U, Xn, ep = [], [], [], []
        for k, (states, controls) in enumerate(episodes):
            states = np.asarray(states, dtype=float)
            controls = np.asarray(controls, dtype=float)
            X.append(states[:-1])
            Xn.append(states[1:])
            U.append(controls)
            ep.append(np.full(len(controls), k))
        return cls(np.vstack(X), np.vstack(U), np.vstack(Xn), np.concatenate(ep), platform, dt)

    def channel_names(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        if self.platform in PLATFORM_CHANNELS:
            s, c, _ = PLATFORM_CHANNELS[self.platform]
            return s, c
        n, m = self.X.shape[1], self.U.shape[1]
        return tuple(f"x{i}" for i in range(n)), tuple(f"u{i}" for i in range(m))

    def to_csv(self, path: str | Path) -> None:
        s_names, c_names = self.channel_names()
        header = ["episode_id", *s_names, *c_names, *(f"{s}_next" for s in s_names)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for e, x, u, xn in zip(self.episode_id, self.X, self.U, self.X_next):
                w.writerow([int(e), *map(repr, x.tolist()), *map(repr, u.tolist()), *map(repr, xn.tolist())])

    @classmethod
    def from_csv(cls, path: str | Path) -> "TransitionDataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: empty dataset file")
            rows = [list(map(float, r)) for r in reader if r]
        platform = ""
        for name, (s, c, dt) in PLATFORM_CHANNELS.items():
            if header == ["episode_id", *s, *c, *(f"{x}_next" for x in s)]:
                platform, n, m = name, len(s), len(c)
                break
        else:
            n = sum(h.endswith("_next") for h in header)
            m = len(header) - 1 - 2 * n
            dt = 1.0
            if n == 0 or m <= 0 or header[0] != "episode_id":
                raise ValueError(f"{path}: unrecognized dataset header {header}")
        data = np.asarray(rows, dtype=float).reshape(-1, len(header))
        return cls(
            data[:, 1 : 1 + n], data[:, 1 + n : 1 + n + m], data[:, 1 + n + m :],
            data[:, 0].astype(int), platform, dt,
        )


@dataclass(frozen=True)
class TrainHyperparams:
    max_epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 2e-3
    momentum: float = 0.9
    optimizer: str = "adam"  # "adam" or "momentum"
    patience: int = 25  # epochs without improvement before stopping
    lr_patience: int = 4  # epochs without improvement before halving the rate
    min_lr: float = 1e-6
    min_rows: int = 1000
    val_fraction: float = 0.2
    schedule: str = "cosine"  # "plateau" halves on stalls; "cosine" anneals to min_lr over max_epochs


@dataclass
class TrainReport:
    train_mse: float
    val_mse: float
    val_mse_per_channel: list[float]
    epochs: int
    val_rel_rms: list[float] = field(default_factory=list)  # held-out RMS error / held-out std, per channel
    lr_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_mse": self.train_mse,
            "val_mse": self.val_mse,
            "val_mse_per_channel": self.val_mse_per_channel,
            "epochs": self.epochs,
            "val_rel_rms": self.val_rel_rms,
            "lr_history": self.lr_history,
            "val_history": self.val_history,
        }


class TrainingError(RuntimeError):
    pass


def train_dynamics(
    dataset: TransitionDataset,
    hyper: TrainHyperparams | None = None,
    seed: int = 0,
) -> tuple[MlpModel, TrainReport]:
    """Fit an :class:`MlpModel` on the first 80% of rows, validating on the rest.

    The best model by validation loss is returned. Deterministic given ``seed``.
    """
    hyper = hyper or TrainHyperparams()
    rows = len(dataset)
    if rows == 0:
        raise TrainingError("dataset is empty")
    if rows < hyper.min_rows:
        raise TrainingError(f"dataset has {rows} rows, at least {hyper.min_rows} required")

    n_train = int(round(rows * (1.0 - hyper.val_fraction)))
    XU = np.hstack([dataset.X, dataset.U])
    Y = dataset.X_next
    in_w = Whitener.fit(XU[:n_train])
    out_w = Whitener.fit(Y[:n_train])
    Z = in_w.transform(XU)
    T = out_w.transform(Y)
    Z_tr, T_tr, Z_val, T_val = Z[:n_train], T[:n_train], Z[n_train:], T[n_train:]
    if len(Z_val) == 0:
        Z_val, T_val = Z_tr, T_tr

    rng = np.random.default_rng(seed)
    n, m = dataset.X.shape[1], dataset.U.shape[1]
    model = MlpModel.init(n, m, rng, in_w, out_w, dt=dataset.dt, platform=dataset.platform)
    names = MlpModel.PARAM_NAMES
    vel = {k: np.zeros_like(getattr(model, k)) for k in names}
    sq = {k: np.zeros_like(getattr(model, k)) for k in names}
    adam_t = 0

    lr = hyper.learning_rate
    best = math.inf
    best_model = model.copy()
    since_best = 0
    since_lr = 0
    lr_hist: list[float] = []
    val_hist: list[float] = []
    epoch = 0
    if hyper.schedule not in ("plateau", "cosine"):
        raise ValueError(f"unknown learning-rate schedule {hyper.schedule!r}")
    for epoch in range(1, hyper.max_epochs + 1):
        if hyper.schedule == "cosine":
            frac = (epoch - 1) / max(hyper.max_epochs - 1, 1)
            lr = hyper.min_lr + 0.5 * (hyper.learning_rate - hyper.min_lr) * (1.0 + math.cos(math.pi * frac))
        perm = rng.permutation(n_train)
        for start in range(0, n_train, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught below
                _, grads = mlp_backward(model, Z_tr[idx], T_tr[idx])
            if hyper.optimizer == "adam":
                adam_t += 1
                c1 = 1.0 - 0.9**adam_t
                c2 = 1.0 - 0.999**adam_t
                for k in names:
                    g = grads[k]
                    vel[k] = 0.9 * vel[k] + 0.1 * g
                    sq[k] = 0.999 * sq[k] + 0.001 * g * g
                    getattr(model, k)[...] -= lr * (vel[k] / c1) / (np.sqrt(sq[k] / c2) + 1e-8)
            else:
                for k in names:
                    vel[k] = hyper.momentum * vel[k] - lr * grads[k]
                    getattr(model, k)[...] += vel[k]
        with np.errstate(over="ignore", invalid="ignore"):
            val = mse_loss(model, Z_val, T_val)
        lr_hist.append(lr)
        val_hist.append(val)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch} (learning rate {lr:g})")
        log.debug("epoch %d lr %.2e val %.3e", epoch, lr, val)
        if val < best:
            best = val
            best_model = model.copy()
            since_best = 0
            since_lr = 0
        else:
            since_best += 1
            since_lr += 1
            if since_best >= hyper.patience:
                break
            if hyper.schedule == "plateau" and since_lr >= hyper.lr_patience:
                lr = max(lr * 0.5, hyper.min_lr)
                since_lr = 0

    model = best_model
    train_mse = float(np.mean((model.predict(dataset.X[:n_train], dataset.U[:n_train]) - Y[:n_train]) ** 2))
    Xv, Uv, Yv = dataset.X[n_train:], dataset.U[n_train:], Y[n_train:]
    if len(Xv) == 0:
        Xv, Uv, Yv = dataset.X, dataset.U, Y
    err = model.predict(Xv, Uv) - Yv
    per_channel = np.mean(err**2, axis=0)
    rel_rms = np.sqrt(per_channel) / np.maximum(Yv.std(axis=0), 1e-12)
    report = TrainReport(
        train_mse=train_mse,
        val_mse=float(per_channel.mean()),
        val_mse_per_channel=per_channel.tolist(),
        epochs=epoch,
        val_rel_rms=rel_rms.tolist(),
        lr_history=lr_hist,
        val_history=val_hist,
    )
    return model, report


def held_out_split(dataset: TransitionDataset, val_fraction: float = 0.2) -> int:
    """Index of the first validation row for the chronological split."""
    return int(round(len(dataset) * (1.0 - val_fraction)))


def load_model(path: str | Path) -> MlpModel:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"model file not found: {p}")
    return MlpModel.load(p)


def save_report(report: TrainReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


__all__ = [
    "MlpModel",
    "TrainHyperparams",
    "TrainReport",
    "TrainingError",
    "TransitionDataset",
    "Whitener",
    "held_out_split",
    "load_model",
    "mlp_backward",
    "mlp_forward",
    "mlp_jacobians",
    "mse_loss",
    "train_dynamics",
]

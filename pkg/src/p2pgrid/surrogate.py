"""Transformer-encoder regressor of the DSO response.

Each bus is a token with features [p_net, p_load, pf, c_ls, lambda_corr];
the model predicts the accepted injection per bus. Pre-norm encoder layers,
multi-head self-attention over all buses, GELU feed-forward, no positional
encoding (so the map is permutation-equivariant over buses).

Everything is plain numpy with a hand-written reverse pass. Parameters are
stored in ``out x in`` layout.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import kernels
from .config import ModelShape, TrainConfig

N_FEATURES = 5
FEATURE_NAMES = ("p_net", "p_load", "pf", "c_ls", "lambda_corr")
FORMAT_VERSION = 1
_MAGIC = b"P2PGRID-SURROGATE\n"
_LN_EPS = 1e-6
_SQRT2 = np.sqrt(2.0)


class SurrogateError(RuntimeError):
    pass


class ModelFormatError(SurrogateError):
    pass


class TrainingDiverged(SurrogateError):
    pass


def _param_shapes(shape: ModelShape) -> dict[str, tuple[int, ...]]:
    D, F = shape.d_model, shape.d_ff
    out = {"embed.W": (D, N_FEATURES), "embed.b": (D,)}
    for k in range(shape.n_layers):
        p = f"layer{k}."
        out.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "Wq": (D, D), p + "Wk": (D, D), p + "Wv": (D, D), p + "Wo": (D, D),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "W1": (F, D), p + "b1": (F,), p + "W2": (D, F), p + "b2": (D,),
        })
    out.update({"head.W": (1, D), "head.b": (1,)})
    return out


@dataclass
class SurrogateModel:
    shape: ModelShape
    params: dict[str, np.ndarray]
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    x_std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    y_mean: float = 0.0
    y_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.shape.d_model % self.shape.n_heads:
            raise SurrogateError("d_model must be divisible by n_heads")
        want = _param_shapes(self.shape)
        if set(want) != set(self.params):
            raise SurrogateError("parameter set does not match the model shape")
        for k, s in want.items():
            if self.params[k].shape != s:
                raise SurrogateError(f"{k}: shape {self.params[k].shape}, expected {s}")
        self.x_mean = np.asarray(self.x_mean, dtype=float)
        self.x_std = np.asarray(self.x_std, dtype=float)
        if np.any(self.x_std <= 0) or self.y_std <= 0:
            raise SurrogateError("normalisation stds must be positive")

    @classmethod
    def init(cls, shape: ModelShape = ModelShape(), seed: int = 0) -> "SurrogateModel":
        """Xavier-uniform weights, unit LN gains, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, s in _param_shapes(shape).items():
            if name.endswith(".g"):
                params[name] = np.ones(s)
            elif len(s) == 1:
                params[name] = np.zeros(s)
            else:
                lim = np.sqrt(6.0 / (s[0] + s[1]))
                params[name] = rng.uniform(-lim, lim, size=s)
        return cls(shape, params, seed=seed)

    def copy(self) -> "SurrogateModel":
        return SurrogateModel(self.shape, {k: v.copy() for k, v in self.params.items()},
                              self.x_mean.copy(), self.x_std.copy(), self.y_mean, self.y_std,
                              self.seed)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


# --- building blocks -------------------------------------------------------

def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x, cdf):
    return cdf + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _outer(dy, x):
    """Sum over all leading axes of dy^T x (weight gradients)."""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _heads(x, n_heads):
    B, N, D = x.shape
    return x.reshape(B, N, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, N, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * d)


# --- forward / backward ----------------------------------------------------

def _check_input(model: SurrogateModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != N_FEATURES:
        raise SurrogateError(f"features must be (N, {N_FEATURES}) or (B, N, {N_FEATURES}), got {X.shape}")
    return X


def _forward(model: SurrogateModel, X: np.ndarray, keep: bool = False):
    """Normalised-space forward pass on (B, N, F). Returns (y_norm, caches, attn)."""
    P, H = model.params, model.shape.n_heads
    dk = model.shape.d_model // H
    xn = (X - model.x_mean) / model.x_std
    h = xn @ P["embed.W"].T + P["embed.b"]
    caches, attn = [], []
    for k in range(model.shape.n_layers):
        p = f"layer{k}."
        a, ln1 = layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        q = _heads(a @ P[p + "Wq"].T, H)
        kk = _heads(a @ P[p + "Wk"].T, H)
        v = _heads(a @ P[p + "Wv"].T, H)
        A = softmax(q @ kk.transpose(0, 1, 3, 2) / np.sqrt(dk))
        o = _merge(A @ v)
        h1 = h + o @ P[p + "Wo"].T
        c, ln2 = layer_norm(h1, P[p + "ln2.g"], P[p + "ln2.b"])
        u = c @ P[p + "W1"].T + P[p + "b1"]
        cdf = 0.5 * (1.0 + erf(u / _SQRT2))
        gu = u * cdf
        h2 = h1 + gu @ P[p + "W2"].T + P[p + "b2"]
        if not np.all(np.isfinite(h2)):
            raise SurrogateError(f"non-finite activations in encoder layer {k}")
        attn.append(A)
        if keep:
            caches.append((a, ln1, q, kk, v, A, o, c, ln2, u, cdf, gu))
        h = h2
    y = (h @ P["head.W"].T)[..., 0] + P["head.b"][0]
    return y, (xn, caches, h), attn


def _backward(model: SurrogateModel, cache, dy, want_params: bool = True):
    """Reverse pass from dL/dy_norm (B, N). Returns (param grads, dL/dX)."""
    P, H = model.params, model.shape.n_heads
    dk = model.shape.d_model // H
    xn, caches, hK = cache
    g = {} if want_params else None
    dh = dy[..., None] * P["head.W"][0]
    if want_params:
        g["head.W"] = _outer(dy[..., None], hK)
        g["head.b"] = np.array([dy.sum()])
    for k in reversed(range(model.shape.n_layers)):
        p = f"layer{k}."
        a, ln1, q, kk, v, A, o, c, ln2, u, cdf, gu = caches[k]
        # feed-forward branch
        dgu = dh @ P[p + "W2"]
        du = dgu * _gelu_grad(u, cdf)
        dc = du @ P[p + "W1"]
        dc_ln, dg2, db2 = _layer_norm_back(dc, P[p + "ln2.g"], ln2)
        dh1 = dh + dc_ln
        if want_params:
            g[p + "W2"] = _outer(dh, gu)
            g[p + "b2"] = dh.sum(axis=(0, 1))
            g[p + "W1"] = _outer(du, c)
            g[p + "b1"] = du.sum(axis=(0, 1))
            g[p + "ln2.g"], g[p + "ln2.b"] = dg2, db2
        # attention branch
        do = _heads(dh1 @ P[p + "Wo"], H)
        dA = do @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ do
        ds = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(dk)
        dq = ds @ kk
        dkk = ds.transpose(0, 1, 3, 2) @ q
        dq, dkk, dv = _merge(dq), _merge(dkk), _merge(dv)
        da = dq @ P[p + "Wq"] + dkk @ P[p + "Wk"] + dv @ P[p + "Wv"]
        da_ln, dg1, db1 = _layer_norm_back(da, P[p + "ln1.g"], ln1)
        if want_params:
            g[p + "Wo"] = _outer(dh1, o)
            g[p + "Wq"] = _outer(dq, a)
            g[p + "Wk"] = _outer(dkk, a)
            g[p + "Wv"] = _outer(dv, a)
            g[p + "ln1.g"], g[p + "ln1.b"] = dg1, db1
        dh = dh1 + da_ln
    if want_params:
        g["embed.W"] = _outer(dh, xn)
        g["embed.b"] = dh.sum(axis=(0, 1))
    dxn = dh @ P["embed.W"]
    return g, dxn / model.x_std


def forward(model: SurrogateModel, X) -> np.ndarray:
    """Predicted accepted injection per bus, in the target's physical units."""
    Xb = _check_input(model, X)
    y, _, _ = _forward(model, Xb)
    y = y * model.y_std + model.y_mean
    return y[0] if np.ndim(X) == 2 else y


def attention_weights(model: SurrogateModel, X) -> list[np.ndarray]:
    """Per-layer attention tensors of shape (B, heads, N, N)."""
    _, _, attn = _forward(model, _check_input(model, X))
    return attn


def layer_norm_stats(model: SurrogateModel, X) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-token (mean, variance) of every pre-affine layer-norm output."""
    _, (_, caches, _), _ = _forward(model, _check_input(model, X), keep=True)
    out = []
    for a, ln1, *_, ln2, _, _, _ in caches:
        for xhat, _ in (ln1, ln2):
            out.append((xhat.mean(axis=-1), xhat.var(axis=-1)))
    return out


def input_gradient(model: SurrogateModel, X, bus: int) -> float:
    """d y_hat[bus] / d p_net[bus] in physical units."""
    return float(predict_and_slopes(model, X, [bus])[1][0])


def pack(model: SurrogateModel) -> tuple:
    """Parameters as contiguous per-layer stacks for the compiled kernel."""
    P, n = model.params, model.shape.n_layers

    def st(name):
        return np.ascontiguousarray(np.stack([P[f"layer{k}.{name}"] for k in range(n)]))

    return (np.ascontiguousarray(P["embed.W"]), P["embed.b"].copy(),
            st("ln1.g"), st("ln1.b"), st("Wq"), st("Wk"), st("Wv"), st("Wo"),
            st("ln2.g"), st("ln2.b"), st("W1"), st("b1"), st("W2"), st("b2"),
            np.ascontiguousarray(P["head.W"][0]), float(P["head.b"][0]))


def predict_at(model: SurrogateModel, X, idx, packed=None) -> np.ndarray:
    """Predictions at buses ``idx`` for a single (N, F) feature matrix.

    ``packed`` is an optional ``pack(model)`` reused across calls.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise SurrogateError("predict_at takes a single (N, F) feature matrix")
    idx = np.asarray(idx, dtype=np.int64)
    if kernels.USE_NUMBA:
        _check_input(model, X)
        y, _ = kernels.encoder_slopes_loops((X - model.x_mean) / model.x_std, idx[:0],
                                            *(packed or pack(model)), model.shape.n_heads, _LN_EPS)
        if not np.all(np.isfinite(y)):
            raise SurrogateError("non-finite surrogate output")
        return y[idx] * model.y_std + model.y_mean
    return forward(model, X)[idx]


def predict_and_slopes(model: SurrogateModel, X, idx, packed=None):
    """Predictions at buses ``idx`` and each one's own-injection slope.

    With numba this is the compiled forward-mode kernel. Otherwise one
    batched forward/backward: row j of the batch back-propagates the one-hot
    output at ``idx[j]``. ``packed`` is an optional ``pack(model)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise SurrogateError("predict_and_slopes takes a single (N, F) feature matrix")
    idx = np.asarray(idx, dtype=np.int64)
    if kernels.USE_NUMBA:
        _check_input(model, X)
        y, t = kernels.encoder_slopes_loops((X - model.x_mean) / model.x_std, idx,
                                            *(packed or pack(model)), model.shape.n_heads, _LN_EPS)
        if not np.all(np.isfinite(y)):
            raise SurrogateError("non-finite surrogate output")
        return y[idx] * model.y_std + model.y_mean, t * model.y_std / model.x_std[0]
    return _slopes_numpy(model, X, idx)


def _slopes_numpy(model: SurrogateModel, X: np.ndarray, idx: np.ndarray):
    Xb = np.broadcast_to(_check_input(model, X), (len(idx),) + X.shape)
    y, cache, _ = _forward(model, Xb, keep=True)
    dy = np.zeros_like(y)
    dy[np.arange(len(idx)), idx] = 1.0
    _, dX = _backward(model, cache, dy, want_params=False)
    pred = y[0, idx] * model.y_std + model.y_mean
    slope = dX[np.arange(len(idx)), idx, 0] * model.y_std
    return pred, slope


# --- training --------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    grad_norm: float
    seconds: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "grad_norm"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.train_loss:.10e}", f"{r.val_loss:.10e}", f"{r.grad_norm:.10e}"])
        return buf.getvalue()


def _mse(model, X, y_norm, batch: int = 512) -> float:
    tot = 0.0
    for s in range(0, len(X), batch):
        yh, _, _ = _forward(model, X[s:s + batch])
        tot += float(((yh - y_norm[s:s + batch]) ** 2).sum())
    return tot / y_norm.size


def fit_normalisation(model: SurrogateModel, X, y) -> None:
    """Per-feature z-score over all training tokens; scalar target z-score."""
    flat = X.reshape(-1, N_FEATURES)
    model.x_mean = flat.mean(axis=0)
    sd = flat.std(axis=0)
    model.x_std = np.where(sd > 1e-12, sd, 1.0)
    model.y_mean = float(y.mean())
    sd_y = float(y.std())
    model.y_std = sd_y if sd_y > 1e-12 else 1.0


def train(X, y, config: TrainConfig = TrainConfig(), shape: ModelShape = ModelShape(),
          progress=None) -> tuple[SurrogateModel, History]:
    """Adam on the normalised MSE; returns the best-validation parameters.

    X is (S, N, 5), y is (S, N). A ``val_fraction`` share of scenarios,
    chosen by the seed, is held out for checkpointing and early stopping.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 3 or len(X) == 0:
        raise SurrogateError("empty or malformed training set")
    if y.shape != X.shape[:2]:
        raise SurrogateError("targets must be (scenarios, buses)")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise SurrogateError("non-finite features or targets")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(X))
    n_val = max(1, int(round(config.val_fraction * len(X)))) if len(X) > 1 else 0
    val, tr = order[:n_val], order[n_val:]
    if len(tr) == 0:
        tr, val = order, order
    model = SurrogateModel.init(shape, seed=config.seed)
    fit_normalisation(model, X[tr], y[tr])
    hist = History()
    if float(y[tr].std()) <= 1e-12:
        # constant target: the mean is the exact answer
        model.params["head.W"][:] = 0.0
        model.params["head.b"][:] = 0.0
        return model, hist
    yn = (y - model.y_mean) / model.y_std
    Xtr, ytr, Xva, yva = X[tr], yn[tr], X[val], yn[val]

    names = list(model.params)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    s2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    best = (np.inf, model.copy(), 0)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(len(Xtr))
        losses, norms = [], []
        for s in range(0, len(perm), config.batch_size):
            b = perm[s:s + config.batch_size]
            try:
                yh, cache, _ = _forward(model, Xtr[b], keep=True)
            except SurrogateError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            err = yh - ytr[b]
            losses.append(float((err * err).mean()))
            grads, _ = _backward(model, cache, 2.0 * err / err.size)
            gnorm = float(np.sqrt(sum(float((grads[k] ** 2).sum()) for k in names)))
            if not np.isfinite(gnorm) or not np.isfinite(losses[-1]):
                raise TrainingDiverged(f"non-finite loss or gradient in epoch {epoch}")
            norms.append(gnorm)
            if config.clip_norm and gnorm > config.clip_norm:
                for k in names:
                    grads[k] *= config.clip_norm / gnorm
            step += 1
            c1 = 1.0 - config.beta1 ** step
            c2 = 1.0 - config.beta2 ** step
            for k in names:
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * grads[k]
                s2[k] = config.beta2 * s2[k] + (1.0 - config.beta2) * grads[k] ** 2
                model.params[k] -= config.learning_rate * (m[k] / c1) / (np.sqrt(s2[k] / c2) + config.eps)
        try:
            val_loss = _mse(model, Xva, yva)
        except SurrogateError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch}")
        rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, float(np.mean(norms)),
                          time.perf_counter() - t0)
        hist.records.append(rec)
        if progress is not None:
            progress(rec)
        if val_loss < best[0]:
            best = (val_loss, model.copy(), epoch)
        elif config.patience and epoch - best[2] >= config.patience:
            hist.stopped_early = True
            break
    hist.best_epoch = best[2]
    return best[1], hist


@dataclass(frozen=True)
class Scores:
    mae: float  # kW
    rmse: float  # kW
    r2: float
    target_std: float  # kW, per-bus target standard deviation

    def as_dict(self) -> dict:
        return {"mae_kw": self.mae, "rmse_kw": self.rmse, "mae_mw": self.mae / 1000.0,
                "rmse_mw": self.rmse / 1000.0, "r2": self.r2, "target_std_kw": self.target_std}


def evaluate(model: SurrogateModel, X, y, batch: int = 512) -> Scores:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    pred = np.concatenate([forward(model, X[s:s + batch]) for s in range(0, len(X), batch)])
    err = pred - y
    ss_res = float((err ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return Scores(float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean())), r2, float(y.std()))


# --- serialisation ---------------------------------------------------------

def _payload(model: SurrogateModel) -> bytes:
    parts = [np.ascontiguousarray(model.params[k], dtype="<f8").tobytes() for k in _param_shapes(model.shape)]
    parts.append(np.ascontiguousarray(model.x_mean, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.x_std, dtype="<f8").tobytes())
    parts.append(np.array([model.y_mean, model.y_std], dtype="<f8").tobytes())
    return b"".join(parts)


def to_bytes(model: SurrogateModel) -> bytes:
    payload = _payload(model)
    header = {
        "version": FORMAT_VERSION,
        "shape": {"d_model": model.shape.d_model, "n_layers": model.shape.n_layers,
                  "n_heads": model.shape.n_heads, "d_ff": model.shape.d_ff},
        "features": list(FEATURE_NAMES),
        "seed": model.seed,
        "params": [[k, list(s)] for k, s in _param_shapes(model.shape).items()],
        "normalisation": {"x_mean": model.x_mean.tolist(), "x_std": model.x_std.tolist(),
                          "y_mean": model.y_mean, "y_std": model.y_std},
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    return _MAGIC + len(head).to_bytes(8, "little") + head + payload


def from_bytes(blob: bytes, expect: ModelShape | None = None) -> SurrogateModel:
    if not blob.startswith(_MAGIC):
        raise ModelFormatError("not a surrogate model file")
    off = len(_MAGIC)
    if len(blob) < off + 8:
        raise ModelFormatError("truncated header")
    n = int.from_bytes(blob[off:off + 8], "little")
    try:
        header = json.loads(blob[off + 8:off + 8 + n])
    except ValueError as exc:
        raise ModelFormatError(f"corrupt header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"format version {header.get('version')}, expected {FORMAT_VERSION}")
    payload = blob[off + 8 + n:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ModelFormatError("checksum mismatch (file truncated or corrupted)")
    shape = ModelShape(**header["shape"])
    if expect is not None and shape != expect:
        raise ModelFormatError(f"model shape {shape} does not match expected {expect}")
    want = _param_shapes(shape)
    if [[k, list(s)] for k, s in want.items()] != header["params"]:
        raise ModelFormatError("parameter layout does not match the declared shape")
    flat = np.frombuffer(payload, dtype="<f8")
    params, pos = {}, 0
    for k, s in want.items():
        size = int(np.prod(s))
        params[k] = flat[pos:pos + size].reshape(s).copy()
        pos += size
    x_mean = flat[pos:pos + N_FEATURES].copy()
    x_std = flat[pos + N_FEATURES:pos + 2 * N_FEATURES].copy()
    y_mean, y_std = (float(v) for v in flat[pos + 2 * N_FEATURES:pos + 2 * N_FEATURES + 2])
    return SurrogateModel(shape, params, x_mean, x_std, y_mean, y_std, seed=int(header["seed"]))


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: SurrogateModel, path) -> None:
    _atomic_write(Path(path), to_bytes(model))


def load(path, expect: ModelShape | None = None) -> SurrogateModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model {path}: {exc}") from exc
    return from_bytes(blob, expect)


def save_history(history: History, path) -> None:
    _atomic_write(Path(path), history.to_csv().encode())

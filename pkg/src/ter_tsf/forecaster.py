"""Patch-encoder / cross-attention forecaster in plain numpy.

The lookback is cut into overlapping patches, linearly embedded, given a
learned per-patch position vector and run through pre-norm transformer
encoder layers, giving a matrix ``S`` (patches x d). The text is tokenized,
embedded from a learned table and mean-pooled into ``e``. ``e`` queries
``S`` through multi-head attention (with a residual back to ``e``) and a
one-hidden-layer GELU head maps the fused vector to the H-step forecast.
With ``text_mode="none"`` the head reads the mean of the rows of ``S`` and
no text is touched.

Forward and backward passes are written out by hand and checked against
central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ter_tsf.errors import ConfigError, DataError, DivergenceError
from ter_tsf.textualize import tokenize

TEXT_MODES = ("none", "raw", "reinforced")
CHECKPOINT_FORMAT = "ter-tsf-forecaster"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ForecasterConfig:
    lookback: int
    horizon: int
    patch_len: int = 16
    stride: int = 8
    d_model: int = 64
    encoder_layers: int = 2
    heads: int = 4
    head_hidden: int = 64
    ff_hidden: int = 128
    text_mode: str = "reinforced"
    # optimisation
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    patience: int = 10
    clip_norm: float = 1.0
    max_vocab: int = 5000

    def __post_init__(self):
        if self.text_mode not in TEXT_MODES:
            raise ConfigError(f"text_mode must be one of {TEXT_MODES}, got {self.text_mode!r}")
        if self.patch_len < 1 or self.stride < 1:
            raise ConfigError("patch_len and stride must be >= 1")
        if self.patch_len > self.lookback:
            raise ConfigError(f"patch_len {self.patch_len} exceeds lookback {self.lookback}")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} must be divisible by heads {self.heads}")
        if self.horizon < 1 or self.encoder_layers < 0:
            raise ConfigError("horizon must be >= 1 and encoder_layers >= 0")
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("invalid optimisation settings")

    @property
    def num_patches(self) -> int:
        return num_patches(self.lookback, self.patch_len, self.stride)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


def num_patches(lookback: int, patch_len: int, stride: int) -> int:
    if lookback < patch_len:
        raise ConfigError(f"lookback {lookback} shorter than patch_len {patch_len}")
    return (lookback - patch_len) // stride + 1


@dataclass
class ForecasterParams:
    config: ForecasterConfig
    vocabulary: tuple[str, ...]
    arrays: dict[str, np.ndarray]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.vocabulary = tuple(self.vocabulary)
        self._index = {t: i for i, t in enumerate(self.vocabulary)}

    @property
    def oov_row(self) -> int:
        return len(self.vocabulary)

    @property
    def empty_row(self) -> int:
        return len(self.vocabulary) + 1

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "ForecasterParams":
        return ForecasterParams(self.config, self.vocabulary, {k: v.copy() for k, v in self.arrays.items()})

    def num_values(self) -> int:
        return sum(v.size for v in self.arrays.values())


# --------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ForecasterConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration (= checkpoint) order."""
    d, p = cfg.d_model, cfg.patch_len
    shapes = {"patch_w": (p, d), "patch_b": (d,), "pos": (cfg.num_patches, d)}
    for l in range(cfg.encoder_layers):
        pre = f"enc{l}."
        shapes.update({
            pre + "ln1_g": (d,), pre + "ln1_b": (d,),
            pre + "wq": (d, d), pre + "wk": (d, d), pre + "wv": (d, d), pre + "wo": (d, d),
            pre + "ln2_g": (d,), pre + "ln2_b": (d,),
            pre + "w1": (d, cfg.ff_hidden), pre + "b1": (cfg.ff_hidden,),
            pre + "w2": (cfg.ff_hidden, d), pre + "b2": (d,),
        })
    shapes.update({
        "lnf_g": (d,), "lnf_b": (d,),
        "tok_emb": (vocab_size + 2, d),  # vocabulary rows, then OOV, then empty-text
        "xq": (d, d), "xk": (d, d), "xv": (d, d), "xo": (d, d),
        "head_w1": (d, cfg.head_hidden), "head_b1": (cfg.head_hidden,),
        "head_w2": (cfg.head_hidden, cfg.horizon), "head_b2": (cfg.horizon,),
    })
    return shapes


def init_params(cfg: ForecasterConfig, vocabulary: Sequence[str] = (), seed: int = 0) -> ForecasterParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg, len(vocabulary)).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif short.endswith("_b") or short in ("b1", "b2", "head_b1", "head_b2"):
            arrays[name] = np.zeros(shape)
        elif name == "pos":
            arrays[name] = rng.normal(0.0, 0.1, shape)
        elif name == "tok_emb":
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), shape)
        else:
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    return ForecasterParams(cfg, tuple(vocabulary), arrays)


def build_vocabulary(texts: Sequence[str], max_size: int = 5000) -> tuple[str, ...]:
    counts = Counter(tok for t in texts if t for tok in tokenize(t))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return tuple(sorted(tok for tok, _ in ranked))


# --------------------------------------------------------------------------
# building blocks


def gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * u**2)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / np.sum(ez, axis=axis, keepdims=True)


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def _ln_backward(dy, g, cache):
    xh, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xh).sum(axes)
    db = dy.sum(axes)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, h):
    # (..., n, d) -> (..., h, n, dh)
    *lead, n, d = x.shape
    return np.moveaxis(x.reshape(*lead, n, h, d // h), -2, -3)


def _merge_heads(x):
    # (..., h, n, dh) -> (..., n, h*dh)
    x = np.moveaxis(x, -3, -2)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def patchify(lookback: np.ndarray, cfg: ForecasterConfig) -> np.ndarray:
    lookback = np.asarray(lookback, dtype=np.float64)
    if lookback.shape[-1] != cfg.lookback:
        raise DataError(f"lookback length {lookback.shape[-1]} != configured {cfg.lookback}")
    idx = np.arange(cfg.num_patches)[:, None] * cfg.stride + np.arange(cfg.patch_len)[None, :]
    return lookback[..., idx]


def text_weights(texts: Sequence[str], params: ForecasterParams) -> np.ndarray:
    """Row-stochastic (B, V+2) matrix; ``weights @ tok_emb`` is the mean-pooled text vector."""
    w = np.zeros((len(texts), len(params.vocabulary) + 2))
    for b, text in enumerate(texts):
        toks = tokenize(text or "")
        if not toks:
            w[b, params.empty_row] = 1.0
            continue
        inc = 1.0 / len(toks)
        for tok in toks:
            w[b, params._index.get(tok, params.oov_row)] += inc
    return w


def embed_and_pool(text: str, params: ForecasterParams) -> np.ndarray:
    return (text_weights([text], params) @ params["tok_emb"])[0]


def attention_weights(e: np.ndarray, S: np.ndarray, params: ForecasterParams) -> np.ndarray:
    """Per-head weights of a single query over the rows of ``S``: shape (heads, rows)."""
    cfg = params.config
    h, dh = cfg.heads, cfg.head_dim
    q = (e @ params["xq"]).reshape(h, dh)
    k = _split_heads(S @ params["xk"], h)
    return softmax(np.einsum("hd,hnd->hn", q, k) / math.sqrt(dh))


def cross_attend(e: np.ndarray, S: np.ndarray, params: ForecasterParams) -> np.ndarray:
    """Multi-head attention of query ``e`` over keys/values ``S`` (no residual)."""
    cfg = params.config
    a = attention_weights(e, S, params)
    v = _split_heads(S @ params["xv"], cfg.heads)
    o = np.einsum("hn,hnd->hd", a, v).reshape(cfg.d_model)
    return o @ params["xo"]


# --------------------------------------------------------------------------
# batched forward / backward


def _encode(params: ForecasterParams, X: np.ndarray, cache: dict | None):
    cfg = params.config
    P = params.arrays
    h_heads, dh = cfg.heads, cfg.head_dim
    xp = patchify(X, cfg)
    h = xp @ P["patch_w"] + P["patch_b"] + P["pos"]
    layers = []
    for l in range(cfg.encoder_layers):
        pre = f"enc{l}."
        a, ln1 = _ln_forward(h, P[pre + "ln1_g"], P[pre + "ln1_b"])
        q = _split_heads(a @ P[pre + "wq"], h_heads)
        k = _split_heads(a @ P[pre + "wk"], h_heads)
        v = _split_heads(a @ P[pre + "wv"], h_heads)
        A = softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(dh))
        o = _merge_heads(A @ v)
        h = h + o @ P[pre + "wo"]
        c, ln2 = _ln_forward(h, P[pre + "ln2_g"], P[pre + "ln2_b"])
        u = c @ P[pre + "w1"] + P[pre + "b1"]
        g, t = gelu(u)
        h = h + g @ P[pre + "w2"] + P[pre + "b2"]
        layers.append((a, ln1, q, k, v, A, o, c, ln2, u, g, t))
    S, lnf = _ln_forward(h, P["lnf_g"], P["lnf_b"])
    if cache is not None:
        cache.update(xp=xp, layers=layers, lnf=lnf, S=S)
    return S


def _fuse(params: ForecasterParams, S, W, cache: dict | None):
    cfg = params.config
    P = params.arrays
    h_heads, dh = cfg.heads, cfg.head_dim
    e = W @ P["tok_emb"]
    q = (e @ P["xq"]).reshape(-1, h_heads, dh)
    k = _split_heads(S @ P["xk"], h_heads)
    v = _split_heads(S @ P["xv"], h_heads)
    A = softmax(np.einsum("bhd,bhnd->bhn", q, k) / math.sqrt(dh))
    o = np.einsum("bhn,bhnd->bhd", A, v).reshape(-1, cfg.d_model)
    z = e + o @ P["xo"]
    if cache is not None:
        cache.update(e=e, xq_=q, xk_=k, xv_=v, xA=A, xo_=o)
    return z


def forward(params: ForecasterParams, X: np.ndarray, W: np.ndarray | None = None, cache: dict | None = None):
    """Batched forecast. ``X`` is (B, L); ``W`` the text weights from :func:`text_weights`."""
    cfg = params.config
    P = params.arrays
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    S = _encode(params, X, cache)
    if cfg.text_mode == "none":
        z = S.mean(axis=1)
    else:
        if W is None or W.shape != (X.shape[0], P["tok_emb"].shape[0]):
            raise DataError("text weights missing or mis-shaped for a text-conditioned forecaster")
        z = _fuse(params, S, W, cache)
    u = z @ P["head_w1"] + P["head_b1"]
    g, t = gelu(u)
    Y = g @ P["head_w2"] + P["head_b2"]
    if cache is not None:
        cache.update(X=X, W=W, z=z, hu=u, hg=g, ht=t)
    return Y


def backward(params: ForecasterParams, cache: dict, dY: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    P = params.arrays
    h_heads, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    G = {k: np.zeros_like(v) for k, v in P.items()}

    # head
    G["head_w2"] = cache["hg"].T @ dY
    G["head_b2"] = dY.sum(0)
    du = (dY @ P["head_w2"].T) * gelu_grad(cache["hu"], cache["ht"])
    G["head_w1"] = cache["z"].T @ du
    G["head_b1"] = du.sum(0)
    dz = du @ P["head_w1"].T

    S = cache["S"]
    if cfg.text_mode == "none":
        dS = np.repeat(dz[:, None, :], S.shape[1], axis=1) / S.shape[1]
    else:
        e, q, k, v, A, o = (cache[n] for n in ("e", "xq_", "xk_", "xv_", "xA", "xo_"))
        de = dz.copy()
        G["xo"] = o.T @ dz
        do = (dz @ P["xo"].T).reshape(-1, h_heads, dh)
        dA = np.einsum("bhd,bhnd->bhn", do, v)
        dv = np.einsum("bhn,bhd->bhnd", A, do)
        dsc = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dq = np.einsum("bhn,bhnd->bhd", dsc, k).reshape(-1, cfg.d_model)
        dk = np.einsum("bhn,bhd->bhnd", dsc, q)
        dk_m, dv_m = _merge_heads(dk), _merge_heads(dv)
        G["xq"] = e.T @ dq
        de += dq @ P["xq"].T
        G["xk"] = np.einsum("bnd,bne->de", S, dk_m)
        G["xv"] = np.einsum("bnd,bne->de", S, dv_m)
        dS = dk_m @ P["xk"].T + dv_m @ P["xv"].T
        G["tok_emb"] = cache["W"].T @ de

    dh_, G["lnf_g"], G["lnf_b"] = _ln_backward(dS, P["lnf_g"], cache["lnf"])
    for l in reversed(range(cfg.encoder_layers)):
        pre = f"enc{l}."
        a, ln1, q, k, v, A, o, c, ln2, u, g, t = cache["layers"][l]
        # feed-forward block
        G[pre + "w2"] = np.einsum("bnf,bnd->fd", g, dh_)
        G[pre + "b2"] = dh_.sum((0, 1))
        du_ = (dh_ @ P[pre + "w2"].T) * gelu_grad(u, t)
        G[pre + "w1"] = np.einsum("bnd,bnf->df", c, du_)
        G[pre + "b1"] = du_.sum((0, 1))
        dc = du_ @ P[pre + "w1"].T
        dx, G[pre + "ln2_g"], G[pre + "ln2_b"] = _ln_backward(dc, P[pre + "ln2_g"], ln2)
        dh_ = dh_ + dx
        # self-attention block
        G[pre + "wo"] = np.einsum("bnd,bne->de", o, dh_)
        do = _split_heads(dh_ @ P[pre + "wo"].T, h_heads)
        dA = do @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(A, -1, -2) @ do
        dsc = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dq = _merge_heads(dsc @ k)
        dk = _merge_heads(np.swapaxes(dsc, -1, -2) @ q)
        dv = _merge_heads(dv)
        G[pre + "wq"] = np.einsum("bnd,bne->de", a, dq)
        G[pre + "wk"] = np.einsum("bnd,bne->de", a, dk)
        G[pre + "wv"] = np.einsum("bnd,bne->de", a, dv)
        da = dq @ P[pre + "wq"].T + dk @ P[pre + "wk"].T + dv @ P[pre + "wv"].T
        dx, G[pre + "ln1_g"], G[pre + "ln1_b"] = _ln_backward(da, P[pre + "ln1_g"], ln1)
        dh_ = dh_ + dx

    G["pos"] = dh_.sum(0)
    G["patch_b"] = dh_.sum((0, 1))
    G["patch_w"] = np.einsum("bnp,bnd->pd", cache["xp"], dh_)
    return G


def mse_loss(params, X, T, W=None) -> float:
    Y = forward(params, X, W)
    return float(np.mean((Y - T) ** 2))


def loss_and_grad(params, X, T, W=None):
    cache = {}
    Y = forward(params, X, W, cache)
    diff = Y - T
    loss = float(np.mean(diff**2))
    return loss, backward(params, cache, 2.0 * diff / diff.size)


# --------------------------------------------------------------------------
# sample-level API


def _texts_for(samples, texts, cfg):
    if cfg.text_mode == "none":
        return None
    if texts is None:
        if cfg.text_mode == "reinforced":
            raise DataError("reinforced text mode needs explicit texts")
        texts = [s.raw_text for s in samples]
    if len(texts) != len(samples):
        raise DataError("one text per sample is required")
    return list(texts)


def stack(samples):
    X = np.stack([s.lookback for s in samples])
    T = np.stack([s.horizon_truth for s in samples])
    return X, T


def predict_batch(params: ForecasterParams, samples, texts=None) -> np.ndarray:
    cfg = params.config
    X = np.stack([s.lookback for s in samples])
    texts = _texts_for(samples, texts, cfg)
    W = None if texts is None else text_weights(texts, params)
    return forward(params, X, W)


def predict(sample, reinforced_text: str | None, params: ForecasterParams) -> np.ndarray:
    """Normalized-space forecast for one sample.

    ``raw`` mode ignores ``reinforced_text`` and reads the sample's own texts;
    ``none`` mode reads no text at all.
    """
    cfg = params.config
    if cfg.text_mode == "reinforced":
        texts = [reinforced_text or ""]
    else:
        texts = None
    return predict_batch(params, [sample], texts)[0]


def patch_encode(lookback, params: ForecasterParams) -> np.ndarray:
    return _encode(params, np.atleast_2d(np.asarray(lookback, dtype=np.float64)), None)[0]


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params.arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainResult:
    params: ForecasterParams
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    steps: int
    initial_loss: float


def train_forecaster(samples, cfg: ForecasterConfig, seed: int = 0, texts=None,
                     val_samples=None, val_texts=None, init: ForecasterParams | None = None) -> TrainResult:
    """Adam on mean squared error with early stopping on validation MSE.

    Parameters are initialised fresh from ``seed`` (or copied from ``init``
    for a warm start); the vocabulary comes from the training texts. The
    best-validation parameters are returned. Without validation samples the
    training loss drives early stopping.
    """
    samples = list(samples)
    if not samples:
        raise DataError("cannot train a forecaster on an empty sample set")
    for s in samples + list(val_samples or []):
        if s.split == "test":
            raise DataError(f"test-split sample {s.sample_id!r} passed to training")
    texts = _texts_for(samples, texts, cfg)
    if init is not None:
        params = init.copy()
        params.config = cfg
    else:
        vocab = build_vocabulary(texts, cfg.max_vocab) if texts is not None else ()
        params = init_params(cfg, vocab, seed)
    X, T = stack(samples)
    W = None if texts is None else text_weights(texts, params)
    if val_samples:
        vt = _texts_for(val_samples, val_texts, cfg)
        Xv, Tv = stack(val_samples)
        Wv = None if vt is None else text_weights(vt, params)
    else:
        Xv = Tv = Wv = None

    rng = np.random.default_rng(seed + 1)
    opt = _Adam(params, cfg.learning_rate)
    init_loss = mse_loss(params, X, T, W)
    best_val = mse_loss(params, Xv, Tv, Wv) if Xv is not None else init_loss
    best = params.copy()
    best_epoch, bad, steps = 0, 0, 0
    train_losses, val_losses = [], []
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(params, X[idx], T[idx], None if W is None else W[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
            if cfg.clip_norm:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            opt.step(params, grads)
            steps += 1
            total += loss * len(idx)
        train_losses.append(total / n)
        cur = mse_loss(params, Xv, Tv, Wv) if Xv is not None else mse_loss(params, X, T, W)
        if not math.isfinite(cur):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}")
        val_losses.append(cur)
        if cur < best_val:
            best_val, best, best_epoch, bad = cur, params.copy(), epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return TrainResult(best, train_losses, val_losses, best_epoch, steps, init_loss)


# --------------------------------------------------------------------------
# gradient verification


def relative_error(a, b, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(params: ForecasterParams, samples, texts=None, n_coords: int = 200, step: float = 1e-5,
               seed: int = 0, analytic: Callable | None = None, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are drawn evenly across every parameter array so small
    arrays (biases, norms) are always covered; at least ``n_coords`` in total.
    ``analytic`` may replace :func:`loss_and_grad` (used to test the harness).
    """
    cfg = params.config
    X, T = stack(samples)
    texts = _texts_for(samples, texts, cfg)
    W = None if texts is None else text_weights(texts, params)
    work = params.copy()
    _, grads = (analytic or loss_and_grad)(work, X, T, W)
    rng = np.random.default_rng(seed)
    per_array = math.ceil(n_coords / len(work.arrays))
    worst = 0.0
    for name, arr in work.arrays.items():
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_array, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + step
            lp = mse_loss(work, X, T, W)
            flat[i] = old - step
            lm = mse_loss(work, X, T, W)
            flat[i] = old
            numeric = (lp - lm) / (2 * step)
            worst = max(worst, relative_error(float(grads[name].reshape(-1)[i]), numeric, floor))
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_params(params: ForecasterParams, path) -> Path:
    """Write a JSON checkpoint: header, config, vocabulary, arrays in declaration order."""
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "vocabulary": list(params.vocabulary),
        "arrays": [
            {"name": name, "shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in params.arrays.items()
        ],
    }
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return path


def load_params(path) -> ForecasterParams:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint header")
    cfg = ForecasterConfig(**doc["config"])
    expected = param_shapes(cfg, len(doc["vocabulary"]))
    arrays = {}
    for entry in doc["arrays"]:
        shape = tuple(entry["shape"])
        if expected.get(entry["name"]) != shape:
            raise DataError(f"{path}: array {entry['name']!r} has unexpected shape {shape}")
        arrays[entry["name"]] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    if list(arrays) != list(expected):
        raise DataError(f"{path}: checkpoint arrays do not match the configuration")
    return ForecasterParams(cfg, tuple(doc["vocabulary"]), arrays)


def with_mode(cfg: ForecasterConfig, text_mode: str, **kw) -> ForecasterConfig:
    return replace(cfg, text_mode=text_mode, **kw)

"""Bi-GRU forecaster/classifier in plain numpy with exact backpropagation.

Layer stack, applied to a batch ``[B x L x F]``::

    Bi-GRU (h_bi per direction) -> GRU (h_uni) -> dropout -> dense+ReLU per
    step -> dropout -> average pooling (window 2, stride 2) -> flatten -> head

Internally sequences are kept time-major (``[L x B x .]``) so that each
recurrent step reads a contiguous slice.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datamodel import NumericError, ShapeError, ValidationError

CHECKPOINT_FORMAT = "bgforecast-checkpoint"
CHECKPOINT_VERSION = 1

GATES = ("z", "r", "h")
CELLS = ("bigru_fwd", "bigru_bwd", "gru")


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 4
    seq_len: int = 24
    out_dim: int = 6
    task: str = "regression"
    bi_hidden: int = 128
    uni_hidden: int = 256
    fc_dim: int = 64
    dropout: float = 0.4
    pooling: str = "avg2"
    dtype: str = "float64"

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.pooling not in ("avg2", "global"):
            raise ValidationError(f"unknown pooling {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.pooling == "avg2" and self.seq_len < 2:
            raise ValidationError("avg2 pooling needs seq_len >= 2")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError("dtype must be float64 or float32")

    @property
    def pooled_len(self) -> int:
        return self.seq_len // 2 if self.pooling == "avg2" else 1

    @property
    def head_in(self) -> int:
        return self.pooled_len * self.fc_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        cell_dims = {
            "bigru_fwd": (self.bi_hidden, self.n_features),
            "bigru_bwd": (self.bi_hidden, self.n_features),
            "gru": (self.uni_hidden, 2 * self.bi_hidden),
        }
        for cell, (hid, inp) in cell_dims.items():
            for g in GATES:
                out[f"{cell}.W_{g}"] = (hid, inp)
            for g in GATES:
                out[f"{cell}.U_{g}"] = (hid, hid)
            for g in GATES:
                out[f"{cell}.b_{g}"] = (hid,)
        out["fc1.W"] = (self.fc_dim, self.uni_hidden)
        out["fc1.b"] = (self.fc_dim,)
        out["head.W"] = (self.out_dim, self.head_in)
        out["head.b"] = (self.out_dim,)
        return out


@dataclass(frozen=True)
class GruCellParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]


class ModelParams:
    """Named weight tensors plus the architecture they belong to.

    Gradients use the same class: one tensor per parameter name.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        shapes = config.shapes()
        if set(tensors) != set(shapes):
            raise ShapeError(f"tensor names do not match config: {sorted(set(tensors) ^ set(shapes))}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in shapes}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self) -> list[str]:
        return list(self.tensors)

    def cell(self, prefix: str) -> GruCellParams:
        return GruCellParams(**{k.split(".", 1)[1]: v for k, v in self.tensors.items()
                                if k.startswith(prefix + ".")})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return self.config == other.config and all(
            np.allclose(v, other.tensors[k], **kw) for k, v in self.tensors.items())

    def equal(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


Gradients = ModelParams


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    tensors = {}
    for name, shape in config.shapes().items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config, tensors)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _check(x: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite activation", layer=layer)


def gru_cell_step(params: GruCellParams, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One GRU step with the reset gate applied before the recurrent candidate product."""
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    if x.shape[-1] != params.input_dim or h_prev.shape[-1] != params.hidden:
        raise ShapeError(
            f"expected input {params.input_dim} and hidden {params.hidden}, "
            f"got {x.shape[-1]} and {h_prev.shape[-1]}")
    z = _sigmoid(x @ params.W_z.T + h_prev @ params.U_z.T + params.b_z)
    r = _sigmoid(x @ params.W_r.T + h_prev @ params.U_r.T + params.b_r)
    cand = np.tanh(x @ params.W_h.T + (r * h_prev) @ params.U_h.T + params.b_h)
    return (1.0 - z) * h_prev + z * cand


# --- recurrent layer over a sequence ----------------------------------------

def _gru_seq_forward(p: GruCellParams, X: np.ndarray, layer: str):
    """Run a GRU over time-major input ``X [L x B x I]``; returns outputs [L x B x H]."""
    L, B, _ = X.shape
    Hd = p.hidden
    xz = X @ p.W_z.T + p.b_z
    xr = X @ p.W_r.T + p.b_r
    xh = X @ p.W_h.T + p.b_h
    U_zr = np.concatenate([p.U_z, p.U_r]).T
    U_hT = p.U_h.T
    hs = np.zeros((L + 1, B, Hd), dtype=X.dtype)
    zs = np.empty((L, B, Hd), dtype=X.dtype)
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    for t in range(L):
        hp = hs[t]
        zr = hp @ U_zr
        z = _sigmoid(xz[t] + zr[:, :Hd])
        r = _sigmoid(xr[t] + zr[:, Hd:])
        c = np.tanh(xh[t] + (r * hp) @ U_hT)
        hs[t + 1] = hp + z * (c - hp)
        zs[t], rs[t], cs[t] = z, r, c
    _check(hs, layer)
    return hs[1:], (X, hs, zs, rs, cs)


def _gru_seq_backward(p: GruCellParams, cache, dH: np.ndarray):
    """Backpropagate ``dH`` (grads w.r.t. every step's output) through time."""
    X, hs, zs, rs, cs = cache
    L, B, Hd = zs.shape
    U_zr = np.concatenate([p.U_z, p.U_r])
    daz = np.empty_like(zs)
    dar = np.empty_like(zs)
    dah = np.empty_like(zs)
    dh_next = np.zeros((B, Hd), dtype=zs.dtype)
    for t in range(L - 1, -1, -1):
        dh = dH[t] + dh_next
        hp, z, r, c = hs[t], zs[t], rs[t], cs[t]
        dz = dh * (c - hp)
        dhp = dh * (1.0 - z)
        da_h = dh * z * (1.0 - c * c)
        drh = da_h @ p.U_h
        dr = drh * hp
        dhp += drh * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        dhp += np.concatenate([da_z, da_r], axis=1) @ U_zr
        daz[t], dar[t], dah[t] = da_z, da_r, da_h
        dh_next = dhp
    flat = lambda a: a.reshape(L * B, -1)  # noqa: E731
    Xf = flat(X)
    Hf = flat(hs[:-1])
    RHf = flat(rs * hs[:-1])
    grads = {
        "W_z": flat(daz).T @ Xf, "W_r": flat(dar).T @ Xf, "W_h": flat(dah).T @ Xf,
        "U_z": flat(daz).T @ Hf, "U_r": flat(dar).T @ Hf, "U_h": flat(dah).T @ RHf,
        "b_z": daz.sum(axis=(0, 1)), "b_r": dar.sum(axis=(0, 1)), "b_h": dah.sum(axis=(0, 1)),
    }
    dX = daz @ p.W_z + dar @ p.W_r + dah @ p.W_h
    return grads, dX


# --- full network -----------------------------------------------------------

def _dropout_masks(config: ModelConfig, L: int, B: int, rng_seed: int):
    if config.dropout == 0.0:
        return None, None
    rng = np.random.default_rng(rng_seed)
    keep = 1.0 - config.dropout
    dtype = np.dtype(config.dtype)
    m1 = (rng.random((L, B, config.uni_hidden)) < keep).astype(dtype) / keep
    m2 = (rng.random((L, B, config.fc_dim)) < keep).astype(dtype) / keep
    return m1, m2


def forward(params: ModelParams, batch: np.ndarray, mode: str = "eval", rng_seed: int = 0):
    """Forward pass; returns ``(output [B x out], cache)``.

    Dropout masks in train mode are drawn from ``rng_seed`` and scaled by
    ``1/(1-p)``; eval mode applies no dropout.
    """
    cfg = params.config
    batch = np.asarray(batch, dtype=cfg.dtype)
    if batch.ndim != 3 or batch.shape[1:] != (cfg.seq_len, cfg.n_features):
        raise ShapeError(f"batch must be [B x {cfg.seq_len} x {cfg.n_features}], got {batch.shape}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be train or eval, got {mode!r}")
    B, L, _ = batch.shape
    X = np.ascontiguousarray(batch.transpose(1, 0, 2))

    fwd_p, bwd_p, uni_p = params.cell("bigru_fwd"), params.cell("bigru_bwd"), params.cell("gru")
    Hf, cache_f = _gru_seq_forward(fwd_p, X, "bigru_fwd")
    Hb_rev, cache_b = _gru_seq_forward(bwd_p, X[::-1], "bigru_bwd")
    Y1 = np.concatenate([Hf, Hb_rev[::-1]], axis=2)
    Y2, cache_u = _gru_seq_forward(uni_p, Y1, "gru")

    m1, m2 = _dropout_masks(cfg, L, B, rng_seed) if mode == "train" else (None, None)
    D1 = Y2 * m1 if m1 is not None else Y2
    A = D1 @ params["fc1.W"].T + params["fc1.b"]
    _check(A, "fc1")
    R = np.maximum(A, 0.0)
    D2 = R * m2 if m2 is not None else R

    if cfg.pooling == "avg2":
        Lp = cfg.pooled_len
        P = 0.5 * (D2[0:2 * Lp:2] + D2[1:2 * Lp:2])
    else:
        P = D2.mean(axis=0, keepdims=True)
    flat = np.ascontiguousarray(P.transpose(1, 0, 2)).reshape(B, cfg.head_in)
    out = flat @ params["head.W"].T + params["head.b"]
    _check(out, "head")
    cache = {
        "config": cfg, "shape": batch.shape, "cells": (cache_f, cache_b, cache_u),
        "masks": (m1, m2), "D1": D1, "A": A, "flat": flat,
    }
    return out, cache


def backward(params: ModelParams, cache: dict, output_grad: np.ndarray) -> ModelParams:
    """Exact gradients of ``sum(output * output_grad)`` with respect to every parameter."""
    cfg = params.config
    if cache.get("config") != cfg:
        raise ShapeError("cache was produced by a different model configuration")
    B, L, _ = cache["shape"]
    dout = np.asarray(output_grad, dtype=cfg.dtype)
    if dout.shape != (B, cfg.out_dim):
        raise ShapeError(f"output_grad must be {(B, cfg.out_dim)}, got {dout.shape}")
    cache_f, cache_b, cache_u = cache["cells"]
    m1, m2 = cache["masks"]
    g: dict[str, np.ndarray] = {}

    g["head.W"] = dout.T @ cache["flat"]
    g["head.b"] = dout.sum(axis=0)
    dflat = dout @ params["head.W"]
    dP = dflat.reshape(B, cfg.pooled_len, cfg.fc_dim).transpose(1, 0, 2)
    if cfg.pooling == "avg2":
        Lp = cfg.pooled_len
        dD2 = np.zeros((L, B, cfg.fc_dim), dtype=dout.dtype)
        dD2[0:2 * Lp:2] = 0.5 * dP
        dD2[1:2 * Lp:2] = 0.5 * dP
    else:
        dD2 = np.broadcast_to(dP / L, (L, B, cfg.fc_dim))
    dR = dD2 * m2 if m2 is not None else dD2
    dA = dR * (cache["A"] > 0)
    g["fc1.W"] = dA.reshape(L * B, -1).T @ cache["D1"].reshape(L * B, -1)
    g["fc1.b"] = dA.sum(axis=(0, 1))
    dD1 = dA @ params["fc1.W"]
    dY2 = dD1 * m1 if m1 is not None else dD1

    gu, dY1 = _gru_seq_backward(params.cell("gru"), cache_u, dY2)
    h = cfg.bi_hidden
    gf, _ = _gru_seq_backward(params.cell("bigru_fwd"), cache_f, dY1[:, :, :h])
    gb, _ = _gru_seq_backward(params.cell("bigru_bwd"), cache_b, dY1[::-1, :, h:])
    for prefix, cell_grads in (("gru", gu), ("bigru_fwd", gf), ("bigru_bwd", gb)):
        for k, v in cell_grads.items():
            g[f"{prefix}.{k}"] = v
    return ModelParams(cfg, g)


def predict(params: ModelParams, obs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode outputs in fixed-size chunks."""
    outs = [forward(params, obs[i:i + batch_size], "eval")[0]
            for i in range(0, len(obs), batch_size)]
    if not outs:
        return np.zeros((0, params.config.out_dim))
    return np.concatenate(outs).astype(np.float64)


# --- checkpoints ------------------------------------------------------------

def checkpoint_dict(params: ModelParams, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "tensors": {
            name: {"shape": list(t.shape), "data": [float(v) for v in t.ravel()]}
            for name, t in params
        },
        "extra": extra or {},
    }


def params_from_dict(d: dict) -> ModelParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError("not a bgforecast checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {d.get('version')}")
    cfg = ModelConfig(**d["config"])
    tensors = {name: np.asarray(t["data"], dtype=cfg.dtype).reshape(t["shape"])
               for name, t in d["tensors"].items()}
    return ModelParams(cfg, tensors)


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None) -> Path:
    """Write a JSON checkpoint; float repr round-trips float64 values exactly."""
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(params, extra), sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return params_from_dict(d), d.get("extra", {})



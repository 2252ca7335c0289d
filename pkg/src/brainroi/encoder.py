"""Cross-subject soft-ROI encoder (numpy, float64).

Voxels become keys built from a Fourier-feature coordinate code plus fused
per-atlas ROI embeddings; their scalar activations become values; L learned
queries attend over all voxels and an output projection yields a fixed
L x D_out token matrix whatever the subject's voxel count.

Parameters live in a flat ``dict[str, np.ndarray]``. ``backward`` returns a
dict with the same keys holding exact gradients of the MSE alignment loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .volume_atlas import MembershipMatrix, normalize_coords  # noqa: F401  (re-exported)

FUSION_MODES = ("concat", "gate", "voxel_gate")
FROZEN = frozenset({"rff_freqs"})


@dataclass
class EncoderConfig:
    d_c: int = 32
    d_roi: int = 16
    d_v: int = 32
    L: int = 8
    D_out: int = 64
    n_rff: int = 16
    fusion_mode: str = "voxel_gate"
    d_k: int | None = None
    d_red: int | None = None
    attn_dropout: float = 0.0
    ffn_dropout: float = 0.0
    rff_sigma: float = 1.0

    def __post_init__(self):
        if self.d_k is None:
            self.d_k = self.d_c
        if self.d_red is None:
            self.d_red = max(4, self.d_roi // 4)
        if self.d_k != self.d_c:
            raise ValueError(f"key dim must equal coordinate dim (d_k={self.d_k}, d_c={self.d_c})")
        for name in ("d_c", "d_roi", "d_v", "L", "D_out", "n_rff", "d_red"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        for name in ("attn_dropout", "ffn_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def key_input_dim(self, n_atlases: int) -> int:
        if self.fusion_mode == "concat":
            return self.d_c + n_atlases * self.d_roi
        return self.d_c + self.d_roi


@dataclass
class SubjectBatch:
    """One subject's voxels. ``signals`` is (N_s,) for one sample or (B, N_s)."""

    coords: np.ndarray
    signals: np.ndarray
    memberships: list[MembershipMatrix] = field(default_factory=list)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.signals = np.asarray(self.signals, dtype=np.float64)
        n = len(self.coords)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.signals.shape[-1] != n:
            raise ValueError(f"signals last dim {self.signals.shape[-1]} != N_s {n}")
        if any(m.n_rows != n for m in self.memberships):
            raise ValueError("membership row counts differ from N_s")
        if n and (np.abs(self.coords) > 1.0 + 1e-12).any():
            raise ValueError("coords must lie in [-1, 1]^3")

    @property
    def n_voxels(self) -> int:
        return len(self.coords)

    def permuted(self, order: np.ndarray) -> "SubjectBatch":
        return SubjectBatch(self.coords[order], self.signals[..., order],
                            [m.permuted(order) for m in self.memberships])


# -- parameters ---------------------------------------------------------------

def param_shapes(config: EncoderConfig, n_labels: Sequence[int]) -> dict[str, tuple[int, ...]]:
    c = config
    shapes = {
        "rff_freqs": (c.n_rff, 3),
        "coord_mlp.w1": (2 * c.n_rff, c.d_c),
        "coord_mlp.b1": (c.d_c,),
        "coord_mlp.w2": (c.d_c, c.d_c),
        "coord_mlp.b2": (c.d_c,),
        "gate_mlp.w1": (c.d_roi, c.d_roi),
        "gate_mlp.b1": (c.d_roi,),
        "gate_mlp.w2": (c.d_roi, 1),
        "gate_mlp.b2": (1,),
        "vg_reduce.w": (c.d_roi, c.d_red),
        "vg_reduce.b": (c.d_red,),
        "vg_gate.w1": (c.d_red, c.d_red),
        "vg_gate.b1": (c.d_red,),
        "vg_gate.w2": (c.d_red, 1),
        "vg_gate.b2": (1,),
        "key_proj.w": (c.key_input_dim(len(n_labels)), c.d_k),
        "value_proj.w": (c.d_v,),
        "value_proj.b": (c.d_v,),
        "queries": (c.L, c.d_k),
        "out_proj.w": (c.d_v, c.D_out),
        "out_proj.b": (c.D_out,),
    }
    for a, k in enumerate(n_labels):
        shapes[f"roi_table.{a}"] = (int(k), c.d_roi)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    # biases share the bound of their weight matrix
    if name.startswith("roi_table") or name.startswith("value_proj") or name == "queries":
        return 1
    return shape[0]


def init_params(config: EncoderConfig, n_labels: Sequence[int], seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform fan-in scaled init; RFF frequencies ~ N(0, rff_sigma^2)."""
    if len(n_labels) < 1:
        raise ValueError("need at least one atlas")
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config, n_labels)
    params = {}
    for name, shape in shapes.items():
        if name == "rff_freqs":
            params[name] = rng.normal(0.0, config.rff_sigma, size=shape)
            continue
        wname = name
        if name.endswith(".b"):
            wname = name[:-2] + ".w"
        elif name.endswith((".b1", ".b2")):
            wname = name[:-2] + "w" + name[-1]
        fan = _fan_in(wname, shapes.get(wname, shape))
        bound = 1.0 / math.sqrt(fan)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zeros_like(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- primitives -----------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(p, dp, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def _dropout_mask(rng, shape, rate):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _apply(x, mask):
    return x if mask is None else x * mask


# -- forward pieces (public, per operation) -------------------------------------

def encode_coords(coords: np.ndarray, params, mask=None) -> np.ndarray:
    """Fourier features [sin 2piFp, cos 2piFp] through a 2-layer SiLU MLP."""
    return _coord_forward(np.asarray(coords, dtype=np.float64), params, mask)["C"]


def _coord_forward(P, params, mask=None):
    theta = 2.0 * np.pi * P @ params["rff_freqs"].T
    phi = np.concatenate([np.sin(theta), np.cos(theta)], axis=1)
    h1 = phi @ params["coord_mlp.w1"] + params["coord_mlp.b1"]
    a1 = _apply(_silu(h1), mask)
    C = a1 @ params["coord_mlp.w2"] + params["coord_mlp.b2"]
    return {"P": P, "theta": theta, "phi": phi, "h1": h1, "a1": a1, "mask": mask, "C": C}


def embed_roi(membership: MembershipMatrix, table: np.ndarray) -> np.ndarray:
    """E = R W as a row gather; all-zero membership rows give zero vectors."""
    table = np.asarray(table)
    if membership.n_cols != table.shape[0]:
        raise ValueError(f"membership has {membership.n_cols} columns, table has {table.shape[0]} rows")
    idx = membership.col_index
    out = table[np.maximum(idx, 0)].copy()
    out[idx < 0] = 0.0
    return out


def fuse_concat(C, embeddings: Sequence[np.ndarray], key_proj: np.ndarray) -> np.ndarray:
    Zin = np.concatenate([C, *embeddings], axis=1)
    if Zin.shape[1] != key_proj.shape[0]:
        raise ValueError(f"concat feature dim {Zin.shape[1]} != key_proj input {key_proj.shape[0]}")
    return Zin @ key_proj


def _gate_forward(E, params, mask=None):
    # E: (A, N, d_roi)
    M = E.mean(axis=1)
    g1 = M @ params["gate_mlp.w1"] + params["gate_mlp.b1"]
    ga = _apply(_silu(g1), mask)
    s = (ga @ params["gate_mlp.w2"] + params["gate_mlp.b2"])[:, 0]
    alpha = softmax(s)
    Et = np.einsum("a,and->nd", alpha, E)
    return {"M": M, "g1": g1, "ga": ga, "mask": mask, "alpha": alpha, "Et": Et}


def _voxel_gate_forward(E, params, mask=None):
    Es = np.transpose(E, (1, 0, 2))  # (N, A, d_roi)
    r = Es @ params["vg_reduce.w"] + params["vg_reduce.b"]
    v1 = r @ params["vg_gate.w1"] + params["vg_gate.b1"]
    va = _apply(_silu(v1), mask)
    u = (va @ params["vg_gate.w2"] + params["vg_gate.b2"])[..., 0]
    alpha = softmax(u, axis=1)
    Et = np.einsum("na,nad->nd", alpha, Es)
    return {"Es": Es, "r": r, "v1": v1, "va": va, "mask": mask, "alpha": alpha, "Et": Et}


def fuse_gate(C, embeddings: Sequence[np.ndarray], params) -> tuple[np.ndarray, np.ndarray]:
    """Atlas-level gate: one softmax weight per atlas from voxel-pooled embeddings."""
    g = _gate_forward(np.stack(embeddings), params)
    return np.concatenate([C, g["Et"]], axis=1) @ params["key_proj.w"], g["alpha"]


def fuse_voxel_gate(C, embeddings: Sequence[np.ndarray], params) -> tuple[np.ndarray, np.ndarray]:
    """Voxel-level gate: an (N, A) softmax weight matrix."""
    g = _voxel_gate_forward(np.stack(embeddings), params)
    return np.concatenate([C, g["Et"]], axis=1) @ params["key_proj.w"], g["alpha"]


def project_values(signals: np.ndarray, params) -> np.ndarray:
    x = np.asarray(signals, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("non-finite voxel signal")
    return x[..., None] * params["value_proj.w"] + params["value_proj.b"]


# -- full pass --------------------------------------------------------------------

def _forward(batch: SubjectBatch, params, config: EncoderConfig, rng=None):
    N = batch.n_voxels
    if N == 0:
        raise ValueError("subject batch has no voxels")
    if not batch.memberships:
        raise ValueError("subject batch has no atlas memberships")
    X = batch.signals.reshape(-1, N)
    drop = rng
    A = len(batch.memberships)

    coord = _coord_forward(batch.coords, params, _dropout_mask(drop, (N, config.d_c), config.ffn_dropout))
    E = np.stack([embed_roi(m, params[f"roi_table.{a}"]) for a, m in enumerate(batch.memberships)])
    cache = {"coord": coord, "E": E, "X": X, "mode": config.fusion_mode,
             "idx": [m.col_index for m in batch.memberships]}

    if config.fusion_mode == "concat":
        Zin = np.concatenate([coord["C"], *E], axis=1)
    elif config.fusion_mode == "gate":
        g = _gate_forward(E, params, _dropout_mask(drop, (A, config.d_roi), config.ffn_dropout))
        cache["gate"] = g
        Zin = np.concatenate([coord["C"], g["Et"]], axis=1)
    else:
        g = _voxel_gate_forward(E, params, _dropout_mask(drop, (N, A, config.d_red), config.ffn_dropout))
        cache["gate"] = g
        Zin = np.concatenate([coord["C"], g["Et"]], axis=1)
    if Zin.shape[1] != params["key_proj.w"].shape[0]:
        raise ValueError(f"key input dim {Zin.shape[1]} does not match key_proj {params['key_proj.w'].shape}")

    K = Zin @ params["key_proj.w"]
    scale = 1.0 / math.sqrt(config.d_k)
    S = params["queries"] @ K.T * scale
    Aw = softmax(S, axis=1)
    amask = _dropout_mask(drop, Aw.shape, config.attn_dropout)
    Ad = _apply(Aw, amask)
    V = project_values(X, params)  # (B, N, d_v)
    O = np.einsum("ln,bnd->bld", Ad, V)
    Z = O @ params["out_proj.w"] + params["out_proj.b"]
    cache.update(Zin=Zin, K=K, scale=scale, Aw=Aw, amask=amask, Ad=Ad, V=V, O=O)
    return Z, cache


def encode(batch: SubjectBatch, params, config: EncoderConfig, dropout_enabled: bool = False,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Visual tokens, (L, D_out) for 1-D signals or (B, L, D_out) for 2-D.

    Dropout needs both ``dropout_enabled`` and an ``rng``.
    """
    Z, _ = _forward(batch, params, config, rng if dropout_enabled else None)
    return Z[0] if batch.signals.ndim == 1 else Z


def alignment_loss(z_fmri: np.ndarray, z_clip: np.ndarray) -> float:
    z_fmri, z_clip = np.asarray(z_fmri), np.asarray(z_clip)
    if z_fmri.shape != z_clip.shape:
        raise ValueError(f"shape mismatch {z_fmri.shape} vs {z_clip.shape}")
    return float(np.mean((z_fmri - z_clip) ** 2))


def _backward(cache, dZ, params, config: EncoderConfig):
    g = zeros_like(params)
    X, V, O, Ad, Aw, K, Zin = (cache[k] for k in ("X", "V", "O", "Ad", "Aw", "K", "Zin"))

    g["out_proj.w"] = np.einsum("bld,blo->do", O, dZ)
    g["out_proj.b"] = dZ.sum(axis=(0, 1))
    dO = dZ @ params["out_proj.w"].T
    dAd = np.einsum("bld,bnd->ln", dO, V)
    dV = np.einsum("ln,bld->bnd", Ad, dO)
    g["value_proj.w"] = np.einsum("bn,bnd->d", X, dV)
    g["value_proj.b"] = dV.sum(axis=(0, 1))

    dAw = _apply(dAd, cache["amask"])
    dS = _softmax_backward(Aw, dAw, axis=1) * cache["scale"]
    g["queries"] = dS @ K
    dK = dS.T @ params["queries"]
    g["key_proj.w"] = Zin.T @ dK
    dZin = dK @ params["key_proj.w"].T

    d_c = config.d_c
    dC = dZin[:, :d_c]
    E = cache["E"]
    A = E.shape[0]
    mode = cache["mode"]
    if mode == "concat":
        dE = dZin[:, d_c:].reshape(len(dZin), A, config.d_roi).transpose(1, 0, 2)
    elif mode == "gate":
        gc = cache["gate"]
        dEt = dZin[:, d_c:]
        alpha = gc["alpha"]
        dE = alpha[:, None, None] * dEt[None]
        dalpha = np.einsum("nd,and->a", dEt, E)
        ds = _softmax_backward(alpha, dalpha)
        g["gate_mlp.w2"] = gc["ga"].T @ ds[:, None]
        g["gate_mlp.b2"] = np.array([ds.sum()])
        dga = ds[:, None] * params["gate_mlp.w2"][:, 0][None, :]
        dg1 = _apply(dga, gc["mask"]) * _silu_grad(gc["g1"])
        g["gate_mlp.w1"] = gc["M"].T @ dg1
        g["gate_mlp.b1"] = dg1.sum(axis=0)
        dM = dg1 @ params["gate_mlp.w1"].T
        dE = dE + dM[:, None, :] / E.shape[1]
    else:
        gc = cache["gate"]
        dEt = dZin[:, d_c:]
        alpha, Es = gc["alpha"], gc["Es"]
        dEs = alpha[:, :, None] * dEt[:, None, :]
        dalpha = np.einsum("nd,nad->na", dEt, Es)
        du = _softmax_backward(alpha, dalpha, axis=1)
        g["vg_gate.w2"] = np.einsum("nah,na->h", gc["va"], du)[:, None]
        g["vg_gate.b2"] = np.array([du.sum()])
        dva = du[:, :, None] * params["vg_gate.w2"][:, 0]
        dv1 = _apply(dva, gc["mask"]) * _silu_grad(gc["v1"])
        g["vg_gate.w1"] = np.einsum("nar,nah->rh", gc["r"], dv1)
        g["vg_gate.b1"] = dv1.sum(axis=(0, 1))
        dr = dv1 @ params["vg_gate.w1"].T
        g["vg_reduce.w"] = np.einsum("nad,nar->dr", Es, dr)
        g["vg_reduce.b"] = dr.sum(axis=(0, 1))
        dEs = dEs + dr @ params["vg_reduce.w"].T
        dE = dEs.transpose(1, 0, 2)

    for a, idx in enumerate(cache["idx"]):
        rows = idx >= 0
        gt = np.zeros_like(params[f"roi_table.{a}"])
        np.add.at(gt, idx[rows], dE[a][rows])
        g[f"roi_table.{a}"] = gt

    cc = cache["coord"]
    g["coord_mlp.w2"] = cc["a1"].T @ dC
    g["coord_mlp.b2"] = dC.sum(axis=0)
    da1 = dC @ params["coord_mlp.w2"].T
    dh1 = _apply(da1, cc["mask"]) * _silu_grad(cc["h1"])
    g["coord_mlp.w1"] = cc["phi"].T @ dh1
    g["coord_mlp.b1"] = dh1.sum(axis=0)
    dphi = dh1 @ params["coord_mlp.w1"].T
    R = config.n_rff
    dtheta = dphi[:, :R] * np.cos(cc["theta"]) - dphi[:, R:] * np.sin(cc["theta"])
    g["rff_freqs"] = 2.0 * np.pi * dtheta.T @ cc["P"]
    return g


def loss_and_grad(batch: SubjectBatch, params, config: EncoderConfig, z_clip: np.ndarray,
                  rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """MSE alignment loss averaged over all samples and entries, with its gradient."""
    Z, cache = _forward(batch, params, config, rng)
    T = np.asarray(z_clip, dtype=np.float64).reshape(Z.shape)
    diff = Z - T
    loss = float(np.mean(diff ** 2))
    dZ = 2.0 * diff / diff.size
    return loss, _backward(cache, dZ, params, config)


def backward(batch: SubjectBatch, params, config: EncoderConfig, z_clip: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradient of ``alignment_loss(encode(batch), z_clip)``; dropout off."""
    return loss_and_grad(batch, params, config, z_clip)[1]

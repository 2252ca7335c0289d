"""Two-stage training on synthetic multi-subject data.

The generator stands in for real recordings: every sample has a latent
stimulus code z, the "image" tokens are a fixed linear function of z shared
by all subjects, and each subject sees z through its own random voxel
readout. Voxel counts, grids and masks differ per subject; atlases come from
shared template volumes resampled onto each subject grid.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import encoder as enc
from .volume_atlas import (
    GlobalLabelSpace,
    LabelVolume,
    MembershipMatrix,
    SubjectMask,
    VoxelGrid,
    VoxelIndexList,
    build_global_label_space,
    build_membership_matrix,
    extract_mask_voxels,
    normalize_coords,
    resample_nearest,
)

log = logging.getLogger(__name__)

WARMUP_ATTN_DROPOUT = 0.50
WARMUP_FFN_DROPOUT = 0.15


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 40
    batch_size: int = 8
    max_lr: float = 3e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_dropout_epochs: int = 3
    seed: int = 42

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.max_lr < 0:
            raise ValueError("max_lr must be >= 0")


# Stage presets. "paper" keeps the published epoch/batch/lr values; "desk"
# shortens runs for synthetic data and raises the peak lr to match.
PRESETS: dict[str, dict[int, dict]] = {
    "desk": {
        1: dict(epochs=40, batch_size=8, max_lr=3e-3, warmup_dropout_epochs=3),
        2: dict(epochs=30, batch_size=8, max_lr=1e-3, warmup_dropout_epochs=0),
    },
    "paper": {
        1: dict(epochs=180, batch_size=32, max_lr=3e-4, warmup_dropout_epochs=3),
        2: dict(epochs=200, batch_size=32, max_lr=1e-4, warmup_dropout_epochs=0),
    },
}


def preset_config(preset: str, stage: int, seed: int = 42, **overrides) -> TrainConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    return TrainConfig(stage=stage, seed=seed, **{**PRESETS[preset][stage], **overrides})


# -- synthetic data -------------------------------------------------------------

@dataclass
class SyntheticDatasetSpec:
    n_subjects: int = 3
    voxels_per_subject: tuple[int, ...] = (96, 128, 160)
    n_atlases: int = 2
    labels_per_atlas: int = 8
    samples_per_subject: int = 60
    latent_dim: int = 4
    noise_sigma: float = 0.0
    seed: int = 42
    val_fraction: float = 0.2

    def __post_init__(self):
        self.voxels_per_subject = tuple(int(v) for v in self.voxels_per_subject)
        if len(self.voxels_per_subject) != self.n_subjects:
            raise ValueError("voxels_per_subject needs one entry per subject")
        counts = (self.n_subjects, self.n_atlases, self.labels_per_atlas, self.samples_per_subject, self.latent_dim)
        if min(counts) < 1 or min(self.voxels_per_subject) < 1:
            raise ValueError("all counts must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class SubjectData:
    name: str
    grid: VoxelGrid
    voxels: VoxelIndexList
    coords: np.ndarray
    memberships: list[MembershipMatrix]
    signals: np.ndarray  # (S, N_s)
    latents: np.ndarray  # (S, latent_dim)
    targets: np.ndarray  # (S, L, D_out)
    train_idx: np.ndarray
    val_idx: np.ndarray
    readout: np.ndarray = field(repr=False)  # (N_s, latent_dim)
    mask: SubjectMask | None = field(default=None, repr=False)
    atlas_volumes: list[LabelVolume] = field(default_factory=list, repr=False)

    @property
    def n_voxels(self) -> int:
        return self.voxels.count

    def batch(self, sample_idx) -> enc.SubjectBatch:
        return enc.SubjectBatch(self.coords, self.signals[sample_idx], self.memberships)


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    subjects: list[SubjectData]
    label_spaces: list[GlobalLabelSpace]
    token_map: np.ndarray  # (L, latent_dim)
    token_dir: np.ndarray  # (D_out,)
    templates: list[LabelVolume] = field(default_factory=list, repr=False)

    @property
    def n_labels(self) -> list[int]:
        return [s.size for s in self.label_spaces]


def _subject_grid(s: int, n_voxels: int) -> VoxelGrid:
    side = max(4, math.ceil((1.5 * n_voxels) ** (1 / 3)))
    return VoxelGrid((side + s % 2, side, side + (s + 1) % 3))


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, token_shape: tuple[int, int] = (8, 64)) -> SyntheticDataset:
    """Build a seeded multi-subject dataset.

    Targets are ``Z[l, :] = (P z)[l] * u`` for a fixed random P (L x latent)
    and direction u: a linear map of z chosen so the encoder can represent
    it. Subject signals are ``H_s z + noise`` with each readout column
    centred over voxels.
    """
    L, D = token_shape
    rng = np.random.default_rng(spec.seed)
    m = spec.latent_dim
    P = rng.normal(0.0, 1.0 / math.sqrt(m), size=(L, m))
    u = rng.normal(0.0, 1.0, size=D)

    template = VoxelGrid((6, 6, 6), (1.75, 1.75, 1.75))
    templates = [LabelVolume(template, rng.integers(0, spec.labels_per_atlas + 1, size=template.dims))
                 for _ in range(spec.n_atlases)]

    pending = []
    for s, n_vox in enumerate(spec.voxels_per_subject):
        grid = _subject_grid(s, n_vox)
        if n_vox > grid.size:
            raise ValueError(f"subject {s}: {n_vox} voxels do not fit grid {grid.dims}")
        flat = np.zeros(grid.size, dtype=np.int64)
        flat[rng.choice(grid.size, size=n_vox, replace=False)] = 1
        mask = SubjectMask(grid, flat)
        voxels = extract_mask_voxels(mask)
        atlases = [resample_nearest(t, grid) for t in templates]
        pending.append((grid, mask, voxels, atlases))

    spaces = []
    for a in range(spec.n_atlases):
        sets = [atl[a].label_set(mask) for _, mask, _, atl in pending]
        spaces.append(build_global_label_space(f"atlas{a}", sets))

    n_val = max(1, int(round(spec.val_fraction * spec.samples_per_subject)))
    n_train = spec.samples_per_subject - n_val
    if n_train < 1:
        raise ValueError("not enough samples for a train/val split")

    subjects = []
    for s, (grid, mask, voxels, atlases) in enumerate(pending):
        N = voxels.count
        H = rng.normal(0.0, 1.0 / math.sqrt(m), size=(N, m))
        H -= H.mean(axis=0, keepdims=True)
        z = rng.normal(size=(spec.samples_per_subject, m))
        x = z @ H.T
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
        targets = (z @ P.T)[:, :, None] * u[None, None, :]
        subjects.append(SubjectData(
            name=f"S{s + 1}",
            grid=grid,
            voxels=voxels,
            coords=normalize_coords(voxels, grid),
            memberships=[build_membership_matrix(atl, voxels, sp) for atl, sp in zip(atlases, spaces)],
            signals=x,
            latents=z,
            targets=targets,
            train_idx=np.arange(n_train),
            val_idx=np.arange(n_train, spec.samples_per_subject),
            readout=H,
            mask=mask,
            atlas_volumes=atlases,
        ))
    return SyntheticDataset(spec, subjects, spaces, P, u, templates)


# -- schedule / optimizer -------------------------------------------------------

def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Linear warm-up from max_lr/25 to max_lr, then cosine down to max_lr/1e4."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, end = max_lr / div_factor, max_lr / final_div_factor
    peak = pct_start * total_steps
    if step <= peak:
        if peak == 0:
            return max_lr
        return start + (max_lr - start) * step / peak
    span = (total_steps - 1) - peak
    frac = (step - peak) / span if span > 0 else 1.0
    return end + (max_lr - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "OptimizerState":
        return cls(enc.zeros_like(params), enc.zeros_like(params), 0)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               config: TrainConfig, frozen: Sequence[str] = enc.FROZEN) -> None:
    """In-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# -- stage driver ---------------------------------------------------------------

@dataclass
class StageResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_macro_val: float
    curve: list[dict]
    final_params: dict[str, np.ndarray]


def subject_mse(subject: SubjectData, params, config: enc.EncoderConfig, idx) -> float:
    Z = enc.encode(subject.batch(idx), params, config)
    return enc.alignment_loss(Z, subject.targets[idx])


def macro_val_mse(dataset: SyntheticDataset, params, config: enc.EncoderConfig) -> tuple[float, list[float]]:
    per = [subject_mse(s, params, config, s.val_idx) for s in dataset.subjects]
    return math.fsum(per) / len(per), per


def _batch_loss_grad(dataset, items, params, config, rng):
    """Mean per-sample loss over ``items`` [(subject, sample), ...] and its gradient."""
    total = len(items)
    loss = 0.0
    grads = enc.zeros_like(params)
    for s in sorted({si for si, _ in items}):
        idx = np.array([j for si, j in items if si == s])
        subj = dataset.subjects[s]
        l, g = enc.loss_and_grad(subj.batch(idx), params, config, subj.targets[idx], rng)
        w = len(idx) / total
        loss += w * l
        for k in grads:
            grads[k] += w * g[k]
    return loss, grads


def run_stage(stage_cfg: TrainConfig, dataset: SyntheticDataset, params: dict[str, np.ndarray],
              config: enc.EncoderConfig) -> StageResult:
    """Train one stage from ``params`` (copied); returns the best-by-macro-val checkpoint."""
    if not dataset.subjects:
        raise ValueError("empty dataset")
    expected = enc.param_shapes(config, dataset.n_labels)
    for k, shape in expected.items():
        if k not in params or params[k].shape != shape:
            raise ValueError(f"parameter {k!r} missing or mis-shaped for this dataset/config")

    params = {k: v.copy() for k, v in params.items()}
    eval_cfg = replace(config, attn_dropout=0.0, ffn_dropout=0.0)
    drop_cfg = replace(config, attn_dropout=WARMUP_ATTN_DROPOUT, ffn_dropout=WARMUP_FFN_DROPOUT)
    rng = np.random.default_rng([stage_cfg.seed, stage_cfg.stage])
    train_items = [(s, int(j)) for s, subj in enumerate(dataset.subjects) for j in subj.train_idx]
    n_batches = math.ceil(len(train_items) / stage_cfg.batch_size)
    total_steps = stage_cfg.epochs * n_batches
    state = OptimizerState.zeros(params)

    def train_mse():
        per = [subject_mse(s, params, eval_cfg, s.train_idx) for s in dataset.subjects]
        n = [len(s.train_idx) for s in dataset.subjects]
        return math.fsum(p * c for p, c in zip(per, n)) / sum(n)

    macro, per = macro_val_mse(dataset, params, eval_cfg)
    curve = [_row(0, stage_cfg.stage, train_mse(), per, macro)]
    best = (macro, 0, {k: v.copy() for k, v in params.items()})

    step = 0
    for epoch in range(1, stage_cfg.epochs + 1):
        dropout_on = stage_cfg.stage == 1 and epoch <= stage_cfg.warmup_dropout_epochs
        cfg = drop_cfg if dropout_on else eval_cfg
        order = rng.permutation(len(train_items))
        losses = []
        for b in range(n_batches):
            items = [train_items[i] for i in order[b * stage_cfg.batch_size:(b + 1) * stage_cfg.batch_size]]
            loss, grads = _batch_loss_grad(dataset, items, params, cfg, rng if dropout_on else None)
            adamw_step(params, grads, state, one_cycle_lr(step, total_steps, stage_cfg.max_lr), stage_cfg)
            losses.append(loss)
            step += 1
        macro, per = macro_val_mse(dataset, params, eval_cfg)
        curve.append(_row(epoch, stage_cfg.stage, float(np.mean(losses)), per, macro))
        if macro < best[0]:
            best = (macro, epoch, {k: v.copy() for k, v in params.items()})
        log.debug("stage %d epoch %d train %.5f macro-val %.5f", stage_cfg.stage, epoch, losses[-1], macro)
    return StageResult(best[2], best[1], best[0], curve, params)


def _row(epoch, stage, train, per, macro) -> dict:
    row = {"epoch": epoch, "stage": stage, "train_mse": train}
    row.update({f"val_mse_s{i + 1}": v for i, v in enumerate(per)})
    row["macro_val_mse"] = macro
    return row


def curve_csv(curve: list[dict], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.DictWriter(buf, fieldnames=list(curve[0]), lineterminator="\n")
    writer.writeheader()
    for row in curve:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

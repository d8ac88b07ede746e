"""Optimizer, schedule, augmentation and the pretrain / finetune / eval drivers."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import numcore as nc
from . import objectives as O
from .data import Dataset
from .errors import FormatError, NumericError, ShapeError, UndefinedMetricError
from .isdt import atomic_write, read_container, write_container
from .masking import IntensityMaskSpec, MaskMode, SpatialMaskSpec, make_masked_pair
from .numcore import Tensor
from .rng import Xoshiro256, derive_seed, stream

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "isdmae-checkpoint/1"


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------

@dataclass
class LrSchedule:
    base_lr: float = 1e-3
    gamma: float = 0.96
    step_size: int = 100000
    unit: str = "batch-step"

    def __post_init__(self):
        if self.base_lr <= 0 or self.gamma <= 0 or self.step_size < 1:
            raise ValueError("schedule needs base_lr > 0, gamma > 0, step_size >= 1")
        if self.unit not in ("batch-step", "epoch"):
            raise ValueError(f"schedule unit must be batch-step or epoch, got {self.unit!r}")


def lr_at(schedule: LrSchedule, n: int) -> float:
    """Step decay: ``base_lr * gamma ** floor(n / step_size)``."""
    if n < 0:
        raise ValueError("schedule position must be >= 0")
    return schedule.base_lr * schedule.gamma ** (n // schedule.step_size)


PRETRAIN_SCHEDULE = LrSchedule(1e-3, 0.96, 100000, "batch-step")
FINETUNE_SCHEDULE = LrSchedule(1e-3, 0.9, 1, "epoch")


@dataclass
class AugmentSpec:
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    max_rotation_deg: float = 180.0
    scale_min: float = 0.8
    scale_max: float = 1.2
    p_rotate: float = 0.5
    p_scale: float = 0.5

    def __post_init__(self):
        for name in ("p_flip_h", "p_flip_v", "p_rotate", "p_scale"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("scale bounds must satisfy 0 < scale_min <= scale_max")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_bins: int = 16
    intensity_ratio: float = 0.5
    patch: int = 4
    spatial_ratio: float = 0.5
    mask_mode: str = "dual"
    logit_scale: float = O.DEFAULT_LOGIT_SCALE
    augment: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        MaskMode(self.mask_mode)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class RunConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(**asdict(PRETRAIN_SCHEDULE)))
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    @classmethod
    def for_phase(cls, phase: str) -> "RunConfig":
        if phase == "pretrain":
            return cls()
        return cls(
            train=TrainConfig(epochs=20, batch_size=16, augment=False),
            schedule=LrSchedule(**asdict(FINETUNE_SCHEDULE)),
        )

    def sections(self) -> dict:
        return {"model": self.model, "train": self.train, "schedule": self.schedule, "augment": self.augment}

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in self.sections().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=M.ModelConfig.from_dict(d["model"]),
            train=TrainConfig(**d["train"]),
            schedule=LrSchedule(**d["schedule"]),
            augment=AugmentSpec(**d["augment"]),
        )


# ----------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------

@dataclass
class OptimState:
    names: list[str]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: M.Params, names: Sequence[str], cfg: TrainConfig | None = None) -> "OptimState":
        cfg = cfg or TrainConfig()
        return cls(
            names=list(names), betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay,
            m={n: np.zeros_like(params[n].data) for n in names},
            v={n: np.zeros_like(params[n].data) for n in names},
        )


def adamw_step(params: M.Params, state: OptimState, lr: float) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update.

    Parameter arrays are replaced, never written in place.
    """
    missing = [n for n in state.names if params[n].grad is None]
    if missing:
        raise ValueError(f"missing gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in state.names:
        p = params[name]
        g = p.grad
        dt = p.data.dtype.type
        m = dt(b1) * state.m[name] + dt(1.0 - b1) * g
        v = dt(b2) * state.v[name] + dt(1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        with np.errstate(over="ignore", invalid="ignore"):
            decayed = p.data - dt(lr * state.weight_decay) * p.data
            update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(state.eps))
            new = (decayed - dt(lr) * update).astype(p.data.dtype)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"adamw: non-finite value in parameter {name}")
        p.data = new


def zero_grads(params: M.Params) -> None:
    for p in params.values():
        p.grad = None


# ----------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Transform:
    flip_h: bool = False
    flip_v: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0


def sample_transform(spec: AugmentSpec, seed: int) -> Transform:
    rng = Xoshiro256(seed)
    # fixed draw order so the stream position never depends on outcomes
    u = [rng.random() for _ in range(6)]
    angle = -spec.max_rotation_deg + 2 * spec.max_rotation_deg * u[3]
    scale = spec.scale_min + (spec.scale_max - spec.scale_min) * u[5]
    return Transform(
        flip_h=u[0] < spec.p_flip_h,
        flip_v=u[1] < spec.p_flip_v,
        angle_deg=angle if u[2] < spec.p_rotate else 0.0,
        scale=scale if u[4] < spec.p_scale else 1.0,
    )


def _source_coords(h: int, w: int, angle_deg: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    # output (r, c) samples the source at centre + R(-angle)(p - centre) / scale;
    # positive angles rotate counter-clockwise as displayed (rows grow downward)
    cr, cc = (h - 1) / 2, (w - 1) / 2
    th = math.radians(angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = r - cr, c - cc
    src_r = cr + (dr * cos + dc * sin) / scale
    src_c = cc + (-dr * sin + dc * cos) / scale
    return src_r, src_c


def _sample_bilinear(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros(img.shape, dtype=np.float64)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = img[..., np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            out += np.where(ok, wr * wc, 0.0) * vals
    return out.astype(img.dtype)


def _sample_nearest(img: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    rr = np.floor(src_r + 0.5).astype(np.int64)
    cc = np.floor(src_c + 0.5).astype(np.int64)
    ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    vals = img[..., np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
    return np.where(ok, vals, 0).astype(img.dtype)


def apply_transform(img: np.ndarray, tf: Transform, nearest: bool = False) -> np.ndarray:
    """Apply ``tf`` to a channel-first 2-D image (``C×H×W``) or a 3-D volume (flips only)."""
    out = np.asarray(img)
    spatial = out.ndim - 1
    if spatial == 3:
        # flips only for volumes
        if tf.flip_h:
            out = out[:, :, ::-1, :]
        if tf.flip_v:
            out = out[:, ::-1, :, :]
        return np.ascontiguousarray(out)
    if spatial != 2:
        raise ShapeError(f"augment expects C×H×W or C×H×W×D, got {out.shape}")
    if tf.flip_h:
        out = out[:, :, ::-1]
    if tf.flip_v:
        out = out[:, ::-1, :]
    out = np.ascontiguousarray(out)
    if tf.angle_deg == 0.0 and tf.scale == 1.0:
        return out
    src_r, src_c = _source_coords(out.shape[-2], out.shape[-1], tf.angle_deg, tf.scale)
    return (_sample_nearest if nearest else _sample_bilinear)(out, src_r, src_c)


def augment(img: np.ndarray, spec: AugmentSpec, seed: int, mask: np.ndarray | None = None):
    """One random transform applied to ``img`` and, identically, to ``mask``.

    Images are resampled bilinearly, masks by nearest neighbour so they stay
    binary.  Returns the image, or ``(image, mask)`` when a mask is given.
    """
    tf = sample_transform(spec, seed)
    out = apply_transform(img, tf)
    if mask is None:
        return out
    return out, apply_transform(mask, tf, nearest=True)


# ----------------------------------------------------------------------
# steps
# ----------------------------------------------------------------------

def build_pretrain_batch(images: np.ndarray, sample_seeds: Sequence[int], cfg: RunConfig):
    """Augment each original once, then derive both masked views from it."""
    tc = cfg.train
    targets, views_t, views_p = [], [], []
    for img, s in zip(images, sample_seeds):
        target = augment(img, cfg.augment, derive_seed(s, "augment")) if tc.augment else img
        pair = make_masked_pair(
            target,
            IntensityMaskSpec(tc.k_bins, tc.intensity_ratio, derive_seed(s, "mask-t")),
            SpatialMaskSpec(tc.patch, tc.spatial_ratio, derive_seed(s, "mask-p")),
            tc.mask_mode,
        )
        targets.append(target)
        views_t.append(pair.intensity_view)
        views_p.append(pair.spatial_view)
    return np.stack(targets), np.stack(views_t), np.stack(views_p)


def pretrain_loss(images: np.ndarray, sample_seeds: Sequence[int], params: M.Params,
                  cfg: RunConfig) -> tuple[Tensor, O.LossReport]:
    targets, views_t, views_p = build_pretrain_batch(images, sample_seeds, cfg)
    dtype = next(iter(params.values())).dtype
    b = len(targets)
    # both branches in one batch through the single shared parameter set
    out = M.forward(Tensor(np.concatenate([views_t, views_p]), dtype=dtype), params, cfg.model)
    recon, emb = out.reconstruction, out.embedding
    return O.total_loss(
        Tensor(targets, dtype=dtype), recon[:b], recon[b:], emb[:b], emb[b:], cfg.train.logit_scale
    )


def pretrain_step(images: np.ndarray, sample_seeds: Sequence[int], params: M.Params,
                  optim: OptimState, cfg: RunConfig, lr: float) -> O.LossReport:
    if len(images) < 1:
        raise ValueError("pretrain_step needs a batch of at least one image")
    zero_grads(params)
    loss, report = pretrain_loss(images, sample_seeds, params, cfg)
    loss.backward()
    adamw_step(params, optim, lr)
    return report


TASKS = {"seg": "segmentation", "cls": "classification",
         "segmentation": "segmentation", "classification": "classification"}


def finetune_loss(images: np.ndarray, targets: np.ndarray, params: M.Params, cfg: RunConfig,
                  task: str) -> Tensor:
    task = TASKS[task]
    dtype = next(iter(params.values())).dtype
    logits = M.task_forward(Tensor(images, dtype=dtype), params, cfg.model, task)
    return O.bce_loss(logits, np.asarray(targets).reshape(logits.shape))


def finetune_step(images: np.ndarray, targets: np.ndarray, params: M.Params, optim: OptimState,
                  cfg: RunConfig, task: str, lr: float) -> float:
    """One BCE step on unmasked inputs; returns the loss before the update."""
    zero_grads(params)
    loss = finetune_loss(images, targets, params, cfg, task)
    loss.backward()
    adamw_step(params, optim, lr)
    return float(loss.data)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: RunConfig
    params: M.Params
    optim: OptimState | None
    phase: str
    seed: int
    epoch: int = 0
    global_step: int = 0
    task: str | None = None
    history: list[list] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    named = {f"param/{k}": v.data for k, v in ckpt.params.items()}
    optim_meta = None
    if ckpt.optim is not None:
        o = ckpt.optim
        for n in o.names:
            named[f"optim.m/{n}"] = o.m[n]
            named[f"optim.v/{n}"] = o.v[n]
        optim_meta = {"names": o.names, "betas": list(o.betas), "eps": o.eps,
                      "weight_decay": o.weight_decay, "step": o.step}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "phase": ckpt.phase,
        "task": ckpt.task,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "rng": {"base_seed": ckpt.seed, "next_epoch": ckpt.epoch},
        "optim": optim_meta,
        "history": [[float(x) if isinstance(x, (float, np.floating)) else x for x in row]
                    for row in ckpt.history],
        "metadata": ckpt.metadata,
    }
    write_container(path, named, meta)


def load_checkpoint(path) -> Checkpoint:
    meta, named = read_container(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not an isdmae checkpoint")
    try:
        config = RunConfig.from_dict(meta["config"])
        params = {k[len("param/"):]: Tensor(v.copy(), requires_grad=True)
                  for k, v in named.items() if k.startswith("param/")}
        optim = None
        if meta["optim"] is not None:
            o = meta["optim"]
            optim = OptimState(
                names=list(o["names"]), betas=tuple(o["betas"]), eps=o["eps"],
                weight_decay=o["weight_decay"], step=o["step"],
                m={n: named[f"optim.m/{n}"].copy() for n in o["names"]},
                v={n: named[f"optim.v/{n}"].copy() for n in o["names"]},
            )
        return Checkpoint(
            config=config, params=params, optim=optim, phase=meta["phase"], seed=meta["seed"],
            epoch=meta["epoch"], global_step=meta["global_step"], task=meta.get("task"),
            history=meta["history"], metadata=meta.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from exc


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

@dataclass
class EvalResult:
    task: str
    rows: list[tuple]
    summary: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.task == "segmentation":
            w.writerow(["sample_id", "dice", "hausdorff"])
            for sid, d, h in self.rows:
                w.writerow([sid, f"{d:.6f}", "nan" if math.isnan(h) else f"{h:.6f}"])
        else:
            w.writerow(["sample_id", "score", "label"])
            for sid, s, y in self.rows:
                w.writerow([sid, f"{s:.6f}", int(y)])
        return buf.getvalue()


def predict(images: np.ndarray, params: M.Params, cfg: RunConfig, task: str,
            batch_size: int = 16) -> np.ndarray:
    """Logits for ``images`` without recording a graph."""
    task = TASKS[task]
    dtype = next(iter(params.values())).dtype
    outs = []
    with nc.no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i : i + batch_size], dtype=dtype)
            outs.append(M.task_forward(x, params, cfg.model, task).data)
    return np.concatenate(outs)


def evaluate(params: M.Params, cfg: RunConfig, ds: Dataset, task: str) -> EvalResult:
    task = TASKS[task]
    logits = predict(ds.images, params, cfg, task)
    rows = []
    if task == "segmentation":
        for sid, z, gt in zip(ds.ids, logits, ds.targets):
            pred = z[0] > 0
            g = gt[0] > 0.5
            try:
                hd = O.hausdorff(pred, g)
            except UndefinedMetricError:
                hd = math.nan
            rows.append((sid, O.dice(pred, g), hd))
        dices = [r[1] for r in rows]
        hds = [r[2] for r in rows if not math.isnan(r[2])]
        summary = {
            "n": len(rows),
            "mean_dice": float(np.mean(dices)),
            "std_dice": float(np.std(dices)),
            "mean_hausdorff": float(np.mean(hds)) if hds else math.nan,
            "undefined_hausdorff": len(rows) - len(hds),
        }
    else:
        scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
        rows = [(sid, float(s), int(y)) for sid, s, y in zip(ds.ids, scores, ds.targets)]
        try:
            auc = O.roc_auc([r[1] for r in rows], [r[2] for r in rows])
        except UndefinedMetricError:
            auc = math.nan
        summary = {"n": len(rows), "roc_auc": auc}
    return EvalResult(task, rows, summary)


# ----------------------------------------------------------------------
# drivers
# ----------------------------------------------------------------------

PRETRAIN_CURVE_HEADER = ["step", "ssim_loss", "cons_loss", "total", "lr"]
FINETUNE_CURVE_HEADER = ["step", "bce_loss", "lr"]


def _curve_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


@dataclass
class RunResult:
    checkpoint_path: Path
    curve_path: Path | None
    report_path: Path | None
    history: list[list]
    evaluation: EvalResult | None = None

    def epoch_means(self, steps_per_epoch: int, column: int = 3) -> list[float]:
        vals = [row[column] for row in self.history]
        return [float(np.mean(vals[i : i + steps_per_epoch])) for i in range(0, len(vals), steps_per_epoch)]


def _batches(n: int, batch_size: int, seed: int, tag: str, epoch: int) -> list[list[int]]:
    order = stream(seed, "order", tag, epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def run_pretrain(ds: Dataset, out_dir, cfg: RunConfig, seed: int,
                 resume: Checkpoint | None = None, stop_after_epoch: int | None = None) -> RunResult:
    """Dual-branch pretraining on the training split.

    ``stop_after_epoch`` ends the run early (as an interruption would) while
    keeping every epoch-indexed random stream identical to a full run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = ds.subset("train")
    if len(train) == 0:
        raise FormatError("dataset has no training samples")
    if resume is not None:
        params, optim = resume.params, resume.optim
        start_epoch, step, history = resume.epoch, resume.global_step, [list(r) for r in resume.history]
    else:
        params = M.init_params(cfg.model, derive_seed(seed, "init"))
        optim = OptimState.create(params, M.trainable_names(params, "pretrain"), cfg.train)
        start_epoch, step, history = 0, 0, []
    end_epoch = cfg.train.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.train.epochs)
    ckpt_path = out / "pretrain.isdt"
    for epoch in range(start_epoch, end_epoch):
        epoch_start = len(history)
        for idx in _batches(len(train), cfg.train.batch_size, seed, "pretrain", epoch):
            lr = lr_at(cfg.schedule, step if cfg.schedule.unit == "batch-step" else epoch)
            seeds = [derive_seed(seed, "pretrain", epoch, i) for i in idx]
            rep = pretrain_step(train.images[idx], seeds, params, optim, cfg, lr)
            history.append([step, float(rep.ssim_loss), float(rep.contrastive_loss), float(rep.total), lr])
            step += 1
        logger.info("pretrain epoch %d: mean total %.4f", epoch + 1,
                    np.mean([r[3] for r in history[epoch_start:]]))
        ckpt = Checkpoint(cfg, params, optim, "pretrain", seed, epoch + 1, step, None, history,
                          {"mask_mode": cfg.train.mask_mode})
        if cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(out / f"pretrain_epoch{epoch + 1:03d}.isdt", ckpt)
    final = Checkpoint(cfg, params, optim, "pretrain", seed, end_epoch, step, None, history,
                       {"mask_mode": cfg.train.mask_mode})
    save_checkpoint(ckpt_path, final)
    curve = out / "pretrain_curve.csv"
    atomic_write(curve, _curve_csv(PRETRAIN_CURVE_HEADER, history).encode())
    return RunResult(ckpt_path, curve, None, history)


def run_finetune(ds: Dataset, out_dir, cfg: RunConfig, seed: int, task: str,
                 init: Checkpoint | None = None) -> RunResult:
    """BCE fine-tuning on the training split, then evaluation on the test split."""
    task = TASKS[task]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    expected = "seg" if task == "segmentation" else "cls"
    if ds.task != expected:
        raise FormatError(f"dataset task {ds.task!r} does not match fine-tuning task {expected!r}")
    train, test = ds.subset("train"), ds.subset("test")
    if len(train) == 0:
        raise FormatError("dataset has no training samples")
    if init is not None:
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in init.params.items()}
        cfg = RunConfig(model=init.config.model, train=cfg.train, schedule=cfg.schedule, augment=cfg.augment)
    else:
        params = M.init_params(cfg.model, derive_seed(seed, "init"))
    optim = OptimState.create(params, M.trainable_names(params, task), cfg.train)
    history: list[list] = []
    step = 0
    for epoch in range(cfg.train.epochs):
        lr = lr_at(cfg.schedule, epoch if cfg.schedule.unit == "epoch" else step)
        for idx in _batches(len(train), cfg.train.batch_size, seed, "finetune", epoch):
            images, targets = train.images[idx], train.targets[idx]
            if cfg.train.augment:
                pairs = [augment(im, cfg.augment, derive_seed(seed, "finetune", epoch, i),
                                 mask=t if task == "segmentation" else None)
                         for im, t, i in zip(images, targets, idx)]
                if task == "segmentation":
                    images = np.stack([p[0] for p in pairs])
                    targets = np.stack([p[1] for p in pairs])
                else:
                    images = np.stack(pairs)
            if cfg.schedule.unit == "batch-step":
                lr = lr_at(cfg.schedule, step)
            loss = finetune_step(images, targets, params, optim, cfg, task, lr)
            history.append([step, loss, lr])
            step += 1
        logger.info("finetune epoch %d: last loss %.4f", epoch + 1, history[-1][1])
    ckpt_path = out / "finetune.isdt"
    save_checkpoint(ckpt_path, Checkpoint(cfg, params, optim, "finetune", seed, cfg.train.epochs,
                                          step, task, history))
    curve = out / "finetune_curve.csv"
    atomic_write(curve, _curve_csv(FINETUNE_CURVE_HEADER, history).encode())
    result = evaluate(params, cfg, test if len(test) else train, task)
    report = out / "finetune_report.csv"
    atomic_write(report, result.to_csv().encode())
    return RunResult(ckpt_path, curve, report, history, result)


def run_eval(ckpt: Checkpoint, ds: Dataset, report_path, split: str = "test") -> EvalResult:
    """Read-only evaluation of a fine-tuned checkpoint."""
    if ckpt.task is None:
        raise FormatError("checkpoint has no fine-tuning task; evaluate a finetune checkpoint")
    subset = ds.subset(split)
    if len(subset) == 0:
        raise FormatError(f"dataset has no {split} samples")
    result = evaluate(ckpt.params, ckpt.config, subset, ckpt.task)
    atomic_write(report_path, result.to_csv().encode())
    return result


def run(config: RunConfig, dataset: Dataset, phase: str, out_dir, seed: int = 0, **kw):
    """Dispatch to the pretrain / finetune / eval driver."""
    if phase == "pretrain":
        return run_pretrain(dataset, out_dir, config, seed, **kw)
    if phase == "finetune":
        return run_finetune(dataset, out_dir, config, seed, **kw)
    if phase == "eval":
        return run_eval(kw["checkpoint"], dataset, Path(out_dir) / "eval_report.csv")
    raise ValueError(f"unknown phase {phase!r}")

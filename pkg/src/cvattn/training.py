"""Training loop, evaluation and the CSV report formats.

History CSV columns: ``epoch,train_loss,val_dice,val_iou,val_hd_mm,val_fpr,val_fnr,sec_per_batch``.
Evaluation CSV: one row per sample (``sample,dice,iou,hausdorff_mm,fpr,fnr``)
and a final ``mean±sd`` row.  Samples with an empty predicted or reference
mask leave ``hausdorff_mm`` blank and are excluded from its mean.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import AugmentToggles, Sample, augment, standardize
from .losses import segmentation_loss
from .metrics import MetricsReport, aggregate, per_sample_metrics
from .optim import OptimState, adamw_step
from .serialization import load_checkpoint, save_checkpoint, save_tnsr, write_atomic
from .tensor import GradientTape, NonFiniteError, Tensor
from .unet import Model, UNetConfig, build

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_loss", "val_dice", "val_iou", "val_hd_mm", "val_fpr", "val_fnr", "sec_per_batch"]
EVAL_HEADER = ["sample", "dice", "iou", "hausdorff_mm", "fpr", "fnr"]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, checkpoint: Path | None):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}; state dumped to {checkpoint}")
        self.epoch, self.batch, self.checkpoint = epoch, batch, checkpoint


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    lr: float = 5e-4
    weight_decay: float = 1e-2
    w_dice: float = 1.0
    w_bce: float = 1.0
    augment: AugmentToggles = field(default_factory=AugmentToggles.all_on)
    checkpoint_epochs: tuple[int, ...] = (1, 10, 30)
    dump_samples: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.augment, dict):
            self.augment = AugmentToggles(**self.augment)
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d


def fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "nan" if np.isnan(x) else f"{x:.10g}"


def stack_batch(samples: list[Sample], normalize: bool) -> tuple[np.ndarray, np.ndarray]:
    imgs = np.stack([standardize(s.image[0])[None] if normalize else s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return imgs, masks


def predict_proba(model: Model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = model(images[i:i + batch_size])
        z = logits.data.astype(np.float64)
        out.append(np.exp(-np.logaddexp(0.0, -z)))
    return np.concatenate(out)


def evaluate(model: Model, dataset: list[Sample], threshold: float = 0.5, normalize: bool = True):
    """Per-sample metrics at ``sigmoid(logits) > threshold``; returns (report, rows)."""
    if not dataset:
        raise ValueError("evaluate needs a non-empty dataset")
    images, _ = stack_batch(dataset, normalize)
    proba = predict_proba(model, images)
    rows = []
    for s, p in zip(dataset, proba):
        rows.append(per_sample_metrics(p[0] > threshold, s.mask[0] > 0, s.spacing_mm))
    return aggregate(rows, dataset[0].spacing_mm), rows


def confounder_fp_mass(model: Model, dataset: list[Sample], normalize: bool = True) -> float:
    """Mean predicted foreground probability over all confounder pixels."""
    images, _ = stack_batch(dataset, normalize)
    proba = predict_proba(model, images)
    conf = np.stack([s.confounders for s in dataset]).astype(bool)
    return float(proba[conf].mean())


def eval_csv_bytes(rows: list[dict], report: MetricsReport) -> bytes:
    lines = [",".join(EVAL_HEADER)]
    for i, r in enumerate(rows):
        lines.append(",".join([str(i), fmt(r["dice"]), fmt(r["iou"]), fmt(r["hausdorff_mm"]), fmt(r["fpr"]), fmt(r["fnr"])]))
    foot = ["mean±sd"] + [f"{fmt(m)}±{fmt(s)}" for m, s in (report.dice, report.iou, report.hausdorff_mm, report.fpr, report.fnr)]
    lines.append(",".join(foot))
    return ("\n".join(lines) + "\n").encode()


def history_csv_bytes(history: list[dict]) -> bytes:
    lines = [",".join(HISTORY_HEADER)]
    for h in history:
        lines.append(",".join([str(h["epoch"])] + [fmt(h[k]) for k in HISTORY_HEADER[1:]]))
    return ("\n".join(lines) + "\n").encode()


def model_state(model: Model) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in model.params.items()}


def save_model(model: Model, path, extra: dict | None = None) -> None:
    save_checkpoint(path, model.cfg.to_dict(), model_state(model), extra)


def checkpoint_normalize(path) -> bool:
    """Whether the checkpointed model was trained on standardised images (default True)."""
    header, _ = load_checkpoint(path)
    return bool((header.get("extra") or {}).get("normalize", True))


def load_model(path, precision: str | None = None) -> Model:
    """Rebuild a model from a checkpoint (optionally at another precision)."""
    header, state = load_checkpoint(path)
    cfg = UNetConfig.from_dict(header["config"])
    if precision is not None and precision != cfg.precision:
        cfg = UNetConfig.from_dict({**cfg.to_dict(), "precision": precision})
    model = build(cfg)
    model.params.load_state(state)
    return model


def dump_attention(model: Model, samples: list[Sample], out_dir, tag: str, normalize: bool = True) -> list[Path]:
    """Write each gate's diagnostic maps for ``samples`` as TNSR files."""
    if model.cfg.gate_mode == "none" or not samples:
        return []
    images, _ = stack_batch(samples, normalize)
    _, _, diags = model.forward(images, return_diagnostics=True)
    out_dir = Path(out_dir)
    written = []
    for level, d in enumerate(diags):
        for key in ("alpha", "beta", "gamma", "zeta"):
            if key in d:
                path = out_dir / f"{tag}_gate{level}_{key}.tnsr"
                save_tnsr(np.asarray(d[key].data), path)
                written.append(path)
    return written


def train(
    model: Model,
    train_set: list[Sample],
    val_set: list[Sample],
    cfg: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Mini-batch AdamW on Dice + BCE; returns the per-epoch history.

    With ``out_dir`` the history CSV, checkpoints ``epoch_XXX.ckpt`` at
    ``cfg.checkpoint_epochs`` (and the last epoch) and attention dumps for the
    first ``cfg.dump_samples`` validation samples are written there.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    out = Path(out_dir) if out_dir is not None else None
    params = model.params.tensors()
    names = model.params.names()
    st = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        losses, times = [], []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = [augment(train_set[i], np.random.default_rng([cfg.seed, epoch, int(i)]), cfg.augment) for i in idx]
            xb = np.stack([s.image for s in batch]).astype(model.dtype)
            yb = np.stack([s.mask for s in batch]).astype(model.dtype)
            t0 = time.perf_counter()
            try:
                with GradientTape() as tape:
                    logits, _ = model(xb)
                    loss = segmentation_loss(logits, Tensor(yb), cfg.w_dice, cfg.w_bce)
                lv = loss.item()
                if not np.isfinite(lv):
                    raise NonFiniteError(f"loss is {lv}")
                grads = tape.backward(loss, params)
                adamw_step(params, grads, st, names)
            except NonFiniteError as exc:
                log.error("epoch %d batch %d: %s", epoch, bi, exc)
                ck = out / "diverged.ckpt" if out is not None else None
                if ck is not None:
                    save_model(model, ck, {"epoch": epoch, "batch": bi})
                raise TrainingDiverged(epoch, bi, ck) from exc
            model.params.zero_grad()
            times.append(time.perf_counter() - t0)
            losses.append(lv)
        report, _ = evaluate(model, val_set, normalize=cfg.augment.normalize)
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_dice": report.dice[0],
            "val_iou": report.iou[0],
            "val_hd_mm": report.hausdorff_mm[0],
            "val_fpr": report.fpr[0],
            "val_fnr": report.fnr[0],
            "sec_per_batch": float(np.mean(times)),
        }
        history.append(rec)
        log.info("epoch %d loss %.4f val dice %.4f (%.3fs/batch)", epoch, rec["train_loss"], rec["val_dice"], rec["sec_per_batch"])
        if out is not None:
            write_atomic(out / "history.csv", history_csv_bytes(history))
            if epoch in cfg.checkpoint_epochs or epoch == cfg.epochs:
                save_model(model, out / f"epoch_{epoch:03d}.ckpt", {"epoch": epoch, "normalize": cfg.augment.normalize})
                dump_attention(model, val_set[: cfg.dump_samples], out / "attn", f"epoch_{epoch:03d}", cfg.augment.normalize)
        if on_epoch is not None:
            on_epoch(rec)
    return history

"""Training, evaluation, inference, profiling and augmentation-preview workflows.

Each workflow takes a ``RunConfig`` and writes its artifacts under an output
directory, next to ``config.yaml`` (the effective configuration) and
``log.jsonl`` (one JSON record per event).
"""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from . import data, losses, metrics
from . import tensor_core as tc
from .config import RunConfig
from .model import (
    CheckpointError,
    ModelConfig,
    SmokeNet,
    build,
    count_params,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .optim import AdamW, cosine_lr

logger = logging.getLogger("smokenet")

# (conv, loss, attention) for the eight ablation configurations
VARIANTS = {
    "M1": ("N", "F", "NA"),
    "M2": ("N", "L", "NA"),
    "M3": ("N", "F", "MA"),
    "M4": ("N", "L", "MA"),
    "M5": ("M", "F", "NA"),
    "M6": ("M", "L", "NA"),
    "M7": ("M", "F", "MA"),
    "M8": ("M", "L", "MA"),
}


class InputError(ValueError):
    """Bad user input: unusable dataset, missing checkpoint and the like."""


class RunFailure(RuntimeError):
    """The workflow started but could not complete."""


class RunLogger:
    """Appends JSON records to ``<out>/log.jsonl`` and echoes a readable line."""

    def __init__(self, out: Path | None, console: bool = True):
        self.path = None if out is None else Path(out) / "log.jsonl"
        self.console = console

    def __call__(self, event: str, message: str | None = None, **fields) -> dict:
        record = {"event": event, "time": round(time.time(), 3), **fields}
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, default=_jsonable) + "\n")
        if self.console and message:
            logger.info(message)
        return record


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RunFailure(f"output directory {out} is not writable: {exc}") from exc
    return out


def _require_manifest(cfg: RunConfig) -> str:
    if not cfg.data.manifest:
        raise InputError("data.manifest is not set (config file or --manifest)")
    return cfg.data.manifest


def load_split(cfg: RunConfig, split: str, required: bool = True) -> list[data.Sample]:
    refs = data.load_manifest(_require_manifest(cfg), split=split)
    if not refs:
        if required:
            raise InputError(f"split {split!r} in {cfg.data.manifest} is empty")
        return []
    size = (cfg.data.image_size, cfg.data.image_size)
    return [data.load_sample(r, size) for r in refs]


def loss_fn(cfg: RunConfig):
    loss_cfg = cfg.loss.loss_config()
    kind = losses.layer_wise_loss if cfg.loss.kind == "layer_wise" else losses.final_only_loss
    return lambda output, target: kind(output, target, loss_cfg)


def predict(model: SmokeNet, samples: list[data.Sample], batch_size: int) -> np.ndarray:
    model.eval()
    preds = []
    with tc.no_grad():
        for images, _ in data.make_batches(samples, batch_size, dtype=model.dtype):
            preds.append(model(images).mask.data)
    return np.concatenate(preds)


def _masks(samples: list[data.Sample]) -> np.ndarray:
    return np.stack([s.mask for s in samples])


def make_optimizer(model: SmokeNet, cfg: RunConfig) -> AdamW:
    o = cfg.optim
    return AdamW(
        model.named_parameters(),
        lr=cfg.schedule.eta_max,
        betas=(o.beta1, o.beta2),
        eps=o.eps,
        weight_decay=o.weight_decay,
    )


@dataclass
class TrainResult:
    history: list[dict]
    step_losses: list[float]
    best_miou: float
    out: Path


def fit(
    cfg: RunConfig,
    train_samples: list[data.Sample],
    val_samples: list[data.Sample] | None = None,
    out=None,
    log: RunLogger | None = None,
) -> TrainResult:
    """Train from scratch or resume from ``<out>/last.ckpt``.

    All randomness derives from ``cfg.seed``: weights from the seed, the
    batch order of epoch ``e`` from (seed, e), and each sample's
    augmentation from (seed, epoch, id). At 64-bit a resumed run therefore
    repeats the uninterrupted one exactly.
    """
    if not train_samples:
        raise InputError("training set is empty")
    out = prepare_out(out or cfg.out)
    log = log or RunLogger(out)
    model = build(cfg.model, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    compute_loss = loss_fn(cfg)

    start_epoch, skip_steps, global_step = 0, 0, 0
    best, history, step_losses = -1.0, [], []
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"
    if cfg.train.resume and last_path.exists():
        _, meta = load_checkpoint(last_path, model, optimizer)
        start_epoch, skip_steps = meta["epoch"], meta["steps_into_epoch"]
        if meta["epoch_complete"]:
            start_epoch, skip_steps = start_epoch + 1, 0
        global_step, best = meta["global_step"], meta["best_miou"]
        history, step_losses = meta["history"], meta["step_losses"]
        if not meta["epoch_complete"]:
            history = history[:-1]  # the interrupted epoch is re-recorded
        log("resume", f"resuming at epoch {start_epoch} step {global_step}", epoch=start_epoch, step=global_step)

    max_steps = cfg.train.max_steps
    for epoch in range(start_epoch, cfg.train.epochs):
        if max_steps is not None and global_step >= max_steps:
            break
        lr = cosine_lr(epoch, cfg.schedule)
        augmented = [data.augment(s, cfg.augment, data.sample_rng(cfg.seed, s.id, epoch)) for s in train_samples]
        batches = data.make_batches(augmented, cfg.data.batch_size, shuffle_seed=[cfg.seed, epoch], dtype=model.dtype)
        epoch_losses, preds, targets = [], [], []
        steps_into_epoch = 0
        complete = True
        for i, (images, masks) in enumerate(batches):
            if i < skip_steps:
                steps_into_epoch += 1
                continue
            if max_steps is not None and global_step >= max_steps:
                complete = False
                break
            model.train()
            optimizer.zero_grad()
            output = model(images)
            loss = compute_loss(output, masks)
            loss.backward()
            optimizer.step(lr)
            value = float(loss.item())
            epoch_losses.append(value)
            step_losses.append(value)
            preds.append(output.mask.data)
            targets.append(masks.data)
            global_step += 1
            steps_into_epoch += 1
            log("step", None, epoch=epoch, step=global_step, lr=lr, loss=value)
        skip_steps = 0

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
            "train_miou": metrics.miou(np.concatenate(preds), np.concatenate(targets)) if preds else None,
            "val_miou": None,
            "steps": global_step,
            "complete": complete,
        }
        if val_samples:
            record["val_miou"] = metrics.miou(predict(model, val_samples, cfg.data.batch_size), _masks(val_samples))
        history.append(record)
        score = record["val_miou"] if record["val_miou"] is not None else record["train_miou"]
        improved = score is not None and score > best
        if improved:
            best = score
        meta = {
            "epoch": epoch,
            "epoch_complete": complete,
            "steps_into_epoch": steps_into_epoch,
            "global_step": global_step,
            "best_miou": best,
            "history": history,
            "step_losses": step_losses,
            "seed": cfg.seed,
        }
        try:
            save_checkpoint(last_path, model, optimizer, meta)
            if improved:
                save_checkpoint(best_path, model, optimizer, meta)
        except OSError as exc:
            raise RunFailure(f"cannot write checkpoint in {out}: {exc}") from exc
        log("epoch", _epoch_line(record), **record)
    return TrainResult(history, step_losses, best, out)


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def _epoch_line(r: dict) -> str:
    return (
        f"epoch {r['epoch']:3d}  lr {r['lr']:.3e}  loss {_fmt(r['train_loss'])}  "
        f"train mIoU {_fmt(r['train_miou'])}  val mIoU {_fmt(r['val_miou'])}"
    )


def train(cfg: RunConfig) -> TrainResult:
    train_samples = load_split(cfg, cfg.data.train_split)
    val_samples = load_split(cfg, cfg.data.val_split, required=False)
    out = prepare_out(cfg.out)
    config_mod.dump(cfg, out / "config.yaml")
    log = RunLogger(out)
    log("start", f"training on {len(train_samples)} samples ({len(val_samples)} val)", command="train")
    return fit(cfg, train_samples, val_samples, out, log)


def _load_model(cfg: RunConfig, checkpoint) -> SmokeNet:
    if checkpoint is None:
        candidate = Path(cfg.out) / "best.ckpt"
        if not candidate.exists():
            raise InputError("no checkpoint given (--checkpoint) and none found in the output directory")
        checkpoint = candidate
    if not Path(checkpoint).exists():
        raise InputError(f"checkpoint {checkpoint} does not exist")
    try:
        header, _ = read_checkpoint(checkpoint)
        model_cfg = replace(ModelConfig.from_dict(header["config"]), precision=cfg.precision)
        model, _ = load_checkpoint(checkpoint, SmokeNet(model_cfg, cfg.seed))
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc
    return model.eval()


def evaluate(cfg: RunConfig, checkpoint=None, model: SmokeNet | None = None, fps: bool = True) -> metrics.MetricsReport:
    samples = load_split(cfg, cfg.data.test_split)
    model = model or _load_model(cfg, checkpoint)
    preds = predict(model, samples, cfg.data.batch_size)
    shape = (1, model.config.in_channels, cfg.data.image_size, cfg.data.image_size)
    flops = metrics.estimate_flops(model, shape)
    speed = (
        metrics.benchmark_fps(model, shape, warmup=cfg.eval.fps_warmup, iters=cfg.eval.fps_iters, threads=cfg.eval.threads)
        if fps
        else None
    )
    return metrics.MetricsReport(
        miou=metrics.miou(preds, _masks(samples)),
        params=count_params(model),
        flops=flops.total,
        fps=None if speed is None else speed["fps"],
        input_shape=shape,
        precision=cfg.precision,
        flops_by_layer=flops.by_layer,
    )


def _read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend pure red into ``image`` (3, H, W) wherever ``mask`` (H, W) is set."""
    red = np.array([1.0, 0.0, 0.0])[:, None, None]
    a = alpha * mask[None]
    return (1.0 - a) * image + a * red


def infer_one(model: SmokeNet, path, out: Path, cfg: RunConfig) -> tuple[Path, Path]:
    image = _read_rgb(path)
    h, w = image.shape[1:]
    size = cfg.data.image_size
    resized = np.stack(
        [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)) for ch in image]
    )
    with tc.no_grad():
        prob = model(tc.Tensor(resized[None].astype(model.dtype))).mask.data[0, 0]
    small = (prob >= cfg.infer.threshold).astype(np.uint8) * 255
    mask = np.asarray(Image.fromarray(small, mode="L").resize((w, h), Image.NEAREST)) >= 128
    stem = Path(path).stem
    mask_path, overlay_path = out / f"{stem}_mask.png", out / f"{stem}_overlay.png"
    data.write_png(mask_path, mask[None].astype(np.float64))
    data.write_png(overlay_path, overlay(image, mask, cfg.infer.overlay_alpha))
    return mask_path, overlay_path


def infer(cfg: RunConfig, image_paths, checkpoint=None, log: RunLogger | None = None) -> tuple[list, list]:
    """Returns (written file pairs, [(path, error message)]); failures don't stop the batch."""
    if not image_paths:
        raise InputError("no input images given")
    model = _load_model(cfg, checkpoint)
    out = prepare_out(cfg.out)
    log = log or RunLogger(out)
    written, failures = [], []
    for path in image_paths:
        try:
            pair = infer_one(model, path, out, cfg)
        except (OSError, ValueError) as exc:
            failures.append((str(path), f"{type(exc).__name__}: {exc}"))
            log("infer_error", None, path=str(path), error=str(exc))
            continue
        written.append(pair)
        log("infer", f"{path} -> {pair[0].name}, {pair[1].name}", path=str(path), outputs=[str(p) for p in pair])
    return written, failures


def profile_rows(cfg: RunConfig) -> list[dict]:
    """Parameter and FLOP counts for M1..M8 at the configured image size.

    Built fresh, nothing read from disk. Loss choice only adds auxiliary
    heads, which are excluded from the count, so F/L pairs agree.
    """
    shape = (1, cfg.model.in_channels, cfg.data.image_size, cfg.data.image_size)
    rows, cache = [], {}
    for name, (conv, loss, attention) in VARIANTS.items():
        key = (conv, attention)
        if key not in cache:
            model_cfg = replace(
                cfg.model,
                conv_variant="multiscale" if conv == "M" else "plain",
                attention_variant="multiview" if attention == "MA" else "spatial",
                aux_head=True,
            )
            model = build(model_cfg, seed=cfg.seed)
            report = metrics.estimate_flops(model, shape)
            cache[key] = (count_params(model), report)
        params, report = cache[key]
        rows.append(
            {
                "model": name,
                "conv": conv,
                "loss": loss,
                "attention": attention,
                "params": params,
                "flops": report.total,
                "conv_flops": report.by_op.get("conv2d", 0) + report.by_op.get("transposed_conv2d", 0),
                "by_layer": report.by_layer,
            }
        )
    return rows


def component_shares(by_layer: dict[str, int]) -> list[tuple[str, float]]:
    """FLOP share per top-level component (``encoder.3``, ``decoder.0``, ``head``...)."""
    groups: dict[str, int] = {}
    for scope, flops in by_layer.items():
        parts = scope.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("encoder", "decoder", "skips", "aux") and len(parts) > 1 else parts[0]
        groups[key] = groups.get(key, 0) + flops
    total = sum(groups.values()) or 1
    return sorted(((k, v / total) for k, v in groups.items()), key=lambda kv: -kv[1])


def profile_table(rows: list[dict]) -> str:
    lines = [f"{'model':<6}{'conv':<6}{'loss':<6}{'attn':<6}{'#params (K)':>13}{'MFLOPs':>10}{'conv MFLOPs':>13}"]
    for r in rows:
        lines.append(
            f"{r['model']:<6}{r['conv']:<6}{r['loss']:<6}{r['attention']:<6}"
            f"{r['params'] / 1e3:>13.2f}{r['flops'] / 1e6:>10.2f}{r['conv_flops'] / 1e6:>13.2f}"
        )
    return "\n".join(lines)


def augment_preview(cfg: RunConfig) -> list[Path]:
    """Write augmented copies of manifest samples (synthetic ones without a manifest)."""
    if cfg.data.manifest:
        samples = load_split(cfg, cfg.data.train_split)[: cfg.preview.limit]
    else:
        samples = data.synthetic_samples(cfg.preview.limit, size=cfg.data.image_size, seed=cfg.seed)
    out = prepare_out(cfg.out)
    written = []
    with open(out / "augmentations.jsonl", "w") as fh:
        for s in samples:
            data.write_png(out / f"{s.id}_orig.png", s.image)
            for k in range(cfg.preview.count):
                aug = data.augment(s, cfg.augment, data.sample_rng(cfg.seed, s.id, k))
                img_path, mask_path = out / f"{s.id}_aug{k}.png", out / f"{s.id}_aug{k}_mask.png"
                data.write_png(img_path, aug.image)
                data.write_png(mask_path, aug.mask)
                fh.write(json.dumps({"id": s.id, "copy": k, "image": img_path.name, "log": aug.augmentation_log}) + "\n")
                written += [img_path, mask_path]
    return written


def setup_console(verbose: bool = True) -> None:
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO if verbose else logging.WARNING)
    logger.propagate = False

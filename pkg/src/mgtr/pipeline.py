"""Training, checkpoints, inference, attention export and synthetic datasets on disk."""
from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .config import RunConfig
from .data import (
    AnnotationRecord,
    SyntheticSceneSpec,
    augment,
    generate_synthetic,
    load_annotations,
    load_image,
    normalize_image,
    save_annotations,
    to_ground_truth,
)
from .evaluation import EvalReport, ScoredDetection, evaluate, score_predictions
from .instances import LAEO, NOT_MATCH, PERSON, GroundTruthSet, PredictionSet, decode_predictions
from .losses import NonFiniteError, SetCriterion
from .model import MGTR, ForwardOutput, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mgtr-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- data plumbing


class AnnotatedImages:
    """Annotation records plus their images, with seeded per-sample augmentation."""

    def __init__(self, records: Sequence[AnnotationRecord], root: str | Path | None = None,
                 images: Sequence[np.ndarray] | None = None, cache: bool = True):
        self.records = list(records)
        self.root = Path(root) if root is not None else Path(".")
        self.gts = [to_ground_truth(r) for r in self.records]
        self._cache: dict[int, np.ndarray] = dict(enumerate(images)) if images is not None else {}
        self._keep = cache or images is not None

    @classmethod
    def from_file(cls, path: str | Path, root: str | Path | None = None, cache: bool = True) -> AnnotatedImages:
        path = Path(path)
        return cls(load_annotations(path), root if root is not None else path.parent, cache=cache)

    def __len__(self):
        return len(self.records)

    def image(self, i: int) -> np.ndarray:
        if i in self._cache:
            return self._cache[i]
        img = load_image(self.root / self.records[i].image_path)
        if self._keep:
            self._cache[i] = img
        return img

    def sample(self, i: int, cfg: RunConfig | None = None, epoch: int | None = None):
        img, gt = self.image(i), self.gts[i]
        if cfg is not None and epoch is not None:
            rng = np.random.default_rng([cfg.augment.seed, cfg.seed or 0, epoch, i])
            img, gt = augment(img, gt, cfg.augment, rng)
        return normalize_image(img), gt


def collate(samples: Sequence[tuple[torch.Tensor, GroundTruthSet]], dtype=torch.float32):
    """Pad images bottom/right to a common size; mask is True on padding."""
    h = max(s[0].shape[1] for s in samples)
    w = max(s[0].shape[2] for s in samples)
    images = torch.zeros(len(samples), 3, h, w, dtype=dtype)
    mask = torch.ones(len(samples), h, w, dtype=torch.bool)
    for k, (img, _) in enumerate(samples):
        images[k, :, : img.shape[1], : img.shape[2]] = img
        mask[k, : img.shape[1], : img.shape[2]] = False
    padded = bool(mask.any())
    return images, (mask if padded else None), [s[1] for s in samples]


def predictions_from_output(out: ForwardOutput, image_ids: Sequence[str]) -> list[PredictionSet]:
    final = out.final()
    return [
        decode_predictions(
            final.logits_h1[b].detach().double().numpy(),
            final.logits_h2[b].detach().double().numpy(),
            final.logits_gaze[b].detach().double().numpy(),
            final.box_logits_a[b].detach().double().numpy(),
            final.box_logits_b[b].detach().double().numpy(),
            image_id=image_ids[b],
        )
        for b in range(len(image_ids))
    ]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: MGTR, cfg: RunConfig, optimizer=None, **state) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        **state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[MGTR, RunConfig, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an mgtr checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = RunConfig.from_dict(blob["config"])
    model = MGTR(cfg.model).to(getattr(torch, cfg.dtype))
    model.load_state_dict(blob["model"])
    model.eval()
    return model, cfg, blob


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path | None
    log_path: Path
    history: list[dict] = field(repr=False)
    evals: list[dict] = field(default_factory=list, repr=False)
    step: int = 0


def _build_optimizer(model: MGTR, cfg: RunConfig):
    return torch.optim.AdamW(
        [
            {"params": [p for p in model.head_parameters() if p.requires_grad], "lr": cfg.lr},
            {"params": [p for p in model.backbone_parameters() if p.requires_grad], "lr": cfg.lr_backbone},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )


def _dataset(path, cfg: RunConfig) -> AnnotatedImages | None:
    if path is None:
        return None
    if isinstance(path, AnnotatedImages):
        return path
    return AnnotatedImages.from_file(path, cfg.image_root, cache=cfg.cache_images)


def evaluate_model(model: MGTR, data: AnnotatedImages, cfg: RunConfig, batch_size: int | None = None) -> EvalReport:
    model.eval()
    dtype = getattr(torch, cfg.dtype)
    results = []
    start = time.perf_counter()
    bs = batch_size or cfg.batch_size
    with torch.no_grad():
        for lo in range(0, len(data), bs):
            idx = range(lo, min(lo + bs, len(data)))
            images, mask, gts = collate([data.sample(i) for i in idx], dtype)
            preds = predictions_from_output(model(images, mask), [g.image_id for g in gts])
            results += [(score_predictions(p, cfg.score_threshold, cfg.score_mode), g) for p, g in zip(preds, gts)]
    elapsed = time.perf_counter() - start
    return evaluate(results, cfg.eval_iou, cfg.ap_method, len(data) / elapsed if elapsed > 0 else None)


def train(cfg: RunConfig, train_data=None, val_data=None, resume: str | Path | None = None,
          progress: bool = True) -> TrainResult:
    """Optimize the model on the matched set loss.

    ``train_data`` / ``val_data`` may be :class:`AnnotatedImages` or paths;
    they default to the annotation paths in ``cfg``. Without validation data
    no evaluation runs and training stops on ``epochs`` / ``max_steps``.
    Logs go to ``<out_dir>/log.jsonl``; ``last.pt`` is written every epoch
    and ``best.pt`` whenever validation mAP improves.
    """
    if cfg.seed is None:
        raise ValueError("training requires an explicit seed")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = getattr(torch, cfg.dtype)
    train_set = _dataset(train_data if train_data is not None else cfg.train_annotations, cfg)
    val_set = _dataset(val_data if val_data is not None else cfg.val_annotations, cfg)
    if train_set is None or not len(train_set):
        raise ValueError("no training data")
    too_big = [g.image_id for g in train_set.gts if len(g) > cfg.model.num_queries]
    if too_big:
        raise ValueError(f"{len(too_big)} image(s) have more instances than queries, e.g. {too_big[0]}")

    torch.manual_seed(cfg.seed)
    model = MGTR(cfg.model).to(dtype)
    optimizer = _build_optimizer(model, cfg)
    criterion = SetCriterion(cfg.match, cfg.loss, cfg.eos_weight, cfg.iou_loss, cfg.model.aux_loss)
    step, start_epoch, best_map, bad_evals = 0, 0, -math.inf, 0
    log_path = out_dir / "log.jsonl"
    if resume is not None:
        model, _, blob = load_checkpoint(resume)
        optimizer = _build_optimizer(model, cfg)
        optimizer.load_state_dict(blob["optimizer"])
        torch.set_rng_state(blob["torch_rng"])
        step, start_epoch = blob["step"], blob["epoch"] + 1
        best_map, bad_evals = blob["best_map"], blob["bad_evals"]
        mode = "a"
    else:
        mode = "w"
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    history, evals = [], []
    last_ckpt = out_dir / "last.pt"
    best_ckpt = out_dir / "best.pt" if val_set is not None else None
    t0 = time.perf_counter()
    done = cfg.max_steps is not None and step >= cfg.max_steps
    with open(log_path, mode) as logf:
        epoch = start_epoch - 1
        for epoch in range(start_epoch, cfg.epochs):
            if done:
                break
            model.train()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            for lo in range(0, len(order), cfg.batch_size):
                batch_ids = [int(i) for i in order[lo: lo + cfg.batch_size]]
                images, mask, gts = collate([train_set.sample(i, cfg, epoch) for i in batch_ids], dtype)
                total, parts, _ = criterion(model(images, mask), gts)
                if not torch.isfinite(total):
                    raise NonFiniteError(f"non-finite loss at step {step + 1}, batch {[g.image_id for g in gts]}")
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                if cfg.clip_max_norm > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_max_norm)
                scale = cfg.lr_drop_factor if cfg.lr_drop_step is not None and step >= cfg.lr_drop_step else 1.0
                for g, base in zip(optimizer.param_groups, (cfg.lr, cfg.lr_backbone)):
                    g["lr"] = base * scale
                optimizer.step()
                step += 1
                entry = {
                    "step": step,
                    "epoch": epoch,
                    "loss": float(total.detach()),
                    "final_layer": parts.to_dict(),
                    "lr": [g["lr"] for g in optimizer.param_groups],
                    "wall": round(time.perf_counter() - t0, 4),
                }
                history.append(entry)
                logf.write(json.dumps(entry) + "\n")
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
            if progress:
                log.info("epoch %d step %d loss %.4f", epoch, step, history[-1]["loss"] if history else float("nan"))
            if val_set is not None and ((epoch + 1) % cfg.eval_every == 0 or done):
                report = evaluate_model(model, val_set, cfg)
                snap = {"step": step, "epoch": epoch, "eval": report.summary()}
                evals.append(snap)
                logf.write(json.dumps(snap) + "\n")
                if report.map > best_map:
                    best_map, bad_evals = report.map, 0
                    save_checkpoint(best_ckpt, model, cfg, optimizer, step=step, epoch=epoch,
                                    best_map=best_map, bad_evals=bad_evals)
                else:
                    bad_evals += 1
                if bad_evals >= cfg.patience:
                    done = True
            logf.flush()
            save_checkpoint(last_ckpt, model, cfg, optimizer, step=step, epoch=epoch,
                            best_map=best_map, bad_evals=bad_evals)
    return TrainResult(last_ckpt, best_ckpt, log_path, history, evals, step)


# ---------------------------------------------------------------- inference


@dataclass
class InferenceResult:
    detections: list[list[ScoredDetection]]
    predictions: list[PredictionSet] = field(repr=False)
    images_per_sec: float = 0.0
    elapsed: float = 0.0


def _as_model(checkpoint) -> tuple[MGTR, RunConfig]:
    if isinstance(checkpoint, tuple):
        return checkpoint
    model, cfg, _ = load_checkpoint(checkpoint)
    return model, cfg


def infer(checkpoint, images: Sequence[np.ndarray | str | Path], image_ids: Sequence[str] | None = None,
          threshold: float | None = None) -> InferenceResult:
    """One forward pass per image; ``checkpoint`` is a path or a ``(model, cfg)`` pair."""
    model, cfg = _as_model(checkpoint)
    model.eval()
    dtype = next(model.parameters()).dtype
    thr = cfg.score_threshold if threshold is None else threshold
    arrays = [load_image(im) if isinstance(im, (str, Path)) else im for im in images]
    ids = list(image_ids) if image_ids is not None else [
        str(im) if isinstance(im, (str, Path)) else f"image_{k}" for k, im in enumerate(images)
    ]
    dets, preds = [], []
    start = time.perf_counter()
    with torch.no_grad():
        for img, image_id in zip(arrays, ids):
            out = model(normalize_image(img)[None].to(dtype))
            p = predictions_from_output(out, [image_id])[0]
            preds.append(p)
            dets.append(score_predictions(p, thr, cfg.score_mode))
    elapsed = time.perf_counter() - start
    return InferenceResult(dets, preds, len(arrays) / elapsed if elapsed > 0 else float("inf"), elapsed)


def evaluate_checkpoint(checkpoint, annotations: str | Path, image_root: str | Path | None = None) -> EvalReport:
    model, cfg = _as_model(checkpoint)
    data = AnnotatedImages.from_file(annotations, image_root)
    return evaluate_model(model, data, cfg)


# ---------------------------------------------------------------- attention maps


@dataclass
class AttentionExport:
    encoder_map: np.ndarray  # [H, W] in [0, 1], image resolution
    decoder_maps: dict[int, np.ndarray]  # query -> [H, W] in [0, 1]
    paths: list[Path]
    raw_encoder: np.ndarray = field(repr=False)  # [heads, HW, HW] softmax rows


def _upsample(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(grid.astype(np.float64))[None, None]
    up = torch.nn.functional.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
    lo, hi = up.min(), up.max()
    return (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)


def _heat_overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    red = np.zeros_like(image, dtype=np.float64)
    red[..., 0] = 255
    a = 0.6 * heat[..., None]
    return np.clip((1 - a) * image + a * red, 0, 255).astype(np.uint8)


def draw_detections(image: np.ndarray, dets: Sequence[ScoredDetection], min_score: float = 0.3) -> np.ndarray:
    im = Image.fromarray(image)
    draw = ImageDraw.Draw(im)
    W, H = im.size
    for d in dets:
        if d.score < min_score:
            continue
        color = (40, 220, 60) if d.gaze_class == LAEO else (230, 40, 40)
        centers = []
        for b in (d.box_a, d.box_b):
            c = b.to_corner()
            draw.rectangle([c.x1 * W, c.y1 * H, c.x2 * W, c.y2 * H], outline=color)
            centers.append((b.cx * W, b.cy * H))
        draw.line(centers, fill=color)
    return np.asarray(im)


def export_attention(checkpoint, image: np.ndarray | str | Path, out_dir: str | Path, top_k: int = 3) -> AttentionExport:
    """Write encoder / decoder attention heatmaps and a detection overlay.

    * ``encoder.png``: last encoder layer self-attention, averaged over heads
      and over query positions, i.e. how much attention each location receives.
    * ``query_<q>.png``: last decoder layer cross-attention of the ``top_k``
      most confident queries, averaged over heads.
    * ``detections.png``: predicted instances drawn on the image.
    """
    model, cfg = _as_model(checkpoint)
    model.eval()
    img = load_image(image) if isinstance(image, (str, Path)) else image
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(normalize_image(img)[None].to(dtype))
    fh, fw = out.feature_size
    size = img.shape[:2]
    raw_enc = out.enc_attn[0].double().numpy()
    enc_map = _upsample(raw_enc.mean(0).mean(0).reshape(fh, fw), size)
    preds = predictions_from_output(out, ["image"])[0]
    dets = score_predictions(preds, 0.0, cfg.score_mode)
    # rank every query, not only the surviving detections, so maps exist even for a weak model
    conf = [float(q.p_h1[PERSON] * q.p_h2[PERSON] * q.p_gaze[:NOT_MATCH].max()) for q in preds]
    top = [int(q) for q in np.argsort(conf, kind="stable")[::-1][:top_k]]
    dec = out.dec_attn[0].double().numpy().mean(0)  # [N, HW]
    dec_maps = {q: _upsample(dec[q].reshape(fh, fw), size) for q in top}
    paths = [out_dir / "encoder.png"]
    Image.fromarray(_heat_overlay(img, enc_map)).save(paths[0])
    for q, m in dec_maps.items():
        p = out_dir / f"query_{q:03d}.png"
        Image.fromarray(_heat_overlay(img, m)).save(p)
        paths.append(p)
    p = out_dir / "detections.png"
    Image.fromarray(draw_detections(img, dets)).save(p)
    paths.append(p)
    return AttentionExport(enc_map, dec_maps, paths, raw_enc)


# ---------------------------------------------------------------- synthetic data on disk


def synth_data(spec: SyntheticSceneSpec, out_dir: str | Path, n_images: int, start: int = 0) -> Path:
    """Render ``n_images`` scenes as PNGs plus ``annotations.json`` next to them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for image, rec in generate_synthetic(spec, n_images, start):
        Image.fromarray(image).save(out_dir / rec.image_path)
        records.append(rec)
    return save_annotations(records, out_dir / "annotations.json")


def synthetic_dataset(spec: SyntheticSceneSpec, n_images: int, start: int = 0) -> AnnotatedImages:
    """In-memory variant of :func:`synth_data`."""
    scenes = generate_synthetic(spec, n_images, start)
    return AnnotatedImages([r for _, r in scenes], images=[im for im, _ in scenes])

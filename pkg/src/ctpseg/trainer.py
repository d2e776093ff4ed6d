"""Dataset assembly, training (end-to-end and staged), checkpoints, inference.

Training operates on 2D slices pooled across cases. Each step feeds a batch
through extractor -> generator -> segmenter as the wiring dictates, assembles
the composite loss, and updates all trainable stages with RMSprop. Staged mode
splits the epoch budget in three: extractor supervision, generator plus
context-encoder training with the extractor frozen, then segmenter training
with everything upstream frozen. Wirings without a synthesis branch train the
segmenter alone in either mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import attention, losses, perfusion
from .config import TrainConfig
from .errors import (
    CaseValidationError,
    InputValidationError,
    TrainingDivergedError,
    VolumeFormatError,
)
from .nets import (
    ContextEncoder,
    FeatureExtractor,
    PseudoDwiGenerator,
    SegmentationNet,
    init_weights,
)
from .volume_io import CaseRecord, VolumeHeader, load_case, read_split, write_volume

MAP_ORDER = ("cbf", "cbv", "mtt", "tmax")
LOG_COLUMNS = ("step", "epoch", *losses.LossBreakdown.field_names())


def needs_synthesis(wiring: str) -> bool:
    return wiring in ("pseudo_dwi_full", "f_o_plus_pseudo")


def needs_cta(wiring: str) -> bool:
    return needs_synthesis(wiring) or wiring == "cta_only"


def needs_dwi(wiring: str) -> bool:
    return needs_synthesis(wiring) or wiring == "real_dwi"


def segmenter_in_channels(cfg: TrainConfig) -> int:
    return {
        "cta_only": cfg.n_frames,
        "f_o_only": 4,
        "pseudo_dwi_full": 1,
        "f_o_plus_pseudo": 5,
        "real_dwi": 1,
    }[cfg.wiring]


def pad_or_crop_2d(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Symmetrically zero-pad and/or center-crop trailing 2 dims to target."""
    th, tw = target
    h, w = arr.shape[-2:]
    if h > th:
        top = (h - th) // 2
        arr = arr[..., top : top + th, :]
    if w > tw:
        left = (w - tw) // 2
        arr = arr[..., :, left : left + tw]
    h, w = arr.shape[-2:]
    if h < th or w < tw:
        pad_h, pad_w = th - h, tw - w
        pad = [(0, 0)] * (arr.ndim - 2)
        pad += [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)]
        arr = np.pad(arr, pad)
    return arr


def restore_2d(arr: np.ndarray, original: tuple[int, int]) -> np.ndarray:
    """Undo pad_or_crop_2d: crop away padding, paste crops back centered."""
    oh, ow = original
    h, w = arr.shape[-2:]
    if h > oh:
        top = (h - oh) // 2
        arr = arr[..., top : top + oh, :]
    if w > ow:
        left = (w - ow) // 2
        arr = arr[..., :, left : left + ow]
    h, w = arr.shape[-2:]
    if h < oh or w < ow:
        pad_h, pad_w = oh - h, ow - w
        pad = [(0, 0)] * (arr.ndim - 2)
        pad += [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)]
        arr = np.pad(arr, pad)
    return arr


@dataclass
class PreprocessedCase:
    """One case after temporal preprocessing and intensity normalization."""

    case_id: str
    spacing_mm: tuple[float, float, float]
    shape: tuple[int, int, int]
    maps: np.ndarray
    mip: np.ndarray | None = None
    frames: np.ndarray | None = None
    dwi: np.ndarray | None = None
    mask: np.ndarray | None = None
    weights: np.ndarray | None = None
    window: perfusion.PerfusionWindow | None = None


def preprocess_case(record: CaseRecord, cfg: TrainConfig) -> PreprocessedCase:
    """Normalize maps, detect the perfusion window, build frame stack and MIP.

    The selected frames are normalized as one block so their relative
    enhancement over time survives; every other volume is normalized on its
    own. The attention weight volume is derived from the mask when present.
    """
    maps = np.stack(
        [perfusion.normalize_intensity(getattr(record, name)) for name in MAP_ORDER]
    )
    out = PreprocessedCase(
        case_id=record.case_id,
        spacing_mm=record.spacing_mm,
        shape=record.shape,
        maps=maps,
    )
    if record.cta is not None:
        curve = perfusion.accumulated_intensity_curve(record.cta)
        window = perfusion.detect_perfusion_window(curve, cfg.rise_run)
        frames = perfusion.temporal_crop_downsample(record.cta, window, cfg.n_frames)
        out.frames = perfusion.normalize_intensity(frames)
        out.mip = perfusion.normalize_intensity(perfusion.temporal_mip(record.cta))
        out.window = window
    if record.dwi is not None:
        out.dwi = perfusion.normalize_intensity(record.dwi)
    if record.mask is not None:
        out.mask = record.mask.astype(np.float32)
        out.weights = attention.weight_volume(out.mask, cfg.fg_weight, cfg.dist_scale)
    return out


def write_preprocessed(out_dir, pre: PreprocessedCase) -> None:
    """Persist the derived inputs: mip and frames bundles plus a window sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pre.frames is None:
        raise CaseValidationError(f"{pre.case_id}: no raw CTA, nothing to preprocess")
    write_volume(
        out_dir / "mip", VolumeHeader(tuple(pre.mip.shape), pre.spacing_mm), pre.mip
    )
    write_volume(
        out_dir / "frames", VolumeHeader(tuple(pre.frames.shape), pre.spacing_mm), pre.frames
    )
    doc = {
        "window_start": pre.window.start,
        "window_end": pre.window.end,
        "start_fell_back": pre.window.start_fell_back,
        "end_fell_back": pre.window.end_fell_back,
        "crossed": pre.window.crossed,
        "frame_indices": perfusion.frame_indices(pre.window, pre.frames.shape[0]),
    }
    (out_dir / "window.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


@dataclass
class SliceSample:
    """Tensors for one 2D slice; spatial size equals cfg.crop_size."""

    case_id: str
    z: int
    maps: torch.Tensor
    mip: torch.Tensor | None
    frames: torch.Tensor | None
    dwi: torch.Tensor | None
    mask: torch.Tensor | None
    weights: torch.Tensor | None


def _to_slices(pre: PreprocessedCase, cfg: TrainConfig) -> list[SliceSample]:
    def prep(vol):
        if vol is None:
            return None
        arr = pad_or_crop_2d(vol, cfg.crop_size).astype(np.float32)
        return torch.from_numpy(np.ascontiguousarray(arr))

    maps = prep(pre.maps)
    mip = prep(pre.mip[None] if pre.mip is not None else None)
    frames = prep(pre.frames)
    dwi = prep(pre.dwi[None] if pre.dwi is not None else None)
    mask = prep(pre.mask)
    weights = prep(pre.weights)
    out = []
    for z in range(pre.shape[0]):
        out.append(
            SliceSample(
                case_id=pre.case_id,
                z=z,
                maps=maps[:, z],
                mip=mip[:, z] if mip is not None else None,
                frames=frames[:, z] if frames is not None else None,
                dwi=dwi[:, z] if dwi is not None else None,
                mask=mask[z] if mask is not None else None,
                weights=weights[z] if weights is not None else None,
            )
        )
    return out


def build_dataset(
    dataset_root, split_file, cfg: TrainConfig, role: str = "train"
) -> list[SliceSample]:
    """SliceSamples for every case of one split role, in split order."""
    split = read_split(split_file)
    if role not in split:
        raise InputValidationError(f"unknown split role {role!r}")
    samples: list[SliceSample] = []
    for case_id in split[role]:
        record = load_case(Path(dataset_root) / case_id)
        _check_members(record, cfg)
        samples.extend(_to_slices(preprocess_case(record, cfg), cfg))
    return samples


def _check_members(record: CaseRecord, cfg: TrainConfig) -> None:
    if needs_cta(cfg.wiring) and record.cta is None:
        raise CaseValidationError(f"{record.case_id}: wiring {cfg.wiring} needs cta4d")
    if needs_dwi(cfg.wiring) and record.dwi is None:
        raise CaseValidationError(f"{record.case_id}: wiring {cfg.wiring} needs dwi")
    if record.mask is None:
        raise CaseValidationError(f"{record.case_id}: training needs a lesion mask")


@dataclass
class ModelBundle:
    """The networks of one pipeline instance plus the config that shaped them."""

    config: TrainConfig
    segmenter: SegmentationNet
    extractor: FeatureExtractor | None = None
    generator: PseudoDwiGenerator | None = None
    context: ContextEncoder | None = None

    MODEL_TAGS = ("extractor", "generator", "context", "segmenter")

    @classmethod
    def build(cls, cfg: TrainConfig) -> "ModelBundle":
        """Construct and initialize all networks the wiring needs, seeded."""
        torch.manual_seed(cfg.seed)
        extractor = generator = context = None
        if needs_synthesis(cfg.wiring):
            extractor = FeatureExtractor(cfg.base_ch, cfg.depth, cfg.n_frames)
            generator = PseudoDwiGenerator(cfg.base_ch, cfg.depth)
            context = ContextEncoder()
        segmenter = SegmentationNet(segmenter_in_channels(cfg), cfg.base_ch, cfg.depth)
        bundle = cls(cfg, segmenter, extractor, generator, context)
        for _, model in bundle.named_models():
            init_weights(model)
        return bundle

    def named_models(self):
        for tag in self.MODEL_TAGS:
            model = getattr(self, tag)
            if model is not None:
                yield tag, model

    def train_mode(self) -> None:
        for _, m in self.named_models():
            m.train()

    def eval_mode(self) -> None:
        for _, m in self.named_models():
            m.eval()

    def forward(self, batch: dict[str, torch.Tensor | None]):
        """Run the wiring on one batch dict; returns (probs, pseudo, high_level)."""
        wiring = self.config.wiring
        pseudo = high = None
        if needs_synthesis(wiring):
            high = self.extractor(batch["frames"])
            gen_in = torch.cat([batch["maps"], batch["mip"], high], dim=1)
            pseudo = self.generator(gen_in)
        if wiring == "cta_only":
            seg_in = batch["frames"]
        elif wiring == "f_o_only":
            seg_in = batch["maps"]
        elif wiring == "pseudo_dwi_full":
            seg_in = pseudo
        elif wiring == "f_o_plus_pseudo":
            seg_in = torch.cat([batch["maps"], pseudo], dim=1)
        else:
            seg_in = batch["dwi"]
        probs = self.segmenter.probabilities(seg_in)
        return probs, pseudo, high


def _collate(samples: list[SliceSample]) -> dict[str, torch.Tensor | None]:
    def stack(name):
        values = [getattr(s, name) for s in samples]
        if any(v is None for v in values):
            return None
        return torch.stack(values)

    return {name: stack(name) for name in ("maps", "mip", "frames", "dwi", "mask", "weights")}


def _stage_of_epoch(cfg: TrainConfig, epoch: int) -> int:
    """1-indexed stage for a 1-indexed epoch; budget split in thirds."""
    third = cfg.epochs // 3
    if epoch <= third:
        return 1
    if epoch <= 2 * third:
        return 2
    return 3


def _trainable_models(bundle: ModelBundle, stage: int | None) -> list[str]:
    synthesis = needs_synthesis(bundle.config.wiring)
    if stage is None or not synthesis:
        return [tag for tag, _ in bundle.named_models()]
    if stage == 1:
        return ["extractor"]
    if stage == 2:
        return ["generator", "context"]
    return ["segmenter"]


def _make_optimizer(bundle: ModelBundle, tags: list[str], lr: float):
    cfg = bundle.config
    params = []
    for tag, model in bundle.named_models():
        requires = tag in tags
        for p in model.parameters():
            p.requires_grad_(requires)
        if requires:
            params.extend(model.parameters())
    return torch.optim.RMSprop(params, lr=lr, alpha=cfg.rmsprop_alpha, eps=cfg.rmsprop_eps)


def _step_loss(bundle: ModelBundle, batch, stage: int | None):
    """Objective and breakdown for one batch under end-to-end or staged rules."""
    cfg = bundle.config
    probs, pseudo, high = bundle.forward(batch)
    if stage is None or not needs_synthesis(cfg.wiring):
        total, breakdown = losses.overall_loss(
            probs,
            batch["mask"],
            batch["weights"],
            pseudo=pseudo,
            high_level=high,
            dwi=batch["dwi"],
            encoder=bundle.context,
            synth_weight=cfg.synth_weight,
            extract_weight=cfg.extract_weight,
            context_weight=cfg.context_weight,
        )
        return total, breakdown
    w4 = batch["weights"].unsqueeze(1)
    zero = 0.0
    if stage == 1:
        le, _, _ = losses.synthesis_loss(high, batch["dwi"], w4, bundle.context, cfg.context_weight)
        total = cfg.extract_weight * le
        breakdown = losses.LossBreakdown(
            float(total.detach()), zero, zero, zero, zero, zero, zero, float(le.detach())
        )
    elif stage == 2:
        lg, l2, l1 = losses.synthesis_loss(
            pseudo, batch["dwi"], w4, bundle.context, cfg.context_weight
        )
        total = cfg.synth_weight * lg
        breakdown = losses.LossBreakdown(
            float(total.detach()),
            zero,
            zero,
            zero,
            float(lg.detach()),
            float(l2.detach()),
            float(l1.detach()),
            zero,
        )
    else:
        ls, wce, hgd = losses.segmentation_loss(probs, batch["mask"], batch["weights"])
        total = ls
        breakdown = losses.LossBreakdown(
            float(total.detach()),
            float(ls.detach()),
            float(wce.detach()),
            float(hgd.detach()),
            zero,
            zero,
            zero,
            zero,
        )
    return total, breakdown


def micro_dice(bundle: ModelBundle, samples: list[SliceSample]) -> float:
    """Dice over pooled voxel counts of every sample; 1.0 when all masks agree empty."""
    bundle.eval_mode()
    cfg = bundle.config
    tp = fp = fn = 0
    with torch.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            chunk = samples[start : start + cfg.batch_size]
            batch = _collate(chunk)
            probs, _, _ = bundle.forward(batch)
            pred = probs.argmax(dim=1)
            gt = (batch["mask"] > 0.5).long()
            tp += int(((pred == 1) & (gt == 1)).sum())
            fp += int(((pred == 1) & (gt == 0)).sum())
            fn += int(((pred == 0) & (gt == 1)).sum())
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class TrainResult:
    bundle: ModelBundle
    breakdowns: list[losses.LossBreakdown]
    log_path: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    best_val_dice: float | None
    steps: int


def train(
    cfg: TrainConfig,
    train_samples: list[SliceSample],
    val_samples: list[SliceSample] | None = None,
    out_dir=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Run the full training loop and leave checkpoints plus a CSV log in out_dir."""
    if not train_samples:
        raise InputValidationError("training split is empty")
    out_dir = Path(out_dir) if out_dir is not None else Path.cwd() / "train_out"
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"

    bundle = ModelBundle.build(cfg)
    staged = cfg.mode == "staged"

    breakdowns: list[losses.LossBreakdown] = []
    best_val = None
    best_path = None
    last_path = out_dir / "last"
    step = 0
    stop = False

    with log_path.open("w", encoding="utf-8") as log:
        log.write(",".join(LOG_COLUMNS) + "\n")
        optimizer = None
        active_stage = None
        for epoch in range(1, cfg.epochs + 1):
            stage = _stage_of_epoch(cfg, epoch) if staged else None
            if optimizer is None or stage != active_stage:
                optimizer = _make_optimizer(
                    bundle, _trainable_models(bundle, stage), cfg.lr_at_epoch(epoch)
                )
                active_stage = stage
            lr = cfg.lr_at_epoch(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            bundle.train_mode()
            if stage is not None:
                # frozen stages must not keep updating their running norm stats
                active = set(_trainable_models(bundle, stage))
                for tag, model in bundle.named_models():
                    if tag not in active:
                        model.eval()
            order = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, epoch))
            ).permutation(len(train_samples))
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train_samples[i] for i in order[start : start + cfg.batch_size]]
                batch = _collate(chunk)
                optimizer.zero_grad()
                total, breakdown = _step_loss(bundle, batch, stage)
                if not math.isfinite(breakdown.total):
                    raise TrainingDivergedError(
                        f"non-finite loss {breakdown.total} at step {step + 1} "
                        f"(epoch {epoch})"
                    )
                total.backward()
                optimizer.step()
                step += 1
                breakdowns.append(breakdown)
                row = [str(step), str(epoch)]
                row += [repr(v) for v in breakdown.as_dict().values()]
                log.write(",".join(row) + "\n")
                if max_steps is not None and step >= max_steps:
                    stop = True
                    break

            save_checkpoint(last_path, bundle, epoch=epoch, loss=breakdowns[-1])
            if val_samples:
                val_dice = micro_dice(bundle, val_samples)
                if best_val is None or val_dice > best_val:
                    best_val = val_dice
                    best_path = out_dir / "best"
                    save_checkpoint(
                        best_path, bundle, epoch=epoch, loss=breakdowns[-1], val_dice=val_dice
                    )
            if stop:
                break

    return TrainResult(
        bundle=bundle,
        breakdowns=breakdowns,
        log_path=log_path,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        best_val_dice=best_val,
        steps=step,
    )


def predict(bundle: ModelBundle, record: CaseRecord):
    """Full-pipeline inference on one case.

    Returns (pseudo_dwi, seg_mask) volumes at the case's original dims;
    pseudo_dwi is None for wirings without the synthesis branch.
    """
    cfg = bundle.config
    if needs_cta(cfg.wiring) and record.cta is None:
        raise CaseValidationError(f"{record.case_id}: wiring {cfg.wiring} needs cta4d")
    if cfg.wiring == "real_dwi" and record.dwi is None:
        raise CaseValidationError(f"{record.case_id}: wiring real_dwi needs dwi")
    pre = preprocess_case(record, cfg)
    samples = _to_slices(pre, cfg)
    bundle.eval_mode()
    masks = []
    pseudos = []
    original = record.shape[1:]
    with torch.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            chunk = samples[start : start + cfg.batch_size]
            probs, pseudo, _ = bundle.forward(_collate(chunk))
            pred = probs.argmax(dim=1).to(torch.float32).numpy()
            masks.append(restore_2d(pred, original))
            if pseudo is not None:
                pseudos.append(restore_2d(pseudo[:, 0].numpy(), original))
    seg = np.concatenate(masks, axis=0).astype(np.float32)
    pseudo_vol = (
        np.concatenate(pseudos, axis=0).astype(np.float32) if pseudos else None
    )
    return pseudo_vol, seg


CHECKPOINT_FORMAT = 1


def save_checkpoint(
    path_base, bundle: ModelBundle, epoch: int, loss=None, val_dice: float | None = None
) -> None:
    """Two-file checkpoint: JSON manifest + one little-endian float32 blob.

    Every state tensor is recorded by name with shape, original dtype and blob
    offset. Integer step counters are stored as float32, which is exact for
    the magnitudes a counter reaches here.
    """
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    arrays = []
    chunks = []
    offset = 0
    for tag, model in bundle.named_models():
        for name, tensor in model.state_dict().items():
            t = tensor.detach().cpu()
            if t.dtype == torch.int64:
                largest = int(t.abs().max()) if t.numel() else 0
                if largest > 2**24:
                    raise VolumeFormatError(f"{tag}.{name}: counter too large for float32")
                data = t.to(torch.float32)
                dtype = "int64"
            elif t.dtype == torch.float32:
                data = t
                dtype = "float32"
            else:
                raise VolumeFormatError(f"{tag}.{name}: unsupported dtype {t.dtype}")
            raw = data.numpy().astype("<f4", copy=False).tobytes(order="C")
            arrays.append(
                {
                    "name": f"{tag}.{name}",
                    "shape": list(t.shape),
                    "dtype": dtype,
                    "offset": offset,
                }
            )
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": _config_doc(bundle.config),
        "epoch": epoch,
        "val_dice": val_dice,
        "loss": loss.as_dict() if loss is not None else None,
        "arrays": arrays,
    }
    base.with_suffix(".json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    base.with_suffix(".raw").write_bytes(b"".join(chunks))


def _config_doc(cfg: TrainConfig) -> dict:
    doc = cfg.as_dict()
    doc["crop_size"] = list(doc["crop_size"])
    return doc


def load_checkpoint(path_base) -> tuple[ModelBundle, dict]:
    """Rebuild a ModelBundle bit-exactly from a save_checkpoint pair."""
    base = Path(path_base)
    manifest_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    if not manifest_path.is_file() or not raw_path.is_file():
        raise InputValidationError(f"checkpoint {base} is missing its manifest or payload")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InputValidationError(f"unsupported checkpoint format {manifest.get('format')}")
    cfg_doc = dict(manifest["config"])
    cfg_doc["crop_size"] = tuple(cfg_doc["crop_size"])
    cfg = TrainConfig(**cfg_doc)
    bundle = ModelBundle.build(cfg)
    payload = raw_path.read_bytes()
    entries = {e["name"]: e for e in manifest["arrays"]}
    for tag, model in bundle.named_models():
        state = {}
        for name, tensor in model.state_dict().items():
            entry = entries.pop(f"{tag}.{name}", None)
            if entry is None:
                raise InputValidationError(f"checkpoint missing array {tag}.{name}")
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["offset"]
            flat = np.frombuffer(payload, dtype="<f4", count=n, offset=start)
            value = torch.from_numpy(flat.copy()).reshape(entry["shape"])
            if entry["dtype"] == "int64":
                value = value.to(torch.int64)
            state[name] = value
        model.load_state_dict(state, strict=True)
    if entries:
        raise InputValidationError(f"checkpoint has unexpected arrays: {sorted(entries)}")
    return bundle, manifest

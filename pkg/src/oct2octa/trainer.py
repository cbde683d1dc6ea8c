"""Two-stage training: modality-specific reconstruction pretraining, then
translator training under reconstruction + alignment guidance.

Stage 1 fits one reconstruction model per modality by minimizing the
reconstruction/codebook/commitment loss. Stage 2 trains a fresh translator
that maps OCT input volumes to OCTA targets; its loss adds, with weight
``lambda_weight``, three guidance terms measured against the frozen stage-1
models: a contrastive alignment between unquantized features and the frozen
OCT model's features, the same between quantized features and the frozen OCTA
model's quantized features, and the projection-map structure alignment
against the frozen OCTA model's reconstructed en-face map. Minimizing each
contrastive term tightens ``I >= log(K-1) - loss`` for the corresponding pair
of patch-embedding grids, so the guidance can be read as pushing up a mutual
information lower bound; the bound itself is not estimated here.

Determinism contract: every training entry point is a pure function of the
manifest contents, the config, and the seed. Epoch orderings and crop offsets
are derived from ``(seed, epoch)`` / ``(seed, step)`` rather than live RNG
state, so resuming from a checkpoint reproduces the uninterrupted run
bit-for-bit. A non-finite loss aborts immediately with a diagnostic dump.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .alignment import ProjectionHead, csa_loss, patchify_features, vsa_loss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    ManifestError,
    ShapeError,
    TrainingDivergedError,
)
from .metrics import psnr
from .nets import NetConfig, VolumeVqvae, init_parameters, tensor_to_volume, volume_to_tensor
from .vq import vq_quantize, vqvae_loss, VqvaeLossTerms
from .volume import Modality, PairManifest, Volume

STAGE_OCT = "1-oct"
STAGE_OCTA = "1-octa"
STAGE_TRANSLATE = "2"

_HEAD_NAMES = ("oct_frozen", "oct_trans", "octa_frozen", "octa_trans")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = STAGE_OCT
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 1
    learning_rate: float = 3.0e-4
    lambda_weight: float = 0.5
    tau: float = 0.1
    commitment_weight: float = 1.0
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    crop_size: int | None = None
    checkpoint_every: int | None = None
    embed_dim: int = 32
    feature_patch_side: int | None = None  # None -> auto from bottleneck size
    pm_patch_side: int | None = None  # None -> map side // 8

    def __post_init__(self) -> None:
        if self.stage not in (STAGE_OCT, STAGE_OCTA, STAGE_TRANSLATE):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lambda_weight < 0:
            raise ConfigError("lambda_weight must be nonnegative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["net"] = NetConfig(**d["net"])
        return TrainConfig(**d)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    checkpoint_path: Path | None = None


class TranslationModel(nn.Module):
    """Translator VQVAE plus the four contrastive projection heads."""

    def __init__(self, cfg: TrainConfig, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.vqvae = VolumeVqvae(cfg.net, generator)
        d = cfg.net.codebook_dim
        self.heads = nn.ModuleDict(
            {name: ProjectionHead(d, cfg.embed_dim) for name in _HEAD_NAMES}
        )
        for head in self.heads.values():
            init_parameters(head, generator)


def _derived_seed(*keys) -> int:
    entropy = [k if isinstance(k, int) else int.from_bytes(str(k).encode(), "big") for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint32)[0])


def _epoch_order(seed: int, epoch: int, n: int) -> list[int]:
    g = torch.Generator().manual_seed(_derived_seed(seed, "epoch", epoch))
    return torch.randperm(n, generator=g).tolist()


def parameter_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class _PairCache:
    """Manifest volumes pinned in memory as tensors (desk-scale datasets)."""

    def __init__(self, manifest: PairManifest) -> None:
        if not manifest.entries:
            raise ManifestError("manifest is empty")
        self.pairs: list[tuple[torch.Tensor, torch.Tensor]] = []
        for i in range(len(manifest)):
            vol_oct, vol_octa = manifest.load_pair(i)
            if vol_oct.dims != vol_octa.dims:
                raise ManifestError(f"entry {i}: paired dims differ")
            self.pairs.append((volume_to_tensor(vol_oct), volume_to_tensor(vol_octa)))
        self.ids = [e.subject_id for e in manifest.entries]

    def __len__(self) -> int:
        return len(self.pairs)


def _crop_pair(
    pair: tuple[torch.Tensor, torch.Tensor], crop: int, seed: int, item_counter: int
) -> tuple[torch.Tensor, torch.Tensor]:
    x, y = pair
    dims = x.shape[-3:]
    if any(s < crop for s in dims):
        raise ShapeError(f"crop size {crop} exceeds volume dims {tuple(dims)}")
    g = torch.Generator().manual_seed(_derived_seed(seed, "crop", item_counter))
    offs = [int(torch.randint(0, s - crop + 1, (1,), generator=g)) for s in dims]
    sl = (..., slice(offs[0], offs[0] + crop), slice(offs[1], offs[1] + crop),
          slice(offs[2], offs[2] + crop))
    return x[sl], y[sl]


def _batch_for_step(
    cache: _PairCache, cfg: TrainConfig, step: int
) -> tuple[torch.Tensor, torch.Tensor, list[int]]:
    n = len(cache)
    items = []
    ids = []
    for b in range(cfg.batch_size):
        counter = step * cfg.batch_size + b
        epoch, pos = divmod(counter, n)
        idx = _epoch_order(cfg.seed, epoch, n)[pos]
        pair = cache.pairs[idx]
        if cfg.crop_size is not None:
            pair = _crop_pair(pair, cfg.crop_size, cfg.seed, counter)
        items.append(pair)
        ids.append(idx)
    x = torch.cat([p[0] for p in items], dim=0)
    y = torch.cat([p[1] for p in items], dim=0)
    return x, y, ids


def _total_steps(cfg: TrainConfig, n_items: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * math.ceil(n_items / cfg.batch_size)


# --------------------------------------------------------------------------
# checkpoint bridging


def _state_to_arrays(module: nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    for name, tensor in module.state_dict().items():
        arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().copy()


def _arrays_to_state(
    arrays: dict[str, np.ndarray], prefix: str
) -> dict[str, torch.Tensor]:
    state = {}
    skip = len(prefix) + 1
    for key, arr in arrays.items():
        if key.startswith(prefix + "."):
            state[key[skip:]] = torch.from_numpy(arr.copy())
    return state


def _optimizer_to_arrays(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> dict:
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, value in st.items():
            tensor = value if isinstance(value, torch.Tensor) else torch.tensor(value)
            arrays[f"optim.{idx}.{key}"] = tensor.detach().cpu().numpy().copy()
    return {"param_groups": sd["param_groups"]}


def _arrays_to_optimizer(
    arrays: dict[str, np.ndarray], meta: dict, opt: torch.optim.Optimizer
) -> None:
    state: dict[int, dict] = {}
    for key, arr in arrays.items():
        if not key.startswith("optim."):
            continue
        _, idx, name = key.split(".", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def build_checkpoint(
    model: nn.Module,
    cfg: TrainConfig,
    step: int,
    kind: str,
    opt: torch.optim.Optimizer | None = None,
    extra_meta: dict | None = None,
) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    _state_to_arrays(model, "model", arrays)
    meta = {
        "kind": kind,
        "step": step,
        "config": cfg.to_dict(),
        "format": "oct2octa-checkpoint",
    }
    if opt is not None:
        meta["optimizer"] = _optimizer_to_arrays(opt, arrays)
    if extra_meta:
        meta.update(extra_meta)
    return Checkpoint(meta=meta, arrays=arrays)


def _coerce_checkpoint(ckpt: Checkpoint | str | Path) -> Checkpoint:
    if isinstance(ckpt, Checkpoint):
        return ckpt
    return load_checkpoint(ckpt)


def load_stage1_model(ckpt: Checkpoint | str | Path) -> tuple[VolumeVqvae, TrainConfig]:
    ckpt = _coerce_checkpoint(ckpt)
    if ckpt.meta.get("kind") != "stage1":
        raise CheckpointError(f"expected a stage1 checkpoint, found kind={ckpt.meta.get('kind')!r}")
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    model = VolumeVqvae(cfg.net)
    model.load_state_dict(_arrays_to_state(ckpt.arrays, "model"))
    return model, cfg


def load_translation_model(ckpt: Checkpoint | str | Path) -> tuple[TranslationModel, TrainConfig]:
    ckpt = _coerce_checkpoint(ckpt)
    if ckpt.meta.get("kind") != "stage2":
        raise CheckpointError(f"expected a stage2 checkpoint, found kind={ckpt.meta.get('kind')!r}")
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    model = TranslationModel(cfg)
    model.load_state_dict(_arrays_to_state(ckpt.arrays, "model"))
    return model, cfg


# --------------------------------------------------------------------------
# shared loop plumbing


class _RunLogger:
    def __init__(self, out_dir: Path | None) -> None:
        self.out_dir = out_dir
        self.history: list[dict] = []
        self._fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(out_dir / "train_log.jsonl", "a")

    def log(self, record: dict) -> None:
        self.history.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _abort_if_nonfinite(terms: dict, step: int, ids: list[int], out_dir: Path | None) -> None:
    if all(math.isfinite(v) for v in terms.values()):
        return
    dump = {"step": step, "batch_items": ids, "terms": terms}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "diagnostic_dump.json").write_text(json.dumps(dump, indent=2))
    raise TrainingDivergedError(f"non-finite loss at step {step}: {terms}")


def _maybe_save(
    ckpt: Checkpoint, out_dir: Path | None, name: str
) -> Path | None:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    save_checkpoint(ckpt, path)
    return path


def _val_psnr_stage1(model: VolumeVqvae, cache: _PairCache, modality: Modality) -> float:
    scores = []
    with torch.no_grad():
        for pair in cache.pairs:
            x = pair[0] if modality == Modality.OCT else pair[1]
            recon = model(x).reconstruction
            scores.append(psnr(recon[0, 0].numpy(), x[0, 0].numpy()))
    return float(np.mean(scores))


def _val_psnr_stage2(model: TranslationModel, cache: _PairCache) -> float:
    scores = []
    with torch.no_grad():
        for x_oct, x_octa in cache.pairs:
            recon = model.vqvae(x_oct).reconstruction
            scores.append(psnr(recon[0, 0].numpy(), x_octa[0, 0].numpy()))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# stage 1


def train_stage1(
    manifest: PairManifest,
    modality: Modality,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    val_manifest: PairManifest | None = None,
    resume_from: Checkpoint | str | Path | None = None,
) -> TrainResult:
    """Pretrain one reconstruction model on a single modality.

    Deterministic given (manifest contents, config): epoch order and crops
    derive from the seed alone. Writes ``train_log.jsonl`` plus periodic,
    final, and best-validation checkpoints under ``out_dir`` when given.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    cache = _PairCache(manifest)
    val_cache = _PairCache(val_manifest) if val_manifest is not None else None
    modality = Modality(modality)

    start_step = 0
    if resume_from is not None:
        model, _ = load_stage1_model(resume_from)
        ckpt0 = _coerce_checkpoint(resume_from)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        if "optimizer" in ckpt0.meta:
            _arrays_to_optimizer(ckpt0.arrays, ckpt0.meta["optimizer"], opt)
        start_step = ckpt0.step
    else:
        g = torch.Generator().manual_seed(_derived_seed(cfg.seed, "init", cfg.stage))
        model = VolumeVqvae(cfg.net, g)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    kind = "stage1"
    extra = {"modality": modality.name}
    logger = _RunLogger(out_dir)
    total_steps = _total_steps(cfg, len(cache))
    best_psnr = -math.inf
    t0 = time.monotonic()
    try:
        for step in range(start_step, total_steps):
            x_oct, x_octa, ids = _batch_for_step(cache, cfg, step)
            x = x_oct if modality == Modality.OCT else x_octa
            out = model(x)
            terms = vqvae_loss(x, out.reconstruction, out.quantize_result, cfg.commitment_weight)
            record = {"step": step + 1, **terms.as_dict(), "wall_time": time.monotonic() - t0}
            _abort_if_nonfinite(terms.as_dict(), step + 1, ids, out_dir)
            logger.log(record)
            opt.zero_grad()
            terms.total.backward()
            opt.step()

            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < total_steps:
                snap = build_checkpoint(model, cfg, done, kind, opt, extra)
                _maybe_save(snap, out_dir, f"step_{done:06d}.mckp")
                if val_cache is not None:
                    score = _val_psnr_stage1(model, val_cache, modality)
                    logger.log({"step": done, "val_psnr": score})
                    if score > best_psnr:
                        best_psnr = score
                        _maybe_save(snap, out_dir, "best.mckp")

        final = build_checkpoint(model, cfg, total_steps, kind, opt, extra)
        path = _maybe_save(final, out_dir, "final.mckp")
        if val_cache is not None:
            score = _val_psnr_stage1(model, val_cache, modality)
            logger.log({"step": total_steps, "val_psnr": score})
            if score > best_psnr:
                _maybe_save(final, out_dir, "best.mckp")
    finally:
        logger.close()
    return TrainResult(checkpoint=final, history=logger.history, checkpoint_path=path)


# --------------------------------------------------------------------------
# stage 2


def _auto_feature_patch_side(cfg: TrainConfig, grid_side: int) -> int:
    if cfg.feature_patch_side is not None:
        return cfg.feature_patch_side
    return 1 if grid_side <= 8 else max(1, grid_side // 8)


def _auto_pm_patch_side(cfg: TrainConfig, map_side: int) -> int:
    if cfg.pm_patch_side is not None:
        return cfg.pm_patch_side
    return max(1, map_side // 8)


@dataclass
class StageTwoLossTerms:
    total: torch.Tensor
    vqvae: VqvaeLossTerms
    l_oct: torch.Tensor
    l_octa: torch.Tensor
    l_proj: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "reconstruction": float(self.vqvae.reconstruction.detach()),
            "codebook": float(self.vqvae.codebook.detach()),
            "commitment": float(self.vqvae.commitment.detach()),
            "l_oct": float(self.l_oct.detach()),
            "l_octa": float(self.l_octa.detach()),
            "l_proj": float(self.l_proj.detach()),
        }


def stage2_loss(
    batch: tuple[torch.Tensor, torch.Tensor],
    translator: TranslationModel,
    frozen_oct: VolumeVqvae,
    frozen_octa: VolumeVqvae,
    cfg: TrainConfig,
) -> StageTwoLossTerms:
    """Translator loss: reconstruction toward the OCTA target plus the three
    frozen-model alignment terms weighted by ``lambda_weight``.

    When ``lambda_weight`` is 0 the guidance terms are skipped entirely and
    logged as zero, so the total equals the plain translation VQVAE loss.
    """
    x_oct, x_octa = batch
    out = translator.vqvae(x_oct)
    vq_terms = vqvae_loss(x_octa, out.reconstruction, out.quantize_result, cfg.commitment_weight)

    zero = torch.zeros(())
    if cfg.lambda_weight == 0.0:
        return StageTwoLossTerms(vq_terms.total, vq_terms, zero, zero, zero)

    with torch.no_grad():
        u_oct = frozen_oct.encode(x_oct)
        u_octa = frozen_octa.encode(x_octa)
        q_octa = vq_quantize(u_octa, frozen_octa.codebook, channel_dim=1).quantized
        recon_octa = frozen_octa(x_octa).reconstruction

    grid_side = out.features.shape[-3]
    s_feat = _auto_feature_patch_side(cfg, grid_side)
    map_side = x_oct.shape[-3]
    s_pm = _auto_pm_patch_side(cfg, map_side)

    l_oct_items = []
    l_octa_items = []
    l_proj_items = []
    for i in range(x_oct.shape[0]):
        q_grid = patchify_features(u_oct[i], s_feat, translator.heads["oct_frozen"])
        p_grid = patchify_features(out.features[i], s_feat, translator.heads["oct_trans"])
        l_oct_items.append(csa_loss(q_grid, p_grid, cfg.tau))

        q_grid = patchify_features(q_octa[i], s_feat, translator.heads["octa_frozen"])
        p_grid = patchify_features(out.quantize_result.quantized[i], s_feat,
                                   translator.heads["octa_trans"])
        l_octa_items.append(csa_loss(q_grid, p_grid, cfg.tau))

        pm_frozen = recon_octa[i, 0].mean(dim=-1)
        pm_trans = out.reconstruction[i, 0].mean(dim=-1)
        l_proj_items.append(vsa_loss(pm_frozen, pm_trans, s_pm))

    l_oct = torch.stack(l_oct_items).mean()
    l_octa = torch.stack(l_octa_items).mean()
    l_proj = torch.stack(l_proj_items).mean()
    total = vq_terms.total + cfg.lambda_weight * (l_oct + l_octa + l_proj)
    return StageTwoLossTerms(total, vq_terms, l_oct, l_octa, l_proj)


def train_stage2(
    manifest: PairManifest,
    cfg: TrainConfig,
    ckpt_oct: Checkpoint | str | Path,
    ckpt_octa: Checkpoint | str | Path,
    out_dir: str | Path | None = None,
    val_manifest: PairManifest | None = None,
    resume_from: Checkpoint | str | Path | None = None,
) -> TrainResult:
    """Train the OCT-to-OCTA translator under frozen stage-1 guidance.

    The frozen models never receive gradients; their parameter hashes are
    compared before and after the loop and any drift raises.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    cache = _PairCache(manifest)
    val_cache = _PairCache(val_manifest) if val_manifest is not None else None

    frozen_oct, cfg_oct = load_stage1_model(ckpt_oct)
    frozen_octa, cfg_octa = load_stage1_model(ckpt_octa)
    for frozen, fcfg, tag in ((frozen_oct, cfg_oct, "oct"), (frozen_octa, cfg_octa, "octa")):
        if fcfg.net.blocks != cfg.net.blocks or fcfg.net.codebook_dim != cfg.net.codebook_dim:
            raise CheckpointError(
                f"frozen {tag} model architecture incompatible with translator config"
            )
        frozen.eval()
        frozen.requires_grad_(False)
    hash_before = parameter_hash(frozen_oct), parameter_hash(frozen_octa)

    start_step = 0
    if resume_from is not None:
        model, _ = load_translation_model(resume_from)
        ckpt0 = _coerce_checkpoint(resume_from)
        params = list(model.parameters())
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        if "optimizer" in ckpt0.meta:
            _arrays_to_optimizer(ckpt0.arrays, ckpt0.meta["optimizer"], opt)
        start_step = ckpt0.step
    else:
        g = torch.Generator().manual_seed(_derived_seed(cfg.seed, "init", cfg.stage))
        model = TranslationModel(cfg, g)
        opt = torch.optim.Adam(list(model.parameters()), lr=cfg.learning_rate)

    kind = "stage2"
    extra = {
        "modality": Modality.OCT2OCTA.name,
        "frozen_hashes": {"oct": hash_before[0], "octa": hash_before[1]},
    }
    logger = _RunLogger(out_dir)
    total_steps = _total_steps(cfg, len(cache))
    best_psnr = -math.inf
    t0 = time.monotonic()
    try:
        for step in range(start_step, total_steps):
            batch = _batch_for_step(cache, cfg, step)
            terms = stage2_loss(batch[:2], model, frozen_oct, frozen_octa, cfg)
            record = {"step": step + 1, **terms.as_dict(), "wall_time": time.monotonic() - t0}
            _abort_if_nonfinite(terms.as_dict(), step + 1, batch[2], out_dir)
            logger.log(record)
            opt.zero_grad()
            terms.total.backward()
            opt.step()

            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < total_steps:
                snap = build_checkpoint(model, cfg, done, kind, opt, extra)
                _maybe_save(snap, out_dir, f"step_{done:06d}.mckp")
                if val_cache is not None:
                    score = _val_psnr_stage2(model, val_cache)
                    logger.log({"step": done, "val_psnr": score})
                    if score > best_psnr:
                        best_psnr = score
                        _maybe_save(snap, out_dir, "best.mckp")

        hash_after = parameter_hash(frozen_oct), parameter_hash(frozen_octa)
        if hash_before != hash_after:
            raise TrainingDivergedError("frozen stage-1 parameters changed during stage-2 training")

        final = build_checkpoint(model, cfg, total_steps, kind, opt, extra)
        path = _maybe_save(final, out_dir, "final.mckp")
        if val_cache is not None:
            score = _val_psnr_stage2(model, val_cache)
            logger.log({"step": total_steps, "val_psnr": score})
            if score > best_psnr:
                _maybe_save(final, out_dir, "best.mckp")
    finally:
        logger.close()
    return TrainResult(checkpoint=final, history=logger.history, checkpoint_path=path)


# --------------------------------------------------------------------------
# inference


def _model_for_inference(ckpt: Checkpoint | str | Path) -> VolumeVqvae:
    ckpt = _coerce_checkpoint(ckpt)
    kind = ckpt.meta.get("kind")
    if kind == "stage2":
        return load_translation_model(ckpt)[0].vqvae
    if kind == "stage1":
        return load_stage1_model(ckpt)[0]
    raise CheckpointError(f"cannot run inference from checkpoint kind={kind!r}")


def _window_positions(dim: int, window: int, stride: int) -> list[int]:
    if window > dim:
        raise ShapeError(f"window {window} exceeds volume dim {dim}")
    positions = list(range(0, dim - window + 1, stride))
    if positions[-1] != dim - window:
        positions.append(dim - window)
    return positions


def run_volume(
    model: VolumeVqvae, vol: Volume | torch.Tensor, window: int | None = None
) -> torch.Tensor:
    """Full-volume inference, optionally stitched from sliding windows.

    With ``window`` set, cube windows of that side slide with 50% overlap and
    overlapping predictions are averaged; otherwise the whole volume must be
    divisible by the model's downsampling factor and is processed directly.
    """
    x = volume_to_tensor(vol)
    model.eval()
    with torch.no_grad():
        if window is None:
            return model(x).reconstruction
        factor = model.cfg.total_downsample
        if window % factor != 0:
            raise ShapeError(f"window {window} not divisible by downsampling factor {factor}")
        dims = x.shape[-3:]
        stride = max(factor, window // 2)
        acc = torch.zeros(x.shape, dtype=torch.float64)
        cnt = torch.zeros(x.shape, dtype=torch.float64)
        for i in _window_positions(dims[0], window, stride):
            for j in _window_positions(dims[1], window, stride):
                for k in _window_positions(dims[2], window, stride):
                    sl = (..., slice(i, i + window), slice(j, j + window),
                          slice(k, k + window))
                    acc[sl] += model(x[sl]).reconstruction.double()
                    cnt[sl] += 1.0
        return (acc / cnt).float()


def translate(
    ckpt: Checkpoint | str | Path | VolumeVqvae,
    vol_oct: Volume,
    window: int | None = None,
) -> Volume:
    """Translate an OCT volume to an OCTA volume using a trained checkpoint."""
    model = ckpt if isinstance(ckpt, VolumeVqvae) else _model_for_inference(ckpt)
    out = run_volume(model, vol_oct, window)
    return tensor_to_volume(out, Modality.OCT2OCTA)


def collect_codebook_indices(
    model: VolumeVqvae, manifest: PairManifest, source: Modality = Modality.OCT
) -> np.ndarray:
    """Bottleneck quantization indices over every manifest item's input volume."""
    chunks = []
    with torch.no_grad():
        for i in range(len(manifest)):
            vol_oct, vol_octa = manifest.load_pair(i)
            vol = vol_oct if source == Modality.OCT else vol_octa
            out = model(volume_to_tensor(vol))
            chunks.append(out.quantize_result.indices.reshape(-1).numpy())
    return np.concatenate(chunks)

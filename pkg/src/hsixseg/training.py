"""Loss, schedule, the training loop, and the ablation/experiment runners."""

import copy
import math
from dataclasses import dataclass, asdict, replace

import numpy as np
import torch

from .data import IGNORE_LABEL, SceneSample, Tile, tile as tile_scene
from .metrics import confusion, oa
from .model import HsiXSegNet, ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 6e-5
    weight_decay: float = 0.01
    batch_size: int = 4
    poly_power: float = 0.9
    seed: int = 0
    val_fraction: float = 0.2
    decoupled_decay: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr <= 0 or self.poly_power <= 0:
            raise ValueError("base_lr and poly_power must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over non-ignore pixels.

    Ignore pixels contribute nothing to the value or the gradient.
    """
    flat = logits.reshape(-1, logits.shape[-1])
    lab = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    mask = lab != IGNORE_LABEL
    if not mask.any():
        raise ValueError("no labeled pixels in the batch")
    logp = torch.log_softmax(flat[mask], dim=-1)
    return -logp.gather(1, lab[mask].unsqueeze(1)).mean()


def poly_lr(step: int, total_steps: int, base_lr: float, power: float = 0.9) -> float:
    """base_lr * (1 - step/total)^power; monotone non-increasing on [0, total]."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


def split_tiles(tiles: list[Tile], val_fraction: float, seed: int) -> tuple[list[Tile], list[Tile]]:
    """Seeded shuffle split into train/validation tile lists."""
    order = np.random.default_rng(seed).permutation(len(tiles))
    n_val = int(round(len(tiles) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(tiles) if i not in val_idx]
    val = [t for i, t in enumerate(tiles) if i in val_idx]
    return train, val


def _to_tensors(sample: SceneSample, zero_modality: str | None):
    hsi = torch.from_numpy(sample.hsi.astype(np.float32))
    x = torch.from_numpy(sample.x.astype(np.float32))
    if zero_modality == "hsi":
        hsi = torch.zeros_like(hsi)
    elif zero_modality == "x":
        x = torch.zeros_like(x)
    labels = torch.from_numpy(sample.labels.astype(np.int64))
    return hsi, x, labels


@torch.no_grad()
def evaluate_tiles(model: HsiXSegNet, tiles: list[Tile], zero_modality: str | None = None) -> float:
    """Held-out overall accuracy over a tile list (eval mode)."""
    model.eval()
    cm = np.zeros((model.cfg.num_classes,) * 2, dtype=np.int64)
    for t in tiles:
        hsi, x, _ = _to_tensors(t.sample, zero_modality)
        pred = model(hsi, x).argmax(dim=-1).numpy()
        cm += confusion(pred, t.sample.labels, model.cfg.num_classes)
    return oa(cm)


@torch.no_grad()
def predict_scene(model: HsiXSegNet, scene: SceneSample) -> np.ndarray:
    """Full-scene prediction map via non-overlapping tiles at the model's tile size."""
    model.eval()
    ts = model.cfg.tile_size
    out = np.full(scene.shape, IGNORE_LABEL, dtype=np.int32)
    for t in tile_scene(scene, ts, ts):
        hsi, x, _ = _to_tensors(t.sample, None)
        pred = model(hsi, x).argmax(dim=-1).numpy().astype(np.int32)
        h = min(ts, scene.shape[0] - t.row)
        w = min(ts, scene.shape[1] - t.col)
        out[t.row:t.row + h, t.col:t.col + w] = pred[:h, :w]
    return out


def fit(
    model: HsiXSegNet,
    train_tiles: list[Tile],
    val_tiles: list[Tile],
    cfg: TrainConfig,
    zero_modality: str | None = None,
    log=None,
) -> list[dict]:
    """Train with Adam and the poly schedule; returns the per-epoch log.

    Deterministic given the seed and the model's initial weights. The
    best-validation-OA weights are restored into the model at the end.
    """
    if not train_tiles:
        raise ValueError("training set is empty")
    opt_cls = torch.optim.AdamW if cfg.decoupled_decay else torch.optim.Adam
    opt = opt_cls(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_tiles) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    history = []
    best = (-1.0, None)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_tiles))
        losses = []
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = poly_lr(step, total_steps, cfg.base_lr, cfg.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            loss = 0.0
            for i in batch:
                hsi, x, labels = _to_tensors(train_tiles[i].sample, zero_modality)
                loss = loss + cross_entropy_loss(model(hsi, x), labels)
            loss = loss / len(batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            losses.append(float(loss))
            step += 1
        val_oa = evaluate_tiles(model, val_tiles, zero_modality) if val_tiles else float("nan")
        rec = {
            "epoch": epoch,
            "step": step,
            "lr": poly_lr(min(step, total_steps), total_steps, cfg.base_lr, cfg.poly_power),
            "loss": float(np.mean(losses)),
            "val_oa": val_oa,
        }
        history.append(rec)
        if log is not None:
            log(rec)
        if val_tiles and val_oa > best[0]:
            best = (val_oa, copy.deepcopy(model.state_dict()))
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return history


ABLATION_VARIANTS = {
    "baseline-avg-fusion": dict(x_block="vit", hsi_block="vit", cmfex_mode="none", use_ffm=False),
    "+2D-DCN": dict(x_block="dcn", hsi_block="dcn2d", cmfex_mode="none", use_ffm=False),
    "+3D-DCN": dict(x_block="dcn", hsi_block="epa", cmfex_mode="none", use_ffm=False),
    "+CMFeX-spa": dict(x_block="dcn", hsi_block="epa", cmfex_mode="spa", use_ffm=False),
    "+CMFeX-spe": dict(x_block="dcn", hsi_block="epa", cmfex_mode="spe", use_ffm=False),
    "+CMFeX": dict(x_block="dcn", hsi_block="epa", cmfex_mode="full", use_ffm=False),
    "+FFM": dict(x_block="dcn", hsi_block="epa", cmfex_mode="full", use_ffm=True),
}


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; known: {sorted(ABLATION_VARIANTS)}")
    return replace(base, **ABLATION_VARIANTS[variant])


def train_once(
    model_cfg: ModelConfig,
    tiles: list[Tile],
    train_cfg: TrainConfig,
    zero_modality: str | None = None,
    log=None,
) -> tuple[HsiXSegNet, list[dict], float]:
    """Seeded end-to-end run: init, split, fit, held-out OA."""
    torch.manual_seed(train_cfg.seed)
    model = HsiXSegNet(model_cfg)
    train_tiles, val_tiles = split_tiles(tiles, train_cfg.val_fraction, train_cfg.seed)
    history = fit(model, train_tiles, val_tiles, train_cfg, zero_modality, log=log)
    final_oa = evaluate_tiles(model, val_tiles, zero_modality) if val_tiles else float("nan")
    return model, history, final_oa


def run_ablation(
    base_cfg: ModelConfig,
    tiles: list[Tile],
    train_cfg: TrainConfig,
    variants: list[str] | None = None,
    seeds: tuple = (0, 1, 2),
    log=None,
) -> dict[str, dict]:
    """Train each variant under identical seeds/budget; report per-seed and median OA."""
    variants = list(variants or ABLATION_VARIANTS)
    table = {}
    for name in variants:
        cfg = variant_config(base_cfg, name)
        scores = []
        for seed in seeds:
            _, _, score = train_once(cfg, tiles, replace(train_cfg, seed=seed))
            scores.append(score)
            if log is not None:
                log(f"{name} seed={seed} oa={score:.4f}")
        table[name] = {"oa_per_seed": scores, "oa_median": float(np.median(scores))}
    return table


def run_train_fraction(
    model_cfg: ModelConfig,
    tiles: list[Tile],
    train_cfg: TrainConfig,
    fractions: tuple = (0.4, 0.6, 0.8, 1.0),
    seeds: tuple = (0, 1, 2),
    log=None,
) -> dict[float, dict]:
    """OA versus the fraction of training tiles used (seeded subsampling)."""
    results = {}
    for frac in fractions:
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"fraction {frac} outside (0, 1]")
        scores = []
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            torch.manual_seed(cfg.seed)
            model = HsiXSegNet(model_cfg)
            train_tiles, val_tiles = split_tiles(tiles, cfg.val_fraction, cfg.seed)
            n = int(round(len(train_tiles) * frac))
            if n < 1:
                raise ValueError(f"fraction {frac} leaves no training tiles")
            keep = np.random.default_rng(cfg.seed + 1).permutation(len(train_tiles))[:n]
            subset = [train_tiles[i] for i in sorted(keep)]
            fit(model, subset, val_tiles, cfg)
            scores.append(evaluate_tiles(model, val_tiles))
            if log is not None:
                log(f"frac={frac} seed={seed} oa={scores[-1]:.4f}")
        results[frac] = {"oa_per_seed": scores, "oa_median": float(np.median(scores))}
    return results

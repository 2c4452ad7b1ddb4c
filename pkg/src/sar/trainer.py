"""Pre-training and fine-tuning loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from sar.errors import CheckpointError, ConfigError, DataError, NumericalError
from sar.model import Arch, SARNet, SegNet, init_pretrain_model, init_seg_model, save_checkpoint
from sar.objectives import ALPHA, BETA, adversarial_losses, combined_objective, dice_loss, restoration_loss, scale_loss
from sar.sampler import SamplingPlan, ScaleLabel, generate_subvolumes
from sar.transforms import CorruptionRecord, TransformConfig, corrupt
from sar.volume import Modality, Volume

log = logging.getLogger(__name__)

PRETRAIN_COLUMNS = [
    "epoch", "split", "l_res", "l_scale", "l_adv_d", "combined",
    "lr_unet", "lr_sa", "lr_mial", "scale_acc", "adv_acc",
]
FINETUNE_COLUMNS = ["epoch", "split", "dice_loss", "dice_score", "lr"]
TIMING_COLUMNS = ["epoch", "wall_seconds"]

# Stream ids for deriving per-purpose generators from a run seed.
_TRAIN_STREAM, _VAL_STREAM, _SPLIT_STREAM = 1, 2, 3


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


# --- plateau scheduling ---------------------------------------------------


@dataclass(frozen=True)
class PlateauState:
    patience: int = 5
    factor: float = 0.1
    min_delta: float = 1e-4
    best: float = math.inf
    num_bad: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")


def plateau_step(state: PlateauState, val_loss: float) -> tuple[PlateauState, bool]:
    """Advance the plateau counter; ``True`` means the learning rates should be cut.

    A call improves when ``val_loss < best - min_delta``. After ``patience``
    consecutive non-improving calls the rates are cut and the counter resets.
    """
    if val_loss < state.best - state.min_delta:
        return replace(state, best=float(val_loss), num_bad=0), False
    bad = state.num_bad + 1
    if bad >= state.patience:
        return replace(state, num_bad=0), True
    return replace(state, num_bad=bad), False


class PlateauScheduler:
    def __init__(self, optimizers, patience=5, factor=0.1, min_delta=1e-4):
        self.optimizers = list(optimizers)
        self.state = PlateauState(patience, factor, min_delta)

    def step(self, val_loss: float) -> bool:
        self.state, reduce = plateau_step(self.state, val_loss)
        if reduce:
            for opt in self.optimizers:
                for group in opt.param_groups:
                    group["lr"] *= self.state.factor
        return reduce

    def state_dict(self) -> dict:
        return {"best": self.state.best, "num_bad": self.state.num_bad}

    def load_state_dict(self, d: dict) -> None:
        self.state = replace(self.state, best=float(d["best"]), num_bad=int(d["num_bad"]))


# --- configs --------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    lr_unet: float = 1.0
    lr_sa: float = 0.1
    lr_mial: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 50
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-4
    seed: int = 0
    alpha: float = ALPHA
    beta: float = BETA
    # Gradient-reversal coefficient; 0 cuts the adversarial signal to the encoder.
    reversal: float = 1.0
    val_split: float = 0.25
    arch: Arch = field(default_factory=Arch)
    plan: SamplingPlan = field(default_factory=SamplingPlan)
    transform: TransformConfig = field(default_factory=TransformConfig)

    def __post_init__(self):
        for name in ("lr_unet", "lr_sa", "lr_mial"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        # Two samples at least: one per modality, and batch statistics in the heads.
        if self.batch_size < 2 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 2 and max_epochs >= 0")
        if not 0 < self.val_split <= 0.5:
            raise ConfigError(f"val_split must lie in (0, 0.5], got {self.val_split}")
        if tuple(self.plan.target_shape) != tuple(self.arch.input_shape):
            raise ConfigError(f"plan target_shape {self.plan.target_shape} != arch input_shape {self.arch.input_shape}")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 30
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-4
    n_classes: int = 2
    # "scratch" or a checkpoint path.
    init: str = "scratch"
    data_fraction: float = 1.0
    patches_per_case: int = 4
    overlap: float = 0.5
    seed: int = 0
    arch: Arch = field(default_factory=Arch)

    def __post_init__(self):
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.lr < 0 or self.batch_size < 1 or self.patches_per_case < 1:
            raise ConfigError("lr must be >= 0, batch_size and patches_per_case >= 1")

    @property
    def foreground(self) -> list[int]:
        return list(range(1, self.n_classes))


# --- batches --------------------------------------------------------------


@dataclass
class Batch:
    x_hat: torch.Tensor
    x: torch.Tensor
    y_scale: torch.Tensor
    y_modality: torch.Tensor
    records: list[CorruptionRecord]

    def __len__(self) -> int:
        return self.x.shape[0]


def _stack(samples) -> Batch:
    x_hat = torch.from_numpy(np.stack([s[0] for s in samples]).astype(np.float32)).unsqueeze(1)
    x = torch.from_numpy(np.stack([s[1] for s in samples]).astype(np.float32)).unsqueeze(1)
    y_scale = torch.tensor([int(s[2]) for s in samples], dtype=torch.long)
    y_mod = torch.tensor([int(s[3]) for s in samples], dtype=torch.long)
    return Batch(x_hat, x, y_scale, y_mod, [s[4] for s in samples])


def _corrupt_subvolume(sv, tcfg, rng):
    x_hat, record = corrupt(sv.data, tcfg, rng)
    return (x_hat, sv.data, sv.scale_label, sv.modality_label, record)


def batch_builder(corpus, plan: SamplingPlan, transform_config: TransformConfig, rng, batch_size: int = 8) -> Batch:
    """Draw one batch of ``(x_hat, x, y_scale, y_modality)``.

    Modalities alternate from a random start, so a batch of two or more
    holds both whenever the corpus does. Scales follow the plan proportions.
    """
    if not corpus:
        raise DataError("corpus is empty")
    by_mod = {m: [v for v in corpus if v.modality == m] for m in Modality}
    mods = [m for m in Modality if by_mod[m]]
    if plan.per_volume == 0:
        raise DataError("sampling plan draws no crops")
    labels = [l for l in ScaleLabel]
    probs = np.array([plan.counts[l] for l in labels], dtype=float) / plan.per_volume
    start = int(rng.integers(len(mods)))
    samples = []
    for i in range(batch_size):
        pool = by_mod[mods[(start + i) % len(mods)]]
        vol = pool[int(rng.integers(len(pool)))]
        label = labels[int(rng.choice(len(labels), p=probs))]
        one = SamplingPlan(**{f"n_{l.name.lower()}": int(l == label) for l in labels}, target_shape=plan.target_shape)
        sv = generate_subvolumes(vol, one, rng)[0]
        samples.append(_corrupt_subvolume(sv, transform_config, rng))
    return _stack(samples)


def _interleave(samples, rng):
    """Shuffle within each modality, then merge by fractional position."""
    keyed = []
    for m in Modality:
        idx = [i for i, s in enumerate(samples) if int(s[3]) == m]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        keyed += [((k + 0.5) / len(idx), int(m), i) for k, i in enumerate(idx)]
    return [samples[i] for _, _, i in sorted(keyed)]


def epoch_batches(volumes, plan, tcfg, rng, batch_size) -> list[Batch]:
    """All crops of one epoch: ``plan.per_volume`` per volume, corrupted and batched.

    A trailing single-sample batch is folded into the one before it.
    """
    samples = []
    for vol in volumes:
        for sv in generate_subvolumes(vol, plan, rng):
            samples.append(_corrupt_subvolume(sv, tcfg, rng))
    samples = _interleave(samples, rng)
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = chunks[-1] + tail
    return [_stack(c) for c in chunks]


def split_corpus(corpus, val_split: float, seed: int):
    """Per-modality split; every modality with >= 2 volumes gets >= 1 validation volume."""
    rng = _rng(seed, _SPLIT_STREAM)
    train, val = [], []
    for m in Modality:
        vols = [v for v in corpus if v.modality == m]
        order = rng.permutation(len(vols))
        n_val = min(len(vols) - 1, max(1, int(math.floor(val_split * len(vols) + 0.5)))) if len(vols) > 1 else 0
        val += [vols[i] for i in order[:n_val]]
        train += [vols[i] for i in order[n_val:]]
    return train, val


# --- pre-training ---------------------------------------------------------


@dataclass
class StepStats:
    l_res: float
    l_scale: float
    l_adv_d: float
    combined: float
    scale_correct: int
    adv_correct: int
    n: int


def _losses(model: SARNet, batch: Batch, cfg: PretrainConfig, reversal: float):
    out = model(batch.x_hat, reversal=reversal)
    l_res = restoration_loss(out["recon"], batch.x)
    l_scale = scale_loss(out["scale_logits"], batch.y_scale)
    d = out["d"]
    is_ct = batch.y_modality == int(Modality.CT)
    if is_ct.any() and (~is_ct).any():
        l_adv_d, l_adv_e = adversarial_losses(d[is_ct], d[~is_ct])
    else:
        l_adv_d = l_adv_e = d.sum() * 0.0
    combined = combined_objective(l_res, l_scale, l_adv_e, cfg.alpha, cfg.beta)
    surrogate = l_adv_d + cfg.alpha * l_scale + cfg.beta * l_res
    stats = StepStats(
        l_res.item(), l_scale.item(), l_adv_d.item(), combined.item(),
        int((out["scale_logits"].argmax(1) == batch.y_scale).sum()),
        int(((d > 0.5) == is_ct).sum()),
        len(batch),
    )
    return surrogate, stats, {"l_res": l_res, "l_scale": l_scale, "l_adv_d": l_adv_d}


def _check_finite(parts: dict, where: str) -> None:
    bad = {k: float(v.detach()) for k, v in parts.items() if not torch.isfinite(v).all()}
    if bad:
        raise NumericalError(f"non-finite loss at {where}: {bad}")


def make_optimizers(model: SARNet, cfg: PretrainConfig):
    groups = model.param_groups()
    unet = torch.optim.SGD(groups["E"] + groups["D"], lr=cfg.lr_unet, momentum=cfg.momentum)
    sa = torch.optim.SGD(groups["S"], lr=cfg.lr_sa, momentum=cfg.momentum)
    mial = torch.optim.SGD(groups["M"], lr=cfg.lr_mial, momentum=cfg.momentum)
    return unet, sa, mial


def train_step(model: SARNet, batch: Batch, cfg: PretrainConfig, optimizers, where: str = "step") -> StepStats:
    model.train()
    surrogate, stats, parts = _losses(model, batch, cfg, cfg.reversal)
    _check_finite(parts, where)
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    surrogate.backward()
    for opt in optimizers:
        opt.step()
    return stats


@torch.no_grad()
def evaluate_pretrain(model: SARNet, batches, cfg: PretrainConfig) -> dict:
    """Validation losses on the corrupted crops, probe accuracies on the clean ones.

    The scale and modality probes ask what the encoder makes of a sub-volume
    itself, so they see ``x``; the losses are the training objective and see
    ``x_hat``.
    """
    model.eval()
    totals = []
    for b in batches:
        stats = _losses(model, b, cfg, cfg.reversal)[1]
        out = model(b.x)
        is_ct = b.y_modality == int(Modality.CT)
        stats.scale_correct = int((out["scale_logits"].argmax(1) == b.y_scale).sum())
        stats.adv_correct = int(((out["d"] > 0.5) == is_ct).sum())
        totals.append(stats)
    return _reduce(totals)


def _reduce(stats: list[StepStats]) -> dict:
    n = sum(s.n for s in stats)
    if n == 0:
        return {k: float("nan") for k in ("l_res", "l_scale", "l_adv_d", "combined", "scale_acc", "adv_acc")}
    mean = lambda attr: sum(getattr(s, attr) * s.n for s in stats) / n  # noqa: E731
    return {
        "l_res": mean("l_res"),
        "l_scale": mean("l_scale"),
        "l_adv_d": mean("l_adv_d"),
        "combined": mean("combined"),
        "scale_acc": sum(s.scale_correct for s in stats) / n,
        "adv_acc": sum(s.adv_correct for s in stats) / n,
    }


@dataclass
class PretrainResult:
    model: SARNet
    metrics: list[dict]
    best_checkpoint: Path | None
    metrics_csv: Path | None
    best_state: dict | None = None


def write_csv(rows, columns, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def _lrs(optimizers) -> tuple[float, ...]:
    return tuple(opt.param_groups[0]["lr"] for opt in optimizers)


def save_training_state(path, model, optimizers, scheduler, epoch, metrics, best) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": model.state_dict(),
            "optimizers": [o.state_dict() for o in optimizers],
            "scheduler": scheduler.state_dict(),
            "epoch": epoch,
            "metrics": metrics,
            "best": best,
        },
        path,
    )
    return path


def pretrain(cfg: PretrainConfig, corpus, out_dir=None, resume_from=None, stop_after: int | None = None) -> PretrainResult:
    """Joint restoration / scale / adversarial pre-training.

    Each epoch re-crops every training volume under ``cfg.plan``. The
    validation crops are drawn once. ``stop_after`` ends the run early (after
    that many total epochs) and, with ``out_dir``, leaves a resumable
    ``train_state.pt``.
    """
    modalities = {v.modality for v in corpus}
    if len(modalities) < 2:
        raise ConfigError("pre-training corpus needs both CT and MRI volumes (adversarial loss undefined)")
    train_vols, val_vols = split_corpus(corpus, cfg.val_split, cfg.seed)
    if not val_vols:
        raise ConfigError("validation split is empty")
    out_dir = Path(out_dir) if out_dir is not None else None

    model = init_pretrain_model(cfg.arch, cfg.seed)
    optimizers = make_optimizers(model, cfg)
    scheduler = PlateauScheduler(optimizers, cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_min_delta)
    metrics: list[dict] = []
    timing: list[dict] = []
    best = {"val": math.inf, "epoch": -1}
    best_state = None
    start_epoch = 1
    if resume_from is not None:
        try:
            state = torch.load(resume_from, map_location="cpu", weights_only=True)
            model.load_state_dict(state["model"])
            for opt, sd in zip(optimizers, state["optimizers"]):
                opt.load_state_dict(sd)
        except Exception as exc:
            raise CheckpointError(f"{resume_from}: cannot resume ({exc})") from exc
        scheduler.load_state_dict(state["scheduler"])
        metrics = list(state["metrics"])
        best = dict(state["best"])
        start_epoch = int(state["epoch"]) + 1

    val_batches = epoch_batches(val_vols, cfg.plan, cfg.transform, _rng(cfg.seed, _VAL_STREAM), cfg.batch_size)
    last_epoch = cfg.max_epochs if stop_after is None else min(cfg.max_epochs, stop_after)
    for epoch in range(start_epoch, last_epoch + 1):
        t0 = time.perf_counter()
        rng = _rng(cfg.seed, _TRAIN_STREAM, epoch)
        lrs = _lrs(optimizers)
        stats = [
            train_step(model, b, cfg, optimizers, where=f"epoch {epoch} batch {i}")
            for i, b in enumerate(epoch_batches(train_vols, cfg.plan, cfg.transform, rng, cfg.batch_size))
        ]
        train_row = _reduce(stats)
        val_row = evaluate_pretrain(model, val_batches, cfg)
        if not math.isfinite(val_row["combined"]):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}: {val_row}")
        for split, row in (("train", train_row), ("val", val_row)):
            metrics.append({"epoch": epoch, "split": split, **row, "lr_unet": lrs[0], "lr_sa": lrs[1], "lr_mial": lrs[2]})
        if val_row["combined"] < best["val"]:
            best = {"val": val_row["combined"], "epoch": epoch}
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                save_checkpoint(model, out_dir / "pretrain_best.pt", {"seed": cfg.seed, "epoch": epoch})
        scheduler.step(val_row["combined"])
        timing.append({"epoch": epoch, "wall_seconds": time.perf_counter() - t0})
        log.info(
            "epoch %d train l_res=%.4f l_scale=%.4f l_adv_d=%.4f | val combined=%.4f scale_acc=%.3f adv_acc=%.3f",
            epoch, train_row["l_res"], train_row["l_scale"], train_row["l_adv_d"],
            val_row["combined"], val_row["scale_acc"], val_row["adv_acc"],
        )

    csv_path = None
    if out_dir is not None:
        csv_path = write_csv(metrics, PRETRAIN_COLUMNS, out_dir / "pretrain_metrics.csv")
        write_csv(timing, TIMING_COLUMNS, out_dir / "pretrain_timing.csv")
        save_checkpoint(model, out_dir / "pretrain_last.pt", {"seed": cfg.seed, "epoch": last_epoch})
        if last_epoch < cfg.max_epochs:
            save_training_state(out_dir / "train_state.pt", model, optimizers, scheduler, last_epoch, metrics, best)
    best_ckpt = out_dir / "pretrain_best.pt" if out_dir is not None and best["epoch"] > 0 else None
    return PretrainResult(model, metrics, best_ckpt, csv_path, best_state)


# --- fine-tuning ----------------------------------------------------------


def select_fraction(cases, fraction: float, seed: int):
    """Deterministic subset of ``round(fraction * n)`` cases (half rounds up)."""
    n = int(math.floor(fraction * len(cases) + 0.5))
    if n < 1:
        raise DataError(f"data fraction {fraction} of {len(cases)} cases selects no case")
    order = _rng(seed, _SPLIT_STREAM, len(cases)).permutation(len(cases))
    return [cases[i] for i in sorted(order[:n])]


def _random_patch(volume: np.ndarray, labels: np.ndarray, shape, rng):
    vol, lab = _pad_to(volume, shape), _pad_to(labels, shape)
    origin = [int(rng.integers(0, n - p + 1)) for n, p in zip(vol.shape, shape)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, shape))
    return vol[sl], lab[sl]


def _pad_to(a: np.ndarray, shape) -> np.ndarray:
    pads = [(0, max(0, p - n)) for n, p in zip(a.shape, shape)]
    if any(b for _, b in pads):
        return np.pad(a, pads, mode="edge")
    return a


def _window_starts(n: int, p: int, stride: int) -> list[int]:
    if n <= p:
        return [0]
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


@torch.no_grad()
def sliding_window_predict(model: SegNet, volume: np.ndarray, overlap: float = 0.5) -> np.ndarray:
    """Class probabilities (``C x volume shape``) averaged over overlapping windows."""
    model.eval()
    shape = model.arch.input_shape
    orig = volume.shape
    vol = _pad_to(np.asarray(volume, dtype=np.float32), shape)
    strides = [max(1, int(p * (1 - overlap))) for p in shape]
    scores = np.zeros((model.n_classes, *vol.shape), dtype=np.float64)
    counts = np.zeros(vol.shape, dtype=np.float64)
    for x0 in _window_starts(vol.shape[0], shape[0], strides[0]):
        for y0 in _window_starts(vol.shape[1], shape[1], strides[1]):
            for z0 in _window_starts(vol.shape[2], shape[2], strides[2]):
                sl = (slice(x0, x0 + shape[0]), slice(y0, y0 + shape[1]), slice(z0, z0 + shape[2]))
                patch = torch.from_numpy(np.ascontiguousarray(vol[sl]))[None, None]
                scores[(slice(None), *sl)] += model(patch)[0].double().numpy()
                counts[sl] += 1
    scores /= counts
    return scores[(slice(None), *(slice(0, n) for n in orig))]


@dataclass
class FinetuneResult:
    model: SegNet
    metrics: list[dict]
    metrics_csv: Path | None
    n_train_cases: int
    best_epoch: int | None = None


def _val_scores(model, cases, cfg: FinetuneConfig):
    from sar.evaluation import dice_score

    losses, dices = [], []
    for case in cases:
        probs = sliding_window_predict(model, case.volume.data, cfg.overlap)
        losses.append(float(dice_loss(torch.from_numpy(probs), torch.from_numpy(case.labels.astype(np.int64)), cfg.foreground)))
        pred = probs.argmax(0)
        dices.append(np.mean([dice_score(pred == c, case.labels == c) for c in cfg.foreground]))
    return float(np.mean(losses)), float(np.mean(dices))


def finetune(cfg: FinetuneConfig, train_cases, val_cases=None, checkpoint=None, out_dir=None) -> FinetuneResult:
    """Adam + dice-loss fine-tuning on random patches; every layer is trainable.

    ``val_cases`` (whole volumes, sliding-window inference) drive the plateau
    scheduler; without them the training dice loss does.
    """
    for case in list(train_cases) + list(val_cases or []):
        if case.labels.shape != case.volume.shape:
            raise DataError(f"{case.volume.source_id}: labels {case.labels.shape} do not match volume {case.volume.shape}")
        if case.labels.max(initial=0) >= cfg.n_classes:
            raise DataError(f"{case.volume.source_id}: label {int(case.labels.max())} >= n_classes {cfg.n_classes}")
    if checkpoint is None and cfg.init != "scratch":
        checkpoint = cfg.init
    cases = select_fraction(list(train_cases), cfg.data_fraction, cfg.seed)
    model = init_seg_model(cfg.arch, cfg.n_classes, seed=cfg.seed + 1, checkpoint=checkpoint)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    scheduler = PlateauScheduler([opt], cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_min_delta)
    shape = cfg.arch.input_shape
    metrics = []
    best = (math.inf, None)
    for epoch in range(1, cfg.max_epochs + 1):
        rng = _rng(cfg.seed, _TRAIN_STREAM, epoch)
        lr = opt.param_groups[0]["lr"]
        patches = [
            _random_patch(c.volume.data, c.labels, shape, rng) for c in cases for _ in range(cfg.patches_per_case)
        ]
        order = rng.permutation(len(patches))
        model.train()
        losses, sizes = [], []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = torch.from_numpy(np.stack([patches[j][0] for j in idx]).astype(np.float32)).unsqueeze(1)
            y = torch.from_numpy(np.stack([patches[j][1] for j in idx]).astype(np.int64))
            loss = dice_loss(model(x), y, cfg.foreground)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite dice loss at epoch {epoch} batch {i // cfg.batch_size}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        metrics.append({"epoch": epoch, "split": "train", "dice_loss": train_loss, "dice_score": 1 - train_loss, "lr": lr})
        monitor = train_loss
        if val_cases:
            val_loss, val_dice = _val_scores(model, val_cases, cfg)
            metrics.append({"epoch": epoch, "split": "val", "dice_loss": val_loss, "dice_score": val_dice, "lr": lr})
            monitor = val_loss
        if monitor < best[0]:
            best = (monitor, epoch)
        scheduler.step(monitor)
    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        csv_path = write_csv(metrics, FINETUNE_COLUMNS, out_dir / "finetune_metrics.csv")
        save_checkpoint(model, out_dir / "finetune_last.pt", {"seed": cfg.seed, "n_train_cases": len(cases)})
    return FinetuneResult(model, metrics, csv_path, len(cases), best[1])


def epochs_to_reach(metrics, threshold: float, split: str = "val") -> int | None:
    """First epoch whose ``dice_score`` on ``split`` reaches ``threshold``."""
    for row in metrics:
        if row["split"] == split and row["dice_score"] >= threshold:
            return int(row["epoch"])
    return None

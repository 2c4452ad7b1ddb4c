"""Dice, size-stratified reports, annotation-fraction and scale-ablation studies."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import tempfile
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import special

from sar.errors import DataError

STUDY_FRACTIONS = (Fraction(1, 2), Fraction(1, 5), Fraction(1, 10), Fraction(1, 20), Fraction(1, 50))
BUCKETS = ("S", "M", "L")
_TTEST_EPS = 1e-300


def dice_score(pred, gt) -> float:
    """Hard dice; 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


@dataclass
class CaseResult:
    case_id: str
    dice: dict[int, float]
    tumor_voxels: int
    size_bucket: str | None = None


@dataclass
class Stratification:
    buckets: dict[str, str]
    degenerate: bool = False


def stratify_by_size(results) -> Stratification:
    """Tercile buckets by tumor size; remainders go to S first, then M.

    Ties are ordered by ``case_id``. If every case has the same size the
    split is meaningless and all cases land in M with ``degenerate`` set.
    """
    results = list(results)
    if len(results) < 3:
        raise ValueError(f"need >= 3 cases to stratify, got {len(results)}")
    if len({r.tumor_voxels for r in results}) == 1:
        return Stratification({r.case_id: "M" for r in results}, degenerate=True)
    ordered = sorted(results, key=lambda r: (r.tumor_voxels, r.case_id))
    n = len(ordered)
    base, rem = divmod(n, 3)
    n_s = base + (rem >= 1)
    n_m = base + (rem >= 2)
    buckets = {}
    for i, r in enumerate(ordered):
        buckets[r.case_id] = "S" if i < n_s else ("M" if i < n_s + n_m else "L")
    return Stratification(buckets)


def _mean_std(values):
    values = [float(v) for v in values]
    if not values:
        return None, None
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return mean, std


@dataclass
class StudyReport:
    buckets: dict[str, tuple[float | None, float | None]]
    overall: tuple[float | None, float | None]
    n_trials: int
    fingerprint: str
    rows: list[dict] = field(default_factory=list)


def config_fingerprint(*configs) -> str:
    def plain(c):
        if hasattr(c, "__dataclass_fields__"):
            return {k: plain(v) for k, v in asdict(c).items()}
        if isinstance(c, (list, tuple)):
            return [plain(v) for v in c]
        if isinstance(c, dict):
            return {str(k): plain(v) for k, v in c.items()}
        if isinstance(c, (int, float, str, bool)) or c is None:
            return c
        return str(c)

    blob = json.dumps([plain(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate_cases(model, cases, tumor_class: int | None = None, overlap: float = 0.5) -> list[CaseResult]:
    """Sliding-window predictions for each case, scored per foreground class."""
    from sar.trainer import sliding_window_predict

    n_classes = model.n_classes
    tumor_class = n_classes - 1 if tumor_class is None else tumor_class
    out = []
    for case in cases:
        pred = sliding_window_predict(model, case.volume.data, overlap).argmax(0)
        dice = {c: dice_score(pred == c, case.labels == c) for c in range(1, n_classes)}
        out.append(CaseResult(case.volume.source_id, dice, int((case.labels == tumor_class).sum())))
    return out


def size_stratified_report(trials: list[list[CaseResult]], tumor_class: int, fingerprint: str = "") -> StudyReport:
    """Per-bucket and overall tumor dice, mean +- std across trials.

    Buckets come from the first trial's case sizes (the test split is fixed).
    """
    if not trials or not trials[0]:
        raise DataError("no case results to report")
    strat = stratify_by_size(trials[0])
    per_bucket = {b: [] for b in BUCKETS}
    overall = []
    rows = []
    for t, results in enumerate(trials):
        for b in BUCKETS:
            vals = [r.dice[tumor_class] for r in results if strat.buckets[r.case_id] == b]
            if vals:
                per_bucket[b].append(float(np.mean(vals)))
        overall.append(float(np.mean([r.dice[tumor_class] for r in results])))
        for r in results:
            rows.append({"trial": t, "case_id": r.case_id, "tumor_voxels": r.tumor_voxels,
                         "size_bucket": strat.buckets[r.case_id], "dice": r.dice[tumor_class]})
    return StudyReport(
        buckets={b: _mean_std(v) for b, v in per_bucket.items()},
        overall=_mean_std(overall),
        n_trials=len(trials),
        fingerprint=fingerprint,
        rows=rows,
    )


def two_sample_ttest(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value.

    The standard error is floored at a tiny epsilon, so two constant samples
    with different means give a huge |t| and p -> 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs >= 2 values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 <= 0:
        if diff == 0:
            return 0.0, 1.0
        t = diff / math.sqrt(_TTEST_EPS)
        return float(t), 0.0
    t = diff / math.sqrt(se2)
    dof = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    # Two-sided tail of Student's t via the regularized incomplete beta.
    p = special.betainc(dof / 2, 0.5, dof / (dof + t * t))
    return float(t), float(p)


# --- studies --------------------------------------------------------------


def _fraction_label(f) -> str:
    fr = Fraction(f).limit_denominator(1000)
    return f"{fr.numerator}/{fr.denominator}"


def annotation_fraction_study(
    train_cases,
    test_cases,
    base,
    inits: dict,
    fractions=STUDY_FRACTIONS,
    n_trials: int = 5,
):
    """Fine-tune each ``(fraction, init)`` pair ``n_trials`` times and score the test split.

    ``inits`` maps a row name (e.g. ``"scratch"``, ``"sar"``) to a checkpoint
    path or ``None``. Returns ``(rows, header, runs)``; ``header`` lists the
    fractions as ``"1/2"``-style strings in the order given.
    """
    from sar.trainer import finetune, select_fraction

    for f in fractions:
        select_fraction(train_cases, float(f), 0)
    tumor_class = base.n_classes - 1
    rows, runs = [], []
    for f in fractions:
        for name, ckpt in inits.items():
            scores = []
            for trial in range(n_trials):
                cfg = replace(base, data_fraction=float(f), seed=base.seed + trial)
                res = finetune(cfg, train_cases, test_cases, checkpoint=ckpt)
                results = evaluate_cases(res.model, test_cases, tumor_class, base.overlap)
                score = float(np.mean([np.mean(list(r.dice.values())) for r in results]))
                scores.append(score)
                runs.append({"fraction": _fraction_label(f), "init": name, "trial": trial,
                             "dice": score, "metrics": res.metrics, "n_train_cases": res.n_train_cases})
            mean, std = _mean_std(scores)
            rows.append({"fraction": _fraction_label(f), "init": name, "dice_mean": mean,
                         "dice_std": std, "n_trials": n_trials})
    header = [_fraction_label(f) for f in fractions]
    return rows, header, runs


def fraction_table(rows, header) -> list[list[str]]:
    """Pivot study rows into a table: one line per init, one column per fraction."""
    inits = list(dict.fromkeys(r["init"] for r in rows))
    table = [["init", *header]]
    for name in inits:
        cells = {r["fraction"]: r["dice_mean"] for r in rows if r["init"] == name}
        table.append([name, *(f"{100 * cells[h]:.2f}" for h in header)])
    return table


ABLATION_SCALES = (Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), "multi")


def single_scale_ablation(corpus, train_cases, test_cases, pretrain_cfg, finetune_cfg, scales=ABLATION_SCALES, out_dir=None):
    """Pre-train once per scale setting, fine-tune identically, report tumor dice by size bucket."""
    from sar.sampler import SamplingPlan
    from sar.trainer import finetune, pretrain

    scales = list(scales)
    if "multi" not in scales:
        scales.append("multi")
    per_volume = pretrain_cfg.plan.per_volume
    tumor_class = finetune_cfg.n_classes - 1
    rows = []
    for scale in scales:
        if scale == "multi":
            small = per_volume // 2
            plan = SamplingPlan(small, (per_volume - small) // 2, per_volume - small - (per_volume - small) // 2,
                                target_shape=pretrain_cfg.plan.target_shape)
            label = "multi"
        else:
            plan = SamplingPlan.single_scale(scale, per_volume, target_shape=pretrain_cfg.plan.target_shape)
            label = _fraction_label(scale)
        run_dir = Path(out_dir) if out_dir is not None else Path(tempfile.mkdtemp(prefix="sar_ablation_"))
        run_dir = run_dir / f"scale_{label.replace('/', '_')}"
        pre = pretrain(replace(pretrain_cfg, plan=plan), corpus, out_dir=run_dir)
        ckpt = pre.best_checkpoint or run_dir / "pretrain_last.pt"
        ft = finetune(finetune_cfg, train_cases, test_cases, checkpoint=ckpt)
        report = size_stratified_report([evaluate_cases(ft.model, test_cases, tumor_class, finetune_cfg.overlap)], tumor_class)
        rows.append({
            "scale": label, "plan": (plan.n_small, plan.n_medium, plan.n_large),
            **{f"tumor_{b}": report.buckets[b][0] for b in BUCKETS},
            "tumor_all": report.overall[0],
        })
    return rows


# --- outputs --------------------------------------------------------------


def write_table(rows, path, fingerprint: dict | None = None) -> Path:
    """CSV table plus a JSON sidecar (``<path>.json``) with config fingerprints."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    columns = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    Path(str(path) + ".json").write_text(json.dumps(fingerprint or {}, indent=2, sort_keys=True, default=str))
    return path


def read_metrics_csv(path) -> list[dict]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: empty metrics CSV")
    required = {"epoch", "split"}
    if not required <= set(rows[0]):
        raise DataError(f"{path}: malformed metrics CSV, missing {sorted(required - set(rows[0]))}")
    return rows


def export_curves(csv_paths, out_path, labels=None, column: str = "dice_loss", split: str = "train") -> tuple[Path, Path]:
    """Overlay one curve per metrics CSV and write the merged CSV next to the figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_paths = [Path(p) for p in csv_paths]
    labels = list(labels) if labels is not None else [p.parent.name or p.stem for p in csv_paths]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    merged = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for path, label in zip(csv_paths, labels):
        rows = read_metrics_csv(path)
        if column not in rows[0]:
            raise DataError(f"{path}: malformed metrics CSV, no column {column!r}")
        merged += [{"series": label, **r} for r in rows]
        sel = [r for r in rows if r["split"] == split]
        ax.plot([int(r["epoch"]) for r in sel], [float(r[column]) for r in sel], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(column.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    merged_path = out_path.with_suffix(".csv")
    columns = list(dict.fromkeys(k for r in merged for k in r))
    with merged_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(merged)
    return out_path, merged_path

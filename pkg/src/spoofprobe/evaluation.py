"""Metrics and experiment drivers.

Covers attack success rate, accuracy, the normalised head shift, per-head
attack sweeps, transferability matrices and report emission (JSON, CSV, PNG).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .attacks import AttackSpec, run_attack
from .datasets import Dataset
from .errors import DimensionError, EvaluationError
from .losses import HEADS, HEAD_NAMES
from .models import predict_binary

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "v1"
ASR_CONVENTIONS = ("correct", "all")

ASR_COLUMNS = ("attack", "epsilon", "head", "use_sfa", "asr", "accuracy")
ACCURACY_COLUMNS = ("backbone", "attacked_part", "use_sfa", "accuracy")
HEAD_SHIFT_COLUMNS = ("backbone", "attacked_head", "head", "use_sfa", "shift")
TRANSFER_COLUMNS = ("source", "target", "use_sfa", "accuracy")
TABLE_COLUMNS = {
    "asr_table": ASR_COLUMNS,
    "accuracy_table": ACCURACY_COLUMNS,
    "head_shift_table": HEAD_SHIFT_COLUMNS,
    "transfer_matrix": TRANSFER_COLUMNS,
}


# ---------------------------------------------------------------------------
# metrics


def _as_long(a) -> torch.Tensor:
    return (a if isinstance(a, torch.Tensor) else torch.from_numpy(np.array(a))).long().flatten()


def attack_success_rate(pred_before, pred_after, y, convention: str = "correct") -> float:
    """Share of samples flipped from correct to wrong.

    With ``convention="correct"`` the denominator is the originally correct
    samples; ``"all"`` divides by every sample instead.
    """
    if convention not in ASR_CONVENTIONS:
        raise EvaluationError(f"unknown ASR convention {convention!r}; expected one of {ASR_CONVENTIONS}")
    pb, pa, y = _as_long(pred_before), _as_long(pred_after), _as_long(y)
    if not (len(pb) == len(pa) == len(y)):
        raise DimensionError(f"length mismatch: before {len(pb)}, after {len(pa)}, labels {len(y)}")
    correct = pb == y
    flips = int((correct & (pa != y)).sum())
    denom = int(correct.sum()) if convention == "correct" else len(y)
    if denom == 0:
        raise EvaluationError("ASR undefined: no sample was originally classified correctly")
    return flips / denom


def accuracy_from_predictions(pred, y) -> float:
    pred, y = _as_long(pred), _as_long(y)
    if len(pred) != len(y):
        raise DimensionError(f"{len(pred)} predictions vs {len(y)} labels")
    if len(y) == 0:
        raise EvaluationError("accuracy of an empty set is undefined")
    return int((pred == y).sum()) / len(y)


def accuracy_identity(pred_before, pred_after, y) -> Dict[str, int]:
    """Check ``correct_after = correct_before - flips + newly_correct`` exactly."""
    pb, pa, y = _as_long(pred_before), _as_long(pred_after), _as_long(y)
    counts = {
        "n": len(y),
        "correct_before": int((pb == y).sum()),
        "flips": int(((pb == y) & (pa != y)).sum()),
        "newly_correct": int(((pb != y) & (pa == y)).sum()),
        "correct_after": int((pa == y).sum()),
    }
    if counts["correct_after"] != counts["correct_before"] - counts["flips"] + counts["newly_correct"]:
        raise EvaluationError(f"accuracy identity violated: {counts}")
    return counts


def head_shift_per_sample(out_clean, out_adv, head: str) -> torch.Tensor:
    """``MSE(clean, adv) / max(||clean||_2, 1e-8)`` for each sample."""
    a, b = out_clean.head(head), out_adv.head(head)
    if a.shape != b.shape:
        raise DimensionError(f"head {head!r} outputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = a.detach().flatten(1).double(), b.detach().flatten(1).double()
    mse = ((a - b) ** 2).mean(dim=1)
    return mse / a.norm(dim=1).clamp(min=1e-8)


def head_shift(out_clean, out_adv, head: str) -> float:
    per = head_shift_per_sample(out_clean, out_adv, head)
    if per.numel() == 0:
        raise EvaluationError("head shift of an empty batch is undefined")
    return float(per.mean())


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    """Result tables as lists of rows; column order per table is fixed by TABLE_COLUMNS."""

    asr_table: List[dict] = field(default_factory=list)
    accuracy_table: List[dict] = field(default_factory=list)
    head_shift_table: List[dict] = field(default_factory=list)
    transfer_matrix: List[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def validate(self) -> "EvalReport":
        for name, cols in TABLE_COLUMNS.items():
            for row in getattr(self, name):
                if tuple(row) != cols:
                    raise EvaluationError(f"{name} row has columns {tuple(row)}, expected {cols}")
        for row in self.asr_table:
            _check_unit(row["asr"], "asr")
        for row in self.asr_table + self.accuracy_table + self.transfer_matrix:
            _check_unit(row["accuracy"], "accuracy")
        for row in self.head_shift_table:
            if not row["shift"] >= 0:
                raise EvaluationError(f"head shift must be nonnegative, got {row['shift']}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = REPORT_SCHEMA
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise EvaluationError(f"unsupported report schema {d.get('schema')!r}")
        tables = {name: [{c: row[c] for c in cols} for row in d.get(name, [])]
                  for name, cols in TABLE_COLUMNS.items()}
        return cls(meta=dict(d.get("meta", {})), **tables).validate()

    def lookup_asr(self, attack: str, epsilon: float, head: str, use_sfa: bool) -> float:
        for row in self.asr_table:
            if (row["attack"], row["head"], row["use_sfa"]) == (attack, head, use_sfa) and \
                    abs(row["epsilon"] - epsilon) < 1e-12:
                return row["asr"]
        raise KeyError((attack, epsilon, head, use_sfa))


def _check_unit(v: float, what: str) -> None:
    if not 0.0 <= v <= 1.0:
        raise EvaluationError(f"{what} must lie in [0, 1], got {v}")


# ---------------------------------------------------------------------------
# drivers


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


@dataclass
class SweepOutcome:
    """Predictions and outputs of one attack over a whole dataset."""

    spec: AttackSpec
    pred_before: torch.Tensor
    pred_after: torch.Tensor
    x_adv: Optional[torch.Tensor]
    out_clean: Optional[object] = None
    out_adv: Optional[object] = None


def attack_dataset(model, dataset: Dataset, spec: AttackSpec, gens=None, batch_size: int = 250,
                   keep_adv: bool = False, keep_outputs: bool = False) -> SweepOutcome:
    """Run one attack over the dataset in fixed-order batches."""
    from .models import MultitaskOutput

    if len(dataset) == 0:
        raise EvaluationError("cannot attack an empty dataset")
    model.eval()
    device = next(model.parameters()).device
    before, after, advs, clean_outs, adv_outs = [], [], [], [], []
    for sl in _chunks(len(dataset), batch_size):
        batch = dataset.batch(range(sl.start, sl.stop), device=device)
        res = run_attack(spec, model, batch.pixels, batch, batch, gens)
        before.append(res.pred_before.cpu())
        after.append(res.pred_after.cpu())
        if keep_adv:
            advs.append(res.x_adv.cpu())
        if keep_outputs:
            with torch.no_grad():
                clean_outs.append(model(batch.pixels).detach())
                adv_outs.append(model(res.x_adv).detach())
    return SweepOutcome(
        spec, torch.cat(before), torch.cat(after), torch.cat(advs) if keep_adv else None,
        MultitaskOutput.cat(clean_outs) if keep_outputs else None,
        MultitaskOutput.cat(adv_outs) if keep_outputs else None,
    )


def per_head_sweep(model, gens, dataset: Dataset, specs: Sequence[AttackSpec], backbone: str = "model",
                   convention: str = "correct", batch_size: int = 250) -> Tuple[List[dict], List[dict]]:
    """Binary-classification ASR and accuracy for each spec, in the given order."""
    asr_rows, acc_rows = [], []
    y = torch.from_numpy(np.array(dataset.y)).long()
    for spec in specs:
        out = attack_dataset(model, dataset, spec, gens, batch_size)
        accuracy_identity(out.pred_before, out.pred_after, y)
        acc = accuracy_from_predictions(out.pred_after, y)
        asr_rows.append(dict(zip(ASR_COLUMNS, (
            spec.method, float(spec.epsilon), spec.head, bool(spec.use_sfa),
            attack_success_rate(out.pred_before, out.pred_after, y, convention), acc))))
        acc_rows.append(dict(zip(ACCURACY_COLUMNS, (backbone, HEAD_NAMES[spec.head], bool(spec.use_sfa), acc))))
        logger.info("%s eps=%.3f head=%s sfa=%s asr=%.4f", spec.method, spec.epsilon, spec.head,
                    spec.use_sfa, asr_rows[-1]["asr"])
    return asr_rows, acc_rows


def head_shift_sweep(model, gens, dataset: Dataset, spec: AttackSpec, backbone: str = "model",
                     batch_size: int = 250) -> List[dict]:
    """Normalised shift of every head's output under one attack."""
    out = attack_dataset(model, dataset, spec, gens, batch_size, keep_outputs=True)
    return [dict(zip(HEAD_SHIFT_COLUMNS, (backbone, spec.head, h, bool(spec.use_sfa),
                                          head_shift(out.out_clean, out.out_adv, h))))
            for h in HEADS]


def transfer_matrix(models: Sequence[Tuple[str, torch.nn.Module]], gens_per_model: Mapping[str, object],
                    dataset: Dataset, spec: AttackSpec, batch_size: int = 250) -> List[dict]:
    """Accuracy of each target model on examples crafted against each source model.

    Rows are emitted source-major, then target; the diagonal is the white-box case.
    """
    if not models:
        raise EvaluationError("transfer matrix needs at least one model")
    y = torch.from_numpy(np.array(dataset.y)).long()
    rows = []
    for src_name, src in models:
        gens = gens_per_model.get(src_name) if spec.use_sfa else None
        adv = attack_dataset(src, dataset, spec, gens, batch_size, keep_adv=True).x_adv
        for tgt_name, tgt in models:
            tgt.eval()
            preds = torch.cat([predict_binary(tgt, adv[sl])[0].cpu() for sl in _chunks(len(adv), batch_size)])
            rows.append(dict(zip(TRANSFER_COLUMNS, (src_name, tgt_name, bool(spec.use_sfa),
                                                    accuracy_from_predictions(preds, y)))))
    return rows


def mean_transfer_accuracy(rows: Sequence[dict], use_sfa: bool, off_diagonal: bool = True) -> float:
    vals = [r["accuracy"] for r in rows
            if r["use_sfa"] == use_sfa and (not off_diagonal or r["source"] != r["target"])]
    if not vals:
        raise EvaluationError("no matching transfer entries")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# emission


def report_json(report: EvalReport, exclude_timestamp: bool = False) -> str:
    d = report.validate().to_dict()
    if exclude_timestamp:
        d["meta"] = {k: v for k, v in d["meta"].items() if k != "timestamp"}
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def _plot_bars(rows, label_cols, value_col, title, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(rows) + 2), 3.6))
    labels = ["/".join(str(r[c]) for c in label_cols) for r in rows]
    ax.bar(range(len(rows)), [r[value_col] for r in rows], color="#4C72B0")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=70, ha="right", fontsize=6)
    ax.set_ylabel(value_col)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_transfer(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(dict.fromkeys([r["source"] for r in rows] + [r["target"] for r in rows]))
    flags = sorted({r["use_sfa"] for r in rows})
    fig, axes = plt.subplots(1, len(flags), figsize=(3.4 * len(flags), 3.2), squeeze=False)
    for ax, flag in zip(axes[0], flags):
        grid = np.full((len(names), len(names)), np.nan)
        for r in rows:
            if r["use_sfa"] == flag:
                grid[names.index(r["source"]), names.index(r["target"])] = r["accuracy"]
        ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names, fontsize=7)
        ax.set_title(f"use_sfa={flag}", fontsize=9)
        for i in range(len(names)):
            for j in range(len(names)):
                if not np.isnan(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: EvalReport, out_dir) -> Dict[str, Path]:
    """Write report.json, one CSV per table and one PNG per non-empty table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {"report.json": out_dir / "report.json"}
    written["report.json"].write_text(report_json(report))
    for name, cols in TABLE_COLUMNS.items():
        rows = getattr(report, name)
        path = out_dir / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in rows:
                w.writerow([row[c] for c in cols])
        written[path.name] = path
        if not rows:
            continue
        png = out_dir / f"{name}.png"
        if name == "transfer_matrix":
            _plot_transfer(rows, png)
        elif name == "asr_table":
            _plot_bars(rows, ("attack", "epsilon", "head", "use_sfa"), "asr", "attack success rate", png)
        elif name == "accuracy_table":
            _plot_bars(rows, ("backbone", "attacked_part", "use_sfa"), "accuracy", "accuracy under attack", png)
        else:
            _plot_bars(rows, ("backbone", "attacked_head", "head", "use_sfa"), "shift", "normalised head shift", png)
        written[png.name] = png
    return written


def with_sfa(specs: Sequence[AttackSpec]) -> List[AttackSpec]:
    """Each spec followed by its SFA-enabled twin."""
    out = []
    for s in specs:
        out += [replace(s, use_sfa=False), replace(s, use_sfa=True)]
    return out

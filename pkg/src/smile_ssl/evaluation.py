"""Zero-shot classification, cross-validation, cross-domain and ablation runs."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DataConfig, Dataset, PromptBank, generate_synthetic, kfold_subject_split
from .encoders import Model
from .errors import ConfigurationError, EmptyInputError
from .tensor import no_grad
from .train import TrainConfig, run_training

log = logging.getLogger(__name__)

VARIANTS = {
    "full": [],
    "no_red_min": ["red_min"],
    "no_vl_align": ["vl_align"],
    "no_mv_bt": ["mv_bt"],
}


@dataclass
class Metrics:
    """Classification metrics derived from a confusion matrix (rows = true class)."""

    confusion: np.ndarray
    class_names: list[str]
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)
    f1: np.ndarray = field(init=False)
    accuracy: float = field(init=False)
    macro_f1: float = field(init=False)
    n: int = field(init=False)

    def __post_init__(self):
        conf = np.asarray(self.confusion, dtype=np.int64)
        self.confusion = conf
        tp = np.diag(conf).astype(np.float64)
        pred = conf.sum(axis=0).astype(np.float64)
        true = conf.sum(axis=1).astype(np.float64)
        self.precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
        self.recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
        denom = self.precision + self.recall
        self.f1 = np.divide(2 * self.precision * self.recall, denom, out=np.zeros_like(tp), where=denom > 0)
        self.n = int(conf.sum())
        self.accuracy = float(tp.sum() / self.n) if self.n else 0.0
        self.macro_f1 = float(self.f1.mean()) if len(self.f1) else 0.0

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_names: Sequence[str]) -> "Metrics":
        c = len(class_names)
        conf = np.zeros((c, c), dtype=np.int64)
        np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(conf, list(class_names))

    def as_row(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy, "macro_f1": self.macro_f1}


# ----------------------------------------------------------------- zero-shot
def class_centroids(model: Model, bank: PromptBank, use_max: bool = False) -> list[np.ndarray]:
    """Per class: the normalized mean template embedding, or every template
    embedding when ``use_max`` (max-over-templates matching)."""
    embs = model.class_text_embeddings(bank)
    if use_max:
        return embs
    out = []
    for e in embs:
        c = e.mean(axis=0)
        out.append((c / np.linalg.norm(c))[None, :])
    return out


def _similarities(fused: np.ndarray, centroids: list[np.ndarray]) -> np.ndarray:
    norms = np.linalg.norm(fused, axis=1, keepdims=True)
    z = fused / np.where(norms > 0, norms, 1.0)
    return np.stack([(z @ c.T).max(axis=1) for c in centroids], axis=1)


def _argmax_lowest(sims: np.ndarray) -> np.ndarray:
    preds = sims.argmax(axis=1)
    ties = (sims == sims.max(axis=1, keepdims=True)).sum(axis=1) > 1
    if ties.any():
        log.info("zero-shot ties on %d sample(s); picked the lowest class id", int(ties.sum()))
    return preds


def classify_batch(views: np.ndarray, model: Model, bank: PromptBank | None = None,
                   classes: Sequence[int] | None = None, use_max: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Zero-shot predictions for views[B, N, dim]; ``classes`` restricts the candidates."""
    bank = bank or model.bank
    if bank.n_classes == 0:
        raise ConfigurationError("prompt bank is empty")
    cents = class_centroids(model, bank, use_max)
    cand = list(range(bank.n_classes)) if classes is None else [int(c) for c in classes]
    if not cand:
        raise ConfigurationError("no candidate classes")
    with no_grad():
        fused, _ = model.embed(np.asarray(views, dtype=np.float64))
    sims = _similarities(fused.data, [cents[c] for c in cand])
    return np.asarray(cand)[_argmax_lowest(sims)], sims


def zero_shot_classify(sample_views: np.ndarray, model: Model, bank: PromptBank | None = None,
                       use_max: bool = False) -> tuple[int, np.ndarray]:
    """Fuse one sample's views and return (best class id, similarity per class)."""
    preds, sims = classify_batch(np.asarray(sample_views)[None], model, bank, use_max=use_max)
    return int(preds[0]), sims[0]


def evaluate_fold(model: Model | None, dataset: Dataset, test_indices, bank: PromptBank | None = None,
                  classes: Sequence[int] | None = None,
                  predictor: Callable[[np.ndarray], np.ndarray] | None = None,
                  use_max: bool = False) -> Metrics:
    """Zero-shot metrics over ``test_indices``.

    ``predictor`` (views -> class ids) replaces the model, for test doubles.
    With ``classes`` the confusion matrix covers only those classes, in order.
    """
    idx = np.asarray(test_indices)
    if idx.size == 0:
        raise EmptyInputError("evaluate_fold needs at least one test sample")
    bank = bank or dataset.bank
    views = dataset.views[idx]
    if predictor is not None:
        preds = np.asarray(predictor(views))
    else:
        preds, _ = classify_batch(views, model, bank, classes, use_max)
    truth = dataset.class_ids[idx]
    if classes is None:
        return Metrics.from_predictions(truth, preds, bank.class_names)
    remap = {c: i for i, c in enumerate(classes)}
    return Metrics.from_predictions([remap[int(t)] for t in truth], [remap[int(p)] for p in preds],
                                    [bank.class_names[c] for c in classes])


# ----------------------------------------------------------- cross-validation
def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class CVResult:
    folds: list[Metrics]
    test_subjects: list[list[int]]
    # per fold: worst |sum(w) - 1| over every training batch, frozen params untouched
    max_simplex_error: list[float] = field(default_factory=list)
    frozen_unchanged: list[bool] = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([m.accuracy for m in self.folds])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def sd_accuracy(self) -> float:
        return float(self.accuracies.std())

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean([m.macro_f1 for m in self.folds]))

    def pooled(self) -> Metrics:
        return Metrics(sum(m.confusion for m in self.folds), self.folds[0].class_names)


def _train_and_eval_fold(args) -> tuple[Metrics, float, bool]:
    dataset, train_idx, test_idx, cfg, use_max = args
    result = run_training(dataset, train_idx, cfg)
    metrics = evaluate_fold(result.model, dataset, test_idx, use_max=use_max)
    return metrics, result.max_simplex_error, result.frozen_unchanged


def _map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_cross_validation(dataset: Dataset, k: int, cfg: TrainConfig, jobs: int = 1,
                         use_max: bool = False) -> CVResult:
    """Subject-independent k-fold CV; each fold trains from scratch with its own seed."""
    folds = kfold_subject_split(dataset, k, cfg.seed)
    tasks = [(dataset, tr, te, replace(cfg, seed=fold_seed(cfg.seed, i)), use_max)
             for i, (tr, te) in enumerate(folds)]
    runs = _map(_train_and_eval_fold, tasks, jobs)
    subjects = [sorted(int(s) for s in np.unique(dataset.subject_ids[te])) for _, te in folds]
    return CVResult([r[0] for r in runs], subjects, [r[1] for r in runs], [r[2] for r in runs])


# --------------------------------------------------------------- cross-domain
@dataclass
class CrossDomainResult:
    metrics: Metrics
    class_subset: list[int]
    in_domain: Metrics | None = None

    @property
    def degenerate(self) -> bool:
        # a single candidate class makes accuracy trivially 1
        return len(self.class_subset) == 1


def cross_domain_datasets(data: DataConfig, domain_shift: float, noise_sd: float,
                          seed_offset: int = 1000) -> tuple[Dataset, Dataset, Dataset]:
    """Source dataset, shifted target dataset and an unshifted held-out dataset.

    Target and held-out share new subjects but keep the source class anchors
    and view transforms, so only the sensor domain differs between them.
    """
    source = generate_synthetic(data)
    anchors = data.anchor_seed if data.anchor_seed is not None else data.seed
    views = data.view_seed if data.view_seed is not None else data.seed
    held = replace(data, seed=data.seed + seed_offset, anchor_seed=anchors, view_seed=views)
    in_domain = generate_synthetic(held)
    target = generate_synthetic(replace(held, domain_shift=domain_shift, noise_sd=noise_sd))
    return source, target, in_domain


def run_cross_domain(train_dataset: Dataset, test_dataset: Dataset, class_subset: Sequence[int],
                     cfg: TrainConfig, in_domain_dataset: Dataset | None = None,
                     use_max: bool = False) -> CrossDomainResult:
    """Train on all of ``train_dataset``; zero-shot evaluate on ``test_dataset``
    restricted to ``class_subset`` (and on ``in_domain_dataset`` for reference)."""
    subset = [int(c) for c in class_subset]
    if not subset:
        raise ConfigurationError("class_subset must be non-empty")
    bank = train_dataset.bank
    if not set(test_dataset.bank.class_names) <= set(bank.class_names):
        raise ConfigurationError("test dataset classes are not covered by the prompt bank")
    if any(not 0 <= c < bank.n_classes for c in subset):
        raise ConfigurationError(f"class_subset {subset} outside 0..{bank.n_classes - 1}")
    if len(subset) == 1:
        log.warning("cross-domain class subset has one class; accuracy is trivially 1")
    model = run_training(train_dataset, None, cfg).model

    def restricted(ds: Dataset) -> Metrics:
        idx = np.flatnonzero(np.isin(ds.class_ids, subset))
        return evaluate_fold(model, ds, idx, bank, classes=subset, use_max=use_max)

    in_domain = restricted(in_domain_dataset) if in_domain_dataset is not None else None
    return CrossDomainResult(restricted(test_dataset), subset, in_domain)


# ------------------------------------------------------------------- ablation
@dataclass
class AblationResult:
    accuracy: dict[str, float]
    cv: dict[str, CVResult] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.accuracy)

    def improvement_matrix(self) -> np.ndarray:
        """M[u][v] = acc(u) - acc(v)."""
        acc = np.array([self.accuracy[n] for n in self.names])
        return acc[:, None] - acc[None, :]


def run_ablation(dataset: Dataset, k: int, cfg: TrainConfig, jobs: int = 1,
                 use_max: bool = False) -> AblationResult:
    """Cross-validate the full objective and each single-component removal."""
    if cfg.disabled_components:
        raise ConfigurationError("ablation reference must have every loss component enabled")
    eff = cfg.effective_loss()
    if min(eff.alpha, eff.beta, eff.gamma) <= 0:
        raise ConfigurationError("ablation reference needs alpha, beta and gamma > 0")
    cv = {name: run_cross_validation(dataset, k, replace(cfg, disabled_components=list(dis)), jobs,
                                         use_max)
          for name, dis in VARIANTS.items()}
    return AblationResult({n: r.mean_accuracy for n, r in cv.items()}, cv)


# -------------------------------------------------------------------- reports
def _fmt(x: float) -> str:
    return repr(float(x))


def fold_metrics_csv(cv: CVResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = cv.folds[0].class_names
    w.writerow(["fold", "n", "accuracy", "macro_f1"] + [f"f1_{n}" for n in names] + ["test_subjects"])
    for i, (m, subs) in enumerate(zip(cv.folds, cv.test_subjects)):
        w.writerow([i, m.n, _fmt(m.accuracy), _fmt(m.macro_f1)] + [_fmt(f) for f in m.f1]
                   + [" ".join(map(str, subs))])
    w.writerow(["mean", sum(m.n for m in cv.folds), _fmt(cv.mean_accuracy), _fmt(cv.mean_macro_f1)]
               + [_fmt(np.mean([m.f1[j] for m in cv.folds])) for j in range(len(names))] + [""])
    w.writerow(["sd", "", _fmt(cv.sd_accuracy), "", *([""] * len(names)), ""])
    return buf.getvalue()


def metrics_csv(m: Metrics, label: str = "eval") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "class", "precision", "recall", "f1", "support"])
    support = m.confusion.sum(axis=1)
    for j, name in enumerate(m.class_names):
        w.writerow([label, name, _fmt(m.precision[j]), _fmt(m.recall[j]), _fmt(m.f1[j]), int(support[j])])
    w.writerow([label, "macro", "", "", _fmt(m.macro_f1), m.n])
    w.writerow([label, "accuracy", "", "", _fmt(m.accuracy), m.n])
    return buf.getvalue()


def ablation_csv(res: AblationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mean_accuracy", "sd_accuracy"])
    for name in res.names:
        sd = res.cv[name].sd_accuracy if name in res.cv else float("nan")
        w.writerow([name, _fmt(res.accuracy[name]), _fmt(sd)])
    return buf.getvalue()


def improvement_matrix_csv(res: AblationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + res.names)
    for name, row in zip(res.names, res.improvement_matrix()):
        w.writerow([name] + [_fmt(v) for v in row])
    return buf.getvalue()


def bar_chart_svg(values: dict[str, float], title: str) -> str:
    width, height, pad = 480, 300, 50
    bar_w = (width - 2 * pad) / max(len(values), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>']
    for i, (name, v) in enumerate(values.items()):
        h = max(0.0, min(1.0, v)) * (height - 2 * pad)
        x = pad + i * bar_w + 0.1 * bar_w
        parts.append(f'<rect x="{x:.1f}" y="{height - pad - h:.1f}" width="{0.8 * bar_w:.1f}" '
                     f'height="{h:.1f}" fill="#3b6ea8"/>')
        parts.append(f'<text x="{x + 0.4 * bar_w:.1f}" y="{height - pad - h - 4:.1f}" '
                     f'text-anchor="middle" font-size="11">{100 * v:.2f}</text>')
        parts.append(f'<text x="{x + 0.4 * bar_w:.1f}" y="{height - pad + 16:.1f}" '
                     f'text-anchor="middle" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap_svg(names: list[str], matrix: np.ndarray, title: str) -> str:
    """Blue heatmap of pairwise accuracy differences (percentage points)."""
    cell, pad = 70, 110
    size = pad + cell * len(names) + 20
    peak = float(np.abs(matrix).max()) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>']
    for i, row_name in enumerate(names):
        parts.append(f'<text x="{pad - 6}" y="{pad + i * cell + cell / 2 + 4}" text-anchor="end" '
                     f'font-size="11">{row_name}</text>')
        parts.append(f'<text x="{pad + i * cell + cell / 2}" y="{pad - 8}" text-anchor="middle" '
                     f'font-size="11">{row_name}</text>')
        for j in range(len(names)):
            v = float(matrix[i, j])
            shade = max(0.0, v) / peak
            r, g = int(255 - 200 * shade), int(255 - 150 * shade)
            parts.append(f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({r},{g},255)" stroke="white"/>')
            parts.append(f'<text x="{pad + j * cell + cell / 2}" y="{pad + i * cell + cell / 2 + 4}" '
                         f'text-anchor="middle" font-size="11">{100 * v:+.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(out_dir: str | Path, run: str, cv: CVResult | None = None,
                 ablation: AblationResult | None = None, metrics: Metrics | None = None) -> list[Path]:
    """Write report/metrics_<run>.csv, ablation and improvement CSVs, and SVGs."""
    report = Path(out_dir) / "report"
    report.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        path = report / name
        path.write_text(text)
        written.append(path)

    if cv is not None:
        put(f"metrics_{run}.csv", fold_metrics_csv(cv))
        put(f"folds_{run}.svg", bar_chart_svg({f"fold {i}": a for i, a in enumerate(cv.accuracies)},
                                              "Zero-shot accuracy per fold (%)"))
    if metrics is not None:
        put(f"metrics_{run}.csv", metrics_csv(metrics, run))
    if ablation is not None:
        put(f"ablation_{run}.csv", ablation_csv(ablation))
        put(f"improvement_matrix_{run}.csv", improvement_matrix_csv(ablation))
        put(f"ablation_{run}.svg", bar_chart_svg(ablation.accuracy, "Ablation: mean CV accuracy (%)"))
        put(f"improvement_matrix_{run}.svg",
            heatmap_svg(ablation.names, ablation.improvement_matrix(), "Accuracy improvement row - column (pp)"))
    return written

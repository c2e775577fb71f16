"""Synthetic multiview expression data, augmentations, prompts and fold splits."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ConfigurationError, EmptyInputError, VocabularyError

DATASET_FORMAT = "smile-ssl-dataset"
FORMAT_VERSION = 1

BASIC_SIX = {
    "happy": [
        "a person smiling happily",
        "a joyful facial expression",
        "an expression of delight",
    ],
    "sad": [
        "a person looking down sadly",
        "a face showing sorrow",
        "a sad expression",
    ],
    "surprise": [
        "a surprised facial expression",
        "a face with surprise expression",
        "a face reacting with amazement",
    ],
    "angry": [
        "a person frowning angrily",
        "an expression of frustration",
        "a face showing intense anger",
    ],
    "disgust": [
        "a person showing disgust",
        "a face with disgust expression",
        "a disgusted facial reaction",
    ],
    "fear": [
        "a fearful facial expression",
        "a person appearing afraid",
        "a face with fear expression",
    ],
}

MICRO_FIVE_CLASSES = ["positive", "negative", "surprise", "repression", "others"]
MICRO_TEMPLATES = [
    "a face with {} micro expression",
    "a subtle {} facial movement",
    "a brief flash of {} emotion",
]

PROMPT_MODES = ("basic-six", "micro-five")


def tokenize_words(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class PromptBank:
    """Class-ordered prompt templates plus the vocabulary they tokenize against."""

    mode: str
    templates: dict[str, list[str]]
    vocab: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.templates:
            raise ConfigurationError("prompt bank has no classes")
        for name, temps in self.templates.items():
            if len(temps) < 2:
                raise ConfigurationError(f"class {name!r} needs at least 2 templates, has {len(temps)}")
        if not self.vocab:
            words = sorted({w for ts in self.templates.values() for t in ts for w in tokenize_words(t)})
            self.vocab = {w: i for i, w in enumerate(words)}

    @classmethod
    def basic_six(cls) -> "PromptBank":
        return cls("basic-six", {k: list(v) for k, v in BASIC_SIX.items()})

    @classmethod
    def micro_five(cls) -> "PromptBank":
        return cls("micro-five", {c: [t.format(c) for t in MICRO_TEMPLATES] for c in MICRO_FIVE_CLASSES})

    @classmethod
    def for_mode(cls, mode: str) -> "PromptBank":
        if mode == "basic-six":
            return cls.basic_six()
        if mode == "micro-five":
            return cls.micro_five()
        raise ConfigurationError(f"unknown prompt mode {mode!r}; expected one of {PROMPT_MODES}")

    @property
    def class_names(self) -> list[str]:
        return list(self.templates)

    @property
    def n_classes(self) -> int:
        return len(self.templates)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def class_templates(self, class_id: int) -> list[str]:
        if not 0 <= class_id < self.n_classes:
            raise KeyError(f"class id {class_id} not in prompt bank ({self.n_classes} classes)")
        return self.templates[self.class_names[class_id]]

    def tokenize(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self.vocab[w] for w in tokenize_words(text))
        except KeyError as exc:
            raise VocabularyError(f"token {exc.args[0]!r} is not in the prompt vocabulary") from None

    def to_json(self) -> dict:
        return {"mode": self.mode, "templates": self.templates}

    @classmethod
    def from_json(cls, obj: dict) -> "PromptBank":
        if "templates" in obj:
            return cls(obj.get("mode", "custom"), {k: list(v) for k, v in obj["templates"].items()})
        # bare mapping class name -> templates
        return cls("custom", {k: list(v) for k, v in obj.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.templates, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PromptBank":
        return cls.from_json(json.loads(Path(path).read_text()))


def sample_prompt(class_id: int, bank: PromptBank, rng: np.random.Generator) -> tuple[int, ...]:
    templates = bank.class_templates(class_id)
    return bank.tokenize(templates[int(rng.integers(len(templates)))])


# ----------------------------------------------------------------- generator
@dataclass
class DataConfig:
    n_subjects: int = 20
    samples_per_subject: int = 10
    n_classes: int = 6
    input_dim: int = 16
    view_count: int = 3
    noise_sd: float = 0.3
    subject_sd: float = 0.5
    view_strength: float = 1.5
    domain_shift: float = 0.0
    prompt_mode: str = "basic-six"
    temporal: bool = False
    sequence_length: int = 8
    seed: int = 0
    anchor_seed: int | None = None
    view_seed: int | None = None

    def validate(self) -> None:
        for name in ("n_subjects", "samples_per_subject", "n_classes", "input_dim", "view_count"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"data.{name} must be >= 1")
        if self.noise_sd < 0 or self.subject_sd < 0 or self.domain_shift < 0:
            raise ConfigurationError("data noise/shift scales must be non-negative")
        if self.temporal and self.sequence_length < 1:
            raise ConfigurationError("data.sequence_length must be >= 1")
        bank = PromptBank.for_mode(self.prompt_mode)
        if bank.n_classes != self.n_classes:
            raise ConfigurationError(
                f"n_classes={self.n_classes} does not match prompt mode "
                f"{self.prompt_mode!r} ({bank.n_classes} classes)"
            )


@dataclass
class Sample:
    subject_id: int
    class_id: int
    views: np.ndarray
    sequence: np.ndarray | None = None


@dataclass
class Dataset:
    """Samples stored as dense arrays: views[sample, view, feature]."""

    views: np.ndarray
    subject_ids: np.ndarray
    class_ids: np.ndarray
    bank: PromptBank
    sequences: np.ndarray | None = None
    config: DataConfig | None = None
    oracle_accuracy: float | None = None
    view_angles: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i: int) -> Sample:
        seq = None if self.sequences is None else self.sequences[i]
        return Sample(int(self.subject_ids[i]), int(self.class_ids[i]), self.views[i], seq)

    @property
    def view_count(self) -> int:
        return self.views.shape[1]

    @property
    def input_dim(self) -> int:
        return self.views.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        seq = None if self.sequences is None else self.sequences[idx]
        return Dataset(self.views[idx], self.subject_ids[idx], self.class_ids[idx], self.bank,
                       seq, self.config, self.oracle_accuracy, list(self.view_angles))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.views, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.subject_ids, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.class_ids, dtype="<i8").tobytes())
        if self.sequences is not None:
            h.update(np.ascontiguousarray(self.sequences, dtype="<f8").tobytes())
        return h.hexdigest()


def view_angles(view_count: int) -> list[float]:
    if view_count == 1:
        return [0.0]
    return [float(a) for a in np.linspace(-30.0, 30.0, view_count)]


def class_anchors(n_classes: int, input_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 101])
    a = rng.standard_normal((n_classes, input_dim))
    return a / np.linalg.norm(a, axis=1, keepdims=True) * math.sqrt(input_dim)


def _skew(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    s = a - a.T
    return s / np.linalg.norm(s, 2)


def view_transforms(cfg: DataConfig) -> np.ndarray:
    """One orthogonal map per view angle: rotation by angle * strength about a
    shared random generator, preceded by a domain-specific sensor rotation."""
    seed = cfg.seed if cfg.view_seed is None else cfg.view_seed
    rng = np.random.default_rng([seed, 202])
    gen = _skew(rng, cfg.input_dim)
    sensor = _skew(np.random.default_rng([seed, 303]), cfg.input_dim)
    base = expm(cfg.domain_shift * sensor)
    mats = [expm(math.radians(a) * cfg.view_strength * gen) @ base for a in view_angles(cfg.view_count)]
    return np.stack(mats)


def rank_pool(sequence: np.ndarray) -> np.ndarray:
    """Approximate rank pooling: weights 2t - T - 1 over frames, max-abs scaled."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise EmptyInputError("rank_pool needs a non-empty T x dim sequence")
    n = seq.shape[0]
    # w_t = -w_{T+1-t}: pair mirrored frames so static content cancels exactly
    half = n // 2
    w = 2.0 * np.arange(1, half + 1, dtype=np.float64) - n - 1.0
    pooled = w @ (seq[:half] - seq[::-1][:half]) if half else np.zeros(seq.shape[1])
    peak = np.abs(pooled).max()
    return pooled / peak if peak > 0 else np.zeros_like(pooled)


def nearest_anchor_accuracy(views: np.ndarray, class_ids: np.ndarray, anchors: np.ndarray,
                            transforms: np.ndarray) -> float:
    """Fraction of individual views whose cosine-nearest transformed anchor is
    the true class. Uses generator internals, so it bounds what is learnable."""
    hits = 0
    for v, mat in enumerate(transforms):
        ref = anchors @ mat.T
        ref = ref / np.linalg.norm(ref, axis=1, keepdims=True)
        x = views[:, v, :]
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        sims = (x / np.where(norms > 0, norms, 1.0)) @ ref.T
        hits += int((sims.argmax(axis=1) == class_ids).sum())
    return hits / (views.shape[0] * views.shape[1])


def _subject_samples(cfg: DataConfig, subject: int, anchors: np.ndarray, transforms: np.ndarray):
    rng = np.random.default_rng([cfg.seed, 404, subject])
    offset = rng.standard_normal(cfg.input_dim) * cfg.subject_sd
    views, seqs, classes = [], [], []
    for j in range(cfg.samples_per_subject):
        c = (subject + j) % cfg.n_classes
        classes.append(c)
        if cfg.temporal:
            steps = np.arange(1, cfg.sequence_length + 1)[:, None] / cfg.sequence_length
            frames = offset + steps * anchors[c] + rng.standard_normal(
                (cfg.sequence_length, cfg.input_dim)) * cfg.noise_sd
            seqs.append(frames)
            views.append(np.stack([rank_pool(frames @ m.T) for m in transforms]))
        else:
            noise = rng.standard_normal((cfg.view_count, cfg.input_dim)) * cfg.noise_sd
            views.append(np.stack([m @ (anchors[c] + offset + noise[v]) for v, m in enumerate(transforms)]))
    return views, seqs, classes


def generate_synthetic(cfg: DataConfig | None = None, **overrides) -> Dataset:
    """Build a seeded dataset; keyword overrides patch ``cfg`` field by field."""
    cfg = DataConfig(**{**asdict(cfg or DataConfig()), **overrides})
    cfg.validate()
    bank = PromptBank.for_mode(cfg.prompt_mode)
    anchors = class_anchors(cfg.n_classes, cfg.input_dim, cfg.seed if cfg.anchor_seed is None else cfg.anchor_seed)
    transforms = view_transforms(cfg)
    views, seqs, classes, subjects = [], [], [], []
    for s in range(cfg.n_subjects):
        v, q, c = _subject_samples(cfg, s, anchors, transforms)
        views += v
        seqs += q
        classes += c
        subjects += [s] * len(c)
    views_arr = np.stack(views)
    class_arr = np.asarray(classes, dtype=np.int64)
    return Dataset(
        views=views_arr,
        subject_ids=np.asarray(subjects, dtype=np.int64),
        class_ids=class_arr,
        bank=bank,
        sequences=np.stack(seqs) if cfg.temporal else None,
        config=cfg,
        oracle_accuracy=nearest_anchor_accuracy(views_arr, class_arr, anchors, transforms),
        view_angles=view_angles(cfg.view_count),
    )


# -------------------------------------------------------------- augmentation
@dataclass
class AugmentPolicy:
    noise_sd: float = 0.2
    dropout: float = 0.1
    scale_low: float = 0.8
    scale_high: float = 1.2

    def validate(self) -> None:
        if self.noise_sd < 0:
            raise ConfigurationError("augment.noise_sd must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("augment.dropout must lie in [0, 1)")
        if not 0.0 < self.scale_low <= self.scale_high:
            raise ConfigurationError("augment scale range must satisfy 0 < scale_low <= scale_high")


def distort(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One random distortion of every feature vector in ``x`` (last axis)."""
    lead = x.shape[:-1] + (1,)
    scale = rng.uniform(policy.scale_low, policy.scale_high, size=lead)
    keep = rng.random(x.shape) >= policy.dropout
    noise = rng.standard_normal(x.shape) * policy.noise_sd
    return x * scale * keep + noise


def augment_pair(views: np.ndarray | Sample, policy: AugmentPolicy,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x = views.views if isinstance(views, Sample) else np.asarray(views, dtype=np.float64)
    return distort(x, policy, rng), distort(x, policy, rng)


# ------------------------------------------------------------------ splitting
def kfold_subject_split(subject_ids, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Subject-disjoint folds: subjects are shuffled and cut into k near-equal groups."""
    if isinstance(subject_ids, Dataset):
        subject_ids = subject_ids.subject_ids
    subject_ids = np.asarray(subject_ids)
    subjects = np.unique(subject_ids)
    if k < 2 and len(subjects) > 1 or k < 1:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if k > len(subjects):
        raise ConfigurationError(f"k={k} exceeds the number of distinct subjects ({len(subjects)})")
    order = np.random.default_rng([seed, 505]).permutation(subjects)
    folds = []
    for group in np.array_split(order, k):
        test_mask = np.isin(subject_ids, group)
        folds.append((np.flatnonzero(~test_mask), np.flatnonzero(test_mask)))
    return folds


# ---------------------------------------------------------------------- files
def _manifest_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".manifest.json", ".f64"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.with_name(name + ".manifest.json"), path.with_name(name + ".f64")


def save_dataset(ds: Dataset, path: str | Path) -> tuple[Path, Path]:
    """Write ``<name>.manifest.json`` and the little-endian float64 ``<name>.f64`` blob.

    Blob layout: views as [sample][view][feature] in C order, followed (when
    ``sequence_length`` > 0) by sequences as [sample][frame][feature].
    """
    manifest_path, blob_path = _manifest_paths(path)
    seq_len = 0 if ds.sequences is None else ds.sequences.shape[1]
    manifest = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "n_samples": len(ds),
        "view_count": ds.view_count,
        "input_dim": ds.input_dim,
        "sequence_length": seq_len,
        "dtype": "<f8",
        "layout": "views[sample][view][feature] then sequences[sample][frame][feature]",
        "view_angles": ds.view_angles,
        "subject_ids": ds.subject_ids.tolist(),
        "class_ids": ds.class_ids.tolist(),
        "class_names": ds.bank.class_names,
        "prompt_bank": ds.bank.to_json(),
        "config": None if ds.config is None else asdict(ds.config),
        "oracle_accuracy": ds.oracle_accuracy,
        "digest": ds.digest(),
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    with open(blob_path, "wb") as fh:
        fh.write(np.ascontiguousarray(ds.views, dtype="<f8").tobytes())
        if ds.sequences is not None:
            fh.write(np.ascontiguousarray(ds.sequences, dtype="<f8").tobytes())
    return manifest_path, blob_path


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset written by :func:`save_dataset` or produced externally.

    External producers need only ``n_samples``, ``view_count``, ``input_dim``,
    ``subject_ids``, ``class_ids`` and either ``prompt_bank`` or
    ``prompt_mode`` in the manifest.
    """
    manifest_path, blob_path = _manifest_paths(path)
    m = json.loads(manifest_path.read_text())
    n, v, d = int(m["n_samples"]), int(m["view_count"]), int(m["input_dim"])
    t = int(m.get("sequence_length", 0) or 0)
    raw = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    expected = n * v * d + n * t * d
    if raw.size != expected:
        raise ConfigurationError(f"{blob_path}: expected {expected} float64 values, found {raw.size}")
    views = raw[: n * v * d].reshape(n, v, d).astype(np.float64)
    seqs = raw[n * v * d:].reshape(n, t, d).astype(np.float64) if t else None
    if "prompt_bank" in m:
        bank = PromptBank.from_json(m["prompt_bank"])
    else:
        bank = PromptBank.for_mode(m.get("prompt_mode", "basic-six"))
    cfg = None
    if m.get("config"):
        known = {f.name for f in fields(DataConfig)}
        cfg = DataConfig(**{k: val for k, val in m["config"].items() if k in known})
    ds = Dataset(views, np.asarray(m["subject_ids"], dtype=np.int64), np.asarray(m["class_ids"], dtype=np.int64),
                 bank, seqs, cfg, m.get("oracle_accuracy"), list(m.get("view_angles") or view_angles(v)))
    if len(ds.subject_ids) != n or len(ds.class_ids) != n:
        raise ConfigurationError("subject_ids/class_ids length does not match n_samples")
    if "digest" in m and m["digest"] != ds.digest():
        raise ConfigurationError(f"{manifest_path}: digest mismatch, blob does not match manifest")
    return ds

"""Visual encoder + projector, frozen bag-of-tokens text encoder, view fusion."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .data import PromptBank
from .errors import ConfigurationError, DimensionError, EmptyInputError, VocabularyError
from .tensor import Tensor, concat, l2_normalize, no_grad, softmax

CHECKPOINT_FORMAT = "smile-ssl-checkpoint"


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class VisualEncoder:
    """Two-layer tanh MLP backbone followed by a tanh -> linear projector."""

    def __init__(self, input_dim: int, hidden: int = 64, dim: int = 32, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.input_dim, self.hidden, self.dim = input_dim, hidden, dim
        self.w1 = _uniform(rng, input_dim, (input_dim, hidden))
        self.b1 = _uniform(rng, input_dim, (hidden,))
        self.w2 = _uniform(rng, hidden, (hidden, dim))
        self.b2 = _uniform(rng, hidden, (dim,))
        self.proj = _uniform(rng, dim, (dim, dim))
        self.proj_b = _uniform(rng, dim, (dim,))

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "proj": self.proj, "proj_b": self.proj_b}

    def backbone(self, x: Tensor) -> Tensor:
        return (x @ self.w1 + self.b1).tanh() @ self.w2 + self.b2

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.input_dim:
            raise ConfigurationError(f"view features have length {x.shape[-1]}, encoder expects {self.input_dim}")
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        z = self.backbone(x).tanh() @ self.proj + self.proj_b
        return z.reshape(-1) if squeeze else z

    def lipschitz_bound(self) -> float:
        # tanh is 1-Lipschitz, biases do not matter
        return float(np.prod([np.linalg.norm(w.data, 2) for w in (self.w1, self.w2, self.proj)]))


class TextEncoder:
    """Token embedding table, mean-pooled over the prompt, L2-normalized."""

    def __init__(self, vocab_size: int, dim: int = 32, rng: np.random.Generator | None = None, frozen: bool = True):
        rng = rng or np.random.default_rng(0)
        self.vocab_size, self.dim = vocab_size, dim
        self.table = _uniform(rng, dim, (vocab_size, dim))
        self.frozen = frozen
        self.table.requires_grad = not frozen

    def parameters(self) -> dict[str, Tensor]:
        return {"table": self.table}

    def freeze(self) -> None:
        self.frozen = True
        self.table.requires_grad = False
        self.table.grad = None

    def pooling_matrix(self, prompts: Sequence[Sequence[int]]) -> np.ndarray:
        pool = np.zeros((len(prompts), self.vocab_size))
        for row, toks in enumerate(prompts):
            if len(toks) == 0:
                raise EmptyInputError("empty prompt")
            for t in toks:
                if not 0 <= t < self.vocab_size:
                    raise VocabularyError(f"token id {t} outside vocabulary of size {self.vocab_size}")
                pool[row, t] += 1.0 / len(toks)
        return pool

    def encode_batch(self, prompts: Sequence[Sequence[int]]) -> Tensor:
        return l2_normalize(Tensor(self.pooling_matrix(prompts)) @ self.table)

    def __call__(self, prompt: Sequence[int]) -> Tensor:
        return self.encode_batch([prompt]).reshape(-1)

    def pretrain(self, bank: PromptBank, steps: int = 300, lr: float = 0.05, seed: int = 0) -> float:
        """Fit the table so templates of one class land together, then freeze.

        Stand-in for the language knowledge a pretrained text encoder brings:
        same-class template cosines are pulled to 1, cross-class ones to 0.
        Uses only the prompt bank, never sample labels. Returns the final fit loss.
        """
        from .train import Adam

        prompts, labels = [], []
        for c in range(bank.n_classes):
            for t in bank.class_templates(c):
                prompts.append(bank.tokenize(t))
                labels.append(c)
        labels = np.asarray(labels)
        target = Tensor((labels[:, None] == labels[None, :]).astype(np.float64))
        pool = Tensor(self.pooling_matrix(prompts))
        self.table.requires_grad = True
        opt = Adam([self.table], lr=lr, weight_decay=0.0)
        loss_val = float("nan")
        for _ in range(steps):
            emb = l2_normalize(pool @ self.table)
            loss = ((emb @ emb.T - target) ** 2).mean()
            loss_val = loss.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.freeze()
        return loss_val


class FusionHead:
    """Scores each view embedding with a small MLP and softmax-weights the views.

    The score layer has no output bias: softmax is shift-invariant, so such a
    bias could never receive a gradient.
    """

    def __init__(self, dim: int = 32, hidden: int = 16, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.dim, self.hidden = dim, hidden
        self.u1 = _uniform(rng, dim, (dim, hidden))
        self.c1 = _uniform(rng, dim, (hidden,))
        self.u2 = _uniform(rng, hidden, (hidden, 1))

    def parameters(self) -> dict[str, Tensor]:
        return {"u1": self.u1, "c1": self.c1, "u2": self.u2}

    @staticmethod
    def pool(z: Tensor) -> Tensor:
        # global average pooling is the identity on a flat embedding
        return z

    def scores(self, z: Tensor) -> Tensor:
        return (self.pool(z) @ self.u1 + self.c1).tanh() @ self.u2

    def __call__(self, views: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
        return fuse_views(views, self)


def fuse_views(views: Sequence[Tensor], head: FusionHead) -> tuple[Tensor, Tensor]:
    """Convex, attention-weighted combination of per-view embeddings.

    Accepts N tensors of shape [d] (one sample) or [B, d] (a batch); returns the
    fused embedding and weights of shape [N] or [B, N].
    """
    if len(views) == 0:
        raise EmptyInputError("fuse_views needs at least one view embedding")
    views = [v if isinstance(v, Tensor) else Tensor(v) for v in views]
    single = views[0].ndim == 1
    if single:
        views = [v.reshape(1, -1) for v in views]
    shape = views[0].shape
    if any(v.shape != shape for v in views):
        raise DimensionError(f"view embeddings disagree in shape: {[v.shape for v in views]}")
    n, b = len(views), shape[0]
    scores = head.scores(concat(views, axis=0)).reshape(n, b).T
    weights = softmax(scores, axis=1)
    fused = views[0] * weights[:, 0:1]
    for i in range(1, n):
        fused = fused + views[i] * weights[:, i:i + 1]
    if single:
        return fused.reshape(-1), weights.reshape(-1)
    return fused, weights


@dataclass
class ModelConfig:
    input_dim: int = 16
    hidden: int = 64
    dim: int = 32
    fusion_hidden: int = 16
    text_pretrain_steps: int = 300

    def validate(self) -> None:
        for name, val in asdict(self).items():
            if name != "text_pretrain_steps" and val < 1:
                raise ConfigurationError(f"model.{name} must be >= 1")
        if self.text_pretrain_steps < 0:
            raise ConfigurationError("model.text_pretrain_steps must be >= 0")


class Model:
    """Visual path (trainable), text encoder (frozen) and fusion head."""

    def __init__(self, cfg: ModelConfig, bank: PromptBank, seed: int = 0):
        cfg.validate()
        self.cfg, self.bank, self.seed = cfg, bank, seed
        self.visual = VisualEncoder(cfg.input_dim, cfg.hidden, cfg.dim, np.random.default_rng([seed, 1]))
        self.fusion = FusionHead(cfg.dim, cfg.fusion_hidden, np.random.default_rng([seed, 2]))
        self.text = TextEncoder(bank.vocab_size, cfg.dim, np.random.default_rng([seed, 3]), frozen=True)
        if cfg.text_pretrain_steps:
            self.text.pretrain(bank, steps=cfg.text_pretrain_steps, seed=seed)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, part in (("visual", self.visual), ("fusion", self.fusion), ("text", self.text)):
            for name, p in part.parameters().items():
                yield f"{prefix}.{name}", p

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}

    def encode_views(self, views: np.ndarray) -> list[Tensor]:
        """views[B, N, input_dim] -> N tensors of shape [B, d] (one encoder pass)."""
        b, n, _ = views.shape
        z = self.visual(Tensor(views.transpose(1, 0, 2).reshape(n * b, -1)))
        return [z[i * b:(i + 1) * b] for i in range(n)]

    def fuse(self, views: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
        return fuse_views(views, self.fusion)

    def embed(self, views: np.ndarray) -> tuple[Tensor, Tensor]:
        """Fused embedding and fusion weights for a batch of multiview samples."""
        return self.fuse(self.encode_views(views))

    def class_text_embeddings(self, bank: PromptBank | None = None) -> list[np.ndarray]:
        bank = bank or self.bank
        with no_grad():
            return [self.text.encode_batch([bank.tokenize(t) for t in bank.class_templates(c)]).data
                    for c in range(bank.n_classes)]

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


# ---------------------------------------------------------------- checkpoints
def write_blob(manifest_path: Path, blob_path: Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Manifest lists each array's name, shape and float64 offset into the blob.

    The blob is the concatenation of all arrays, little-endian float64, C order,
    in manifest order.
    """
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    manifest = {**meta, "dtype": "<f8", "arrays": entries, "total_count": offset}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(blob_path, "wb") as fh:
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_blob(manifest_path: Path, blob_path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest = json.loads(manifest_path.read_text())
    raw = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    if raw.size != manifest["total_count"]:
        raise ConfigurationError(f"{blob_path}: expected {manifest['total_count']} values, found {raw.size}")
    arrays = {e["name"]: raw[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
              for e in manifest["arrays"]}
    return manifest, arrays


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".ckpt.json", ".ckpt.f64"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return path.with_name(name + ".ckpt.json"), path.with_name(name + ".ckpt.f64")


def save_model(model: Model, path: str | Path, extra: dict[str, np.ndarray] | None = None,
               meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    arrays.update(extra or {})
    write_blob(*checkpoint_paths(path), arrays, {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "model": asdict(model.cfg),
        "seed": model.seed,
        "prompt_bank": model.bank.to_json(),
        "trainable": sorted(model.trainable_parameters()),
        **(meta or {}),
    })


def load_model(path: str | Path) -> tuple[Model, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, manifest, non-parameter arrays)."""
    manifest, arrays = read_blob(*checkpoint_paths(path))
    cfg = ModelConfig(**{**manifest["model"], "text_pretrain_steps": 0})
    model = Model(cfg, PromptBank.from_json(manifest["prompt_bank"]), seed=manifest["seed"])
    model.cfg = ModelConfig(**manifest["model"])
    model.load_state_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, manifest, {k: v for k, v in arrays.items() if not k.startswith("param/")}

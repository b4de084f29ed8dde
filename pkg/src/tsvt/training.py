"""Loss, metrics, the optimization loop with early stopping, and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flow as FL
from . import tensor as T
from . import video as V
from .fusion import ModelConfig, TwoStreamModel
from .optim import Adam
from .tensor import Tensor
from .video import ConfigError, VideoClip

CHECKPOINT_MAGIC = b"TSVT"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 10
    dropout: float = 0.5
    seed: int = 0
    stream_mode: str = "both"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError(f"invalid training config: {self}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(
                f"patience {self.patience} must be in [1, max_epochs={self.max_epochs}]"
            )


@dataclass
class Metrics:
    top1: float
    mean_loss: float
    per_class: list


# loss and accuracy ----------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class, via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise T.ShapeMismatchError(f"cross_entropy expects B x K logits, got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise T.ShapeMismatchError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise T.ParameterError(f"label out of range [0, {k}): {labels}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(b), labels]
    data = losses.mean()

    softmax = np.exp(z - zmax)
    softmax /= softmax.sum(axis=1, keepdims=True)

    def rule(g):
        grad = softmax.copy()
        grad[np.arange(b), labels] -= 1.0
        return (grad * (g / b),)

    return Tensor._result(data, (logits,), rule)


def top1_accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of argmax matches; ties break to the lowest index."""
    labels = np.asarray(labels)
    pred = np.argmax(logits, axis=-1)
    return float((pred == labels).mean())


def early_stop_epoch(val_losses, patience: int) -> int | None:
    """1-based epoch after which training stops, or None if it never fires.

    A loss counts as an improvement only when strictly lower than the best
    seen; the stop fires once `patience` consecutive epochs fail to improve.
    """
    best = np.inf
    best_epoch = 0
    for epoch, loss in enumerate(val_losses, start=1):
        if loss < best:
            best = loss
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            return epoch
    return None


# two-stream input preparation -----------------------------------------


class FlowCache:
    """Computes and caches per-clip flow-RGB stacks.

    Flow is deterministic in (frames, solver config), so entries are keyed
    by clip content hash + config; an optional directory persists them.
    """

    def __init__(self, solver_cfg: FL.FlowSolverConfig | None = None, cache_dir=None):
        self.solver_cfg = solver_cfg or FL.FlowSolverConfig()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, np.ndarray] = {}

    def _key(self, clip: VideoClip) -> str:
        h = hashlib.sha256()
        h.update(clip.frames.tobytes())
        c = self.solver_cfg
        h.update(f"{c.alpha}:{c.iterations}:{c.levels}:{c.tol}".encode())
        return h.hexdigest()[:32]

    def flow_rgb(self, clip: VideoClip) -> np.ndarray:
        key = self._key(clip)
        if key in self._mem:
            return self._mem[key]
        if self.cache_dir:
            path = self.cache_dir / f"{key}.npy"
            if path.exists():
                arr = np.load(path)
                self._mem[key] = arr
                return arr
        flows = FL.flow_sequence(clip.frames, self.solver_cfg)
        arr = np.stack([FL.flow_to_rgb(f) for f in flows])
        self._mem[key] = arr
        if self.cache_dir:
            np.save(self.cache_dir / f"{key}.npy", arr)
        return arr


def prepare_split(clips: list[VideoClip], cache: FlowCache,
                  norm: V.NormalizationSpec | None = None) -> dict:
    """Normalized RGB and flow-RGB stacks plus labels for a list of clips."""
    norm = norm or V.NormalizationSpec()
    rgb = np.stack([V.normalize(c.frames, norm) for c in clips])
    flow = np.stack([V.normalize(cache.flow_rgb(c), norm) for c in clips])
    labels = np.array([c.label for c in clips], dtype=np.intp)
    return {"rgb": rgb, "flow": flow, "labels": labels}


# checkpointing --------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: dict
    params: dict  # name -> float64 array
    optimizer_state: dict  # name -> float64 array
    epoch: int
    best_val_loss: float
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)

    def build_model(self) -> TwoStreamModel:
        cfg = ModelConfig.from_dict(self.model_config)
        model = TwoStreamModel(cfg, np.random.default_rng(0))
        model_params = model.parameters()
        if set(model_params) != set(self.params):
            missing = set(model_params) ^ set(self.params)
            raise IOError(f"checkpoint parameter set mismatch: {sorted(missing)[:5]}")
        for name, p in model_params.items():
            p.data[...] = self.params[name]
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blocks = []
    manifest = []
    offset = 0
    for section, arrays in (("params", ckpt.params), ("optimizer", ckpt.optimizer_state)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            manifest.append(
                {"section": section, "name": name, "shape": list(arr.shape), "offset": offset}
            )
            blocks.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps(
        {
            "model_config": ckpt.model_config,
            "epoch": ckpt.epoch,
            "best_val_loss": ckpt.best_val_loss,
            "extra": ckpt.extra,
            "manifest": manifest,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blocks:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise IOError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise IOError(
                f"{path}: unsupported checkpoint version {version}, "
                f"expected {CHECKPOINT_VERSION}"
            )
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        data = fh.read()
    params: dict = {}
    optimizer: dict = {}
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(
            data, dtype="<f8", count=size, offset=entry["offset"]
        ).reshape(entry["shape"]).copy()
        (params if entry["section"] == "params" else optimizer)[entry["name"]] = arr
    return Checkpoint(
        model_config=header["model_config"],
        params=params,
        optimizer_state=optimizer,
        epoch=header["epoch"],
        best_val_loss=header["best_val_loss"],
        version=version,
        extra=header.get("extra", {}),
    )


# the loop -------------------------------------------------------------


def _forward_loss(model, data, idx, rng, training, stream_mode):
    logits = model.forward(
        data["rgb"][idx], data["flow"][idx], rng=rng, training=training,
        stream_mode=stream_mode,
    )
    loss = cross_entropy(logits, data["labels"][idx])
    return logits, loss


def evaluate_arrays(model: TwoStreamModel, data: dict, batch_size: int = 8,
                    stream_mode: str = "both") -> Metrics:
    """Deterministic eval-mode metrics over a prepared split."""
    n = len(data["labels"])
    if n == 0:
        raise ConfigError("evaluate called on an empty split")
    k = model.cfg.num_classes
    losses = []
    all_logits = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        logits, loss = _forward_loss(
            model, data, idx, np.random.default_rng(0), False, stream_mode
        )
        losses.append(loss.data.item() * len(idx))
        all_logits.append(logits.data)
    logits = np.concatenate(all_logits)
    labels = data["labels"]
    pred = np.argmax(logits, axis=-1)
    per_class = []
    for c in range(k):
        mask = labels == c
        per_class.append(float((pred[mask] == c).mean()) if mask.any() else float("nan"))
    return Metrics(
        top1=top1_accuracy(logits, labels),
        mean_loss=float(sum(losses) / n),
        per_class=per_class,
    )


def evaluate(ckpt: Checkpoint, data: dict, batch_size: int = 8) -> Metrics:
    return evaluate_arrays(ckpt.build_model(), data, batch_size)


def train(model: TwoStreamModel, train_data: dict, val_data: dict,
          cfg: TrainConfig, log_fn=None) -> tuple[Checkpoint, list[dict]]:
    """Adam + early stopping; returns the best-validation-loss checkpoint.

    The epoch shuffle, dropout masks, and therefore the loss trajectory are
    fully determined by cfg.seed.
    """
    if len(train_data["labels"]) == 0 or len(val_data["labels"]) == 0:
        raise ConfigError("train and validation splits must be non-empty")
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    n = len(train_data["labels"])
    best_loss = np.inf
    best_epoch = 0
    best_params = None
    val_losses: list[float] = []
    log: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])
        ).permutation(n)
        n_batches = n // cfg.batch_size if n >= cfg.batch_size else 1
        epoch_losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            drop_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch, b])
            )
            _, loss = _forward_loss(
                model, train_data, idx, drop_rng, True, cfg.stream_mode
            )
            lval = loss.data.item()
            if not np.isfinite(lval):
                raise NumericError(
                    f"non-finite training loss {lval} at epoch {epoch}, batch {b}"
                )
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            epoch_losses.append(lval)

        val = evaluate_arrays(
            model, val_data, cfg.batch_size, stream_mode=cfg.stream_mode
        )
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val.mean_loss,
            "val_top1": val.top1,
        }
        log.append(entry)
        if log_fn:
            log_fn(entry)

        val_losses.append(val.mean_loss)
        if val.mean_loss < best_loss:
            best_loss = val.mean_loss
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
        if early_stop_epoch(val_losses, cfg.patience) == epoch:
            break

    ckpt = Checkpoint(
        model_config=model.cfg.to_dict(),
        params=best_params,
        optimizer_state=opt.state_arrays(),
        epoch=best_epoch,
        best_val_loss=float(best_loss),
        extra={"stream_mode": cfg.stream_mode, "stopped_epoch": log[-1]["epoch"]},
    )
    # leave the model holding the best weights as well
    for k, p in params.items():
        p.data[...] = best_params[k]
    return ckpt, log

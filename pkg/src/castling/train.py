"""Training harness: SGD with momentum, epsilon schedules, mask telemetry, castling."""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, KernelKind, Mode
from .data import SyntheticShapesDataset, generate_dataset, tokens_per_image
from .model import ModelConfig, TinyViT
from .tensor import ConfigError, Parameter

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class NumericalError(ArithmeticError):
    """Non-finite values appeared in gradients or the loss."""


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint: dict[str, np.ndarray], step: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class ScheduleKind(str, enum.Enum):
    FIXED = "fixed"
    LINEAR_RAMP = "linear_ramp"


@dataclass
class EpsilonSchedule:
    kind: ScheduleKind = ScheduleKind.FIXED
    epsilon_max: float = 0.02
    warmup_steps: int = 0

    def __post_init__(self):
        self.kind = ScheduleKind(self.kind)
        if not 0.0 <= self.epsilon_max <= 1.0:
            raise ConfigError(f"epsilon_max must lie in [0, 1], got {self.epsilon_max}")
        if self.kind is ScheduleKind.LINEAR_RAMP and self.warmup_steps < 1:
            raise ConfigError("a linear ramp needs warmup_steps >= 1")

    def __call__(self, step: int) -> float:
        if self.kind is ScheduleKind.FIXED:
            return self.epsilon_max
        return self.epsilon_max * min(1.0, step / self.warmup_steps)


@dataclass
class MaskRecord:
    step: int
    layer: int
    nonzeros: int
    mask_size: int

    @property
    def fraction(self) -> float:
        return self.nonzeros / self.mask_size if self.mask_size else 0.0


@dataclass
class MaskTrace:
    records: list[MaskRecord] = field(default_factory=list)

    def add(self, step: int, layer: int, nonzeros: int, mask_size: int):
        if not 0 <= nonzeros <= mask_size:
            raise ValueError(f"nonzero count {nonzeros} outside [0, {mask_size}]")
        self.records.append(MaskRecord(step, layer, nonzeros, mask_size))

    def __len__(self):
        return len(self.records)

    def steps(self) -> list[int]:
        return sorted({r.step for r in self.records})

    def fraction_at(self, step: int) -> float:
        """Surviving fraction pooled over all layers at ``step``."""
        rows = [r for r in self.records if r.step == step]
        size = sum(r.mask_size for r in rows)
        return sum(r.nonzeros for r in rows) / size if size else 0.0

    def fractions_between(self, first: int, last: int) -> float:
        rows = [r for r in self.records if first <= r.step <= last]
        size = sum(r.mask_size for r in rows)
        return sum(r.nonzeros for r in rows) / size if size else 0.0


@dataclass
class TrainConfig:
    # model
    depth: int = 2
    dim: int = 32
    heads: int = 4
    patch: int = 4
    mlp_ratio: float = 2.0
    # data
    seed: int = 0
    num_classes: int = 4
    num_samples: int = 1200
    image_size: int = 36         # 9x9 = 81 tokens at patch 4
    # optimiser
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 15
    lr_decay: float = 0.85       # per-epoch multiplicative decay
    warmup_epochs: int = 0
    # castling
    sparsity_weight: float = 0.01
    penalty_reduction: str = "sample"
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    kernel: KernelKind = KernelKind.LINEAR_ANGULAR
    mode: Mode = Mode.LITERAL
    use_dwconv: bool = False
    use_aux: bool = True
    mlp_dwconv: bool = False
    dw_kernel_size: int = 3
    # telemetry
    eval_every: int = 1          # epochs
    log_every: int = 1           # steps

    def __post_init__(self):
        self.kernel = KernelKind(self.kernel)
        self.mode = Mode(self.mode)
        self.penalty_reduction = PenaltyReduction(self.penalty_reduction)
        if isinstance(self.epsilon, dict):
            self.epsilon = EpsilonSchedule(**self.epsilon)

    def validate(self) -> "TrainConfig":
        if self.sparsity_weight < 0:
            raise ConfigError("sparsity_weight (lambda) must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr, batch_size and epochs must be positive")
        tokens_per_image(self.image_size, self.patch)
        self.model_config()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size, patch=self.patch, dim=self.dim, depth=self.depth,
            heads=self.heads, num_classes=self.num_classes, mlp_ratio=self.mlp_ratio,
            kernel=self.kernel, mode=self.mode, use_dwconv=self.use_dwconv,
            dw_kernel_size=self.dw_kernel_size, mlp_dwconv=self.mlp_dwconv, use_aux=self.use_aux,
        )

    def attention_config(self) -> AttentionConfig:
        n = tokens_per_image(self.image_size, self.patch)
        g = self.image_size // self.patch
        return AttentionConfig(
            n_q=n, n_k=n, d=self.dim // self.heads, d_v=self.dim // self.heads,
            kernel=self.kernel, mode=self.mode, use_dwconv=self.use_dwconv,
            dw_kernel_size=self.dw_kernel_size, use_aux=self.use_aux,
            epsilon=self.epsilon.epsilon_max, grid=(g, g),
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["kernel"] = self.kernel.value
        out["mode"] = self.mode.value
        out["epsilon"]["kind"] = self.epsilon.kind.value
        out["penalty_reduction"] = self.penalty_reduction.value
        return {"schema_version": SCHEMA_VERSION, **out}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        version = doc.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported TrainConfig schema_version {version}")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# -- optimiser ---------------------------------------------------------------------

def sgd_step(params: Sequence[Parameter], velocities: list[np.ndarray], lr: float,
             momentum: float, weight_decay: float = 0.0):
    """v <- mu v + g + wd p; p <- p - lr v; then zero the gradients."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericalError(f"non-finite gradient in {p.name or 'parameter'} ({bad} entries)")
    for p, v in zip(params, velocities):
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
        p.zero_grad()


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        sgd_step(self.params, self.velocities, self.lr, self.momentum, self.weight_decay)


# -- training ---------------------------------------------------------------------

@dataclass
class MetricRow:
    step: int
    epoch: int
    loss: float
    acc: Optional[float] = None


@dataclass
class TrainResult:
    model: TinyViT
    trace: MaskTrace
    metrics: list[MetricRow]
    dataset: SyntheticShapesDataset
    config: TrainConfig

    @property
    def val_accuracy(self) -> float:
        accs = [m.acc for m in self.metrics if m.acc is not None]
        return accs[-1] if accs else float("nan")

    def epoch_steps(self, epoch: int) -> tuple[int, int]:
        steps = [m.step for m in self.metrics if m.epoch == epoch]
        return min(steps), max(steps)


class PenaltyReduction(str, enum.Enum):
    SAMPLE = "sample"    # surviving mass summed per image, averaged over the batch
    ENTRY = "entry"      # averaged over every mask entry


def sparsity_penalty(traces, reduction: PenaltyReduction = PenaltyReduction.SAMPLE) -> T.Tensor | None:
    """Surviving auxiliary attention mass, reduced over the batch (or all entries)."""
    terms = [tr.values for tr in traces if tr is not None]
    if not terms:
        return None
    total = None
    for v in terms:
        t = T.sum(v) if reduction is PenaltyReduction.SAMPLE else T.mean(v)
        total = t if total is None else T.add(total, t)
    if reduction is PenaltyReduction.SAMPLE:
        return T.mul(total, 1.0 / terms[0].shape[0])
    return T.mul(total, 1.0 / len(terms))


def evaluate(model: TinyViT, images: np.ndarray, labels: np.ndarray, epsilon: float = 0.0,
             batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(labels), batch_size):
        logits = model(images[i:i + batch_size], epsilon).logits.data
        correct += int((logits.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return correct / len(labels)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup over ``warmup_epochs``, then per-epoch exponential decay."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / (cfg.warmup_epochs + 1)
    return cfg.lr * cfg.lr_decay ** (epoch - cfg.warmup_epochs)


def _snapshot(model: TinyViT) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


def train(cfg: TrainConfig, dataset: Optional[SyntheticShapesDataset] = None) -> TrainResult:
    """Cross-entropy training plus lambda * mean(surviving aux mask values).

    Mask nonzeros are recorded per layer every ``log_every`` steps (step 0 is
    the untrained model on the first batch); validation accuracy every
    ``eval_every`` epochs. Deterministic given the config.
    """
    cfg.validate()
    if dataset is None:
        dataset = generate_dataset(cfg.num_samples, cfg.num_classes, cfg.image_size, cfg.seed)
    from .rng import SplitMix64

    model = TinyViT(cfg.model_config(), seed=cfg.seed + 1)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    order_rng = SplitMix64(cfg.seed + 2)
    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    trace, metrics = MaskTrace(), []
    last_good = _snapshot(model)
    step = 0
    n = len(y_train)
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            eps = cfg.epsilon(step)
            with T.Tape():
                out = model(x_train[idx], eps)
                loss = T.cross_entropy(out.logits, y_train[idx])
                penalty = sparsity_penalty(out.traces, cfg.penalty_reduction) if cfg.use_aux else None
                if penalty is not None and cfg.sparsity_weight > 0:
                    loss = T.add(loss, T.mul(penalty, cfg.sparsity_weight))
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"loss became {loss.item()} at step {step}", last_good, step)
                T.backward(loss)
            if cfg.use_aux and step % cfg.log_every == 0:
                for li, tr in enumerate(out.traces):
                    trace.add(step, li, tr.nonzeros, tr.size)
            metrics.append(MetricRow(step, epoch, loss.item()))
            try:
                opt.step()
            except NumericalError as exc:
                raise TrainingDiverged(str(exc), last_good, step) from exc
            last_good = _snapshot(model)
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            metrics[-1].acc = evaluate(model, x_val, y_val, cfg.epsilon(step))
            log.info("epoch %d step %d loss %.4f val_acc %.3f", epoch, step, metrics[-1].loss, metrics[-1].acc)
    return TrainResult(model, trace, metrics, dataset, cfg)


def write_metrics_csv(result: TrainResult, path) -> None:
    """Rows of (step, layer, nonzeros, mask_size, loss, acc); layer is blank without aux."""
    by_step: dict[int, list[MaskRecord]] = {}
    for r in result.trace.records:
        by_step.setdefault(r.step, []).append(r)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "nonzeros", "mask_size", "loss", "acc"])
        for m in result.metrics:
            acc = "" if m.acc is None else f"{m.acc:.6f}"
            recs = by_step.get(m.step)
            if not recs:
                w.writerow([m.step, "", "", "", f"{m.loss:.8f}", acc])
            for r in recs or ():
                w.writerow([m.step, r.layer, r.nonzeros, r.mask_size, f"{m.loss:.8f}", acc])


# -- castling --------------------------------------------------------------------

@dataclass
class CastleReport:
    nonzeros: int
    residual_mass: float
    max_output_delta: float
    bitwise_identical: bool


def castle(model: TinyViT, calibration: np.ndarray, epsilon: float = 0.02) -> tuple[TinyViT, CastleReport]:
    """Strip the auxiliary branch and compare logits on a calibration batch.

    Warns with the residual surviving mass when any mask entry is nonzero.
    """
    castled = model.castled()
    before = model(calibration, epsilon)
    after = castled(calibration, epsilon)
    nonzeros = sum(tr.nonzeros for tr in before.traces if tr is not None)
    mass = float(sum(tr.values.data.sum() for tr in before.traces if tr is not None))
    delta = float(np.abs(before.logits.data - after.logits.data).max())
    same = before.logits.data.tobytes() == after.logits.data.tobytes()
    report = CastleReport(nonzeros, mass, delta, same)
    if nonzeros:
        warnings.warn(
            f"castling with {nonzeros} surviving mask entries: residual mass {mass:.6g}, "
            f"max logit delta {delta:.6g}",
            RuntimeWarning, stacklevel=2,
        )
    return castled, report


def zero_mask_indices(model: TinyViT, images: np.ndarray, epsilon: float = 0.02,
                      batch_size: int = 256) -> np.ndarray:
    """Indices of images whose auxiliary mask is all-zero in every layer."""
    keep = []
    for i in range(0, len(images), batch_size):
        traces = model(images[i:i + batch_size], epsilon).traces
        if not any(tr is not None for tr in traces):
            raise ConfigError("model has no auxiliary branch to inspect")
        alive = sum(tr.mask.data.reshape(tr.mask.shape[0], -1).sum(axis=1)
                    for tr in traces if tr is not None)
        keep.extend(i + np.nonzero(alive == 0)[0])
    return np.asarray(keep, dtype=np.int64)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(model: TinyViT, directory, train_cfg: Optional[TrainConfig] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for p in model.parameters():
        fname = p.name.replace("/", "_")
        T.save_tensor(p, directory / fname)
        names.append(p.name)
    mcfg = dataclasses.asdict(model.cfg)
    mcfg["kernel"] = model.cfg.kernel.value
    mcfg["mode"] = model.cfg.mode.value
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "model": mcfg,
        "parameters": names,
        "train_config": train_cfg.to_dict() if train_cfg else None,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(directory) -> TinyViT:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = TinyViT(ModelConfig(**manifest["model"]))
    params = model.named_parameters()
    for name in manifest["parameters"]:
        params[name].data = T.load_tensor(directory / name.replace("/", "_")).data.copy()
    return model


# -- ablations ----------------------------------------------------------------------

ABLATION_CELLS = {
    "Lin": dict(kernel=KernelKind.LINEAR_ANGULAR, use_dwconv=False, use_aux=False),
    "Lin+DW": dict(kernel=KernelKind.LINEAR_ANGULAR, use_dwconv=True, use_aux=False),
    "Lin+Aux": dict(kernel=KernelKind.LINEAR_ANGULAR, use_dwconv=False, use_aux=True),
    "Lin+DW+Aux": dict(kernel=KernelKind.LINEAR_ANGULAR, use_dwconv=True, use_aux=True),
    "ExactSoftmax": dict(kernel=KernelKind.EXACT_SOFTMAX, use_dwconv=False, use_aux=False),
}

ABLATION_COLUMNS = ["cell", "kernel", "dwconv", "aux", "seed", "dataset_hash", "val_acc",
                    "macs_inference", "macs_training", "final_mask_fraction"]


def run_ablation_grid(base: TrainConfig, cells: Optional[Sequence[str]] = None) -> list[dict]:
    """Train every ablation cell on the same dataset and seed; one row per cell."""
    from .flops import model_attention_macs

    cells = list(cells or ABLATION_CELLS)
    dataset = generate_dataset(base.num_samples, base.num_classes, base.image_size, base.seed)
    rows = []
    for name in cells:
        cfg = base.replace(**ABLATION_CELLS[name])
        res = train(cfg, dataset)
        acfg = cfg.attention_config()
        last_epoch = cfg.epochs - 1
        frac = ""
        if cfg.use_aux and len(res.trace):
            lo, hi = res.epoch_steps(last_epoch)
            frac = res.trace.fractions_between(lo, hi)
        rows.append({
            "cell": name,
            "kernel": cfg.kernel.value,
            "dwconv": int(cfg.use_dwconv),
            "aux": int(cfg.use_aux),
            "seed": cfg.seed,
            "dataset_hash": dataset.digest(),
            "val_acc": res.val_accuracy,
            "macs_inference": model_attention_macs(acfg, cfg.heads, castled=True),
            "macs_training": model_attention_macs(acfg, cfg.heads, castled=False),
            "final_mask_fraction": frac,
        })
    return rows


def write_rows_csv(rows: list[dict], path, columns: Optional[Sequence[str]] = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})

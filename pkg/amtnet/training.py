"""Two-stage training loop: multi-task learning alternated with adversarial passes.

In the adversarial pass the auxiliary head is fit to uniformly drawn
misleading labels through the shared layer while the recognition branch is
left out of the graph entirely, so it is neither updated nor are its
batch-norm statistics touched.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from .augmentation import LmrConfig, lmr
from .dataset import AUX_TASKS, CATEGORIES, EXCLUDED, Factor, LabeledFeatures, carve_validation
from .errors import ConfigError, InvalidInput, NumericalError, UnsupportedOperation
from .network import AMTNet, infer, init_params

LOGGER = logging.getLogger(__name__)

LOG_EPS = 1e-12


class ModelVariant(str, Enum):
    AMTNET = "amtnet"
    MTNET = "mtnet"
    RESNET18 = "resnet18"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 5
    lr_mt: float = 5e-4
    # None derives lr_mt / adv_lr_divisor
    lr_adv: Optional[float] = None
    adv_lr_divisor: float = 5.0
    weight_decay: float = 1e-5
    batch_size: int = 32
    seed: int = 123
    factor: str = "range"
    variant: str = "amtnet"
    iteration_reversal: bool = True
    # None means 1.0, or 0.0 for the resnet18 variant
    aux_weight: Optional[float] = None
    validation_fraction: float = 0.1
    width: float = 1.0
    augment: bool = True
    device: str = "cpu"
    lmr: LmrConfig = field(default_factory=LmrConfig)

    @property
    def active_factor(self) -> Factor:
        return Factor.parse(self.factor)

    @property
    def model_variant(self) -> ModelVariant:
        return ModelVariant(self.variant)

    @property
    def n_aux(self) -> int:
        return AUX_TASKS[self.active_factor].n_aux

    @property
    def adversarial_enabled(self) -> bool:
        return self.model_variant is ModelVariant.AMTNET

    @property
    def effective_lr_adv(self) -> float:
        return self.lr_adv if self.lr_adv is not None else self.lr_mt / self.adv_lr_divisor

    @property
    def effective_aux_weight(self) -> float:
        if self.model_variant is ModelVariant.RESNET18:
            return 0.0
        return 1.0 if self.aux_weight is None else self.aux_weight

    def validate(self) -> List[str]:
        problems: List[str] = []
        if self.epochs < 1:
            problems.append("train.epochs must be at least 1")
        if self.warmup_epochs < 0:
            problems.append("train.warmup_epochs must be non-negative")
        if self.lr_mt < 0:
            problems.append("train.lr_mt must be non-negative")
        if self.lr_adv is not None and self.lr_adv < 0:
            problems.append("train.lr_adv must be non-negative")
        if self.adv_lr_divisor <= 0:
            problems.append("train.adv_lr_divisor must be positive")
        if self.weight_decay < 0:
            problems.append("train.weight_decay must be non-negative")
        if self.batch_size < 2:
            problems.append("train.batch_size must be at least 2")
        if not 0 <= self.validation_fraction < 1:
            problems.append("train.validation_fraction must lie in [0, 1)")
        if self.width <= 0:
            problems.append("train.width must be positive")
        if self.aux_weight is not None and self.aux_weight < 0:
            problems.append("train.aux_weight must be non-negative")
        try:
            Factor.parse(self.factor)
        except InvalidInput:
            problems.append(f"train.factor must be one of {[f.value for f in Factor]}, got {self.factor!r}")
        if self.variant not in {v.value for v in ModelVariant}:
            problems.append(f"train.variant must be one of {[v.value for v in ModelVariant]}, got {self.variant!r}")
        problems.extend(self.lmr.validate())
        return problems


@dataclass
class Batch:
    features: torch.Tensor
    labels: torch.Tensor
    aux_labels: torch.Tensor

    @property
    def aux_mask(self) -> torch.Tensor:
        return self.aux_labels != EXCLUDED

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class StepResult:
    loss: float
    loss_recog: float
    loss_aux: float
    correct: int
    aux_correct: int
    aux_count: int
    size: int


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stages: Tuple[str, ...]
    lr_mt: float
    lr_adv: Optional[float]
    loss_recog: float
    loss_aux: float
    loss_adv: Optional[float]
    train_acc: float
    train_aux_acc: Optional[float]
    val_acc: Optional[float]
    val_aux_acc: Optional[float]

    def to_dict(self) -> dict:
        record = asdict(self)
        record["stages"] = list(self.stages)
        return record


@dataclass
class RunHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def has_adversarial(self) -> bool:
        return any(record.loss_adv is not None for record in self.records)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for record in self.records:
            digest.update(json.dumps(record.to_dict(), sort_keys=True).encode("utf-8"))
        return digest.hexdigest()

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8") as handle:
            for record in self.records:
                handle.write(json.dumps(record.to_dict()) + "\n")
        return target


@dataclass
class TrainOutcome:
    model: AMTNet
    best_model: AMTNet
    history: RunHistory
    best_epoch: int
    best_val_acc: Optional[float]
    validation: Optional[LabeledFeatures] = None


# ---------------------------------------------------------------------------
# Losses


def _cross_entropy(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    log_p = torch.log(p.clamp_min(LOG_EPS))
    return -log_p.gather(1, y.unsqueeze(1)).mean()


def loss_terms(
    p: torch.Tensor,
    y: torch.Tensor,
    p_aux: Optional[torch.Tensor],
    y_aux: Optional[torch.Tensor],
    aux_mask: Optional[torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Recognition and auxiliary cross-entropies; masked-out samples only count for recognition."""
    recog = _cross_entropy(p, y)
    if p_aux is None or y_aux is None:
        return recog, recog.new_zeros(())
    mask = torch.ones_like(y_aux, dtype=torch.bool) if aux_mask is None else aux_mask
    if not bool(mask.any()):
        LOGGER.warning("Every sample of the batch lacks the auxiliary annotation; auxiliary loss is 0")
        return recog, recog.new_zeros(())
    return recog, _cross_entropy(p_aux[mask], y_aux[mask])


def loss_mt(
    p: torch.Tensor,
    y: torch.Tensor,
    p_aux: Optional[torch.Tensor],
    y_aux: Optional[torch.Tensor],
    aux_mask: Optional[torch.Tensor] = None,
    aux_weight: float = 1.0,
) -> torch.Tensor:
    recog, aux = loss_terms(p, y, p_aux, y_aux, aux_mask)
    return recog + aux_weight * aux


def loss_adv(p_aux: torch.Tensor, y_misleading: torch.Tensor) -> torch.Tensor:
    return _cross_entropy(p_aux, y_misleading)


def sample_misleading_labels(n_aux: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    if n_aux < 2:
        raise InvalidInput(f"n_aux must be at least 2, got {n_aux}")
    return torch.randint(0, n_aux, (batch_size,), generator=generator)


# ---------------------------------------------------------------------------
# Optimization


def build_optimizer(model: AMTNet, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr_mt, weight_decay=config.weight_decay)


def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear warm-up to 1, then half-cosine decay towards 0 at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise InvalidInput(f"epoch {epoch} outside [0, {config.epochs})")
    warmup = min(config.warmup_epochs, config.epochs)
    if epoch < warmup:
        return (epoch + 1) / warmup
    t = (epoch - warmup + 1) / (config.epochs - warmup + 1)
    return 0.5 * (1.0 + math.cos(math.pi * t))


def _to_device(batch: Batch, model: AMTNet) -> Batch:
    param = next(model.parameters())
    return Batch(
        features=batch.features.to(device=param.device, dtype=param.dtype),
        labels=batch.labels.to(param.device),
        aux_labels=batch.aux_labels.to(param.device),
    )


def mt_step(model: AMTNet, optimizer: torch.optim.Optimizer, batch: Batch, aux_weight: float = 1.0) -> StepResult:
    """One multi-task update of every partition at the optimizer's current learning rate."""
    batch = _to_device(batch, model)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    logits, aux_logits = model(batch.features)
    p = torch.softmax(logits, dim=1)
    p_aux = torch.softmax(aux_logits, dim=1) if aux_logits is not None else None
    recog, aux = loss_terms(p, batch.labels, p_aux, batch.aux_labels, batch.aux_mask)
    total = recog + aux_weight * aux
    if not torch.isfinite(total):
        raise NumericalError(f"multi-task loss is not finite ({total.item()})")
    total.backward()
    optimizer.step()
    mask = batch.aux_mask
    aux_correct = 0
    if p_aux is not None and bool(mask.any()):
        aux_correct = int((p_aux.argmax(dim=1)[mask] == batch.aux_labels[mask]).sum())
    return StepResult(
        loss=float(total.detach()),
        loss_recog=float(recog.detach()),
        loss_aux=float(aux.detach()),
        correct=int((p.argmax(dim=1) == batch.labels).sum()),
        aux_correct=aux_correct,
        aux_count=int(mask.sum()) if p_aux is not None else 0,
        size=len(batch),
    )


def adv_step(
    model: AMTNet,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    generator: torch.Generator,
) -> Optional[StepResult]:
    """Fit the auxiliary head to misleading labels through the shared layer only.

    Returns None when no sample of the batch carries the auxiliary annotation.
    """
    if model.aux is None or model.dis is None:
        raise UnsupportedOperation("adversarial training needs the auxiliary branch")
    batch = _to_device(batch, model)
    misleading = sample_misleading_labels(model.n_aux, len(batch), generator).to(batch.labels.device)
    mask = batch.aux_mask
    if not bool(mask.any()):
        LOGGER.warning("Adversarial batch has no annotated sample; step skipped")
        return None
    model.shared.train()
    model.aux.train()
    optimizer.zero_grad(set_to_none=True)
    p_aux = torch.softmax(model.dis(model.aux(model.shared(batch.features))), dim=1)
    loss = loss_adv(p_aux[mask], misleading[mask])
    if not torch.isfinite(loss):
        raise NumericalError(f"adversarial loss is not finite ({loss.item()})")
    loss.backward()
    optimizer.step()
    return StepResult(
        loss=float(loss.detach()),
        loss_recog=0.0,
        loss_aux=float(loss.detach()),
        correct=0,
        aux_correct=int((p_aux.argmax(dim=1)[mask] == batch.aux_labels[mask]).sum()),
        aux_count=int(mask.sum()),
        size=len(batch),
    )


def iterate_batches(
    data: LabeledFeatures,
    factor: Factor,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[Batch]:
    """Shuffled mini-batches (in order when rng is None); a trailing batch of one is dropped."""
    order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
    aux_labels = data.aux(factor)
    for start in range(0, len(order), batch_size):
        index = torch.as_tensor(order[start : start + batch_size], dtype=torch.long)
        if index.numel() < 2:
            LOGGER.debug("Dropping a trailing batch of one sample")
            continue
        yield Batch(features=data.features[index], labels=data.labels[index], aux_labels=aux_labels[index])


def parameter_checksum(model: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _accuracy(
    model: AMTNet,
    data: LabeledFeatures,
    factor: Factor,
    batch_size: int,
) -> Tuple[float, Optional[float]]:
    p, p_aux = infer(model, data.features, batch_size)
    labels = data.labels.numpy()
    acc = float(np.mean(np.argmax(p, axis=1) == labels))
    aux_acc = None
    if p_aux is not None:
        aux_labels = data.aux(factor).numpy()
        mask = aux_labels != EXCLUDED
        if mask.any():
            aux_acc = float(np.mean(np.argmax(p_aux, axis=1)[mask] == aux_labels[mask]))
    return acc, aux_acc


# ---------------------------------------------------------------------------
# Loop


def _adversarial_pass(
    model: AMTNet,
    optimizer: torch.optim.Optimizer,
    data: LabeledFeatures,
    config: TrainConfig,
    rng: np.random.Generator,
    generator: torch.Generator,
) -> Optional[float]:
    weighted, counted = 0.0, 0
    for batch in iterate_batches(data, config.active_factor, config.batch_size, rng):
        result = adv_step(model, optimizer, batch, generator)
        if result is not None:
            weighted += result.loss * result.aux_count
            counted += result.aux_count
    # mean over the annotated samples actually stepped on
    return weighted / counted if counted else None


def _multitask_pass(
    model: AMTNet,
    optimizer: torch.optim.Optimizer,
    data: LabeledFeatures,
    config: TrainConfig,
    rng: np.random.Generator,
    lmr_rng: np.random.Generator,
) -> Tuple[float, float, float, Optional[float]]:
    recog_sum = aux_sum = 0.0
    correct = aux_correct = aux_count = seen = 0
    for batch in iterate_batches(data, config.active_factor, config.batch_size, rng):
        if config.augment:
            batch = replace(batch, features=lmr(batch.features, config.lmr, lmr_rng))
        result = mt_step(model, optimizer, batch, config.effective_aux_weight)
        recog_sum += result.loss_recog * result.size
        aux_sum += result.loss_aux * result.size
        correct += result.correct
        aux_correct += result.aux_correct
        aux_count += result.aux_count
        seen += result.size
    if seen == 0:
        raise InvalidInput("the training set yields no batch of at least two samples")
    return recog_sum / seen, aux_sum / seen, correct / seen, (aux_correct / aux_count if aux_count else None)


def train(
    config: TrainConfig,
    data: LabeledFeatures,
    validation: Optional[LabeledFeatures] = None,
    run_log: Union[str, Path, None] = None,
    n_class: int = len(CATEGORIES),
) -> TrainOutcome:
    """Run the full schedule and keep the model with the best validation accuracy.

    Each epoch runs the adversarial pass and then the multi-task pass (the other
    way round when iteration reversal is off); the last epoch skips the
    adversarial pass. Without a validation set one is carved from ``data`` by
    recording when ``validation_fraction`` is positive.
    """
    problems = config.validate()
    if problems:
        raise InvalidInput("; ".join(problems))
    if len(data) == 0:
        raise InvalidInput("training set is empty")
    if config.augment:
        band_problems = config.lmr.validate(n_rows=int(data.features.shape[-1]))
        if band_problems:
            raise ConfigError(band_problems)
    if validation is None and config.validation_fraction > 0:
        data, validation = carve_validation(data, config.validation_fraction, config.seed)

    shuffle_seq, lmr_seq, label_seq = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    lmr_rng = np.random.default_rng(lmr_seq)
    generator = torch.Generator().manual_seed(int(label_seq.generate_state(1)[0]))

    model = init_params(
        n_class,
        config.n_aux,
        config.seed,
        config.width,
        with_aux=config.model_variant is not ModelVariant.RESNET18,
    ).to(config.device)
    optimizer = build_optimizer(model, config)
    history = RunHistory()
    best_model = copy.deepcopy(model)
    best_epoch, best_val = -1, None
    log_handle = None
    if run_log is not None:
        Path(run_log).parent.mkdir(parents=True, exist_ok=True)
        log_handle = Path(run_log).open("w", encoding="utf-8")

    LOGGER.info(
        "Training %s on %d segments (%s factor, %d epochs, validation %s)",
        config.variant,
        len(data),
        config.active_factor.value,
        config.epochs,
        len(validation) if validation is not None else "none",
    )
    try:
        for epoch in range(config.epochs):
            multiplier = lr_schedule(epoch, config)
            lr_mt = config.lr_mt * multiplier
            lr_adv = config.effective_lr_adv * multiplier
            run_adv = config.adversarial_enabled and epoch < config.epochs - 1
            stages: List[str] = []
            loss_adv_value = None

            if run_adv and config.iteration_reversal:
                set_learning_rate(optimizer, lr_adv)
                loss_adv_value = _adversarial_pass(model, optimizer, data, config, shuffle_rng, generator)
                stages.append("adv")
            set_learning_rate(optimizer, lr_mt)
            recog, aux, acc, aux_acc = _multitask_pass(model, optimizer, data, config, shuffle_rng, lmr_rng)
            stages.append("mt")
            if run_adv and not config.iteration_reversal:
                set_learning_rate(optimizer, lr_adv)
                loss_adv_value = _adversarial_pass(model, optimizer, data, config, shuffle_rng, generator)
                stages.append("adv")

            val_acc = val_aux_acc = None
            if validation is not None and len(validation):
                val_acc, val_aux_acc = _accuracy(model, validation, config.active_factor, config.batch_size)
                if best_val is None or val_acc > best_val:
                    best_val, best_epoch = val_acc, epoch
                    best_model = copy.deepcopy(model)

            record = EpochRecord(
                epoch=epoch,
                stages=tuple(stages),
                lr_mt=lr_mt,
                lr_adv=lr_adv if "adv" in stages else None,
                loss_recog=recog,
                loss_aux=aux,
                loss_adv=loss_adv_value if "adv" in stages else None,
                train_acc=acc,
                train_aux_acc=aux_acc,
                val_acc=val_acc,
                val_aux_acc=val_aux_acc,
            )
            history.append(record)
            if log_handle is not None:
                log_handle.write(json.dumps(record.to_dict()) + "\n")
                log_handle.flush()
            LOGGER.info(
                "epoch %d/%d [%s] L_recog=%.4f L_aux=%.4f L_adv=%s acc=%.4f val=%s",
                epoch + 1,
                config.epochs,
                "+".join(stages),
                recog,
                aux,
                "-" if record.loss_adv is None else f"{record.loss_adv:.4f}",
                acc,
                "-" if val_acc is None else f"{val_acc:.4f}",
            )
    finally:
        if log_handle is not None:
            log_handle.close()

    if best_val is None:
        best_model, best_epoch = copy.deepcopy(model), config.epochs - 1
    model.eval()
    best_model.eval()
    return TrainOutcome(
        model=model,
        best_model=best_model,
        history=history,
        best_epoch=best_epoch,
        best_val_acc=best_val,
        validation=validation,
    )

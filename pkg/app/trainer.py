"""Shared training loop for every temporal head.

Batches draw identities uniformly, then a clip uniformly within the identity.
A stratified, seeded slice of the training clips drives the plateau scheduler
and early stopping; the best-validation weights are checkpointed and restored.
"""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from tkan.errors import ContractError, NumericalError, ProtocolError
from tkan.metrics import cross_entropy, cross_entropy_grad, subject_sort_key
from tkan.model import GaitModel
from tkan.numerics import AdamState, SchedulerState, adam_step, scheduler_step, split_rng

from .checkpoint import save_checkpoint
from .evaluator import condition_auc

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "best.ckpt"
CURVES_NAME = "curves.tsv"


@dataclass
class TrainResult:
    model: GaitModel
    class_subjects: list
    curves: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    checkpoint_path: str = ""
    curves_path: str = ""


def class_labels(records):
    subjects = sorted({record.subject for record in records}, key=subject_sort_key)
    index = {subject: position for position, subject in enumerate(subjects)}
    return subjects, np.array([index[record.subject] for record in records], dtype=np.int64)


def stratified_split(labels, fraction, rng):
    """Hold out ``round(fraction * n)`` clips of each identity, keeping at least one for training."""
    train_idx, val_idx = [], []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        members = members[rng.permutation(len(members))]
        count = min(int(round(fraction * len(members))), len(members) - 1)
        if fraction > 0 and len(members) > 1:
            count = max(count, 1)
        val_idx.extend(members[:count].tolist())
        train_idx.extend(members[count:].tolist())
    return sorted(train_idx), sorted(val_idx)


def balanced_batches(labels, batch_size, rng):
    """One epoch of index batches with identities drawn uniformly."""
    groups = [np.flatnonzero(labels == label) for label in np.unique(labels)]
    num_batches = max(1, math.ceil(len(labels) / batch_size))
    batches = []
    for _ in range(num_batches):
        picks = rng.choice(len(groups), size=batch_size, replace=len(groups) < batch_size)
        batches.append([int(groups[g][rng.integers(len(groups[g]))]) for g in picks])
    return batches


def _stack(records, indices):
    return np.stack([records[index].data for index in indices])


def _check_inputs(config, records):
    for record in records:
        if config.input_mode == "frames" and record.frames is None:
            raise ContractError(f"{record.name}: frame input mode needs frame clips")
        if config.input_mode == "features":
            if record.features is None or record.features.shape[1] != config.width:
                raise ContractError(f"{record.name}: feature input mode needs (T, {config.width}) features")
        if record.length != config.clip_length:
            raise ContractError(f"{record.name}: clip has {record.length} steps, expected {config.clip_length}")


def measure(model, records, indices, labels, batch_size):
    """Inference-mode loss and accuracy over ``indices``."""
    if not indices:
        return math.nan, math.nan
    losses, correct = [], 0
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        _, _, probs, _ = model.forward(_stack(records, chunk), training=False)
        losses.append(cross_entropy(probs, labels[chunk]) * len(chunk))
        correct += int(np.sum(np.argmax(probs, axis=1) == labels[chunk]))
    return float(np.sum(losses) / len(indices)), 100.0 * correct / len(indices)


def write_curves(rows, path):
    if not rows:
        return path
    columns = list(rows[0])
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\t".join(columns) + "\n")
        for row in rows:
            handle.write("\t".join(_cell(row[column]) for column in columns) + "\n")
    return path


def _cell(value):
    if isinstance(value, int):
        return str(value)
    return "nan" if math.isnan(value) else f"{value:.6f}"


def train(config, records, output_dir, test_records=None, protocol=None, checkpoint_name=CHECKPOINT_NAME):
    if len({record.subject for record in records}) < 2:
        raise ContractError("training needs at least two identities")
    _check_inputs(config, records)
    os.makedirs(output_dir, exist_ok=True)
    subjects, labels = class_labels(records)
    data_rng = split_rng(config.seed, "data")
    dropout_rng = split_rng(config.seed, "dropout")
    train_idx, val_idx = stratified_split(labels, config.val_fraction, data_rng)
    if not val_idx:
        logger.warning("no validation clips; scheduling on training loss")

    model = GaitModel(config, len(subjects))
    adam = AdamState(lr=config.lr)
    scheduler = SchedulerState(
        lr=config.lr,
        factor=config.lr_factor,
        plateau_patience=config.plateau_patience,
        stop_patience=config.stop_patience,
        min_lr=config.min_lr,
        threshold=config.plateau_threshold,
    )
    checkpoint_path = os.path.join(output_dir, checkpoint_name)
    curves_path = os.path.join(output_dir, CURVES_NAME)
    save_checkpoint(checkpoint_path, model, config, 0, subjects)
    result = TrainResult(model, subjects, checkpoint_path=checkpoint_path, curves_path=curves_path)
    best_state = model.state_dict()
    train_labels = labels[train_idx]
    logger.info(
        "training %s head: %d identities, %d train / %d validation clips, %d parameters",
        config.head,
        len(subjects),
        len(train_idx),
        len(val_idx),
        model.num_parameters(),
    )

    for epoch in range(1, config.max_epochs + 1):
        batch_losses = []
        try:
            for step, batch in enumerate(balanced_batches(train_labels, config.batch_size, data_rng)):
                indices = [train_idx[position] for position in batch]
                model.zero_grad()
                _, _, probs, cache = model.forward(_stack(records, indices), training=True, rng=dropout_rng)
                loss = cross_entropy(probs, labels[indices])
                if not math.isfinite(loss):
                    raise NumericalError(f"loss diverged at epoch {epoch}, batch {step}", where="loss", step=step)
                model.backward(cross_entropy_grad(probs, labels[indices]), cache)
                adam_step(model.parameter_dict(), model.gradient_dict(), adam)
                batch_losses.append(loss)
                logger.debug("epoch %d batch %d loss %.5f", epoch, step, loss)
            _, train_acc = measure(model, records, train_idx, labels, config.batch_size)
            val_loss, val_acc = measure(model, records, val_idx, labels, config.batch_size)
        except NumericalError as exc:
            logger.error("training aborted: %s; keeping %s", exc, checkpoint_path)
            model.load_state_dict(best_state)
            write_curves(result.curves, curves_path)
            raise

        train_loss = float(np.mean(batch_losses))
        monitored = val_loss if val_idx else train_loss
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_acc": train_acc,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": adam.lr,
        }
        if config.track_auc and test_records:
            try:
                tracked = condition_auc(model, test_records, protocol)
            except ProtocolError as exc:
                logger.warning("AUC tracking skipped at epoch %d: %s", epoch, exc)
                tracked = {}
            for name, (micro, macro) in tracked.items():
                row[f"auc_micro_{name}"] = micro
                row[f"auc_macro_{name}"] = macro
        result.curves.append(row)
        write_curves(result.curves, curves_path)
        logger.info(
            "epoch %d: train loss %.4f acc %.1f%%, val loss %.4f acc %.1f%%, lr %.2g",
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            adam.lr,
        )

        if monitored < result.best_val_loss:
            result.best_val_loss = monitored
            result.best_epoch = epoch
            best_state = model.state_dict()
            save_checkpoint(checkpoint_path, model, config, epoch, subjects)
        adam.lr, stop = scheduler_step(scheduler, monitored)
        if stop and epoch >= config.min_epochs:
            logger.info("early stop after epoch %d (best epoch %d)", epoch, result.best_epoch)
            result.stopped_early = True
            break

    model.load_state_dict(best_state)
    return result

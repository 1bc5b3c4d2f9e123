"""Training loop: pair sampling, mining, loss, SGD with a linear lr decay.

A run is fully determined by its RunConfig and seed: the pair list is drawn
once up front, every epoch walks a fresh permutation of it in class-unique
batches, and lr_t = lr0 * (1 - t/T) where t counts completed optimizer steps
and T is the total step count of the run.  Validation FPR95 on held-out
classes is logged once per epoch.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses as L
from .data import PairBatch, PatchStore, augment_pair_batch
from .metrics import fpr95
from .net import DescriptorNet, NetConfig, build_net, describe_patches, save_model
from .ops import NumericsError, sgd_step

PROFILES = {
    "strategy1": {"pairs_total": 200_000, "batch_size": 128, "epochs": 50},
    "strategy2": {"pairs_total": 5_000_000, "batch_size": 512, "epochs": 10},
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    pairs_total: int = 200_000
    batch_size: int = 128
    epochs: int = 50
    loss_variant: str = L.ROBUST
    similarity: str = L.COSINE
    margin: float = 1.0
    lr0: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = False
    val_fraction: float = 0.1
    seed: int = 0
    dropout_rate: float = 0.3

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.pairs_total < 1:
            raise ValueError(f"pairs_total must be >= 1, got {self.pairs_total}")
        if self.loss_variant not in L.LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.similarity not in L.SIMILARITY_KINDS:
            raise ValueError(f"unknown similarity kind {self.similarity!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0,1), got {self.val_fraction}")

    def with_profile(self, name: str) -> "RunConfig":
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}; have {sorted(PROFILES)}")
        return replace(self, **PROFILES[name])


def linear_lr(lr0: float, step: int, total_steps: int) -> float:
    return lr0 * (1.0 - step / total_steps)


@contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS to one thread so reduction order is fixed across runs."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# deterministic pair/batch plumbing


def split_classes(store: PatchStore, val_fraction: float, rng: np.random.Generator):
    """Shuffled class split; returns (train class ids, val class ids)."""
    classes = store.pairable_classes()
    order = rng.permutation(len(classes))
    n_val = int(round(val_fraction * len(classes)))
    if val_fraction > 0 and len(classes) - n_val < 2:
        raise ValueError(f"not enough classes ({len(classes)}) to hold out {n_val}")
    return classes[order[n_val:]], classes[order[:n_val]]


def build_pair_list(store: PatchStore, class_ids: np.ndarray, pairs_total: int,
                    rng: np.random.Generator):
    """Ordered (anchor_idx, pos_idx, class_id) triples drawn once per run.

    Classes are cycled in shuffled rounds, so a run with pairs_total equal to
    the class count touches every class exactly once.
    """
    if len(class_ids) == 0:
        raise ValueError("no classes with >= 2 patches to sample pairs from")
    by = store.indices_by_class()
    anchors = np.empty(pairs_total, dtype=np.int64)
    positives = np.empty(pairs_total, dtype=np.int64)
    labels = np.empty(pairs_total, dtype=np.int64)
    k = 0
    while k < pairs_total:
        round_classes = rng.permutation(class_ids)[:pairs_total - k]
        for c in round_classes:
            pick = rng.choice(by[int(c)], size=2, replace=False)
            anchors[k], positives[k] = pick
            labels[k] = c
            k += 1
    return anchors, positives, labels


def _epoch_batches(labels: np.ndarray, order: np.ndarray, batch_size: int):
    """Split a permuted pair list into class-unique batches.

    Each window of batch_size pairs keeps the first pair of every class;
    windows that end up smaller than 2 are dropped (BN needs a real batch).
    """
    batches = []
    for start in range(0, len(order), batch_size):
        window = order[start:start + batch_size]
        _, first = np.unique(labels[window], return_index=True)
        batch = window[np.sort(first)]
        if len(batch) >= 2:
            batches.append(batch)
    return batches


def _make_validation_pairs(store: PatchStore, val_classes: np.ndarray,
                           rng: np.random.Generator):
    """One matched pair per held-out class plus an equal number of
    cross-class non-matches: (idx_a, idx_b, is_match)."""
    by = store.indices_by_class()
    usable = [c for c in val_classes if len(by[int(c)]) >= 2]
    if len(usable) < 2:
        raise ValueError("validation needs >= 2 held-out classes with >= 2 patches")
    first, second, match = [], [], []
    for c in usable:
        pick = rng.choice(by[int(c)], size=2, replace=False)
        first.append(pick[0])
        second.append(pick[1])
        match.append(True)
    for _ in usable:
        ca, cb = rng.choice(usable, size=2, replace=False)
        first.append(int(rng.choice(by[int(ca)])))
        second.append(int(rng.choice(by[int(cb)])))
        match.append(False)
    return np.asarray(first), np.asarray(second), np.asarray(match, dtype=bool)


def validation_fpr95(net: DescriptorNet, store: PatchStore, val_pairs) -> float:
    first, second, match = val_pairs
    used = np.unique(np.concatenate([first, second]))
    remap = {int(p): i for i, p in enumerate(used)}
    desc = describe_patches(net, store.patches[used])
    scores = (desc[[remap[int(p)] for p in first]]
              * desc[[remap[int(p)] for p in second]]).sum(axis=1)
    value, _ = fpr95(scores, match)
    return value


# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: DescriptorNet
    initial_fpr95: float | None
    final_fpr95: float | None
    steps: int
    epoch_fpr95: list = field(default_factory=list)
    final_loss: float = float("nan")


def train(store: PatchStore, config: RunConfig, log=None,
          net_config: NetConfig | None = None) -> TrainResult:
    """Run the full training loop; ``log`` receives CSV lines when given."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    seeds = root.spawn(5)
    split_rng = np.random.default_rng(seeds[0])
    pair_rng = np.random.default_rng(seeds[1])
    epoch_root = seeds[2]
    aug_rng = np.random.default_rng(seeds[3])
    dropout_rng = np.random.default_rng(seeds[4])

    if net_config is None:
        net_config = NetConfig(seed=config.seed, dropout_rate=config.dropout_rate)
    net = build_net(net_config)

    train_classes, val_classes = split_classes(store, config.val_fraction, split_rng)
    anchors, positives, labels = build_pair_list(store, train_classes,
                                                 config.pairs_total, pair_rng)

    val_pairs = None
    if config.val_fraction > 0:
        val_pairs = _make_validation_pairs(store, val_classes, split_rng)

    # Epoch batch layouts are a pure function of the spawned epoch seeds, so
    # they can be regenerated: one pass to learn T for the lr schedule, a
    # second pass while training (avoids holding every permutation at once).
    epoch_seeds = epoch_root.spawn(config.epochs)

    def layout(epoch_index: int):
        order = np.random.default_rng(epoch_seeds[epoch_index]).permutation(
            config.pairs_total)
        return _epoch_batches(labels, order, config.batch_size)

    total_steps = sum(len(layout(e)) for e in range(config.epochs))
    if total_steps == 0:
        raise ValueError("config yields zero optimizer steps")

    def emit(step, epoch, lr, loss_val, val):
        if log is None:
            return
        loss_txt = f"{loss_val:.8f}" if loss_val == loss_val else ""
        val_txt = f"{val:.6f}" if val is not None else ""
        log.write(f"{step},{epoch},{lr:.8g},{loss_txt},{val_txt}\n")

    if log is not None:
        log.write("step,epoch,lr,loss,val_fpr95\n")
    initial = validation_fpr95(net, store, val_pairs) if val_pairs else None
    emit(0, 0, config.lr0, float("nan"), initial)

    step = 0
    loss_val = float("nan")
    epoch_vals = []
    for epoch, batches in enumerate(epoch_layouts, start=1):
        for batch_idx in batches:
            pair = PairBatch(store.patches[anchors[batch_idx]].copy(),
                             store.patches[positives[batch_idx]].copy(),
                             labels[batch_idx])
            if config.augment:
                pair = augment_pair_batch(pair, aug_rng)
            stacked = np.concatenate([pair.anchors, pair.positives])[:, None, :, :]
            out = net.forward(stacked.astype(np.float32), train=True, rng=dropout_rng)
            desc_a, desc_p = out[:len(pair.anchors)], out[len(pair.anchors):]

            sim = L.similarity_matrix(desc_a, desc_p, config.similarity)
            sel = L.mine_hard_negatives(sim)
            loss_val, d_pos, d_neg = L.compute_loss(config.loss_variant, sel,
                                                    config.margin)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            grad_a, grad_p = L.loss_backward_to_descriptors(sim, sel, d_pos, d_neg)

            net.zero_grad()
            net.backward(np.concatenate([grad_a, grad_p]).astype(np.float32))
            lr = linear_lr(config.lr0, step, total_steps)
            try:
                sgd_step(net.params(), lr, config.momentum, config.weight_decay)
            except NumericsError as e:
                raise TrainingDiverged(f"{e} at step {step}") from e
            step += 1
            is_epoch_end = batch_idx is batches[-1]
            val = None
            if is_epoch_end and val_pairs:
                val = validation_fpr95(net, store, val_pairs)
                epoch_vals.append(val)
            emit(step, epoch, lr, loss_val, val)

    final = epoch_vals[-1] if epoch_vals else None
    return TrainResult(net, initial, final, step, epoch_vals, loss_val)


def train_to_files(store: PatchStore, config: RunConfig, model_path: str,
                   log_path: str | None, net_config: NetConfig | None = None) -> TrainResult:
    if log_path:
        with open(log_path, "w", newline="") as log:
            result = train(store, config, log=log, net_config=net_config)
    else:
        result = train(store, config, net_config=net_config)
    save_model(result.net, model_path)
    return result

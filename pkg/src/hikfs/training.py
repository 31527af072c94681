"""Supervised pretrain/fine-tune, episodic meta-training, and evaluators."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, model_inputs
from .hierarchy import (
    ClassHierarchy,
    coarse_probs,
    hierarchical_nll,
    marginal_fine_probs,
)
from .memory import (
    MEMORY_MODES,
    METRICS,
    MemoryBank,
    bank_slot_list,
    coarse_slot_union,
    end_of_epoch_refresh,
    knn_logits,
    seed_supervised_memory,
    slot_similarities,
    task_slot_tensors,
    update_on_sample,
    update_utility,
)
from .model import EncoderConfig, ModelParams, forward_full, head_plan
from .optim import SGD, Adam, make_schedule
from .seeding import derive_rng, derive_seed_list

SETTINGS = ("supervised", "meta")


@dataclass
class TrainConfig:
    """Everything a training or evaluation run needs besides the data.

    Unset optimizer/schedule/metric fields resolve to per-setting defaults:
    SGD + cosine + cosine-similarity scoring for supervised runs, Adam +
    halving + negative-distance scoring for meta runs.
    """

    setting: str = "supervised"
    epochs: int = 5
    finetune_epochs: int = 2
    iterations: int = 1000
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str | None = None
    schedule: str | None = None
    # memory
    slots_per_class: int = 12
    refresh_clusters: int = 3
    merge_rate: float = 0.95
    utility_up: float = 1.05
    utility_down: float = 0.95
    top_k: int = 1
    metric: str | None = None
    memory_mode: str = "mem3"
    # episodes
    way: int = 5
    shot: int = 5
    queries: int = 5
    eval_episodes: int = 600
    # ablations
    use_hierarchy: bool = True
    use_attention: bool = True
    use_mlp: bool = True
    use_knn: bool = True
    encoder: EncoderConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        if self.optimizer is None:
            self.optimizer = "sgd" if self.setting == "supervised" else "adam"
        if self.schedule is None:
            self.schedule = ("cosine" if self.setting == "supervised"
                             else "halving")
        if self.metric is None:
            self.metric = ("dot_cosine" if self.setting == "supervised"
                           else "neg_euclidean")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.memory_mode not in MEMORY_MODES:
            raise ValueError(f"memory_mode must be one of {MEMORY_MODES}")
        if not 0.0 < self.merge_rate < 1.0:
            raise ValueError("merge_rate must lie in (0, 1)")
        if not 1.0 < self.utility_up < 2.0:
            raise ValueError("utility_up must lie in (1, 2)")
        if not 0.0 < self.utility_down < 1.0:
            raise ValueError("utility_down must lie in (0, 1)")
        if not 1 <= self.refresh_clusters <= self.slots_per_class:
            raise ValueError("refresh_clusters must lie in "
                             "[1, slots_per_class]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.shot < 1 or self.queries < 1:
            raise ValueError("shot and queries must be >= 1")
        if self.way < 2:
            raise ValueError("way must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if min(self.epochs, self.finetune_epochs, self.iterations) < 0:
            raise ValueError("epoch and iteration counts must be >= 0")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")


def effective_hierarchy(ds: Dataset, use_hierarchy: bool) -> ClassHierarchy:
    """The dataset hierarchy, or its single-coarse collapse when disabled."""
    if use_hierarchy:
        return ds.hierarchy
    return ClassHierarchy.single_coarse(ds.hierarchy.num_fine)


def _check_trainable(ds: Dataset) -> None:
    if ds.split_tag == "test":
        raise ValueError("refusing to train on test-tagged data")
    if len(ds) == 0:
        raise ValueError("empty dataset")


def _scalar_seed(master_seed: int, *names) -> int:
    return int(derive_rng(master_seed, *names).integers(0, 2 ** 63))


def default_encoder(cfg: TrainConfig, ds: Dataset) -> EncoderConfig:
    if cfg.encoder is not None:
        return cfg.encoder
    if ds.is_image:
        h, w = ds.image_shape
        if h != w:
            raise ValueError("default image encoder needs square rasters")
        return EncoderConfig.conv4(image_size=h)
    return EncoderConfig.mlp(ds.feature_dim)


def build_params(cfg: TrainConfig, ds: Dataset) -> ModelParams:
    hier = effective_hierarchy(ds, cfg.use_hierarchy)
    return ModelParams(default_encoder(cfg, ds), hier.num_fine,
                       hier.num_coarse, setting=cfg.setting,
                       attention=cfg.use_attention,
                       rng=derive_rng(cfg.seed, "init"))


def _make_optimizer(cfg: TrainConfig, tensors: dict):
    if cfg.optimizer == "adam":
        return Adam(tensors, weight_decay=cfg.weight_decay)
    return SGD(tensors, momentum=cfg.momentum,
               weight_decay=cfg.weight_decay)


def _emit(log, line: str) -> None:
    if log is not None:
        log(line)


def _batch_accuracy(a: Tensor, b: Tensor, y_local: np.ndarray,
                    hier: ClassHierarchy) -> float:
    with ad.no_grad():
        probs = marginal_fine_probs(Tensor(a.data.copy()),
                                    Tensor(b.data.copy()), hier)
    return float(np.mean(np.argmax(probs.data, axis=1) == y_local))


def _log_line(it: int, loss: float, acc: float, lr: float) -> str:
    return f"iter={it} loss={loss:.17g} acc={acc:.4f} lr={lr:.6g}"


def pretrain_supervised(cfg: TrainConfig, ds: Dataset,
                        params: ModelParams | None = None,
                        log=None) -> ModelParams:
    """Mini-batch training of encoder + both linear heads on the summed
    coarse and fine cross-entropies. Scoring memory plays no part here."""
    if cfg.setting != "supervised":
        raise ValueError("pretraining applies to the supervised setting")
    _check_trainable(ds)
    hier = effective_hierarchy(ds, cfg.use_hierarchy)
    if params is None:
        params = build_params(cfg, ds)
    plan = head_plan("supervised", use_mlp=True, use_knn=False)
    n = len(ds)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = max(1, cfg.epochs * steps_per_epoch)
    schedule = make_schedule(cfg.schedule, cfg.lr, total)
    opt = _make_optimizer(cfg, params.named_tensors(
        ("encoder.", "fine_mlp.", "coarse_mlp.")))
    rng = derive_rng(cfg.seed, "data")
    it = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = model_inputs(ds, idx)
            y = ds.fine_labels[idx]
            a, b = forward_full(params, x, plan=plan)
            loss = hierarchical_nll(a, b, y, hier)
            lr_t = schedule(it)
            loss_val = float(loss.data)
            acc = _batch_accuracy(a, b, y, hier)
            loss.backward()
            opt.step(lr_t)
            _emit(log, _log_line(it, loss_val, acc, lr_t))
            it += 1
    return params


def seed_memory_from_params(cfg: TrainConfig, params: ModelParams,
                            ds: Dataset) -> MemoryBank:
    """Cluster each class's encoded training features into the initial slots."""
    feats = encode_dataset(params, ds)
    return seed_supervised_memory(feats, ds.fine_labels,
                                  ds.hierarchy.num_fine, cfg.slots_per_class,
                                  metric=cfg.metric, k=cfg.top_k,
                                  seed=_scalar_seed(cfg.seed, "kmeans",
                                                    "seed-memory"))


def encode_dataset(params: ModelParams, ds: Dataset,
                   chunk: int = 256) -> np.ndarray:
    """Detached encoded features for every item, in dataset order."""
    out = []
    with ad.no_grad():
        for start in range(0, len(ds), chunk):
            idx = np.arange(start, min(start + chunk, len(ds)))
            out.append(params.encode(model_inputs(ds, idx)).data)
    return np.concatenate(out) if out else np.zeros((0, 0))


def _memory_updates(bank: MemoryBank, cfg: TrainConfig, params: ModelParams,
                    x: np.ndarray, y: np.ndarray) -> None:
    """Post-step slot merges, miss caching, and utility scaling, sample by
    sample in batch order; each sample sees the bank its predecessors left."""
    g, h = params.transform_query, params.transform_slots
    with ad.no_grad():
        feats = params.encode(x).data
        for i in range(len(y)):
            j = int(y[i])
            query = feats[i:i + 1]
            logits = knn_logits(query, bank_slot_list(bank), g, h,
                                bank.metric, bank.k).data
            y_pred = int(np.argmax(logits[0]))
            sims = slot_similarities(query, bank.live_slots(j), g, h,
                                     bank.metric).data[0]
            k_eff = min(bank.k, sims.shape[0])
            hits = np.argsort(-sims, kind="stable")[:k_eff]
            update_on_sample(bank, feats[i], j, y_pred,
                             int(np.argmax(sims)), cfg.merge_rate)
            update_utility(bank, j, hits, y_pred == j,
                           cfg.utility_up, cfg.utility_down)


def finetune_supervised(cfg: TrainConfig, params: ModelParams, ds: Dataset,
                        bank: MemoryBank | None = None, log=None):
    """Train only the scoring transforms with the class memory in the loop.

    Encoder and both linear heads stay bitwise frozen. After each step the
    batch is replayed through the memory life-cycle (merge / cache / utility),
    and each epoch ends by refreshing low-utility slots from the miss cache.
    Returns (params, bank).
    """
    if cfg.setting != "supervised":
        raise ValueError("fine-tuning applies to the supervised setting")
    if not cfg.use_knn:
        raise ValueError("fine-tuning trains the scoring transforms; "
                         "it needs the KNN head enabled")
    _check_trainable(ds)
    hier = effective_hierarchy(ds, cfg.use_hierarchy)
    if bank is None:
        bank = seed_memory_from_params(cfg, params, ds)
    bank.check_seeded()
    plan = head_plan("supervised", use_mlp=cfg.use_mlp, use_knn=True)
    n = len(ds)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = max(1, cfg.finetune_epochs * steps_per_epoch)
    schedule = make_schedule(cfg.schedule, cfg.lr, total)
    trainables = params.named_tensors(("attn_g.", "attn_h."))
    opt = _make_optimizer(cfg, trainables) if trainables else None
    frozen = ("encoder.", "fine_mlp.", "coarse_mlp.")
    params.set_trainable(frozen, False)
    rng = derive_rng(cfg.seed, "data", "finetune")
    it = 0
    try:
        for epoch in range(cfg.finetune_epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x = model_inputs(ds, idx)
                y = ds.fine_labels[idx]
                lr_t = schedule(it)
                if opt is not None:
                    a, b = forward_full(params, x, plan=plan,
                                        fine_slots=bank_slot_list(bank),
                                        k=cfg.top_k, metric=cfg.metric)
                    loss = hierarchical_nll(a, b, y, hier)
                    loss_val = float(loss.data)
                    acc = _batch_accuracy(a, b, y, hier)
                    loss.backward()
                    opt.step(lr_t)
                else:
                    with ad.no_grad():
                        a, b = forward_full(params, x, plan=plan,
                                            fine_slots=bank_slot_list(bank),
                                            k=cfg.top_k, metric=cfg.metric)
                        loss_val = float(hierarchical_nll(a, b, y, hier).data)
                    acc = _batch_accuracy(a, b, y, hier)
                _memory_updates(bank, cfg, params, x, y)
                _emit(log, _log_line(it, loss_val, acc, lr_t))
                it += 1
            end_of_epoch_refresh(
                bank, cfg.refresh_clusters,
                seed=_scalar_seed(cfg.seed, "kmeans", f"refresh{epoch}"))
    finally:
        params.set_trainable(frozen, True)
    return params, bank


class EpisodeSpec(NamedTuple):
    task_classes: np.ndarray  # global fine ids, in draw order
    support_idx: list         # per task class, (shot,) item indices
    query_idx: list           # per task class, (queries,) item indices


def sample_task(rng, fine_class_pool, n_way: int, n_s: int, n_q: int,
                ds: Dataset) -> EpisodeSpec:
    """Draw an N-way task: classes without replacement, then disjoint
    support and query items per class (support drawn first)."""
    pool = np.asarray(fine_class_pool, dtype=np.intp)
    if pool.size < n_way:
        raise ValueError(f"pool has {pool.size} classes, task needs {n_way}")
    classes = rng.choice(pool, size=n_way, replace=False)
    support_idx, query_idx = [], []
    for j in classes:
        idx = np.flatnonzero(ds.fine_labels == j)
        if idx.size < n_s + n_q:
            raise ValueError(
                f"class '{ds.fine_names[int(j)]}' has {idx.size} samples, "
                f"needs {n_s + n_q}")
        drawn = rng.choice(idx, size=n_s + n_q, replace=False)
        support_idx.append(drawn[:n_s])
        query_idx.append(drawn[n_s:])
    return EpisodeSpec(np.asarray(classes, dtype=np.intp), support_idx,
                       query_idx)


def _episode_tensors(params: ModelParams, ds: Dataset, spec: EpisodeSpec,
                     cfg: TrainConfig, hier: ClassHierarchy, on_tape: bool):
    """Encoded support slots, query batch, and the task-local hierarchy."""
    local_hier, fine_ids, coarse_ids = hier.restrict(spec.task_classes)
    n_way = len(spec.task_classes)
    sup_idx = np.concatenate(spec.support_idx)
    x_sup = model_inputs(ds, sup_idx)
    sup_feats = params.encode(x_sup)
    if not on_tape:
        sup_feats = Tensor(sup_feats.data)
    per_class = [ad.take_rows(sup_feats,
                              np.arange(c * cfg.shot, (c + 1) * cfg.shot))
                 for c in range(n_way)]
    fine_slots = task_slot_tensors(per_class, cfg.memory_mode)
    coarse_slots = coarse_slot_union(fine_slots, local_hier.parent,
                                     local_hier.num_coarse)
    q_idx = np.concatenate(spec.query_idx)
    x_q = model_inputs(ds, q_idx)
    y_local = np.repeat(np.arange(n_way), cfg.queries)
    return (local_hier, fine_ids, coarse_ids, fine_slots, coarse_slots,
            x_q, y_local)


def train_meta(cfg: TrainConfig, ds: Dataset,
               params: ModelParams | None = None, log=None) -> ModelParams:
    """Episodic training: every iteration draws a fresh task, builds its
    memory from encoded support (kept on the tape so the loss reaches the
    encoder through the slots), and takes one optimizer step on the query
    batch. Episode memory is discarded afterwards."""
    if cfg.setting != "meta":
        raise ValueError("train_meta applies to the meta setting")
    _check_trainable(ds)
    hier = effective_hierarchy(ds, cfg.use_hierarchy)
    if params is None:
        params = build_params(cfg, ds)
    plan = head_plan("meta", use_mlp=cfg.use_mlp, use_knn=cfg.use_knn)
    used = set(plan.fine_parts) | set(plan.coarse_parts)
    prefixes = ["encoder."]
    if "knn" in used and cfg.use_attention:
        prefixes += ["attn_g.", "attn_h."]
    if "mlp" in plan.fine_parts:
        prefixes.append("fine_mlp.")
    if "mlp" in plan.coarse_parts:
        prefixes.append("coarse_mlp.")
    opt = _make_optimizer(cfg, params.named_tensors(tuple(prefixes)))
    schedule = make_schedule(cfg.schedule, cfg.lr, max(1, cfg.iterations))
    pool = ds.present_classes()
    rng = derive_rng(cfg.seed, "episodes", "train")
    for it in range(cfg.iterations):
        spec = sample_task(rng, pool, cfg.way, cfg.shot, cfg.queries, ds)
        (local_hier, fine_ids, coarse_ids, fine_slots, coarse_slots,
         x_q, y_local) = _episode_tensors(params, ds, spec, cfg, hier,
                                          on_tape=True)
        a, b = forward_full(params, x_q, plan=plan, fine_slots=fine_slots,
                            coarse_slots=coarse_slots, k=cfg.top_k,
                            metric=cfg.metric, fine_ids=fine_ids,
                            coarse_ids=coarse_ids)
        loss = hierarchical_nll(a, b, y_local, local_hier)
        lr_t = schedule(it)
        loss_val = float(loss.data)
        acc = _batch_accuracy(a, b, y_local, local_hier)
        loss.backward()
        opt.step(lr_t)
        _emit(log, _log_line(it, loss_val, acc, lr_t))
    return params


class EvalResult(NamedTuple):
    mean_acc: float
    ci95: float
    accuracies: np.ndarray


def _run_episode(params: ModelParams, ds: Dataset, cfg: TrainConfig,
                 hier: ClassHierarchy, plan, pool, ep_seed) -> float:
    rng = np.random.default_rng(ep_seed)
    spec = sample_task(rng, pool, cfg.way, cfg.shot, cfg.queries, ds)
    with ad.no_grad():
        (local_hier, fine_ids, coarse_ids, fine_slots, coarse_slots,
         x_q, y_local) = _episode_tensors(params, ds, spec, cfg, hier,
                                          on_tape=False)
        a, b = forward_full(params, x_q, plan=plan, fine_slots=fine_slots,
                            coarse_slots=coarse_slots, k=cfg.top_k,
                            metric=cfg.metric, fine_ids=fine_ids,
                            coarse_ids=coarse_ids)
        probs = marginal_fine_probs(a, b, local_hier)
    return float(np.mean(np.argmax(probs.data, axis=1) == y_local))


def evaluate_episodes(params: ModelParams, ds: Dataset, cfg: TrainConfig,
                      n_episodes: int | None = None, seed: int | None = None,
                      workers: int = 1) -> EvalResult:
    """Mean episode accuracy with its 95% interval (1.96 * sd / sqrt(n)).

    Episode i draws from its own seed stream, so results do not depend on
    worker count or scheduling; accuracies are reduced in episode order.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    n = cfg.eval_episodes if n_episodes is None else n_episodes
    if n < 1:
        raise ValueError("need at least one episode")
    seed = cfg.seed if seed is None else seed
    hier = effective_hierarchy(ds, cfg.use_hierarchy)
    plan = head_plan("meta", use_mlp=cfg.use_mlp, use_knn=cfg.use_knn)
    pool = ds.present_classes()
    base = derive_seed_list(seed, "episodes")
    ep_seeds = [base + [i] for i in range(n)]

    def one(ep_seed):
        return _run_episode(params, ds, cfg, hier, plan, pool, ep_seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            accs = np.array(list(pool_exec.map(one, ep_seeds)))
    else:
        accs = np.array([one(s) for s in ep_seeds])
    mean = float(np.mean(accs))
    ci = 0.0 if n == 1 else float(1.96 * np.std(accs, ddof=1) / math.sqrt(n))
    return EvalResult(mean, ci, accs)


def evaluate_supervised(params: ModelParams, bank: MemoryBank | None,
                        ds: Dataset, cfg: TrainConfig, chunk: int = 256):
    """Fine accuracy by marginal argmax, with coarse accuracy alongside."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    hier = effective_hierarchy(ds, cfg.use_hierarchy)
    plan = head_plan("supervised", use_mlp=cfg.use_mlp, use_knn=cfg.use_knn)
    slots = None
    if "knn" in plan.fine_parts:
        if bank is None:
            raise ValueError("the KNN head needs a seeded memory bank")
        slots = bank_slot_list(bank)
    fine_hits = 0
    coarse_hits = 0
    with ad.no_grad():
        for start in range(0, len(ds), chunk):
            idx = np.arange(start, min(start + chunk, len(ds)))
            x = model_inputs(ds, idx)
            a, b = forward_full(params, x, plan=plan, fine_slots=slots,
                                k=cfg.top_k, metric=cfg.metric)
            probs = marginal_fine_probs(a, b, hier)
            pred = np.argmax(probs.data, axis=1)
            fine_hits += int(np.sum(pred == ds.fine_labels[idx]))
            zprobs = coarse_probs(b)
            zpred = np.argmax(zprobs.data, axis=1)
            ztrue = hier.fine_to_coarse(ds.fine_labels[idx])
            coarse_hits += int(np.sum(zpred == ztrue))
    return fine_hits / len(ds), coarse_hits / len(ds)

"""Per-class slot memory for attention-KNN classification.

Each class owns up to ``m`` feature slots plus a utility score per slot.
Queries are scored against slots through a pair of transforms (one for the
query, one for the slot) under either a cosine or a negative-Euclidean
similarity; a class's logit is the sum of its top-K slot similarities.

Life-cycle knobs mirror the update rules used during supervised fine-tuning:
correct predictions merge the feature into the nearest slot of the true
class, wrong predictions append it to a per-class cache, utilities of the
hit slots multiply up or down, and an end-of-epoch refresh replaces the
lowest-utility slots with k-means centroids of the cache.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

METRICS = ("dot_cosine", "neg_euclidean")
MEMORY_MODES = ("mem1", "mem2", "mem3")


def _identity(t):
    return ad.as_tensor(t)


class MemoryBank:
    """Fixed-capacity per-class slot store with utilities and a miss cache."""

    def __init__(self, num_classes: int, slots_per_class: int, dim: int,
                 metric: str = "dot_cosine", k: int = 1):
        if num_classes < 1 or slots_per_class < 1 or dim < 1:
            raise ValueError("num_classes, slots_per_class and dim must be >= 1")
        if metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got '{metric}'")
        if k < 1:
            raise ValueError("k must be >= 1")
        self.num_classes = int(num_classes)
        self.slots_per_class = int(slots_per_class)
        self.dim = int(dim)
        self.metric = metric
        self.k = int(k)
        self.M = np.zeros((num_classes, slots_per_class, dim))
        self.U = np.ones((num_classes, slots_per_class))
        self.occupancy = np.zeros(num_classes, dtype=np.intp)
        self.cache = [[] for _ in range(num_classes)]

    def live_slots(self, j: int) -> np.ndarray:
        self._check_class(j)
        return self.M[j, :self.occupancy[j]]

    def set_class_slots(self, j: int, slots: np.ndarray):
        self._check_class(j)
        slots = np.asarray(slots, dtype=np.float64)
        if slots.ndim != 2 or slots.shape[1] != self.dim:
            raise ValueError(f"slots for class {j} must be (n, {self.dim})")
        if slots.shape[0] < 1 or slots.shape[0] > self.slots_per_class:
            raise ValueError(
                f"class {j}: {slots.shape[0]} slots outside [1, {self.slots_per_class}]")
        if self.metric == "dot_cosine" and np.any((slots ** 2).sum(axis=1) == 0.0):
            raise ValueError(f"class {j}: zero-vector slot is invalid under dot_cosine")
        n = slots.shape[0]
        self.M[j, :n] = slots
        self.M[j, n:] = 0.0
        self.U[j, :] = 1.0
        self.occupancy[j] = n

    def _check_class(self, j: int):
        if not 0 <= j < self.num_classes:
            raise IndexError(f"class id {j} out of range [0, {self.num_classes})")

    def check_seeded(self):
        empty = np.flatnonzero(self.occupancy == 0)
        if empty.size:
            raise RuntimeError(f"memory not seeded: classes {empty.tolist()} have no slots")

    def state_arrays(self) -> dict:
        """Snapshot for the checkpoint container (cache is transient, not saved)."""
        return {
            "memory.M": self.M.copy(),
            "memory.U": self.U.copy(),
            "memory.occupancy": self.occupancy.astype(np.float64),
            "memory.metric_code": np.float64(METRICS.index(self.metric)),
            "memory.k": np.float64(self.k),
        }

    @classmethod
    def from_state_arrays(cls, arrays: dict) -> "MemoryBank":
        m = np.asarray(arrays["memory.M"], dtype=np.float64)
        if m.ndim != 3:
            raise ValueError("memory.M must have shape (classes, slots, dim)")
        bank = cls(m.shape[0], m.shape[1], m.shape[2],
                   metric=METRICS[int(arrays["memory.metric_code"])],
                   k=int(arrays["memory.k"]))
        bank.M[...] = m
        bank.U[...] = np.asarray(arrays["memory.U"], dtype=np.float64)
        bank.occupancy[...] = np.asarray(arrays["memory.occupancy"]).astype(np.intp)
        if np.any(bank.U <= 0.0):
            raise ValueError("utilities must stay strictly positive")
        return bank


def slot_similarities(query, slots, transform_query=None, transform_slots=None,
                      metric: str = "dot_cosine") -> Tensor:
    """Similarity of each query row to each slot row: (B,d),(n,d) -> (B,n).

    dot_cosine is the cosine of the transformed vectors; neg_euclidean is
    minus their Euclidean distance. Transforms default to identity.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got '{metric}'")
    g = transform_query or _identity
    h = transform_slots or _identity
    q = g(ad.as_tensor(query))
    s = h(ad.as_tensor(slots))
    if metric == "dot_cosine":
        return ad.matmul(ad.l2_normalize(q), _transpose(ad.l2_normalize(s)))
    return ad.neg(ad.pairwise_dist(q, s))


def _transpose(t: Tensor) -> Tensor:
    data = t.data.T

    def backward(g):
        ad._acc(t, g.T)

    return ad._from_op(data, (t,), backward)


def slot_score(query_vec, slot_vec, transform_query=None, transform_slots=None,
               metric: str = "dot_cosine") -> float:
    """Similarity of one query vector to one slot vector."""
    q = np.asarray(query_vec, dtype=np.float64)[None, :]
    s = np.asarray(slot_vec, dtype=np.float64)[None, :]
    with ad.no_grad():
        return float(slot_similarities(q, s, transform_query, transform_slots, metric).data[0, 0])


def knn_logits(query, slots_by_class, transform_query=None, transform_slots=None,
               metric: str = "dot_cosine", k: int = 1) -> Tensor:
    """Class logits as top-K sums of slot similarities: (B,d) -> (B,C).

    ``slots_by_class`` is a sequence of per-class slot matrices (arrays or
    tensors); K is clamped to each class's live slot count. The query
    transform is applied once, the slot transform once per class.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    g = transform_query or _identity
    h = transform_slots or _identity
    q = g(ad.as_tensor(query))
    if metric == "dot_cosine":
        q = ad.l2_normalize(q)
    cols = []
    for slots in slots_by_class:
        s = h(ad.as_tensor(slots))
        if metric == "dot_cosine":
            sims = ad.matmul(q, _transpose(ad.l2_normalize(s)))
        elif metric == "neg_euclidean":
            sims = ad.neg(ad.pairwise_dist(q, s))
        else:
            raise ValueError(f"metric must be one of {METRICS}, got '{metric}'")
        cols.append(ad.topk_sum_rows(sims, k))
    return ad.stack_cols(cols)


def bank_slot_list(bank: MemoryBank) -> list:
    """Live slots of every class, in class order."""
    bank.check_seeded()
    return [bank.live_slots(j).copy() for j in range(bank.num_classes)]


def knn_probs(query, bank: MemoryBank, transform_query=None, transform_slots=None) -> Tensor:
    """Softmax over the bank's class logits for each query row."""
    logits = knn_logits(query, bank_slot_list(bank), transform_query,
                        transform_slots, bank.metric, bank.k)
    return ad.softmax_rows(logits)


def update_on_sample(bank: MemoryBank, feature, y_true: int, y_pred: int,
                     nearest_slot: int, gamma: float):
    """Merge into the nearest true-class slot when correct, else cache the miss.

    The merge is exactly new = gamma*old + (1-gamma)*feature. Features are
    stored as detached copies; no gradient flows through the bank.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly inside (0, 1)")
    bank._check_class(y_true)
    f = np.array(feature.data if isinstance(feature, Tensor) else feature,
                 dtype=np.float64, copy=True)
    if f.shape != (bank.dim,):
        raise ValueError(f"feature must have shape ({bank.dim},)")
    if y_pred == y_true:
        if not 0 <= nearest_slot < bank.occupancy[y_true]:
            raise IndexError(
                f"slot {nearest_slot} is not live for class {y_true}")
        bank.M[y_true, nearest_slot] = (
            gamma * bank.M[y_true, nearest_slot] + (1.0 - gamma) * f)
    else:
        bank.cache[y_true].append(f)


def update_utility(bank: MemoryBank, j: int, hit_slots, correct: bool,
                   mu: float, eta: float):
    """Scale utilities of the hit slots: *mu when correct, *eta when wrong."""
    if not 1.0 < mu < 2.0:
        raise ValueError("mu must lie strictly inside (1, 2)")
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie strictly inside (0, 1)")
    bank._check_class(j)
    hits = np.atleast_1d(np.asarray(hit_slots, dtype=np.intp))
    if hits.size == 0:
        raise ValueError("need at least one hit slot")
    if hits.min() < 0 or hits.max() >= bank.occupancy[j]:
        raise IndexError(f"hit slots {hits.tolist()} not live for class {j}")
    bank.U[j, hits] *= mu if correct else eta


def kmeans(points, r: int, seed, max_iters: int = 100) -> np.ndarray:
    """Deterministic k-means: farthest-first init, Lloyd's to a fixed point.

    With at most r points the points themselves come back unchanged. Seeding
    only chooses the first center; every later choice breaks ties toward the
    lower index. Empty clusters are re-seeded with the point farthest from
    its assigned centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    if r < 1:
        raise ValueError("r must be >= 1")
    n = pts.shape[0]
    if n <= r:
        return pts.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < r:
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    centers = pts[chosen].copy()

    assign = None
    for _ in range(max_iters):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        moved = np.zeros(n, dtype=bool)
        for c in range(r):
            if not np.any(new_assign == c):
                own = np.where(moved, -np.inf, dist[np.arange(n), new_assign])
                idx = int(np.argmax(own))
                new_assign[idx] = c
                moved[idx] = True
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(r):
            members = pts[assign == c]
            if members.shape[0]:
                centers[c] = members.mean(axis=0)
    return centers


def end_of_epoch_refresh(bank: MemoryBank, r: int, seed: int):
    """Fold each class's miss cache back into its lowest-utility slots.

    Per class with a non-empty cache: cluster the cache into
    r' = min(r, cache size) centroids, overwrite the r' live slots with the
    smallest utilities (ties to the lower index), reset those utilities to
    1.0, and clear the cache. Classes with empty caches are untouched.
    """
    if r < 1 or r > bank.slots_per_class:
        raise ValueError(f"r must lie in [1, {bank.slots_per_class}]")
    for j in range(bank.num_classes):
        if not bank.cache[j]:
            continue
        pts = np.stack(bank.cache[j])
        r_eff = min(r, pts.shape[0], int(bank.occupancy[j]))
        centroids = kmeans(pts, r_eff, seed=[int(seed), j])
        live = int(bank.occupancy[j])
        order = np.argsort(bank.U[j, :live], kind="stable")[:r_eff]
        bank.M[j, order] = centroids[:r_eff]
        bank.U[j, order] = 1.0
        bank.cache[j] = []


def build_meta_memory(support_by_class, mode: str, metric: str = "neg_euclidean",
                      k: int = 1) -> MemoryBank:
    """Episode memory from per-class support features; never updated.

    mem1: one slot, the class mean. mem2: every support feature.
    mem3: the mean followed by every support feature.
    """
    if mode not in MEMORY_MODES:
        raise ValueError(f"mode must be one of {MEMORY_MODES}, got '{mode}'")
    slots = []
    for j, sup in enumerate(support_by_class):
        sup = np.asarray(sup, dtype=np.float64)
        if sup.ndim != 2 or sup.shape[0] == 0:
            raise ValueError(f"class {j}: support must be a non-empty (n, d) matrix")
        if mode == "mem1":
            slots.append(sup.mean(axis=0, keepdims=True))
        elif mode == "mem2":
            slots.append(sup.copy())
        else:
            slots.append(np.concatenate([sup.mean(axis=0, keepdims=True), sup], axis=0))
    dims = {s.shape[1] for s in slots}
    if len(dims) != 1:
        raise ValueError("support features disagree on dimension")
    bank = MemoryBank(len(slots), max(s.shape[0] for s in slots), dims.pop(),
                      metric=metric, k=k)
    for j, s in enumerate(slots):
        bank.set_class_slots(j, s)
    return bank


def task_slot_tensors(support_by_class, mode: str) -> list:
    """Meta-training variant of build_meta_memory that stays on the tape.

    Takes per-class support feature Tensors and returns per-class slot
    Tensors, so the episode loss backpropagates into the encoder through
    the memory content.
    """
    if mode not in MEMORY_MODES:
        raise ValueError(f"mode must be one of {MEMORY_MODES}, got '{mode}'")
    out = []
    for sup in support_by_class:
        sup = ad.as_tensor(sup)
        if sup.ndim != 2 or sup.shape[0] == 0:
            raise ValueError("support must be a non-empty (n, d) matrix")
        n = sup.shape[0]
        avg = ad.matmul(Tensor(np.full((1, n), 1.0 / n)), sup)
        if mode == "mem1":
            out.append(avg)
        elif mode == "mem2":
            out.append(sup)
        else:
            out.append(ad.concat_rows([avg, sup]))
    return out


def coarse_slot_union(fine_slots, local_parents, num_coarse_local: int) -> list:
    """Coarse-class slots as the union of the member fine classes' slots.

    ``fine_slots``: per-local-fine-class slot matrices (arrays or tensors);
    ``local_parents``: local coarse id per local fine class.
    """
    local_parents = np.asarray(local_parents, dtype=np.intp)
    if len(fine_slots) != local_parents.size:
        raise ValueError("one parent id per fine slot matrix required")
    groups = []
    for z in range(num_coarse_local):
        members = [fine_slots[i] for i in np.flatnonzero(local_parents == z)]
        if not members:
            raise ValueError(f"local coarse class {z} has no member slots")
        if len(members) == 1:
            groups.append(members[0])
        elif any(isinstance(m, Tensor) for m in members):
            groups.append(ad.concat_rows(members))
        else:
            groups.append(np.concatenate([np.asarray(m) for m in members], axis=0))
    return groups


def seed_supervised_memory(features, labels, num_classes: int, m: int,
                           metric: str = "dot_cosine", k: int = 1,
                           seed: int = 0) -> MemoryBank:
    """Initial bank: per class, k-means with r = m over that class's features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ValueError("features must be (n, d) with one label per row")
    bank = MemoryBank(num_classes, m, features.shape[1], metric=metric, k=k)
    for j in range(num_classes):
        rows = features[labels == j]
        if rows.shape[0] == 0:
            raise ValueError(f"class {j} has no features to seed from")
        bank.set_class_slots(j, kmeans(rows, m, seed=[int(seed), j]))
    return bank

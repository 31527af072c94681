"""Two-level class hierarchies and the factorized probabilities over them.

A hierarchy partitions fine classes among coarse classes. Fine probabilities
factor as p(fine) = p(fine | coarse parent) * p(coarse), where the
conditional is a softmax over the parent's children only and the coarse
distribution is a softmax over coarse logits.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ClassHierarchy:
    """Immutable fine -> coarse partition with dense integer ids."""

    def __init__(self, parent, num_coarse: int | None = None):
        parent = np.asarray(parent, dtype=np.intp)
        if parent.ndim != 1 or parent.size == 0:
            raise ValueError("parent must be a non-empty 1-d sequence of coarse ids")
        if parent.min() < 0:
            raise ValueError("coarse ids must be non-negative")
        inferred = int(parent.max()) + 1
        self._num_coarse = inferred if num_coarse is None else int(num_coarse)
        if self._num_coarse < inferred:
            raise ValueError(
                f"num_coarse={self._num_coarse} but parent references id {inferred - 1}"
            )
        self._parent = parent.copy()
        self._parent.setflags(write=False)
        self._children = tuple(
            np.flatnonzero(self._parent == z) for z in range(self._num_coarse)
        )
        for z, ch in enumerate(self._children):
            if ch.size == 0:
                raise ValueError(f"coarse class {z} has no fine children")
        mask = np.zeros((self._num_coarse, self.num_fine), dtype=bool)
        mask[self._parent, np.arange(self.num_fine)] = True
        mask.setflags(write=False)
        self._mask = mask

    @classmethod
    def single_coarse(cls, num_fine: int) -> "ClassHierarchy":
        """Degenerate hierarchy with one coarse class over all fine classes."""
        if num_fine < 1:
            raise ValueError("need at least one fine class")
        return cls(np.zeros(num_fine, dtype=np.intp))

    @property
    def num_fine(self) -> int:
        return self._parent.size

    @property
    def num_coarse(self) -> int:
        return self._num_coarse

    @property
    def parent(self) -> np.ndarray:
        return self._parent

    @property
    def children(self) -> tuple:
        return self._children

    def fine_to_coarse(self, y):
        """Coarse parent of fine id(s); range-checked."""
        y = np.asarray(y, dtype=np.intp)
        if y.size and (y.min() < 0 or y.max() >= self.num_fine):
            raise IndexError(f"fine id out of range [0, {self.num_fine})")
        return self._parent[y]

    def children_of(self, z: int) -> np.ndarray:
        if not 0 <= z < self._num_coarse:
            raise IndexError(f"coarse id {z} out of range [0, {self._num_coarse})")
        return self._children[z]

    def mask_matrix(self) -> np.ndarray:
        """Boolean (num_coarse, num_fine) membership matrix."""
        return self._mask

    def restrict(self, fine_ids):
        """Sub-hierarchy over a fine-class subset.

        Returns (local hierarchy, fine_ids array, coarse_ids array) where the
        id arrays map local positions back to this hierarchy's ids; coarse
        ids are sorted ascending.
        """
        fine_ids = np.asarray(fine_ids, dtype=np.intp)
        if fine_ids.ndim != 1 or fine_ids.size == 0:
            raise ValueError("need a non-empty 1-d fine id subset")
        if np.unique(fine_ids).size != fine_ids.size:
            raise ValueError("fine id subset contains duplicates")
        parents = self.fine_to_coarse(fine_ids)
        coarse_ids = np.unique(parents)
        local_parent = np.searchsorted(coarse_ids, parents)
        return ClassHierarchy(local_parent), fine_ids, coarse_ids

    def __eq__(self, other):
        return (
            isinstance(other, ClassHierarchy)
            and self._num_coarse == other._num_coarse
            and np.array_equal(self._parent, other._parent)
        )

    def __repr__(self):
        return f"ClassHierarchy(num_fine={self.num_fine}, num_coarse={self.num_coarse})"


def _check_finite(t: Tensor, what: str):
    if not np.isfinite(t.data).all():
        raise ValueError(f"{what}: logits must be finite")


def _row_masks(hier: ClassHierarchy, z, like: Tensor) -> np.ndarray:
    z = np.asarray(z, dtype=np.intp)
    if z.size and (z.min() < 0 or z.max() >= hier.num_coarse):
        raise IndexError(f"coarse id out of range [0, {hier.num_coarse})")
    mask = hier.mask_matrix()
    if like.ndim == 1:
        if z.ndim != 0:
            raise ValueError("scalar coarse id expected for a single logit row")
        return mask[int(z)]
    if z.ndim == 0:
        z = np.full(like.shape[0], int(z), dtype=np.intp)
    if z.shape != (like.shape[0],):
        raise ValueError(f"coarse ids {z.shape} do not match logit rows {like.shape}")
    return mask[z]


def conditional_fine_probs(a, z, hier: ClassHierarchy) -> Tensor:
    """p(fine | coarse=z): softmax of fine logits over z's children.

    Entries outside the children set are exactly zero. ``a`` is a logit
    vector (num_fine,) or batch (B, num_fine); ``z`` is a coarse id or a
    batch of them.
    """
    a = ad.as_tensor(a)
    if a.shape[-1] != hier.num_fine:
        raise ValueError(f"fine logits last axis {a.shape[-1]} != {hier.num_fine}")
    _check_finite(a, "conditional_fine_probs")
    return ad.masked_softmax_rows(a, _row_masks(hier, z, a))


def coarse_probs(b) -> Tensor:
    """p(coarse): plain softmax of coarse logits along the last axis."""
    b = ad.as_tensor(b)
    _check_finite(b, "coarse_probs")
    return ad.softmax_rows(b)


def marginal_fine_probs(a, b, hier: ClassHierarchy) -> Tensor:
    """p(fine) = p(fine | parent) * p(parent), marginalized over coarse classes."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape[-1] != hier.num_fine:
        raise ValueError(f"fine logits last axis {a.shape[-1]} != {hier.num_fine}")
    if b.shape[-1] != hier.num_coarse:
        raise ValueError(f"coarse logits last axis {b.shape[-1]} != {hier.num_coarse}")
    if a.ndim != b.ndim:
        raise ValueError("fine and coarse logits must have matching batch axes")
    _check_finite(a, "marginal_fine_probs")
    cp = coarse_probs(b)
    mask = hier.mask_matrix()
    total = None
    for z in range(hier.num_coarse):
        cond_z = ad.masked_softmax_rows(a, mask[z])
        weight = ad.take_cols(cp, np.array([z])) if b.ndim == 2 else ad.take_rows(cp, np.array([z]))
        term = ad.mul(cond_z, weight)
        total = term if total is None else ad.add(total, term)
    return total


def hierarchical_nll(a, b, y, hier: ClassHierarchy) -> Tensor:
    """Mean of -log p(y | parent(y)) - log p(parent(y)) over the batch.

    ``a``: fine logits (B, num_fine); ``b``: coarse logits (B, num_coarse);
    ``y``: true fine ids (B,). Differentiable with respect to both logit sets.
    """
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    y = np.asarray(y, dtype=np.intp)
    if y.ndim == 0:
        y = y[None]
    if a.ndim == 1:
        a = _expand0(a)
    if b.ndim == 1:
        b = _expand0(b)
    if a.shape != (y.size, hier.num_fine):
        raise ValueError(f"fine logits shape {a.shape} != ({y.size}, {hier.num_fine})")
    if b.shape != (y.size, hier.num_coarse):
        raise ValueError(f"coarse logits shape {b.shape} != ({y.size}, {hier.num_coarse})")
    z = hier.fine_to_coarse(y)
    cond = conditional_fine_probs(a, z, hier)
    cp = coarse_probs(b)
    per_sample = ad.add(ad.nll_rows(cond, y), ad.nll_rows(cp, z))
    return ad.mean(per_sample)


def _expand0(t: Tensor) -> Tensor:
    # View a vector as a one-row matrix without leaving the tape.
    data = t.data[None, ...]

    def backward(g):
        ad._acc(t, g[0])

    return ad._from_op(data, (t,), backward)

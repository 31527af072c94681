"""Dataset container, synthetic hierarchical generator, splits, and text IO."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .hierarchy import ClassHierarchy
from .seeding import derive_rng

SPLIT_TAGS = ("train", "val", "test", "unsplit")
FORMAT_LINE = "hikfs-data v1"
_NAME_BAD = set(",\t\n\r")


def _check_names(names, what: str) -> None:
    seen = set()
    for n in names:
        if not n or (set(n) & _NAME_BAD):
            raise ValueError(f"{what} name {n!r} is empty or contains a delimiter")
        if n in seen:
            raise ValueError(f"duplicate {what} name {n!r}")
        seen.add(n)


class Dataset:
    """Immutable labeled collection tied to a two-level class hierarchy.

    Items are either float feature vectors (n, d) or grayscale byte rasters
    (n, 1, H, W). Coarse labels are derived from the hierarchy, so parent
    agreement holds by construction.
    """

    def __init__(self, features, fine_labels, hierarchy: ClassHierarchy,
                 fine_names=None, coarse_names=None, split_tag: str = "unsplit",
                 provenance: str = ""):
        features = np.asarray(features)
        if features.ndim == 2:
            features = np.array(features, dtype=np.float64)
        elif features.ndim == 4 and features.dtype == np.uint8:
            if features.shape[1] != 1:
                raise ValueError("image data must be single-channel (n, 1, H, W)")
            features = features.copy()
        else:
            raise ValueError(
                "features must be (n, d) floats or (n, 1, H, W) uint8 rasters")
        fine_labels = np.array(fine_labels, dtype=np.int64)
        if fine_labels.ndim != 1 or len(fine_labels) != len(features):
            raise ValueError("fine_labels must hold one label per item")
        if len(fine_labels) and (fine_labels.min() < 0
                                 or fine_labels.max() >= hierarchy.num_fine):
            raise ValueError("fine label out of range for the hierarchy")
        if split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {split_tag!r}")
        if set(provenance) & _NAME_BAD:
            raise ValueError("provenance must not contain commas, tabs, "
                             "or newlines")
        if fine_names is None:
            fine_names = tuple(f"f{j}" for j in range(hierarchy.num_fine))
        if coarse_names is None:
            coarse_names = tuple(f"c{z}" for z in range(hierarchy.num_coarse))
        fine_names = tuple(fine_names)
        coarse_names = tuple(coarse_names)
        if len(fine_names) != hierarchy.num_fine:
            raise ValueError("need exactly one name per fine class")
        if len(coarse_names) != hierarchy.num_coarse:
            raise ValueError("need exactly one name per coarse class")
        _check_names(fine_names, "fine class")
        _check_names(coarse_names, "coarse class")

        self.features = features
        self.fine_labels = fine_labels
        self.hierarchy = hierarchy
        self.fine_names = fine_names
        self.coarse_names = coarse_names
        self.split_tag = split_tag
        self.provenance = provenance
        self.coarse_labels = (hierarchy.fine_to_coarse(fine_labels)
                              if len(fine_labels)
                              else np.zeros(0, dtype=np.int64))
        for arr in (self.features, self.fine_labels, self.coarse_labels):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def is_image(self) -> bool:
        return self.features.ndim == 4

    @property
    def feature_dim(self) -> int:
        if self.is_image:
            raise ValueError("image dataset has no flat feature dimension")
        return self.features.shape[1]

    @property
    def image_shape(self):
        if not self.is_image:
            raise ValueError("not an image dataset")
        return self.features.shape[2], self.features.shape[3]

    def indices_by_class(self):
        """Item indices per fine class id; absent classes get empty arrays."""
        return [np.flatnonzero(self.fine_labels == j)
                for j in range(self.hierarchy.num_fine)]

    def present_classes(self) -> np.ndarray:
        return np.unique(self.fine_labels)

    def subset(self, indices, split_tag=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.fine_labels[indices],
                       self.hierarchy, self.fine_names, self.coarse_names,
                       split_tag if split_tag is not None else self.split_tag,
                       self.provenance)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.features.dtype == other.features.dtype
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.fine_labels, other.fine_labels)
                and self.hierarchy == other.hierarchy
                and self.fine_names == other.fine_names
                and self.coarse_names == other.coarse_names
                and self.split_tag == other.split_tag
                and self.provenance == other.provenance)


def model_inputs(ds: Dataset, indices) -> np.ndarray:
    """Float model inputs for the given items; bytes are scaled to [0, 1]."""
    x = ds.features[np.asarray(indices, dtype=np.int64)]
    if ds.is_image:
        return x.astype(np.float64) / 255.0
    return x


# ---------------------------------------------------------------------------
# synthetic generator


def _unit(rng, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    n = np.linalg.norm(v)
    while n == 0.0:
        v = rng.normal(size=d)
        n = np.linalg.norm(v)
    return v / n


def gen_synthetic(num_coarse: int, fine_per_coarse, dim: int, per_class: int,
                  coarse_sep: float, fine_sep: float, noise: float, seed: int,
                  count_jitter: int = 0) -> Dataset:
    """Gaussian-blob dataset on a two-level class hierarchy.

    Coarse centers sit on a sphere of radius coarse_sep; each fine center is
    its coarse center plus a random offset of norm fine_sep; items are fine
    centers plus isotropic noise. count_jitter varies per-class item counts
    to mimic class imbalance. Fully determined by the seed.
    """
    if num_coarse < 1:
        raise ValueError("need at least one coarse class")
    if np.isscalar(fine_per_coarse):
        children = [int(fine_per_coarse)] * num_coarse
    else:
        children = [int(c) for c in fine_per_coarse]
    if len(children) != num_coarse or any(c < 1 for c in children):
        raise ValueError("fine_per_coarse must give every coarse class "
                         "at least one fine child")
    if dim < 1:
        raise ValueError("dim must be positive")
    if per_class < 2:
        raise ValueError("per_class must be at least 2")
    if not (coarse_sep > fine_sep > 0):
        raise ValueError("separations must satisfy coarse_sep > fine_sep > 0")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if count_jitter < 0:
        raise ValueError("count_jitter must be non-negative")
    if count_jitter > per_class - 2:
        raise ValueError("count_jitter would drop a class below 2 samples")

    rng = derive_rng(seed, "data")
    parent = []
    centers = []
    for z in range(num_coarse):
        cz = _unit(rng, dim) * coarse_sep
        for _ in range(children[z]):
            centers.append(cz + _unit(rng, dim) * fine_sep)
            parent.append(z)
    num_fine = len(parent)
    counts = [per_class + (int(rng.integers(-count_jitter, count_jitter + 1))
                           if count_jitter else 0)
              for _ in range(num_fine)]
    chunks = []
    labels = []
    for j in range(num_fine):
        chunks.append(centers[j] + rng.normal(size=(counts[j], dim)) * noise)
        labels.append(np.full(counts[j], j, dtype=np.int64))
    kids = (children[0] if len(set(children)) == 1
            else "/".join(str(c) for c in children))
    provenance = (f"synthetic coarse={num_coarse} fine_per_coarse={kids} "
                  f"dim={dim} per_class={per_class} coarse_sep={coarse_sep} "
                  f"fine_sep={fine_sep} noise={noise} jitter={count_jitter} "
                  f"seed={seed}")
    return Dataset(np.concatenate(chunks), np.concatenate(labels),
                   ClassHierarchy(parent, num_coarse), provenance=provenance)


# ---------------------------------------------------------------------------
# splits


class SplitResult(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset
    class_splits: dict | None  # fine name -> split tag; meta mode only


def _fraction_counts(n: int, fractions) -> np.ndarray:
    """Integer allocation of n items to three parts, each within 1 of exact."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative values "
                         "summing to 1")
    exact = fr * n
    base = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:n - base.sum()]] += 1
    return base


def _stratified_tags(ds: Dataset, fractions, rng) -> np.ndarray:
    tags = np.zeros(len(ds), dtype=np.int64)
    for idx in ds.indices_by_class():
        if len(idx) == 0:
            continue
        counts = _fraction_counts(len(idx), fractions)
        shuffled = rng.permutation(idx)
        tags[shuffled[counts[0]:counts[0] + counts[1]]] = 1
        tags[shuffled[counts[0] + counts[1]:]] = 2
    return tags


def _meta_assignment(hier: ClassHierarchy, fractions, rng) -> np.ndarray:
    counts = _fraction_counts(hier.num_fine, fractions)
    if counts[0] < hier.num_coarse:
        raise ValueError(
            "meta split infeasible: train must receive at least one fine "
            f"child of every coarse class ({hier.num_coarse} needed, the "
            f"train fraction allows only {int(counts[0])})")
    assign = np.zeros(hier.num_fine, dtype=np.int64)
    forced = [int(kids[rng.integers(len(kids))])
              for kids in (hier.children_of(z) for z in range(hier.num_coarse))]
    taken = np.zeros(hier.num_fine, dtype=bool)
    taken[forced] = True
    rest = rng.permutation(np.flatnonzero(~taken))
    extra_train = counts[0] - hier.num_coarse
    assign[rest[extra_train:extra_train + counts[1]]] = 1
    assign[rest[extra_train + counts[1]:]] = 2
    return assign


def _check_meta_coverage(hier: ClassHierarchy, assign, fine_names,
                         coarse_names) -> None:
    for z in range(hier.num_coarse):
        kids = hier.children_of(z)
        tags = set(int(assign[j]) for j in kids)
        for s, name in ((1, "val"), (2, "test")):
            if s in tags and 0 not in tags:
                if len(kids) == 1:
                    raise ValueError(
                        f"coarse class '{coarse_names[z]}' would need fine "
                        f"children in both train and {name}, but it has a "
                        f"single fine child '{fine_names[kids[0]]}'; a "
                        "one-child coarse class can only appear in train")
                raise ValueError(
                    f"coarse class '{coarse_names[z]}' appears in {name} but "
                    "not in train; assign at least one of its fine children "
                    "to train")


def mcfs_split(ds: Dataset, mode: str, fractions=None, seed: int = 0,
               assignment: dict | None = None) -> SplitResult:
    """Split a dataset for supervised or meta protocols.

    Supervised mode partitions samples per class (stratified). Meta mode
    partitions whole fine classes, always covering every coarse class in
    train so unseen fine classes at test time still have a seen ancestor.
    ``assignment`` (meta only) fixes the class partition explicitly.
    """
    if ds.split_tag != "unsplit":
        raise ValueError("dataset is already split; pass the unsplit source")
    if mode == "supervised":
        if assignment is not None:
            raise ValueError("explicit class assignment applies to meta mode")
        rng = derive_rng(seed, "data")
        tags = _stratified_tags(ds, fractions, rng)
        parts = tuple(ds.subset(np.flatnonzero(tags == s), split_tag=name)
                      for s, name in enumerate(("train", "val", "test")))
        return SplitResult(*parts, None)
    if mode != "meta":
        raise ValueError(f"unknown split mode {mode!r}")

    hier = ds.hierarchy
    if assignment is not None:
        name_to_id = {n: j for j, n in enumerate(ds.fine_names)}
        tag_to_s = {"train": 0, "val": 1, "test": 2}
        if set(assignment) != set(ds.fine_names):
            raise ValueError("assignment must cover every fine class "
                             "exactly once")
        assign = np.zeros(hier.num_fine, dtype=np.int64)
        for name, tag in assignment.items():
            if tag not in tag_to_s:
                raise ValueError(f"unknown split tag {tag!r} for '{name}'")
            assign[name_to_id[name]] = tag_to_s[tag]
    else:
        assign = _meta_assignment(hier, fractions, derive_rng(seed, "data"))
    _check_meta_coverage(hier, assign, ds.fine_names, ds.coarse_names)

    item_tags = assign[ds.fine_labels]
    parts = tuple(ds.subset(np.flatnonzero(item_tags == s), split_tag=name)
                  for s, name in enumerate(("train", "val", "test")))
    class_splits = {ds.fine_names[j]: ("train", "val", "test")[assign[j]]
                    for j in range(hier.num_fine)}
    return SplitResult(*parts, class_splits)


def split_validation(ds: Dataset, fraction: float = 0.2,
                     seed: int = 0) -> tuple:
    """Stratified carve-out of a validation set from training data."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation fraction must lie in (0, 1)")
    rng = derive_rng(seed, "data")
    tags = _stratified_tags(ds, (1.0 - fraction, fraction, 0.0), rng)
    return (ds.subset(np.flatnonzero(tags == 0), split_tag="train"),
            ds.subset(np.flatnonzero(tags == 1), split_tag="val"))


# ---------------------------------------------------------------------------
# file formats


def save_split_manifest(path, class_splits: dict, seed: int) -> None:
    lines = [f"# seed={seed}"]
    lines += [f"{name}\t{tag}" for name, tag in class_splits.items()]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_split_manifest(path):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# seed="):
        raise ValueError("split manifest must start with '# seed=<n>'")
    seed = int(lines[0][len("# seed="):])
    splits = {}
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
            raise ValueError(f"line {i}: expected '<fine_name>\\t<split>'")
        splits[parts[0]] = parts[1]
    return splits, seed


def save_dataset(ds: Dataset, path) -> None:
    if len(ds) == 0:
        raise ValueError("refusing to save an empty dataset")
    lines = [FORMAT_LINE]
    if ds.is_image:
        h, w = ds.image_shape
        lines.append(f"image={h}x{w}")
    else:
        lines.append(f"dims={ds.feature_dim}")
    if ds.split_tag != "unsplit":
        lines.append(f"split={ds.split_tag}")
    if ds.provenance:
        lines.append(f"provenance={ds.provenance}")
    parent = ds.hierarchy.parent
    for j, name in enumerate(ds.fine_names):
        lines.append(f"{name}\t{ds.coarse_names[parent[j]]}")
    for i in range(len(ds)):
        j = int(ds.fine_labels[i])
        row = ds.features[i].ravel()
        if ds.is_image:
            vals = [str(int(v)) for v in row]
        else:
            vals = [repr(float(v)) for v in row]
        lines.append(",".join([ds.fine_names[j],
                               ds.coarse_names[parent[j]]] + vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_shape_line(line: str, lineno: int):
    if line.startswith("dims="):
        try:
            d = int(line[len("dims="):])
        except ValueError:
            d = 0
        if d < 1:
            raise ValueError(f"line {lineno}: bad feature dimension in {line!r}")
        return d, None
    if line.startswith("image="):
        parts = line[len("image="):].split("x")
        if len(parts) == 2 and parts[0].isdigit() and parts[1].isdigit():
            h, w = int(parts[0]), int(parts[1])
            if h >= 1 and w >= 1:
                return h * w, (h, w)
        raise ValueError(f"line {lineno}: bad image shape in {line!r}")
    raise ValueError(f"line {lineno}: expected 'dims=<d>' or 'image=<h>x<w>', "
                     f"found {line!r}")


def load_dataset(path) -> Dataset:
    with open(path) as f:
        raw = f.read()
    lines = raw.splitlines()
    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not numbered:
        raise ValueError("empty dataset")
    if numbered[0][1] != FORMAT_LINE:
        raise ValueError(f"line {numbered[0][0]}: expected '{FORMAT_LINE}' "
                         "header")
    if len(numbered) < 2:
        raise ValueError("empty dataset")
    dim, image_shape = _parse_shape_line(numbered[1][1], numbered[1][0])

    split_tag = "unsplit"
    provenance = ""
    fine_names: list = []
    coarse_names: list = []
    fine_ids: dict = {}
    coarse_ids: dict = {}
    parent: list = []
    rows: list = []
    labels: list = []
    in_items = False
    for lineno, line in numbered[2:]:
        if "\t" in line and not in_items and "," not in line:
            fields = line.split("\t")
            if len(fields) != 2 or not fields[0] or not fields[1]:
                raise ValueError(f"line {lineno}: hierarchy lines must be "
                                 "'<fine>\\t<coarse>'")
            fname, cname = fields
            if fname in fine_ids:
                raise ValueError(f"line {lineno}: duplicate fine class "
                                 f"{fname!r}")
            if cname not in coarse_ids:
                coarse_ids[cname] = len(coarse_names)
                coarse_names.append(cname)
            fine_ids[fname] = len(fine_names)
            fine_names.append(fname)
            parent.append(coarse_ids[cname])
            continue
        if "," in line:
            if not fine_ids:
                raise ValueError(f"line {lineno}: item before any hierarchy "
                                 "block")
            in_items = True
            fields = line.split(",")
            if len(fields) != 2 + dim:
                raise ValueError(f"line {lineno}: expected {dim} values, "
                                 f"found {len(fields) - 2}")
            fname, cname = fields[0], fields[1]
            if fname not in fine_ids:
                raise ValueError(f"line {lineno}: unknown fine class "
                                 f"{fname!r}")
            j = fine_ids[fname]
            want = coarse_names[parent[j]]
            if cname != want:
                raise ValueError(
                    f"line {lineno}: item labeled fine {fname!r} / coarse "
                    f"{cname!r}, but the hierarchy assigns {fname!r} to "
                    f"{want!r}")
            try:
                if image_shape is None:
                    vals = [float(v) for v in fields[2:]]
                else:
                    vals = [int(v) for v in fields[2:]]
                    if any(v < 0 or v > 255 for v in vals):
                        raise ValueError
            except ValueError:
                raise ValueError(f"line {lineno}: bad value in item row")
            rows.append(vals)
            labels.append(j)
            continue
        if not in_items and line.startswith("split="):
            value = line[len("split="):]
            if value not in SPLIT_TAGS:
                raise ValueError(f"line {lineno}: unknown split tag "
                                 f"{value!r}")
            split_tag = value
            continue
        if not in_items and line.startswith("provenance="):
            provenance = line[len("provenance="):]
            continue
        raise ValueError(f"line {lineno}: unrecognized line {line!r}")

    if not fine_ids:
        raise ValueError("no hierarchy block found")
    if not rows:
        raise ValueError("empty dataset")
    if image_shape is None:
        features = np.array(rows, dtype=np.float64)
    else:
        h, w = image_shape
        features = np.array(rows, dtype=np.uint8).reshape(-1, 1, h, w)
    return Dataset(features, labels,
                   ClassHierarchy(parent, len(coarse_names)),
                   fine_names, coarse_names, split_tag, provenance)

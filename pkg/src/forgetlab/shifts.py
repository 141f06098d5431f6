"""Synthetic classification tasks and the three shift splitters.

Tasks are sequences of token ids 1..63 labeled by marker-set rules. Each
sequence carries a small number of S and T markers (uniform 0..3 each) at
random positions over a non-marker background. All families share the
same marker sets S and T so that training them in sequence interferes:

  A (parity):     label = (# tokens from S) mod 2
  B (precedence): label = 1 iff the first S token appears before the
                  first T token (absent tokens count as infinitely late)
  C (conflict):   same inputs as A, but the parity label is inverted on
                  sequences that contain any T token

Shift splitters produce ordered (D_o, D_s) pairs: an explicit dataset
pair, a split at the mean sequence length, or a 2-means clustering of
sequence embeddings. All of them are pure functions of (inputs, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

VOCAB_LOW = 1
VOCAB_HIGH = 64  # exclusive; ids 1..63, id 0 stays reserved

# fixed disjoint marker sets, shared by every family
S_MARKERS = frozenset({5, 12, 23, 34, 45, 56})
T_MARKERS = frozenset({7, 18, 29, 40, 51, 62})

# per-sequence marker counts are uniform over 0..3; concentrating the count
# support keeps the parity labels balanced AND learnable at this model size
MAX_MARKER_COUNT = 3

FAMILIES = ("A", "B", "C")

KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class Dataset:
    """Labeled token-id sequences; ids nonzero, labels < n_classes."""

    name: str
    examples: tuple[tuple[tuple[int, ...], int], ...]
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        for seq, label in self.examples:
            if len(seq) == 0:
                raise ValueError(f"dataset {self.name!r} contains an empty sequence")
            if not 0 <= label < self.n_classes:
                raise ValueError(
                    f"dataset {self.name!r} label {label} outside [0, {self.n_classes})"
                )
            for tok in seq:
                if tok < 1:
                    raise ValueError(
                        f"dataset {self.name!r} token id {tok} invalid (ids start at 1)"
                    )

    def __len__(self) -> int:
        return len(self.examples)

    def lengths(self) -> list[int]:
        return [len(seq) for seq, _ in self.examples]


@dataclass(frozen=True)
class ShiftSpec:
    """Which splitter to run and on what. `sources` are dataset names."""

    name: str
    kind: str  # dataset-pair | sentence-length | artificial
    sources: tuple[str, ...]
    seed: int = 999

    def __post_init__(self) -> None:
        kinds = {"dataset-pair": 2, "sentence-length": 1, "artificial": 1}
        if self.kind not in kinds:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if len(self.sources) != kinds[self.kind]:
            raise ValueError(
                f"shift kind {self.kind!r} needs {kinds[self.kind]} source(s), "
                f"got {len(self.sources)}"
            )


@dataclass(frozen=True)
class TaskPair:
    """Ordered (D_o, D_s) with disjoint train/test splits for each."""

    name: str
    o_train: Dataset
    o_test: Dataset
    s_train: Dataset
    s_test: Dataset


def _label(family: str, seq: np.ndarray) -> int:
    s_count = int(np.isin(seq, list(S_MARKERS)).sum())
    if family == "A":
        return s_count % 2
    if family == "B":
        s_pos = np.flatnonzero(np.isin(seq, list(S_MARKERS)))
        t_pos = np.flatnonzero(np.isin(seq, list(T_MARKERS)))
        first_s = s_pos[0] if s_pos.size else np.inf
        first_t = t_pos[0] if t_pos.size else np.inf
        return int(first_s < first_t)
    if family == "C":
        has_t = bool(np.isin(seq, list(T_MARKERS)).any())
        return (s_count + int(has_t)) % 2
    raise ValueError(f"unknown task family {family!r}")


_S_LIST = tuple(sorted(S_MARKERS))
_T_LIST = tuple(sorted(T_MARKERS))
_PLAIN_IDS = tuple(
    t for t in range(VOCAB_LOW, VOCAB_HIGH) if t not in S_MARKERS and t not in T_MARKERS
)


def _sample_sequence(rng: np.random.Generator, length: int) -> np.ndarray:
    """One sequence: k_S and k_T markers (uniform 0..3) at random positions."""
    k_s = int(rng.integers(0, MAX_MARKER_COUNT + 1))
    k_t = int(rng.integers(0, MAX_MARKER_COUNT + 1))
    seq = rng.choice(_PLAIN_IDS, size=length)
    slots = rng.permutation(length)
    seq[slots[:k_s]] = rng.choice(_S_LIST, size=k_s)
    seq[slots[k_s : k_s + k_t]] = rng.choice(_T_LIST, size=k_t)
    return seq


def synth_task(
    family: str,
    seed: int,
    *,
    size: int = 2500,
    min_len: int = 15,
    max_len: int = 15,
    name: str | None = None,
) -> Dataset:
    """Deterministic synthetic dataset; lengths uniform in [min_len, max_len]."""
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}; known: {FAMILIES}")
    if size < 1:
        raise ValueError("size must be positive")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"bad length range [{min_len}, {max_len}]")
    if min_len < 2 * MAX_MARKER_COUNT:
        raise ValueError(
            f"min_len must be at least {2 * MAX_MARKER_COUNT} to hold the markers"
        )
    rng = np.random.default_rng([hash_family(family), seed])
    examples = []
    for _ in range(size):
        length = int(rng.integers(min_len, max_len + 1))
        seq = _sample_sequence(rng, length)
        examples.append((tuple(int(t) for t in seq), _label(family, seq)))
    return Dataset(
        name=name if name is not None else f"{family}-{seed}",
        examples=tuple(examples),
        n_classes=2,
    )


def hash_family(family: str) -> int:
    """Stable small integer per family for seed streams."""
    return {"A": 1, "B": 2, "C": 3}[family]


def split_by_length(d: Dataset) -> tuple[Dataset, Dataset]:
    """Partition at the mean length: strictly shorter -> D_o, rest -> D_s."""
    lengths = d.lengths()
    if len(set(lengths)) < 2:
        raise ValueError(
            f"dataset {d.name!r} has a single sequence length {lengths[0]}; "
            "cannot split by length"
        )
    threshold = sum(lengths) / len(lengths)
    short = tuple(ex for ex in d.examples if len(ex[0]) < threshold)
    rest = tuple(ex for ex in d.examples if len(ex[0]) >= threshold)
    d_o = Dataset(name=f"{d.name}-short", examples=short, n_classes=d.n_classes)
    d_s = Dataset(name=f"{d.name}-long", examples=rest, n_classes=d.n_classes)
    return d_o, d_s


def _squared_distances(points: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    diff = points - centroid
    return np.einsum("ij,ij->i", diff, diff)


def kmeans_two(
    embeddings: np.ndarray, seed: int
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """2-means with seeded k-means++ init and Lloyd iterations.

    Returns (assignments in {0,1}, centroids (2, d), per-iteration
    objective values). The objective (sum of squared distances to the
    assigned centroid) is nonincreasing across iterations. An emptied
    cluster is re-seeded to the point farthest from its assigned centroid.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"embeddings must be 2-d, got shape {points.shape}")
    n = points.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows to form 2 clusters, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++: first centroid uniform, second weighted by squared distance
    first = int(rng.integers(n))
    d2 = _squared_distances(points, points[first])
    total = d2.sum()
    if total == 0.0:
        # all points identical; any second index works
        second = int(rng.integers(n))
    else:
        second = int(rng.choice(n, p=d2 / total))
    centroids = np.stack([points[first], points[second]])

    assignments = np.full(n, -1, dtype=np.int64)
    objective: list[float] = []
    for _ in range(KMEANS_MAX_ITER):
        dist = np.stack(
            [_squared_distances(points, centroids[0]), _squared_distances(points, centroids[1])],
            axis=1,
        )
        new_assign = np.argmin(dist, axis=1)  # ties go to cluster 0
        objective.append(float(dist[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(2):
            members = points[assignments == c]
            if len(members) == 0:
                # re-seed an empty cluster to the farthest point
                far = int(np.argmax(dist[np.arange(n), assignments]))
                centroids[c] = points[far]
            else:
                centroids[c] = members.mean(axis=0)
    return assignments, centroids, objective


def artificial_split(embeddings: np.ndarray, seed: int) -> np.ndarray:
    """Per-row cluster id in {0,1} from seeded 2-means."""
    assignments, _, _ = kmeans_two(embeddings, seed)
    return assignments


def _train_test_split(d: Dataset, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    n = len(d)
    if n < 2:
        raise ValueError(f"dataset {d.name!r} too small to split ({n} examples)")
    n_train = (4 * n) // 5
    if n_train == 0 or n_train == n:
        raise ValueError(f"dataset {d.name!r} too small for an 80/20 split ({n})")
    order = rng.permutation(n)
    train = tuple(d.examples[i] for i in order[:n_train])
    test = tuple(d.examples[i] for i in order[n_train:])
    return (
        Dataset(name=f"{d.name}-train", examples=train, n_classes=d.n_classes),
        Dataset(name=f"{d.name}-test", examples=test, n_classes=d.n_classes),
    )


def make_pair(
    spec: ShiftSpec,
    datasets: dict[str, Dataset],
    *,
    embed_fn=None,
) -> TaskPair:
    """Run the splitter named by `spec` and cut 80/20 train/test splits.

    `embed_fn` maps a Dataset to a (rows, d) embedding matrix; required
    for the artificial kind only.
    """
    for name in spec.sources:
        if name not in datasets:
            raise KeyError(f"shift {spec.name!r} references unknown dataset {name!r}")
    if spec.kind == "dataset-pair":
        d_o, d_s = datasets[spec.sources[0]], datasets[spec.sources[1]]
    elif spec.kind == "sentence-length":
        d_o, d_s = split_by_length(datasets[spec.sources[0]])
    else:  # artificial
        if embed_fn is None:
            raise ValueError("artificial shift needs an embedding function")
        source = datasets[spec.sources[0]]
        assignments = artificial_split(embed_fn(source), spec.seed)
        in_one = np.flatnonzero(assignments == 1)
        in_zero = np.flatnonzero(assignments == 0)
        if len(in_zero) > len(in_one):
            big, small = in_zero, in_one
        elif len(in_one) > len(in_zero):
            big, small = in_one, in_zero
        else:
            # tie: D_o is the cluster containing row 0
            if assignments[0] == 0:
                big, small = in_zero, in_one
            else:
                big, small = in_one, in_zero
        d_o = Dataset(
            name=f"{source.name}-cluster-o",
            examples=tuple(source.examples[i] for i in big),
            n_classes=source.n_classes,
        )
        d_s = Dataset(
            name=f"{source.name}-cluster-s",
            examples=tuple(source.examples[i] for i in small),
            n_classes=source.n_classes,
        )
    rng = np.random.default_rng([7, spec.seed])
    o_train, o_test = _train_test_split(d_o, rng)
    s_train, s_test = _train_test_split(d_s, rng)
    return TaskPair(
        name=spec.name, o_train=o_train, o_test=o_test, s_train=s_train, s_test=s_test
    )


def load_tsv(path: str, *, name: str | None = None, n_classes: int | None = None) -> Dataset:
    """Read a dataset from TSV with header columns `tokens` and `label`."""
    rows: list[tuple[tuple[int, ...], int]] = []
    labels_seen: set[int] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None or not {"tokens", "label"} <= set(reader.fieldnames):
            raise ValueError(
                f"{path}: TSV must have header columns 'tokens' and 'label', "
                f"got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                tokens = tuple(int(t) for t in row["tokens"].split())
                label = int(row["label"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row: {exc}") from exc
            if not tokens:
                raise ValueError(f"{path}:{lineno}: empty token sequence")
            if any(t < 1 for t in tokens):
                raise ValueError(f"{path}:{lineno}: token ids must be >= 1")
            if label < 0:
                raise ValueError(f"{path}:{lineno}: label must be >= 0")
            labels_seen.add(label)
            rows.append((tokens, label))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if n_classes is None:
        n_classes = max(2, max(labels_seen) + 1)
    return Dataset(
        name=name if name is not None else path, examples=tuple(rows), n_classes=n_classes
    )


def save_tsv(d: Dataset, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["tokens", "label"])
        for seq, label in d.examples:
            writer.writerow([" ".join(str(t) for t in seq), label])

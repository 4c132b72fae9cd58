"""Sensor-column permutation pretext task: permutation sets, permuted windows, head and loss."""
import itertools
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

import diffcore as dc
from diffcore import DenseArray, Dense, ParamNode
from errors import ConfigError, DataError, DimensionError, InfeasibleError, LabelIndexError, PoolError

PERMS_FILE_VERSION = 1
PERMS_FILE_MAGIC = "# faultflow permutation set"

Permutation = Tuple[int, ...]


def is_bijection(mapping: Sequence[int], n: int) -> bool:
    return len(mapping) == n and sorted(int(k) for k in mapping) == list(range(n))


def score_set(permutations) -> int:
    """Spread score D: pairwise position distances plus deviation from identity.

    D = sum over ordered pairs (i != j) of sum_k |i_k - j_k|
      + sum over i of sum_k |k - i_k|, with 0-based positions.
    """
    if isinstance(permutations, PermutationSet):
        permutations = permutations.array
    perms = np.asarray(permutations, dtype=np.int64)
    if perms.ndim != 2 or perms.shape[0] == 0:
        return 0
    count, n = perms.shape
    # sum_{i,j} |x_i - x_j| per column from the sorted order
    ranks = 2 * np.arange(count, dtype=np.int64) - count + 1
    pairwise = 2 * int(np.sum(np.sort(perms, axis=0) * ranks[:, None]))
    deviation = int(np.abs(perms - np.arange(n, dtype=np.int64)).sum())
    return pairwise + deviation


class PermutationSet:
    """Ordered, distinct sensor-column bijections; list order is the class order."""

    def __init__(self, permutations, seed: Optional[int] = None, pool_factor: Optional[int] = None):
        perms = np.array(permutations, dtype=np.int64)
        if perms.ndim != 2 or perms.shape[0] == 0:
            raise DimensionError(f"permutation set must be a non-empty (P, n) array, got shape {perms.shape}")
        count, n = perms.shape
        if count < 2:
            raise ConfigError(f"a permutation set needs at least 2 permutations, got {count}")
        for row in perms:
            if not is_bijection(row, n):
                raise ConfigError(f"not a bijection on 0..{n - 1}: {row.tolist()}")
        if len({tuple(row) for row in perms.tolist()}) != count:
            raise ConfigError("permutation set contains duplicates")
        self.array = perms
        self.array.setflags(write=False)
        self.n = n
        self.seed = seed
        self.pool_factor = pool_factor
        self.score = score_set(perms)

    @property
    def size(self) -> int:
        return self.array.shape[0]

    def __len__(self):
        return self.size

    def __getitem__(self, index: int) -> Permutation:
        return tuple(int(k) for k in self.array[index])

    @property
    def permutations(self) -> List[Permutation]:
        return [self[i] for i in range(self.size)]


def _random_pool(n: int, target: int, rng: np.random.Generator) -> np.ndarray:
    seen = {}
    base = np.tile(np.arange(n, dtype=np.int64), (min(target, 4096), 1))
    draws = 0
    max_draws = 50 * target
    while len(seen) < target:
        if draws >= max_draws:
            raise PoolError(f"could only find {len(seen)} distinct permutations of {n} sensors "
                            f"after {draws} draws, needed {target}")
        # Fisher-Yates shuffle of every row
        batch = rng.permuted(base, axis=1)
        draws += batch.shape[0]
        for row in batch:
            key = tuple(row.tolist())
            if key not in seen:
                seen[key] = None
                if len(seen) == target:
                    break
    return np.array(list(seen), dtype=np.int64)


def sample_pool(n: int, P: int, pool_factor: int = 10, seed: int = 0) -> np.ndarray:
    """Distinct candidate permutations; the whole symmetric group when it is small enough."""
    if P < 2:
        raise ConfigError(f"a permutation set needs P >= 2, got {P}")
    if pool_factor < 2:
        raise ConfigError(f"pool_factor must be at least 2, got {pool_factor}")
    available = math.factorial(n)
    if P > available:
        raise InfeasibleError(f"P={P} exceeds the {available} permutations of {n} sensors")
    target = pool_factor * P
    if target >= available:
        return np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    return _random_pool(n, target, np.random.default_rng(seed))


def select_greedy(pool: np.ndarray, P: int) -> np.ndarray:
    """Pick P rows one at a time, each maximizing its marginal contribution to D."""
    pool = np.asarray(pool, dtype=np.int64)
    n = pool.shape[1]
    deviation = np.abs(pool - np.arange(n, dtype=np.int64)).sum(axis=1)
    distance = np.zeros(pool.shape[0], dtype=np.int64)
    chosen = np.zeros(pool.shape[0], dtype=bool)
    order = []
    for _ in range(P):
        gain = 2 * distance + deviation
        gain[chosen] = -1
        pick = int(np.argmax(gain))
        order.append(pick)
        chosen[pick] = True
        distance += np.abs(pool - pool[pick]).sum(axis=1)
    return pool[order]


def generate_set(n: int, P: int, pool_factor: int = 10, seed: int = 0) -> PermutationSet:
    """Sample a pool of pool_factor * P permutations, then greedily keep the P with highest D."""
    pool = sample_pool(n, P, pool_factor, seed)
    return PermutationSet(select_greedy(pool, P), seed=seed, pool_factor=pool_factor)


def write_permutation_set(path, perms: PermutationSet):
    """Versioned text format: header lines, then one comma-separated permutation per line."""
    lines = [
        PERMS_FILE_MAGIC,
        f"version={PERMS_FILE_VERSION}",
        f"n={perms.n}",
        f"P={perms.size}",
        f"D={perms.score}",
        f"seed={'' if perms.seed is None else perms.seed}",
        f"pool_factor={'' if perms.pool_factor is None else perms.pool_factor}",
        "---",
    ]
    lines.extend(",".join(str(k) for k in row) for row in perms.array.tolist())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_permutation_set(path) -> PermutationSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: permutation file not found")
    with open(path, "r") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != PERMS_FILE_MAGIC or "---" not in lines:
        raise DataError(f"{path}: not a permutation set file (line 1)")
    split = lines.index("---")
    header = {}
    for number, line in enumerate(lines[1:split], start=2):
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: line {number}: expected key=value")
        header[key] = value
    if header.get("version") != str(PERMS_FILE_VERSION):
        raise DataError(f"{path}: unsupported version {header.get('version')!r}")
    rows = []
    for number, line in enumerate(lines[split + 1:], start=split + 2):
        try:
            rows.append([int(k) for k in line.split(",")])
        except ValueError as e:
            raise DataError(f"{path}: line {number}: {e}") from e
    try:
        perms = PermutationSet(rows,
                               seed=int(header["seed"]) if header.get("seed") else None,
                               pool_factor=int(header["pool_factor"]) if header.get("pool_factor") else None)
    except (ConfigError, ValueError) as e:
        raise DataError(f"{path}: {e}") from e
    if perms.n != int(header.get("n", perms.n)) or perms.size != int(header.get("P", perms.size)):
        raise DataError(f"{path}: header n/P do not match the listed permutations")
    return perms


# ===== Permuted windows =====

def apply_permutation(window: np.ndarray, p: Sequence[int]) -> np.ndarray:
    """Column k of the result is source column p[k]; flattened time-major."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[1] != len(p):
        raise DimensionError(f"window shape {window.shape} does not match a permutation of {len(p)} sensors")
    return window[:, list(p)].reshape(-1)


def permute_batch(windows: np.ndarray, perms: PermutationSet, labels: np.ndarray) -> np.ndarray:
    """Vectorized apply_permutation: windows (B, L, n) -> (B, L*n)."""
    windows = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if windows.ndim != 3 or windows.shape[2] != perms.n:
        raise DimensionError(f"windows shape {windows.shape} does not match {perms.n} sensors")
    if labels.shape != (windows.shape[0],):
        raise DimensionError(f"expected {windows.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= perms.size):
        raise LabelIndexError(f"permutation labels must lie in [0, {perms.size})")
    index = np.broadcast_to(perms.array[labels][:, None, :], windows.shape)
    return np.take_along_axis(windows, index, axis=2).reshape(windows.shape[0], -1)


def draw_permuted_batch(windows: np.ndarray, perms: PermutationSet,
                        rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One uniformly drawn permutation per window; its index is the label."""
    labels = rng.integers(0, perms.size, size=windows.shape[0])
    return permute_batch(windows, perms, labels), labels


# ===== Classification head and loss =====

class SelfSupHead:
    """Single fully-connected layer from the latent z to P permutation logits."""

    def __init__(self, input_dim: int, n_classes: int, rng: Optional[np.random.Generator] = None,
                 zero: bool = False):
        if n_classes < 2:
            raise ConfigError(f"the head needs at least 2 classes, got {n_classes}")
        self.input_dim = input_dim
        self.n_classes = n_classes
        self.fc = Dense(input_dim, n_classes, "head.fc", rng, zero=zero)

    def __call__(self, z: DenseArray) -> DenseArray:
        return self.fc(z)

    def parameters(self) -> List[ParamNode]:
        return self.fc.parameters()


def selfsup_loss(model, head: SelfSupHead, batch, labels) -> DenseArray:
    """Mean cross-entropy of F(R(x_p)) against the permutation index."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= head.n_classes):
        raise LabelIndexError(f"self-supervision labels must lie in [0, {head.n_classes})")
    z, _ = model.forward(batch)
    return dc.softmax_cross_entropy(head(z), labels)


def selfsup_accuracy(model, head: SelfSupHead, batch, labels) -> float:
    with dc.no_grad():
        z, _ = model.forward(batch)
        logits = head(z).values
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def random_subset_scores(perms: Iterable[np.ndarray], P: int, trials: int, seed: int) -> List[int]:
    """D of uniformly random P-subsets of a pool; baseline for the greedy selection."""
    pool = np.asarray(list(perms), dtype=np.int64)
    rng = np.random.default_rng(seed)
    return [score_set(pool[rng.choice(pool.shape[0], size=P, replace=False)]) for _ in range(trials)]

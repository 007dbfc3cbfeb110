"""Stand-ins for the federated model: synthetic data, a FedAvg linear trainer
and ingestion of logits produced elsewhere."""

from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import FormatError, InvalidInputError, ParseError, TrainingError


@dataclass(frozen=True)
class Examples:
    """Parallel arrays of features (or example ids) and integer labels."""

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int).ravel()
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", np.asarray(self.features))
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(labels.size).astype(str))
        else:
            object.__setattr__(self, "ids", np.asarray(self.ids).astype(str))
        if len(self.features) != labels.size or self.ids.size != labels.size:
            raise InvalidInputError("features, labels and ids differ in length")

    def __len__(self):
        return self.labels.size

    def take(self, idx) -> "Examples":
        return Examples(self.features[idx], self.labels[idx], self.ids[idx])

    @classmethod
    def empty(cls, d=0):
        return cls(np.empty((0, d)), np.empty(0, dtype=int), np.empty(0, dtype=str))


@dataclass(frozen=True)
class ClientData:
    client_id: str
    classes: tuple
    calibration: Examples
    test: Examples
    train: Examples = None

    def split(self, seed, fraction=0.5) -> "ClientData":
        """Re-split the pooled held-out data into calibration and test halves."""
        pool = _concat(self.calibration, self.test)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(pool))
        n_cal = int(math.floor(fraction * len(pool)))
        return replace(self, calibration=pool.take(np.sort(perm[:n_cal])), test=pool.take(np.sort(perm[n_cal:])))


def _concat(a: Examples, b: Examples) -> Examples:
    if len(b) == 0:
        return a
    if len(a) == 0:
        return b
    return Examples(
        np.concatenate([a.features, b.features]),
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.ids, b.ids]),
    )


@dataclass(frozen=True)
class SyntheticTask:
    """Gaussian classes: ``x = class_means[y] + noise_sigma * N(0, I)``."""

    class_means: np.ndarray
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=float)
        object.__setattr__(self, "class_means", means)
        if means.ndim != 2 or means.shape[0] < 2 or means.shape[1] < 2:
            raise InvalidInputError("need at least 2 classes in at least 2 dimensions")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be non-negative")
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        if np.any(dist[np.triu_indices(len(means), 1)] == 0):
            raise InvalidInputError("class means must be pairwise distinct")

    @property
    def n_classes(self):
        return self.class_means.shape[0]

    @property
    def dim(self):
        return self.class_means.shape[1]

    @classmethod
    def random(cls, n_classes, dim, separation=3.0, noise_sigma=1.0, seed=0):
        """Class means drawn from ``N(0, separation^2 I)``."""
        rng = np.random.default_rng([seed, 0x7A5C])
        return cls(rng.normal(scale=separation, size=(n_classes, dim)), noise_sigma, seed)

    def sample(self, classes, n, rng) -> np.ndarray:
        """Draw ``n`` labelled points with labels uniform over ``classes``."""
        classes = np.asarray(sorted(classes), dtype=int)
        y = classes[rng.integers(0, classes.size, size=n)]
        x = self.class_means[y] + self.noise_sigma * rng.standard_normal((n, self.dim))
        return x, y


def generate_clients(task: SyntheticTask, class_sets, calibration_sizes, n_test=None, n_train=0, seed=None):
    """Draw train/calibration/test data for each client from its class set.

    Deterministic in ``(task, class_sets, sizes, seed)``; ``seed`` defaults to
    the task seed. Client ``k`` uses its own sub-stream so clients never share
    draws.
    """
    if seed is None:
        seed = task.seed
    class_sets = [tuple(sorted(int(c) for c in cs)) for cs in class_sets]
    sizes = [int(n) for n in calibration_sizes]
    if len(sizes) != len(class_sets):
        raise InvalidInputError("one calibration size per client is required")
    if n_test is None:
        n_test = sizes
    elif np.ndim(n_test) == 0:
        n_test = [int(n_test)] * len(sizes)
    clients = []
    for k, (classes, n_cal, n_te) in enumerate(zip(class_sets, sizes, n_test)):
        if not classes or min(classes) < 0 or max(classes) >= task.n_classes:
            raise InvalidInputError(f"client {k} class set {classes} outside [0, {task.n_classes})")
        rng = np.random.default_rng([seed, k])
        parts = []
        for n, tag in ((n_train, "train"), (n_cal, "cal"), (n_te, "test")):
            x, y = task.sample(classes, n, rng)
            parts.append(Examples(x, y, np.array([f"{k}-{tag}-{i}" for i in range(n)])))
        clients.append(ClientData(str(k), classes, parts[1], parts[2], parts[0]))
    return clients


class LinearSoftmax:
    """Multinomial logistic regression; ``weights`` has shape ``(J, d + 1)``."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise InvalidInputError("weights must be a finite 2-D matrix")
        self.weights = w

    @property
    def n_classes(self):
        return self.weights.shape[0]

    def logits(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=float))
        return x @ self.weights[:, :-1].T + self.weights[:, -1]


class LookupModel:
    """Answers with precomputed logits keyed by example id."""

    def __init__(self, table):
        self.table = dict(table)
        if not self.table:
            raise InvalidInputError("lookup table is empty")
        widths = {len(v) for v in self.table.values()}
        if len(widths) != 1:
            raise FormatError("lookup logits have inconsistent class counts")
        (self._n_classes,) = widths

    @property
    def n_classes(self):
        return self._n_classes

    def logits(self, features) -> np.ndarray:
        ids = np.asarray(features).astype(str).ravel()
        try:
            return np.array([self.table[i] for i in ids], dtype=float).reshape(len(ids), self._n_classes)
        except KeyError as exc:
            raise InvalidInputError(f"no logits for example id {exc.args[0]!r}") from None


def _cross_entropy(w, x1, y):
    z = x1 @ w.T
    lse = logsumexp(z, axis=1)
    loss = float(np.mean(lse - z[np.arange(y.size), y]))
    p = np.exp(z - lse[:, None])
    p[np.arange(y.size), y] -= 1.0
    grad = p.T @ x1 / y.size
    return loss, grad


def _with_bias(x):
    return np.hstack([x, np.ones((len(x), 1))])


def train_fedavg_linear(clients, n_classes, rounds=100, local_steps=5, lr=0.1, seed=0, history=None):
    """Train a :class:`LinearSoftmax` with FedAvg over the clients' ``train`` splits.

    Each round, every client runs ``local_steps`` full-batch gradient steps on
    its mean cross-entropy starting from the global weights; the server then
    averages client weights in proportion to their training set sizes. If
    ``history`` is a list, the size-weighted global training loss before each
    round (and after the last) is appended to it.
    """
    data = []
    for c in clients:
        tr = c.train
        if tr is None or len(tr) == 0:
            raise InvalidInputError(f"client {c.client_id} has no training data")
        data.append((_with_bias(np.asarray(tr.features, dtype=float)), tr.labels))
    dim = data[0][0].shape[1]
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=0.01, size=(n_classes, dim))
    sizes = np.array([y.size for _, y in data], dtype=float)
    share = sizes / sizes.sum()

    for r in range(rounds):
        updates = []
        round_loss = 0.0
        for (x1, y), s in zip(data, share):
            local = w.copy()
            for step in range(local_steps):
                loss, grad = _cross_entropy(local, x1, y)
                if step == 0:
                    round_loss += s * loss
                if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                    raise TrainingError("non-finite local loss", r)
                local -= lr * grad
            updates.append(local)
        if history is not None:
            history.append(round_loss)
        w = sum(s * u for s, u in zip(share, updates))
        if not np.all(np.isfinite(w)):
            raise TrainingError("non-finite averaged weights", r)
    if history is not None:
        history.append(float(sum(s * _cross_entropy(w, x1, y)[0] for (x1, y), s in zip(data, share))))
    return LinearSoftmax(w)


def accuracy(model, examples: Examples) -> float:
    return float(np.mean(np.argmax(model.logits(examples.features), axis=1) == examples.labels))


@dataclass
class ScoreFile:
    model: LookupModel
    clients: list
    row_counts: dict = field(default_factory=dict)


_FIXED = ("client_id", "example_id", "true_label")


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        if tuple(header[:3]) != _FIXED:
            raise ParseError(f"header must start with {','.join(_FIXED)}", 1)
        n_classes = len(header) - 3
        expected = [f"logit_{j}" for j in range(n_classes)]
        if header[3:] != expected or n_classes < 2:
            raise ParseError("header must continue with logit_0 ... logit_{J-1}, J >= 2", 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"line {line}: expected {len(header)} columns, got {len(row)}")
            try:
                label = int(row[2])
                logits = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ParseError(str(exc), line) from None
            yield line, row[0], row[1], label, logits


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
                client, example = str(obj["client_id"]), str(obj["example_id"])
                label = obj["true_label"]
                logits = [float(v) for v in obj["logits"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record: {exc}", line) from None
            if not isinstance(label, int) or isinstance(label, bool):
                raise ParseError("true_label must be an integer", line)
            yield line, client, example, label, logits


def load_score_file(path, fmt=None) -> ScoreFile:
    """Read externally computed logits from CSV or JSONL.

    Returns a :class:`ScoreFile` whose ``clients`` hold every row of a client
    in ``calibration`` (use :meth:`ClientData.split` to carve out a test half).
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        rows = _read_csv(path)
    elif fmt in ("jsonl", "json"):
        rows = _read_jsonl(path)
    else:
        raise InvalidInputError(f"unknown score file format {fmt!r}")

    table = {}
    groups = OrderedDict()
    n_classes = None
    for line, client, example, label, logits in rows:
        if n_classes is None:
            n_classes = len(logits)
            if n_classes < 2:
                raise FormatError(f"line {line}: need at least 2 logits")
        elif len(logits) != n_classes:
            raise FormatError(f"line {line}: {len(logits)} logits, expected {n_classes}")
        if not all(math.isfinite(v) for v in logits):
            raise ParseError("logits must be finite", line)
        if not (0 <= label < n_classes):
            raise ParseError(f"true_label {label} outside [0, {n_classes})", line)
        if example in table:
            raise ParseError(f"duplicate example_id {example!r}", line)
        table[example] = logits
        groups.setdefault(client, []).append((example, label))
    if not table:
        raise FormatError(f"{path}: no records")

    clients = []
    for client, items in groups.items():
        ids = np.array([e for e, _ in items])
        labels = np.array([y for _, y in items], dtype=int)
        cal = Examples(ids, labels, ids)
        clients.append(ClientData(client, tuple(sorted(set(labels.tolist()))), cal, Examples(ids[:0], labels[:0], ids[:0])))
    counts = {c.client_id: len(c.calibration) for c in clients}
    return ScoreFile(LookupModel(table), clients, counts)


def write_score_file(path, clients, model, fmt=None):
    """Write each client's calibration and test logits in the score-file schema."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    records = []
    for c in clients:
        for part in (c.calibration, c.test):
            if len(part) == 0:
                continue
            logits = model.logits(part.features)
            for eid, y, z in zip(part.ids, part.labels, logits):
                records.append((c.client_id, str(eid), int(y), [float(v) for v in z]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            n_classes = len(records[0][3])
            writer = csv.writer(fh)
            writer.writerow(list(_FIXED) + [f"logit_{j}" for j in range(n_classes)])
            for client, eid, y, z in records:
                writer.writerow([client, eid, y] + [repr(v) for v in z])
        else:
            for client, eid, y, z in records:
                fh.write(json.dumps({"client_id": client, "example_id": eid, "true_label": y, "logits": z}) + "\n")
    return path

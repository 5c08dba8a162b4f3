"""Language-guided classification head.

Per-token features are compared by cosine similarity against unit
embeddings of class names living in one shared space. Because a class
name maps to the same vector no matter which dataset mentions it, label
sets that only partially overlap still supervise and evaluate coherently.
Embeddings are loaded from a small text format; nothing here runs a text
encoder.

Embedding file format: UTF-8 text, line 1 `dim=<E>`, then one line per
class: `<name>\t<v1> <v2> ... <vE>`. Names may contain spaces, not tabs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import (ConfigError, FormatError, InputError, NormalizationError,
                     SupervisionError)
from .tensorcore import Tensor

MIN_NORM = 1e-12


@dataclass
class ClassEmbeddingTable:
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, vector: np.ndarray) -> None:
        if name in self.entries:
            raise FormatError(f"duplicate class name {name!r}")
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise FormatError(f"class {name!r} has dim {vector.shape}, table dim is {self.dim}")
        norm = float(np.linalg.norm(vector))
        if norm < MIN_NORM:
            raise NormalizationError(f"class {name!r} embedding has norm {norm:g}")
        self.entries[name] = vector / norm

    def matrix(self, names: list[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise ConfigError(f"classes missing from embedding table: {missing}")
        return np.stack([self.entries[n] for n in names])


@dataclass(frozen=True)
class LabelSpace:
    dataset_name: str
    class_names: tuple[str, ...]
    ignore_index: int = -1

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def save_embeddings(table: ClassEmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={table.dim}\n")
        for name, vec in table.entries.items():
            fh.write(name + "\t" + " ".join(f"{v:.17g}" for v in vec) + "\n")


def load_embeddings(path) -> ClassEmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("dim="):
        raise FormatError("embedding file must start with a dim=<E> line")
    try:
        dim = int(lines[0][4:])
    except ValueError as e:
        raise FormatError(f"bad dim header {lines[0]!r}") from e
    table = ClassEmbeddingTable(dim=dim)
    for ln in lines[1:]:
        if "\t" not in ln:
            raise FormatError(f"embedding row without tab separator: {ln[:40]!r}")
        name, _, rest = ln.partition("\t")
        values = np.array([float(v) for v in rest.split()])
        if values.size != dim:
            raise FormatError(f"class {name!r} has {values.size} values, expected {dim}")
        table.add(name, values)
    return table


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def default_table(dim: int = 32, seed: int = 7) -> ClassEmbeddingTable:
    """Desk-scale embedding table with a controlled similarity structure.

    Independent unit vectors for the base classes; "ground" is built at
    cosine 0.7 to "floor" and "box_c" at cosine 0.7 to "box_a", so related
    concepts from different label sets sit close in the shared space.
    "wall" is one vector used by every label space that mentions it.
    """
    rng = np.random.default_rng([seed, 0xC1A55])
    table = ClassEmbeddingTable(dim=dim)
    for name in ("floor", "ceiling", "wall", "box_a", "box_b", "pole", "vehicle"):
        table.add(name, _unit(rng, dim))

    def related(base: np.ndarray, cos: float) -> np.ndarray:
        u = _unit(rng, dim)
        u -= base * (u @ base)
        u /= np.linalg.norm(u)
        return cos * base + np.sqrt(1.0 - cos * cos) * u

    table.add("ground", related(table.entries["floor"], 0.7))
    table.add("box_c", related(table.entries["box_a"], 0.7))
    return table


def class_logits(features: Tensor, space: LabelSpace, table: ClassEmbeddingTable,
                 scale: float = 10.0) -> Tensor:
    """scale * cosine(feature, class embedding), over the space's classes.

    Both sides are L2-normalized, so every logit lies in [-scale, scale].
    """
    if features.data.shape[1] != table.dim:
        raise ConfigError(f"feature dim {features.data.shape[1]} != table dim {table.dim}")
    w = table.matrix(list(space.class_names))
    return tc.scale(tc.matmul(tc.unit_rows(features), tc.tensor(w.T)), scale)


def masked_cross_entropy(logits: Tensor, labels: np.ndarray,
                         ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over tokens whose label is not the ignore index."""
    labels = np.asarray(labels, dtype=np.int64)
    t, c = logits.data.shape
    if labels.shape != (t,):
        raise InputError(f"labels shape {labels.shape} does not match {t} tokens")
    if np.any((labels < ignore_index) | (labels >= c)):
        raise InputError(f"labels must lie in [{ignore_index}, {c})")
    counted = labels != ignore_index
    n = int(counted.sum())
    if n == 0:
        raise SupervisionError("all labels are ignored; nothing to supervise")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(t), np.where(counted, labels, 0)]
    loss = float(np.mean((lse - picked)[counted]))

    def bw(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        dz = p.copy()
        dz[np.arange(t), np.where(counted, labels, 0)] -= 1.0
        dz[~counted] = 0.0
        return (dz * (float(g) / n),)

    return tc.make_node(np.asarray(loss), (logits,), bw)


def predict(features, space: LabelSpace, table: ClassEmbeddingTable,
            scale: float = 10.0) -> np.ndarray:
    """Argmax class ids over the space's classes; ties pick the lower index."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    w = table.matrix(list(space.class_names))
    norms = np.maximum(np.linalg.norm(data, axis=1, keepdims=True), MIN_NORM)
    return np.argmax((data / norms) @ w.T, axis=1)

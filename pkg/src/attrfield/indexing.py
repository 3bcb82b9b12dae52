"""Learned attribute indexing.

Each catalog entry gets an index vector: a one-hot label pushed through an
8-layer MLP and L2-normalized. Orthogonality between indexes is encouraged by
a pairwise |cosine| penalty rather than by construction, so the vectors stay
free to drift wherever the rendering objective wants them.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

DEFAULT_ATTRIBUTES = (
    "Outer", "Top", "Skirts", "Dress", "Pants", "Rompers",
    "Hats", "Glasses", "Body", "Shoes", "Haircut",
)

N_LAYERS = 8
DEFAULT_HIDDEN = 64


class DegenerateIndexError(ValueError):
    """Pre-normalization output collapsed to (near) zero."""


class AttributeCatalog:
    """Ordered, unique attribute names; positions are the label space."""

    def __init__(self, names=DEFAULT_ATTRIBUTES):
        names = tuple(names)
        if len(names) < 2:
            raise ValueError("catalog needs at least 2 attributes")
        if len(set(names)) != len(names):
            raise ValueError("catalog names must be unique")
        self.names = names

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def label(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown attribute {name!r}") from None


class IndexerMLP:
    """Eight fully-connected layers, tanh between them, linear output."""

    def __init__(self, weights, biases):
        if len(weights) != N_LAYERS or len(biases) != N_LAYERS:
            raise ValueError(f"indexer must have exactly {N_LAYERS} layers")
        for w, b in zip(weights, biases):
            if not (np.all(np.isfinite(ad.value(w))) and np.all(np.isfinite(ad.value(b)))):
                raise ValueError("indexer parameters must be finite")
        self.weights = list(weights)
        self.biases = list(biases)

    @property
    def in_dim(self) -> int:
        return ad.value(self.weights[0]).shape[0]

    @property
    def out_dim(self) -> int:
        return ad.value(self.weights[-1]).shape[1]

    @classmethod
    def build(cls, n_labels: int, a_dim: int = 16, hidden: int = DEFAULT_HIDDEN,
              seed: int = 0) -> "IndexerMLP":
        rng = np.random.default_rng(seed)
        dims = [n_labels] + [hidden] * (N_LAYERS - 1) + [a_dim]
        weights, biases = [], []
        # the 5/3 tanh gain keeps signal variance alive through a stack this
        # deep; without it the raw outputs shrink toward a shared point and
        # row normalization turns ill-conditioned
        gain = np.float32(5.0 / 3.0)
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.standard_normal((fan_in, fan_out), dtype=np.float32)
            w = (w * gain / np.float32(np.sqrt(fan_in))).astype(np.float64)
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def parameters(self):
        return self.weights + self.biases

    def forward(self, x):
        """Run a batch (B, in_dim) through the stack; no output activation."""
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w) + b
            if i < N_LAYERS - 1:
                h = ad.tanh(h)
        return h


class AttributeIndex:
    """Unit-length index vector tagged with its catalog position."""

    def __init__(self, vector, label: int):
        norm = float(np.linalg.norm(ad.value(vector)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("index vector must be unit length")
        self.vector = vector
        self.label = int(label)


def one_hot(label: int, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[label] = 1.0
    return out


def _normalize_rows(m):
    sq = ad.summe(m * m, axis=1, keepdims=True)
    norms = np.sqrt(ad.value(sq))
    if np.any(norms < 1e-12):
        raise DegenerateIndexError("indexer produced a (near) zero vector")
    return m * sq ** -0.5


def index_vectors(mlp: IndexerMLP, n_labels: int):
    """All n index vectors at once, rows unit-normalized; AD-transparent."""
    if n_labels > mlp.in_dim:
        raise ValueError("label space exceeds indexer input width")
    eye = np.eye(mlp.in_dim)[:n_labels]
    return _normalize_rows(mlp.forward(eye))


def index_forward(mlp: IndexerMLP, label: int) -> AttributeIndex:
    """Index vector for one catalog position."""
    if not 0 <= label < mlp.in_dim:
        raise ValueError(f"label {label} outside catalog of {mlp.in_dim}")
    raw = mlp.forward(one_hot(label, mlp.in_dim).reshape(1, -1))
    vec = _normalize_rows(raw)
    vec = ad.value(vec)[0] if not isinstance(vec, ad.Tensor) else vec[0]
    return AttributeIndex(vec, label)


def _as_vector(index):
    return index.vector if isinstance(index, AttributeIndex) else index


def opr_loss(indexes):
    """Sum of |cos| over unordered index pairs; 0 for fewer than two."""
    vecs = [_as_vector(i) for i in indexes]
    if len(vecs) < 2:
        return 0.0
    for v in vecs:
        if abs(float(np.linalg.norm(ad.value(v))) - 1.0) > 1e-6:
            raise ValueError("opr_loss expects unit-norm indexes")
    m = ad.stack(vecs, axis=0)
    gram = ad.matmul(m, ad.transpose(m, (1, 0)))
    mask = np.triu(np.ones((len(vecs),) * 2), k=1)
    return ad.summe(ad.absolute(gram) * mask)


def cosine_matrix(indexes) -> np.ndarray:
    """Pairwise cosine similarities as a symmetric unit-diagonal matrix."""
    vecs = np.stack([ad.value(_as_vector(i)) for i in indexes], axis=0)
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    g = vecs @ vecs.T
    g = np.clip((g + g.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(g, 1.0)
    return g

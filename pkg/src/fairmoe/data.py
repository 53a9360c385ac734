"""Synthetic biased image-text pairs, manifest I/O and group-stratified sampling.

Images are ``S x S`` float64 arrays in ``[0, 1]``.  A positive label lights up
a central square; a per-sample background level shifts the whole image and
is echoed by a caption token, which gives the contrastive task instance-level
structure.  With probability ``bias_strength`` a sample is *marked*: every
attribute adds its group's artifact (a fixed pixel subset inside the central
square, brighter for higher group indices) and the caption gains the group's
dialect tokens.  Unmarked samples carry no group information at all.

Token layout (``vocab_size >= 64``)::

    0 pad | 1 bos | 2 positive | 3 negative | 4-7 background level
    8-15 filler | 16-35 dialect (two per attribute group) | 36+ free words
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nncore import ContractError

PAD, BOS, POS, NEG = 0, 1, 2, 3
LEVEL_BASE, N_LEVELS = 4, 4
FILLER = tuple(range(8, 16))
DIALECT_BASE = 16
FREE_BASE = 36

ATTRIBUTE_GROUPS = {"race": 3, "gender": 2, "ethnicity": 2, "language": 3}
DEFAULT_PRIORS = {
    "race": [0.55, 0.30, 0.15],
    "gender": [0.55, 0.45],
    "ethnicity": [0.80, 0.20],
    "language": [0.75, 0.15, 0.10],
}

POSITIVE_PROMPT = (BOS, POS)
NEGATIVE_PROMPT = (BOS, NEG)


class SchemaError(ValueError):
    """A manifest record violates the dataset schema."""


@dataclass
class ExamplePair:
    id: str
    image: np.ndarray
    tokens: list
    label: int
    attributes: dict

    def __eq__(self, other):
        if not isinstance(other, ExamplePair):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.image, other.image)
            and list(self.tokens) == list(other.tokens)
            and self.label == other.label
            and self.attributes == other.attributes
        )


@dataclass
class SynthSpec:
    n: int = 2000
    seed: int = 0
    bias_strength: float = 0.9
    label_signal_strength: float = 0.35
    artifact_strength: float = 0.35
    noise_sigma: float = 0.1
    group_priors: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_PRIORS.items()})
    image_size: int = 16
    seq_len: int = 16
    vocab_size: int = 64
    n_free_words: int = 3

    def __post_init__(self):
        if self.n < 0:
            raise ContractError("n must be non-negative")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ContractError("bias_strength must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        if self.vocab_size < FREE_BASE + 1:
            raise ContractError(f"vocab_size must be at least {FREE_BASE + 1}")
        for attr, k in ATTRIBUTE_GROUPS.items():
            p = np.asarray(self.group_priors.get(attr, []), dtype=float)
            if p.shape != (k,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ContractError(f"priors for {attr!r} must be {k} probabilities summing to 1")
        if self.image_size % 4:
            raise ContractError("image_size must be a multiple of 4")


def _dialect_tokens(attr: str, group: int) -> tuple[int, int]:
    offset = 0
    for a, k in ATTRIBUTE_GROUPS.items():
        if a == attr:
            t = DIALECT_BASE + 2 * (offset + group)
            return t, t + 1
        offset += k
    raise KeyError(attr)


def signal_region(image_size: int) -> tuple[slice, slice]:
    q = image_size // 4
    return slice(q, 3 * q), slice(q, 3 * q)


def artifact_masks(image_size: int) -> dict[tuple[str, int], np.ndarray]:
    """Disjoint pixel subsets of the central square, one per (attribute, group)."""
    rs, cs = signal_region(image_size)
    side = rs.stop - rs.start
    cells = [(r, c) for r in range(side) for c in range(side)]
    # fixed interleaving so each subset is spread over the square
    order = np.random.default_rng(12345).permutation(len(cells))
    n_groups = sum(ATTRIBUTE_GROUPS.values())
    per = len(cells) // n_groups
    masks = {}
    i = 0
    for attr, k in ATTRIBUTE_GROUPS.items():
        for g in range(k):
            m = np.zeros((image_size, image_size), dtype=bool)
            for j in order[i * per : (i + 1) * per]:
                r, c = cells[j]
                m[rs.start + r, cs.start + c] = True
            masks[(attr, g)] = m
            i += 1
    return masks


def synthesize(spec: SynthSpec) -> list[ExamplePair]:
    """Generate ``spec.n`` pairs; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    S = spec.image_size
    rs, cs = signal_region(S)
    masks = artifact_masks(S)
    out = []
    for i in range(spec.n):
        label = int(rng.random() < 0.5)
        attrs = {a: int(rng.choice(k, p=spec.group_priors[a])) for a, k in ATTRIBUTE_GROUPS.items()}
        level = int(rng.integers(N_LEVELS))
        marked = bool(rng.random() < spec.bias_strength)
        noise = rng.normal(0.0, 1.0, size=(S, S))
        free = rng.integers(FREE_BASE, spec.vocab_size, size=spec.n_free_words)
        filler = rng.choice(FILLER, size=2, replace=False)

        img = np.full((S, S), 0.1 * level)
        if label:
            img[rs, cs] += spec.label_signal_strength
        if marked:
            for a, g in attrs.items():
                img[masks[(a, g)]] += spec.artifact_strength * (g + 1) / ATTRIBUTE_GROUPS[a]
        img += spec.noise_sigma * noise
        img = np.clip(img, 0.0, 1.0)

        tokens = [BOS, POS if label else NEG, LEVEL_BASE + level, *filler.tolist(), *free.tolist()]
        if marked:
            for a, g in attrs.items():
                tokens.append(_dialect_tokens(a, g)[i % 2])
        tokens = tokens[: spec.seq_len]
        out.append(ExamplePair(f"s{spec.seed}-{i:06d}", img, tokens, label, attrs))
    return out


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------


class Dataset:
    """Indexable collection of pairs with lazily loaded image blobs."""

    def __init__(self, records: Sequence, meta: dict | None = None, root: Path | None = None):
        self._records = list(records)
        self.meta = dict(meta or {})
        self.root = root
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, i: int) -> ExamplePair:
        r = self._records[i]
        if isinstance(r, ExamplePair):
            return r
        return ExamplePair(r["id"], self.image(i), list(r["tokens"]), int(r["label"]), dict(r["attributes"]))

    def __iter__(self) -> Iterator[ExamplePair]:
        return (self[i] for i in range(len(self)))

    def image(self, i: int) -> np.ndarray:
        r = self._records[i]
        if isinstance(r, ExamplePair):
            return r.image
        if i not in self._cache:
            S = int(self.meta["image_size"])
            arr = np.fromfile(self.root / r["image_path"], dtype="<f8")
            if arr.size != S * S:
                raise SchemaError(f"record {r['id']}: blob has {arr.size} values, expected {S * S}")
            self._cache[i] = arr.reshape(S, S).astype(np.float64)
        return self._cache[i]

    def ids(self) -> list[str]:
        return [r.id if isinstance(r, ExamplePair) else r["id"] for r in self._records]

    def labels(self) -> np.ndarray:
        return np.array([self._field(i, "label") for i in range(len(self))], dtype=int)

    def attribute(self, name: str) -> np.ndarray:
        return np.array([self._field(i, "attributes")[name] for i in range(len(self))])

    def tokens(self, i: int) -> list:
        return list(self._field(i, "tokens"))

    def _field(self, i, name):
        r = self._records[i]
        return getattr(r, name) if isinstance(r, ExamplePair) else r[name]

    def images(self, idx: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.stack([self.image(i) for i in idx])

    def subset(self, idx: Sequence[int]) -> "Dataset":
        sub = Dataset([self._records[i] for i in idx], self.meta, self.root)
        sub._cache = {j: self._cache[i] for j, i in enumerate(idx) if i in self._cache}
        return sub

    def group_indices(self, attribute: str, group) -> np.ndarray:
        return np.flatnonzero(self.attribute(attribute) == group)


def from_pairs(pairs: Sequence[ExamplePair], spec: SynthSpec | None = None) -> Dataset:
    meta = {}
    if spec is not None:
        meta = {"image_size": spec.image_size, "vocab_size": spec.vocab_size, "seq_len": spec.seq_len, "synth": asdict(spec)}
    return Dataset(pairs, meta)


def split(ds: Dataset, fractions: Sequence[float], seed: int = 0) -> list[Dataset]:
    """Random disjoint split by fractions (the last part takes the remainder)."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    cuts = np.floor(np.cumsum(fractions)[:-1] * len(ds)).astype(int)
    return [ds.subset(np.sort(p).tolist()) for p in np.split(perm, cuts)]


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

MANIFEST = "manifest.jsonl"
META = "meta.json"


def write_dataset(pairs: Sequence[ExamplePair], out_dir, spec: SynthSpec | None = None, meta: dict | None = None) -> Path:
    """Write ``manifest.jsonl``, ``meta.json`` and one raw float64 blob per image."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    if spec is not None:
        meta.update(image_size=spec.image_size, vocab_size=spec.vocab_size, seq_len=spec.seq_len, synth=asdict(spec))
    elif pairs:
        meta.setdefault("image_size", int(pairs[0].image.shape[0]))
    with open(out / MANIFEST, "w") as fh:
        for p in pairs:
            rel = f"images/{p.id}.f64"
            np.ascontiguousarray(p.image, dtype="<f8").tofile(out / rel)
            rec = {"id": p.id, "image_path": rel, "tokens": [int(t) for t in p.tokens], "label": int(p.label), "attributes": p.attributes}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST


def load_manifest(path, vocab_size: int | None = None, image_size: int | None = None, attributes=tuple(ATTRIBUTE_GROUPS)) -> Dataset:
    """Load a manifest file (or a directory containing ``manifest.jsonl``).

    Records are validated on load; images are read on first access.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    root = path.parent
    meta = json.loads((root / META).read_text()) if (root / META).exists() else {}
    vocab_size = vocab_size or meta.get("vocab_size")
    if image_size:
        meta["image_size"] = image_size
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            _validate(rec, lineno, vocab_size, attributes)
            records.append(rec)
    if records and "image_size" not in meta:
        raise SchemaError(f"{root / META} missing; image_size unknown")
    return Dataset(records, meta, root)


def _validate(rec: dict, lineno: int, vocab_size, attributes) -> None:
    rid = rec.get("id", f"<line {lineno}>")
    for key in ("id", "image_path", "tokens", "label", "attributes"):
        if key not in rec:
            raise SchemaError(f"record {rid} (line {lineno}): missing field {key!r}")
    if rec["label"] not in (0, 1):
        raise SchemaError(f"record {rid}: label must be 0 or 1")
    missing = [a for a in attributes if a not in rec["attributes"]]
    if missing:
        raise SchemaError(f"record {rid}: missing attribute(s) {missing}")
    toks = rec["tokens"]
    if not isinstance(toks, list) or not all(isinstance(t, int) for t in toks):
        raise SchemaError(f"record {rid}: tokens must be a list of integers")
    if vocab_size is not None and any(t < 0 or t >= vocab_size for t in toks):
        raise SchemaError(f"record {rid}: token out of vocabulary [0, {vocab_size})")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


class IndexQueue:
    """Endless shuffled stream over ``indices``; epoch ``e`` uses permutation ``rng(key + [e])``.

    The position in the stream is the only state, so a queue is restored
    exactly from ``(indices, key, cursor)``.
    """

    def __init__(self, indices: Sequence[int], key: Sequence[int], cursor: int = 0):
        self.indices = np.asarray(indices, dtype=np.int64)
        if self.indices.size == 0:
            raise ContractError("cannot sample from an empty index set")
        self.key = [int(k) for k in key]
        self.cursor = cursor
        self._epoch = -1
        self._perm = None

    def _perm_for(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            self._perm = self.indices[np.random.default_rng(self.key + [epoch]).permutation(self.indices.size)]
            self._epoch = epoch
        return self._perm

    def draw(self, k: int) -> np.ndarray:
        n = self.indices.size
        out = []
        while len(out) < k:
            epoch, pos = divmod(self.cursor, n)
            take = min(k - len(out), n - pos)
            out.extend(self._perm_for(epoch)[pos : pos + take].tolist())
            self.cursor += take
        return np.asarray(out, dtype=np.int64)


def stratified_batches(
    dataset: Dataset, attribute: str, group, batch_size: int, seed: int = 0, epochs: int | None = 1
) -> Iterator[np.ndarray]:
    """Batches of indices drawn only from ``attribute == group``.

    Each epoch visits every member once (the last batch may be short) and
    then reshuffles.  ``epochs=None`` iterates forever.
    """
    members = dataset.group_indices(attribute, group)
    if members.size == 0:
        raise ContractError(f"group {attribute}={group!r} is empty")
    e = 0
    while epochs is None or e < epochs:
        perm = members[np.random.default_rng([seed, e]).permutation(members.size)]
        for start in range(0, perm.size, batch_size):
            yield perm[start : start + batch_size]
        e += 1


class GroupSampler:
    """Full-size batches per protected group, drawn from per-group index queues."""

    def __init__(self, dataset: Dataset, attribute: str, batch_size: int, seed: int, cursors: dict | None = None):
        groups = dataset.attribute(attribute)
        self.groups = sorted(set(groups.tolist()))
        self.batch_size = batch_size
        cursors = cursors or {}
        self.queues = {
            g: IndexQueue(np.flatnonzero(groups == g), [seed, 7, i], int(cursors.get(str(g), 0)))
            for i, g in enumerate(self.groups)
        }

    def draw(self) -> dict:
        return {g: q.draw(self.batch_size) for g, q in self.queues.items()}

    def state(self) -> dict:
        return {str(g): q.cursor for g, q in self.queues.items()}


# ---------------------------------------------------------------------------
# planted-bias probe
# ---------------------------------------------------------------------------


def group_probe_accuracy(dataset: Dataset, attribute: str = "race", seed: int = 0) -> float:
    """Held-out accuracy of a logistic-regression probe predicting ``attribute`` from raw pixels."""
    from sklearn.linear_model import LogisticRegression

    X = dataset.images().reshape(len(dataset), -1)
    y = dataset.attribute(attribute)
    perm = np.random.default_rng(seed).permutation(len(y))
    half = len(y) // 2
    tr, te = perm[:half], perm[half:]
    if len(set(y[tr].tolist())) < 2:
        return 1.0
    probe = LogisticRegression(C=1.0, max_iter=2000)
    probe.fit(X[tr], y[tr])
    return float((probe.predict(X[te]) == y[te]).mean())

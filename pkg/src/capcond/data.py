"""Caption datasets, vocabularies and image feature stores.

Datasets are JSON files in a Karpathy-split-like layout; features live in a
separate little-endian float32 matrix file (``CAPFEAT1``).
"""

from __future__ import annotations

import itertools
import json
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .util import atomic_write

FEATURE_MAGIC = b"CAPFEAT1"
SPLITS = ("train", "val", "test")
START_TOKEN, END_TOKEN, UNKNOWN_TOKEN = "<START>", "<END>", "<UNKNOWN>"
SPECIALS = (START_TOKEN, END_TOKEN, UNKNOWN_TOKEN)
START, END, UNKNOWN = 0, 1, 2


class DataError(ValueError):
    """Dataset or feature file is malformed."""


class Vocabulary:
    """Token/id bijection with START, END and UNKNOWN at ids 0, 1, 2."""

    def __init__(self, words: Sequence[str], min_frequency: int = 5):
        self.min_frequency = min_frequency
        self.id_to_token = list(SPECIALS) + list(words)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary words must be unique and distinct from specials")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def words(self) -> list[str]:
        return self.id_to_token[len(SPECIALS):]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, UNKNOWN) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.id_to_token):
                raise IndexError(f"token id {i} out of range [0, {len(self.id_to_token)})")
            out.append(self.id_to_token[int(i)])
        return out

    def to_dict(self) -> dict:
        return {"min_frequency": self.min_frequency, "words": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], d.get("min_frequency", 5))


def build_vocabulary(train_captions: Sequence[Sequence[str]], min_frequency: int = 5) -> Vocabulary:
    if not train_captions:
        raise ValueError("cannot build a vocabulary from zero captions")
    counts = Counter(tok for cap in train_captions for tok in cap)
    kept = [t for t, c in counts.items() if c >= min_frequency and t not in SPECIALS]
    # most frequent first, alphabetical within a count, for a stable id layout
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_frequency)


def tokenize(text: str) -> list[str]:
    """Approximate tokenizer for raw captions: lowercase, drop ASCII punctuation, split."""
    table = str.maketrans("", "", string.punctuation)
    return text.lower().translate(table).split()


@dataclass
class ImageRecord:
    id: str
    split: str
    feature_index: int
    captions: list[list[str]]


@dataclass
class Dataset:
    images: list[ImageRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ImageRecord]:
        return [im for im in self.images if im.split == name]

    def train_captions(self) -> list[list[str]]:
        return [c for im in self.split("train") for c in im.captions]

    def to_dict(self) -> dict:
        return {"images": [{"id": im.id, "split": im.split,
                            "feature_index": im.feature_index,
                            "captions": im.captions} for im in self.images]}

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        if not isinstance(d, dict) or not isinstance(d.get("images"), list):
            raise DataError("dataset JSON must be an object with an 'images' list")
        images = []
        for n, raw in enumerate(d["images"]):
            try:
                im = ImageRecord(str(raw["id"]), raw["split"], int(raw["feature_index"]),
                                 [list(map(str, c)) for c in raw["captions"]])
            except (KeyError, TypeError) as exc:
                raise DataError(f"images[{n}]: missing or malformed field {exc}") from None
            if im.split not in SPLITS:
                raise DataError(f"images[{n}]: split {im.split!r} not in {SPLITS}")
            if not im.captions:
                raise DataError(f"images[{n}]: no captions")
            images.append(im)
        return cls(images)


@dataclass
class FeatureStore:
    matrix: np.ndarray  # count x dim, float32

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise DataError(f"feature matrix must be 2-d, got shape {self.matrix.shape}")

    @property
    def count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __getitem__(self, index) -> np.ndarray:
        return self.matrix[index]


def write_features(store: FeatureStore, path) -> None:
    header = FEATURE_MAGIC + struct.pack("<II", store.count, store.dim)
    atomic_write(path, header + store.matrix.astype("<f4").tobytes())


def read_features(path) -> FeatureStore:
    buf = Path(path).read_bytes()
    if buf[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: missing CAPFEAT1 magic")
    count, dim = struct.unpack_from("<II", buf, 8)
    expected = 16 + 4 * count * dim
    if len(buf) != expected:
        raise DataError(f"{path}: {len(buf)} bytes, header implies {expected}")
    mat = np.frombuffer(buf, dtype="<f4", offset=16).reshape(count, dim)
    return FeatureStore(mat.astype(np.float32))


def write_dataset(dataset: Dataset, path) -> None:
    atomic_write(path, json.dumps(dataset.to_dict(), ensure_ascii=False))


def read_dataset(path) -> Dataset:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return Dataset.from_dict(raw)


def load_dataset(dataset_path, features_path) -> tuple[Dataset, FeatureStore]:
    dataset = read_dataset(dataset_path)
    store = read_features(features_path)
    for im in dataset.images:
        if not 0 <= im.feature_index < store.count:
            raise DataError(f"image {im.id!r}: feature_index {im.feature_index} "
                            f"outside feature file with {store.count} rows")
    return dataset, store


def convert_karpathy(karpathy_json, features=None) -> tuple[Dataset, FeatureStore | None]:
    """Map a published ``dataset_<name>.json`` into this package's layout.

    Field mapping: ``filename`` -> id, ``split`` -> split (``restval`` folds
    into train), ``imgid`` (else list position) -> feature_index,
    ``sentences[*].tokens`` -> captions.  ``features`` may be the matching
    ``vgg_feats.mat`` (4096 x N, key ``feats``) or a ``.npy`` N x 4096 array.
    """
    raw = json.loads(Path(karpathy_json).read_text(encoding="utf-8"))
    images = []
    for pos, im in enumerate(raw["images"]):
        split = "train" if im["split"] == "restval" else im["split"]
        caps = [list(s["tokens"]) for s in im["sentences"]]
        images.append(ImageRecord(str(im.get("filename", pos)), split,
                                  int(im.get("imgid", pos)), caps))
    store = None
    if features is not None:
        path = Path(features)
        if path.suffix == ".mat":
            from scipy.io import loadmat
            mat = np.asarray(loadmat(str(path))["feats"]).T
        else:
            mat = np.load(path)
        store = FeatureStore(mat)
    return Dataset(images), store


# -- synthetic data ---------------------------------------------------------

SLOT_WORDS = {
    "color": ["red", "blue", "green", "yellow", "black", "white", "brown", "pink"],
    "object": ["dog", "cat", "bird", "horse", "car", "boat", "child", "man"],
    "action": ["running", "sitting", "jumping", "sleeping", "swimming", "eating",
               "standing", "flying"],
}


def synthetic_caption(values: Sequence[str]) -> list[str]:
    """Five-token template; with two slots the action is fixed to ``here``."""
    if len(values) == 2:
        return ["a", values[0], values[1], "is", "here"]
    return ["a", values[0], values[1], "is", values[2]]


def generate_synthetic(seed: int, n_images: int, n_attributes: int = 3,
                       n_values: int = 3, noise: float = 0.01,
                       ) -> tuple[Dataset, FeatureStore]:
    """Seeded toy captioning corpus.

    Each image picks one value per attribute slot (color, object, action);
    its feature is the concatenation of one-hot blocks plus Gaussian noise of
    scale ``noise``, and its single caption is "a <color> <object> is
    <action>".  Combinations are drawn without replacement while any remain,
    then the cycle restarts.  With the defaults (27 combinations) every
    validation combination also occurs in training; when ``n_images`` does
    not exceed ``n_values ** n_attributes`` all images are distinct, so the
    validation and test combinations are held out.  Splits are 80/10/10 in
    image order.
    """
    if n_images < 10:
        raise ValueError("n_images must be at least 10 so every split is non-empty")
    if not 2 <= n_attributes <= len(SLOT_WORDS):
        raise ValueError(f"n_attributes must be between 2 and {len(SLOT_WORDS)}")
    if not 2 <= n_values <= 8:
        raise ValueError("n_values must be between 2 and 8")
    rng = np.random.default_rng(seed)
    slots = list(SLOT_WORDS)[:n_attributes]
    combos = list(itertools.product(range(n_values), repeat=n_attributes))
    picks = []
    while len(picks) < n_images:
        order = rng.permutation(len(combos))
        picks.extend(combos[i] for i in order[: n_images - len(picks)])
    dim = n_attributes * n_values
    feats = np.zeros((n_images, dim), dtype=np.float64)
    for row, combo in enumerate(picks):
        for slot, value in enumerate(combo):
            feats[row, slot * n_values + value] = 1.0
    feats += noise * rng.standard_normal(feats.shape)
    n_train = int(round(0.8 * n_images))
    n_val = int(round(0.1 * n_images))
    images = []
    for row, combo in enumerate(picks):
        split = "train" if row < n_train else "val" if row < n_train + n_val else "test"
        words = [SLOT_WORDS[s][v] for s, v in zip(slots, combo)]
        images.append(ImageRecord(f"synth-{row:05d}", split, row, [synthetic_caption(words)]))
    return Dataset(images), FeatureStore(feats)


# -- model-facing helpers ---------------------------------------------------

def encoded_pairs(dataset: Dataset, vocab: Vocabulary, split: str,
                  first_caption_only: bool = False) -> list[tuple[int, list[int]]]:
    """(feature_index, caption ids) for every caption of the split."""
    out = []
    for im in dataset.split(split):
        caps = im.captions[:1] if first_caption_only else im.captions
        out.extend((im.feature_index, vocab.encode(c)) for c in caps)
    return out

"""The four ways of conditioning a GRU language model on an image.

Every variant shares one schema: word embedding -> GRU -> output layer, with an
image projection (``ff_img``) that enters either the RNN (init/pre/par-inject)
or the output layer next to the final RNN state (merge).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tensor
from .util import atomic_write

START, END, UNKNOWN = 0, 1, 2
DROPOUT_SITES = ("image", "image_proj", "embedding", "rnn_output")
DROPOUT_RATE = 0.5
L2_COEFFICIENT = 1e-8
CHECKPOINT_MAGIC = b"CCMODEL1"


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


class ArchitectureKind(str, enum.Enum):
    INIT_INJECT = "init_inject"
    PRE_INJECT = "pre_inject"
    PAR_INJECT = "par_inject"
    MERGE = "merge"

    @classmethod
    def parse(cls, value) -> "ArchitectureKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_"))
        except ValueError:
            raise ConfigError(f"kind: unknown architecture {value!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    layer_size: int
    vocab_size: int
    kind: ArchitectureKind
    image_dim: int = 4096
    init_method: str = "normal"
    init_range: float = 0.1
    normalize_image: bool = True
    image_activation: str = "none"
    rnn_init_state: str = "zeros"
    l2_enabled: bool = False
    dropout_sites: frozenset = field(default_factory=frozenset)
    minibatch_size: int = 32
    max_epochs: int = 100
    beam_width: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", ArchitectureKind.parse(self.kind))
        object.__setattr__(self, "dropout_sites", frozenset(self.dropout_sites))
        self.validate()

    def validate(self) -> None:
        for key in ("layer_size", "vocab_size", "image_dim", "minibatch_size",
                    "max_epochs", "beam_width"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key}: must be a positive integer")
        if self.init_method not in ("normal", "xavier_normal", "xavier"):
            raise ConfigError(f"init_method: unknown value {self.init_method!r}")
        if not self.init_range > 0:
            raise ConfigError("init_range: must be positive")
        if self.image_activation not in ("none", "relu"):
            raise ConfigError(f"image_activation: unknown value {self.image_activation!r}")
        unknown = set(self.dropout_sites) - set(DROPOUT_SITES)
        if unknown:
            raise ConfigError(f"dropout_sites: unknown sites {sorted(unknown)}")
        if self.kind is ArchitectureKind.INIT_INJECT:
            if self.rnn_init_state != "image":
                raise ConfigError("rnn_init_state: init_inject requires 'image'")
        elif self.rnn_init_state not in ("zeros", "learnable"):
            raise ConfigError("rnn_init_state: must be 'zeros' or 'learnable' for this kind")

    @property
    def rnn_input_dim(self) -> int:
        if self.kind is ArchitectureKind.PAR_INJECT:
            return 2 * self.layer_size
        return self.layer_size

    @property
    def multimodal_dim(self) -> int:
        if self.kind is ArchitectureKind.MERGE:
            return 2 * self.layer_size
        return self.layer_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["dropout_sites"] = sorted(self.dropout_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every trainable array in checkpoint order."""
    l, v = config.layer_size, config.vocab_size
    n_in = config.rnn_input_dim
    shapes = [("embedding", (v, l))]
    for gate in ("r", "u", "c"):
        shapes.append((f"gru.W_x{gate}", (n_in, l)))
    for gate in ("r", "u", "c"):
        shapes.append((f"gru.W_s{gate}", (l, l)))
    for gate in ("r", "u", "c"):
        shapes.append((f"gru.b_{gate}", (l,)))
    shapes += [("ff_img.W", (config.image_dim, l)), ("ff_img.b", (l,)),
               ("ff_out.W", (config.multimodal_dim, v)), ("ff_out.b", (v,))]
    if config.rnn_init_state == "learnable":
        shapes.append(("s0", (l,)))
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(config))


def is_bias(name: str) -> bool:
    return name.endswith(".b") or ".b_" in name


def _init_weight(rng: np.random.Generator, shape, config: ModelConfig) -> np.ndarray:
    if config.init_method == "normal":
        std = config.init_range / 2
    else:
        std = np.sqrt(2.0 / (shape[0] + shape[1]))
    w = rng.normal(0.0, std, size=shape)
    return np.clip(w, -config.init_range, config.init_range)


class CaptionModel:
    """Parameters plus the wiring for one architecture kind."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        p = params
        self.embedding = L.EmbeddingTable(p["embedding"])
        self.gru = L.GruCell(*(p[f"gru.{k}"] for k in
                               ("W_xr", "W_xu", "W_xc", "W_sr", "W_su", "W_sc",
                                "b_r", "b_u", "b_c")))
        self.ff_img = L.DenseLayer(p["ff_img.W"], p["ff_img.b"], config.image_activation)
        self.ff_out = L.DenseLayer(p["ff_out.W"], p["ff_out.b"], "softmax")
        self.s0 = p.get("s0")

    @property
    def kind(self) -> ArchitectureKind:
        return self.config.kind

    def weight_names(self) -> list[str]:
        """Parameters subject to L2: weight matrices and embeddings."""
        return [n for n in self.params if not is_bias(n) and n != "s0"]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    # -- shared wiring ------------------------------------------------------

    def _dropout(self, x: Tensor, site: str, rng) -> Tensor:
        if rng is None or site not in self.config.dropout_sites:
            return x
        keep = (rng.random(x.shape) >= DROPOUT_RATE).astype(x.data.dtype)
        return T.multiply(x, Tensor(keep / (1 - DROPOUT_RATE), dtype=x.data.dtype))

    def _project(self, features: np.ndarray, rng) -> Tensor:
        feats = np.asarray(features, dtype=self.params["ff_img.W"].data.dtype)
        if self.config.normalize_image:
            feats = L.l2_normalize(feats)
        x = self._dropout(Tensor(feats, dtype=feats.dtype), "image", rng)
        proj = L.dense(self.ff_img, x)
        return self._dropout(proj, "image_proj", rng)

    def _initial_state(self, proj: Tensor) -> Tensor:
        """State before the first word is read (after the image, for pre-inject)."""
        kind = self.kind
        if kind is ArchitectureKind.INIT_INJECT:
            return proj
        batch = proj.shape[0]
        if self.s0 is not None:
            s = T.broadcast_rows(self.s0, batch)
        else:
            s = Tensor(np.zeros((batch, self.config.layer_size)), dtype=proj.data.dtype)
        if kind is ArchitectureKind.PRE_INJECT:
            s = L.gru_step(self.gru, proj, s)
        return s

    def _advance(self, s: Tensor, proj: Tensor, token_ids, rng) -> Tensor:
        x = self._dropout(L.embed(self.embedding, token_ids), "embedding", rng)
        if self.kind is ArchitectureKind.PAR_INJECT:
            x = T.concat(x, proj)
        return L.gru_step(self.gru, x, s)

    def _multimodal(self, s: Tensor, proj: Tensor, rng) -> Tensor:
        out = self._dropout(s, "rnn_output", rng)
        if self.kind is ArchitectureKind.MERGE:
            return T.concat(proj, out)
        return out

    def _logits(self, mm: Tensor) -> Tensor:
        return T.add(T.matmul(mm, self.ff_out.W), self.ff_out.b)

    def unroll(self, features: np.ndarray, prefixes: np.ndarray, rng=None) -> list[Tensor]:
        """Multimodal vectors after each prefix token, for a batch.

        ``features`` is batch x image_dim and ``prefixes`` batch x steps; every
        row is run through the network in lockstep.  Passing ``rng`` switches
        on dropout at the configured sites.
        """
        features = np.atleast_2d(features)
        prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
        if features.shape[0] != prefixes.shape[0]:
            raise T.DimensionError(
                f"{features.shape[0]} images but {prefixes.shape[0]} prefixes")
        proj = self._project(features, rng)
        s = self._initial_state(proj)
        out = []
        for t in range(prefixes.shape[1]):
            s = self._advance(s, proj, prefixes[:, t], rng)
            out.append(self._multimodal(s, proj, rng))
        return out

    def sequence_log_probs(self, features: np.ndarray, prefixes: np.ndarray,
                           targets: np.ndarray, rng=None) -> list[Tensor]:
        """Per-step log-probabilities of ``targets``: one length-batch tensor per step."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        picked = []
        for t, mm in enumerate(self.unroll(features, prefixes, rng)):
            picked.append(T.pick(T.log_softmax(self._logits(mm)), targets[:, t]))
        return picked

    # -- incremental decoding -------------------------------------------------

    def begin(self, features: np.ndarray) -> "DecoderState":
        with T.no_grad():
            proj = self._project(np.atleast_2d(features), None)
            return DecoderState(proj, self._initial_state(proj))

    def feed(self, state: "DecoderState", token_ids) -> "DecoderState":
        with T.no_grad():
            return DecoderState(state.proj,
                                self._advance(state.s, state.proj, token_ids, None))

    def next_log_probs(self, state: "DecoderState") -> np.ndarray:
        with T.no_grad():
            return T.log_softmax(self._logits(self._multimodal(state.s, state.proj, None))).data

    def multimodal(self, state: "DecoderState") -> np.ndarray:
        with T.no_grad():
            return self._multimodal(state.s, state.proj, None).data


@dataclass
class DecoderState:
    """Projected image and RNN state for a batch of partial captions."""
    proj: Tensor
    s: Tensor

    def select(self, rows: Sequence[int]) -> "DecoderState":
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderState(Tensor(self.proj.data[rows], dtype=self.proj.data.dtype),
                            Tensor(self.s.data[rows], dtype=self.s.data.dtype))


def build_model(config: ModelConfig, rng_seed: int) -> CaptionModel:
    config.validate()
    if config.vocab_size < 4:
        raise ConfigError("vocab_size: needs START, END, UNKNOWN and at least one word")
    rng = np.random.default_rng(rng_seed)
    dtype = T.default_dtype()
    params = {}
    for name, shape in parameter_shapes(config):
        if is_bias(name) or name == "s0":
            data = np.zeros(shape)
        else:
            data = _init_weight(rng, shape, config)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name, dtype=dtype)
    return CaptionModel(config, params)


def _check_prefix(model: CaptionModel, prefix_ids) -> np.ndarray:
    prefix = np.asarray(prefix_ids, dtype=np.int64).reshape(-1)
    if prefix.size == 0 or prefix[0] != START:
        raise ValueError("prefix must begin with the START token")
    v = model.config.vocab_size
    if np.any((prefix < 0) | (prefix >= v)):
        raise IndexError(f"token id out of range [0, {v})")
    return prefix


def forward_step(model: CaptionModel, image_feature: np.ndarray, prefix_ids,
                 train_mode: bool = False, rng=None) -> np.ndarray:
    """Next-token distribution after reading ``prefix_ids`` (which starts with START)."""
    prefix = _check_prefix(model, prefix_ids)
    if train_mode and rng is None:
        raise ValueError("train_mode needs an rng for dropout masks")
    with T.no_grad():
        mm = model.unroll(np.asarray(image_feature)[None, :], prefix[None, :],
                          rng if train_mode else None)[-1]
        return T.softmax(model._logits(mm)).data[0]


def multimodal_vector(model: CaptionModel, image_feature: np.ndarray, prefix_ids) -> np.ndarray:
    """Input to the output layer after reading ``prefix_ids`` (evaluation mode)."""
    prefix = _check_prefix(model, prefix_ids)
    with T.no_grad():
        return model.unroll(np.asarray(image_feature)[None, :], prefix[None, :])[-1].data[0]


# -- presets ----------------------------------------------------------------

_TUNED = {
    ArchitectureKind.INIT_INJECT: dict(
        init_method="xavier_normal", init_range=0.01, layer_size=512, normalize_image=True,
        image_activation="none", rnn_init_state="image", l2_enabled=False,
        dropout_sites={"embedding", "rnn_output"}, minibatch_size=128, max_epochs=100,
        beam_width=3),
    ArchitectureKind.PRE_INJECT: dict(
        init_method="normal", init_range=0.1, layer_size=512, normalize_image=True,
        image_activation="none", rnn_init_state="zeros", l2_enabled=False,
        dropout_sites={"embedding", "rnn_output"}, minibatch_size=32, max_epochs=100,
        beam_width=3),
    ArchitectureKind.PAR_INJECT: dict(
        init_method="normal", init_range=0.1, layer_size=256, normalize_image=True,
        image_activation="none", rnn_init_state="learnable", l2_enabled=True,
        dropout_sites={"image", "embedding", "rnn_output"}, minibatch_size=64,
        max_epochs=100, beam_width=5),
    ArchitectureKind.MERGE: dict(
        init_method="normal", init_range=0.1, layer_size=128, normalize_image=True,
        image_activation="none", rnn_init_state="learnable", l2_enabled=False,
        dropout_sites={"rnn_output"}, minibatch_size=128, max_epochs=100, beam_width=3),
}

DATASET_VOCAB = {"flickr8k": 2539, "flickr30k": 7415, "mscoco": 8792}


def preset(name: str, vocab_size: int | None = None, image_dim: int = 4096) -> ModelConfig:
    """Tuned hyperparameters, e.g. ``preset("merge-flickr8k")`` or ``preset("merge", 40)``."""
    kind_name, dataset = name, ""
    head, _, tail = name.rpartition("-")
    if tail in DATASET_VOCAB:
        kind_name, dataset = head, tail
    kind = ArchitectureKind.parse(kind_name)
    if vocab_size is None:
        if dataset not in DATASET_VOCAB:
            raise ConfigError(f"preset {name!r} needs a vocab_size")
        vocab_size = DATASET_VOCAB[dataset]
    return ModelConfig(kind=kind, vocab_size=vocab_size, image_dim=image_dim,
                       **_TUNED[kind])


def preset_names() -> list[str]:
    kinds = [k.value.replace("_", "-") for k in ArchitectureKind]
    return [f"{k}-{d}" for k in kinds for d in DATASET_VOCAB]


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: CaptionModel, path, extra: dict | None = None) -> None:
    """Write the model in the CCMODEL1 layout.

    Layout: magic, u32 length + UTF-8 JSON header (config and ``extra``),
    then for each parameter in :func:`parameter_shapes` order: u32 name
    length, name, u32 element count, little-endian float32 data.
    """
    header = {"config": model.config.to_dict()}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    for name, _ in parameter_shapes(model.config):
        data = model.params[name].data.astype("<f4").reshape(-1)
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", data.size),
                   data.tobytes()]
    atomic_write(path, b"".join(chunks))


def load_checkpoint(path) -> tuple[CaptionModel, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CCMODEL1 checkpoint")
    pos = 8
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    config = ModelConfig.from_dict(header["config"])
    dtype = T.default_dtype()
    params = {}
    for name, shape in parameter_shapes(config):
        (k,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        got = buf[pos:pos + k].decode("utf-8")
        pos += k
        if got != name:
            raise ValueError(f"{path}: expected parameter {name!r}, found {got!r}")
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if count != int(np.prod(shape)):
            raise ValueError(f"{path}: {name} has {count} values, expected {shape}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name, dtype=dtype)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return CaptionModel(config, params), header


def with_overrides(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)

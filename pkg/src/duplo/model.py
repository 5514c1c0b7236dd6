"""The dual-branch network: stacked-image CNN branch, per-timestamp shallow
CNN + GRU + attention branch, feature fusion, and three classifier heads."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import INFER, ClassifierHead, ConvBlock, Layer
from .recurrent import AttentionParams, GruCell
from .rng import SeededRng
from .tensor import Tensor

VARIANT_FULL = "full"
VARIANT_NOAUX = "noaux"
VARIANT_CNN = "cnn"
VARIANT_RNN = "rnn"
VARIANTS = (VARIANT_FULL, VARIANT_NOAUX, VARIANT_CNN, VARIANT_RNN)

# Row labels used by the ablation table, keyed by variant.
VARIANT_LABELS = {
    VARIANT_FULL: "DuPLO",
    VARIANT_NOAUX: "DuPLO_noAux",
    VARIANT_CNN: "Cbranch",
    VARIANT_RNN: "Rbranch",
}


@dataclass(frozen=True)
class WidthProfile:
    """Layer widths; the default mirrors the published architecture."""

    cnn_filters: tuple[int, int, int] = (256, 512, 1024)
    scnn_filters: tuple[int, int] = (32, 64)
    hidden: int = 1024
    head_hidden: int = 1024

    def to_dict(self):
        return {"cnn_filters": list(self.cnn_filters),
                "scnn_filters": list(self.scnn_filters),
                "hidden": self.hidden, "head_hidden": self.head_hidden}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["cnn_filters"]), tuple(d["scnn_filters"]),
                   d["hidden"], d["head_hidden"])


FULL_PROFILE = WidthProfile()
# Desk-scale profile for fast synthetic-data runs.
SMALL_PROFILE = WidthProfile(cnn_filters=(32, 64, 64), scnn_filters=(8, 16),
                             hidden=64, head_hidden=64)
# Minimal profile sized so exhaustive finite-difference checks stay cheap.
TINY_PROFILE = WidthProfile(cnn_filters=(4, 8, 8), scnn_filters=(2, 4),
                            hidden=8, head_hidden=8)

PROFILES = {"full": FULL_PROFILE, "small": SMALL_PROFILE, "tiny": TINY_PROFILE}


class CnnBranch(Layer):
    """Three conv blocks over the time series stacked as one multi-channel image."""

    def __init__(self, in_ch: int, filters, rng: SeededRng, dropout_rate: float, dtype):
        super().__init__()
        f1, f2, f3 = filters
        self.block1 = ConvBlock(in_ch, f1, 3, rng, dropout_rate, dtype=dtype)
        self.block2 = ConvBlock(f1, f2, 3, rng, dropout_rate, dtype=dtype)
        self.block3 = ConvBlock(f2, f3, 1, rng, dropout_rate, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.block3.forward(self.block2.forward(self.block1.forward(x)))
        n = y.shape[0]
        return T.reshape(y, (n, y.shape[1] * y.shape[2] * y.shape[3]))


class Scnn(Layer):
    """Shallow per-timestamp CNN: two conv->ReLU->BN blocks, no dropout."""

    def __init__(self, in_ch: int, filters, rng: SeededRng, dtype):
        super().__init__()
        f1, f2 = filters
        self.block1 = ConvBlock(in_ch, f1, 3, rng, dropout_rate=0.0, dtype=dtype)
        self.block2 = ConvBlock(f1, f2, 3, rng, dropout_rate=0.0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.block2.forward(self.block1.forward(x))
        n = y.shape[0]
        return T.reshape(y, (n, y.shape[1] * y.shape[2] * y.shape[3]))


@dataclass
class ModelConfig:
    num_classes: int
    num_timestamps: int
    num_bands: int = 5
    patch: int = 5
    variant: str = VARIANT_FULL
    profile: WidthProfile = field(default_factory=WidthProfile)
    dropout_rate: float = 0.4
    init: str = "glorot"  # or "zeros" (shape tests)


class DuploModel(Layer):
    def __init__(self, config: ModelConfig, rng: SeededRng, dtype=np.float32):
        super().__init__()
        if config.variant not in VARIANTS:
            raise T.ContractError(f"unknown variant {config.variant!r}")
        self.config = config
        self.dtype = dtype
        p = config.profile
        c, t_len, b = config.num_classes, config.num_timestamps, config.num_bands
        if config.init == "zeros":
            rng = _ZeroRng()

        self.cnn_branch = CnnBranch(b * t_len, p.cnn_filters, rng, config.dropout_rate, dtype)
        self.scnn = Scnn(b, p.scnn_filters, rng, dtype)
        self.gru = GruCell(p.scnn_filters[1], p.hidden, rng, dtype=dtype)
        self.attention = AttentionParams(p.hidden, rng, dtype=dtype)
        from .layers import Dropout
        self.rnn_dropout = Dropout(config.dropout_rate, rng if config.init != "zeros" else SeededRng(0))
        cnn_feat = p.cnn_filters[2]
        rnn_feat = p.hidden
        self.head_cnn = ClassifierHead(cnn_feat, p.head_hidden, c, rng, dtype)
        self.head_rnn = ClassifierHead(rnn_feat, p.head_hidden, c, rng, dtype)
        self.head_fused = ClassifierHead(cnn_feat + rnn_feat, p.head_hidden, c, rng, dtype)

    # -- forward passes -------------------------------------------------------

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        cfg = self.config
        batch = np.asarray(batch, dtype=self.dtype)
        expect = (cfg.num_timestamps, cfg.num_bands, cfg.patch, cfg.patch)
        if batch.ndim != 5 or batch.shape[1:] != expect:
            raise T.ShapeError(
                f"batch shape {batch.shape} != (n, T={cfg.num_timestamps}, "
                f"B={cfg.num_bands}, {cfg.patch}, {cfg.patch})")
        return batch

    def cnn_branch_forward(self, batch: np.ndarray) -> Tensor:
        """(n, T, B, p, p) stacked time-major into (n, T*B, p, p) channels."""
        batch = self._check_batch(batch)
        n, t_len, b, ph, pw = batch.shape
        stacked = Tensor(batch.reshape(n, t_len * b, ph, pw))
        return self.cnn_branch.forward(stacked)

    def rnn_branch_forward(self, batch: np.ndarray) -> tuple[Tensor, Tensor]:
        """Per-timestamp SCNN -> GRU -> attention; returns (rnn_feat, weights)."""
        batch = self._check_batch(batch)
        t_len = batch.shape[1]
        if t_len < 1:
            raise T.ContractError("rnn branch needs at least one timestamp")
        seq = [self.scnn.forward(Tensor(np.ascontiguousarray(batch[:, t])))
               for t in range(t_len)]
        h_all = self.gru.unroll(seq)
        pooled, weights = self.attention.pool(h_all)
        return self.rnn_dropout.forward(pooled), weights

    def forward(self, batch: np.ndarray) -> dict[str, Tensor]:
        """Returns logits for the active heads plus the branch features."""
        cfg = self.config
        out: dict[str, Tensor] = {}
        cnn_feat = rnn_feat = None
        if cfg.variant != VARIANT_RNN:
            cnn_feat = self.cnn_branch_forward(batch)
            out["cnn_feat"] = cnn_feat
            out["logits_cnn"] = self.head_cnn.forward(cnn_feat)
        if cfg.variant != VARIANT_CNN:
            rnn_feat, weights = self.rnn_branch_forward(batch)
            out["rnn_feat"] = rnn_feat
            out["attention_weights"] = weights
            out["logits_rnn"] = self.head_rnn.forward(rnn_feat)
        if cfg.variant in (VARIANT_FULL, VARIANT_NOAUX):
            fused = T.concat([cnn_feat, rnn_feat], axis=1)
            out["fused_feat"] = fused
            out["logits_fused"] = self.head_fused.forward(fused)
        return out

    def decision_logits(self, out: dict[str, Tensor]) -> Tensor:
        """The single head used for prediction under the current variant."""
        if self.config.variant == VARIANT_CNN:
            return out["logits_cnn"]
        if self.config.variant == VARIANT_RNN:
            return out["logits_rnn"]
        return out["logits_fused"]

    def total_loss(self, out: dict[str, Tensor], labels: np.ndarray,
                   alpha1: float, alpha2: float) -> Tensor:
        """alpha1 * CE(rnn head) + alpha2 * CE(cnn head) + CE(fused head)."""
        if alpha1 < 0 or alpha2 < 0:
            raise T.ContractError("auxiliary loss weights must be nonnegative")
        v = self.config.variant
        if v == VARIANT_CNN:
            return T.cross_entropy(out["logits_cnn"], labels)
        if v == VARIANT_RNN:
            return T.cross_entropy(out["logits_rnn"], labels)
        loss = T.cross_entropy(out["logits_fused"], labels)
        if v == VARIANT_FULL:
            if alpha1 > 0:
                loss = T.add(loss, T.affine(T.cross_entropy(out["logits_rnn"], labels), alpha1))
            if alpha2 > 0:
                loss = T.add(loss, T.affine(T.cross_entropy(out["logits_cnn"], labels), alpha2))
        return loss

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Argmax class per sample from the decision head; ties -> lowest index."""
        if self.mode != INFER:
            raise T.ContractError("predict requires inference mode")
        out = self.forward(batch)
        return np.argmax(self.decision_logits(out).data, axis=1)

    def extract_features(self, batch: np.ndarray) -> np.ndarray:
        """(n, cnn_width + rnn_width) descriptor, CNN features first."""
        if self.mode != INFER:
            raise T.ContractError("extract_features requires inference mode")
        cnn_feat = self.cnn_branch_forward(batch)
        rnn_feat, _ = self.rnn_branch_forward(batch)
        return np.concatenate([cnn_feat.data, rnn_feat.data], axis=1)

    def count_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters that receive gradients under the current variant."""
        skip: tuple[str, ...] = ()
        v = self.config.variant
        if v == VARIANT_CNN:
            skip = ("scnn.", "gru.", "attention.", "head_rnn.", "head_fused.")
        elif v == VARIANT_RNN:
            skip = ("cnn_branch.", "head_cnn.", "head_fused.")
        elif v == VARIANT_NOAUX:
            skip = ("head_cnn.", "head_rnn.")
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith(skip)]

    # -- state dict -----------------------------------------------------------

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        entries = [(n, p.data) for n, p in self.named_parameters()]
        entries += self.named_buffers()
        return entries

    def load_state(self, table: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in table:
                raise T.ContractError(f"checkpoint missing tensor {name!r}")
            if table[name].shape != p.data.shape:
                raise T.ShapeError(
                    f"checkpoint tensor {name!r} has shape {table[name].shape}, "
                    f"expected {p.data.shape}")
            p.data = table[name].astype(self.dtype)
        for name, buf in self.named_buffers():
            if name in table:
                buf[:] = table[name]


class _ZeroRng:
    """Stand-in RNG yielding zero weights, for pure shape tests."""

    def uniform_array(self, shape, low=0.0, high=1.0, dtype=np.float32):
        return np.zeros(shape, dtype=dtype)

    def normal_array(self, shape, mu=0.0, sigma=1.0, dtype=np.float32):
        return np.zeros(shape, dtype=dtype)

    def random(self):
        return 0.0


# -- checkpoint format --------------------------------------------------------

CHECKPOINT_MAGIC = b"DUPL"
CHECKPOINT_VERSION = 1
_VARIANT_TAGS = {v: i for i, v in enumerate(VARIANTS)}
_TAG_VARIANTS = {i: v for v, i in _VARIANT_TAGS.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, model: DuploModel, metadata: dict | None = None) -> None:
    """Binary layout: magic, version u32, variant u8, C/T/B/d u32, u32 tensor
    count, named tensor table (u16 name len + utf-8, u8 rank, u32 dims,
    float32 LE data), u32 metadata length + metadata JSON."""
    cfg = model.config
    meta = dict(metadata or {})
    meta["profile"] = cfg.profile.to_dict()
    meta["dropout_rate"] = cfg.dropout_rate
    meta["patch"] = cfg.patch
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IB", CHECKPOINT_VERSION, _VARIANT_TAGS[cfg.variant]))
    buf.write(struct.pack("<IIII", cfg.num_classes, cfg.num_timestamps,
                          cfg.num_bands, cfg.profile.hidden))
    entries = model.state_entries()
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype("<f4").tobytes())
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[DuploModel, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)

    def read(n, what):
        b = buf.read(n)
        if len(b) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return b

    if read(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, vtag = struct.unpack("<IB", read(5, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if vtag not in _TAG_VARIANTS:
        raise CheckpointError(f"unknown variant tag {vtag}")
    c, t_len, b, hidden = struct.unpack("<IIII", read(16, "dims"))
    count, = struct.unpack("<I", read(4, "tensor count"))
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen, = struct.unpack("<H", read(2, "name length"))
        name = read(nlen, "name").decode("utf-8")
        rank, = struct.unpack("<B", read(1, "rank"))
        dims = [struct.unpack("<I", read(4, "dim"))[0] for _ in range(rank)]
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(read(4 * size, f"tensor {name!r}"), dtype="<f4")
        table[name] = data.reshape(dims).copy()
    mlen, = struct.unpack("<I", read(4, "metadata length"))
    meta = json.loads(read(mlen, "metadata").decode("utf-8"))

    profile = WidthProfile.from_dict(meta["profile"])
    if profile.hidden != hidden:
        raise CheckpointError("header hidden size disagrees with profile metadata")
    cfg = ModelConfig(num_classes=c, num_timestamps=t_len, num_bands=b,
                      patch=meta.get("patch", 5), variant=_TAG_VARIANTS[vtag],
                      profile=profile, dropout_rate=meta.get("dropout_rate", 0.4),
                      init="zeros")
    model = DuploModel(cfg, SeededRng(0))
    model.load_state(table)
    model.set_mode(INFER)
    return model, meta

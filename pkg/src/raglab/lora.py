"""Low-rank adapters over the FFN projections: representation, merge
arithmetic, averaging, parameter accounting, and the adapter-bank file.

Per layer, each of the gate/up/down projections carries a pair (B, A) with
B shaped (out, r) and A shaped (r, in). The merged delta is (alpha/r) * B @ A;
with B zero-initialized the delta vanishes, so a fresh adapter is a no-op.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, matmul, scale

MODULES = ("gate", "up", "down")

BANK_MAGIC = b"DYPL"
BANK_VERSION = 1


@dataclass
class LoraConfig:
    r: int = 2
    alpha: float = 32.0

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("rank must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def module_dims(model_config, module: str) -> tuple[int, int]:
    """(out, in) for a projection: gate/up map h->k, down maps k->h."""
    h, k = model_config.hidden, model_config.ffn
    if module in ("gate", "up"):
        return k, h
    if module == "down":
        return h, k
    raise KeyError(f"unknown module {module!r}")


@dataclass
class LoraAdapter:
    config: LoraConfig
    # layers[l][module] = (B, A) tensors
    layers: list[dict[str, tuple[Tensor, Tensor]]] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            for m in MODULES:
                b, a = layer[m]
                out.extend([b, a])
        return out

    def scalar_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def copy(self) -> "LoraAdapter":
        layers = [
            {m: (Tensor(layer[m][0].data.copy()), Tensor(layer[m][1].data.copy())) for m in MODULES}
            for layer in self.layers
        ]
        return LoraAdapter(LoraConfig(self.config.r, self.config.alpha), layers)


def init_adapter(config: LoraConfig, model_config, seed: int) -> LoraAdapter:
    """A ~ Gaussian(0, 0.02^2), B = 0: the merged delta starts exactly zero."""
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(model_config.layers):
        layer = {}
        for m in MODULES:
            out, inp = module_dims(model_config, m)
            b = Tensor(np.zeros((out, config.r)))
            a = Tensor(rng.normal(0.0, 0.02, size=(config.r, inp)))
            layer[m] = (b, a)
        layers.append(layer)
    return LoraAdapter(config, layers)


def merged_delta(adapter: LoraAdapter, layer: int, module: str) -> Tensor:
    """(alpha/r) * B @ A for one projection, shaped (out, in)."""
    if not 0 <= layer < len(adapter.layers):
        raise IndexError(f"layer {layer} out of range for {len(adapter.layers)}-layer adapter")
    if module not in MODULES:
        raise KeyError(f"unknown module {module!r}")
    b, a = adapter.layers[layer][module]
    return scale(matmul(b, a), adapter.config.alpha / adapter.config.r)


def average_adapters(adapters: list[LoraAdapter]) -> LoraAdapter:
    """Elementwise mean of the B matrices and of the A matrices independently."""
    if not adapters:
        raise ValueError("cannot average an empty adapter list")
    first = adapters[0]
    for other in adapters[1:]:
        if len(other.layers) != len(first.layers):
            raise ValueError("adapter layer counts differ")
        if other.config.r != first.config.r:
            raise ValueError("adapter ranks differ")
    n = len(adapters)
    layers = []
    for li in range(len(first.layers)):
        layer = {}
        for m in MODULES:
            ref_b, ref_a = first.layers[li][m]
            for other in adapters[1:]:
                b, a = other.layers[li][m]
                if b.shape != ref_b.shape or a.shape != ref_a.shape:
                    raise ValueError(f"shape mismatch at layer {li} module {m}")
            b_mean = sum(ad.layers[li][m][0].data for ad in adapters) / n
            a_mean = sum(ad.layers[li][m][1].data for ad in adapters) / n
            layer[m] = (Tensor(b_mean), Tensor(a_mean))
        layers.append(layer)
    return LoraAdapter(LoraConfig(first.config.r, first.config.alpha), layers)


def param_count(model_config, r: int) -> int:
    """Closed-form adapter size used by the storage accounting: 6*L*r*(h+k).

    This counts 2*r*(h+k) per projection; the dense (B, A) floats of one
    projection hold r*(h+k) scalars, so a serialized adapter carries exactly
    half this figure (see LoraAdapter.scalar_count).
    """
    return 6 * model_config.layers * r * (model_config.hidden + model_config.ffn)


def storage_bytes(count: int, bits: int) -> int:
    return count * bits // 8


# ---------------------------------------------------------------------------
# Adapter bank serialization
# ---------------------------------------------------------------------------

class BankFormatError(IOError):
    pass


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(arr.astype("<f4").tobytes())


def _read_array(fh, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise BankFormatError("truncated adapter bank file")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def save_bank(adapters: dict[str, LoraAdapter], model_config, path) -> int:
    """Write adapters keyed by document id; returns total bytes on disk.

    Record layout per adapter: doc-id length + utf-8 bytes, rank u32, then
    matrices as little-endian float32, layer-major, gate -> up -> down, B
    before A, row-major within each matrix.
    """
    buf = io.BytesIO()
    buf.write(BANK_MAGIC)
    buf.write(struct.pack("<I", BANK_VERSION))
    buf.write(struct.pack("<6I", model_config.layers, model_config.hidden,
                          model_config.ffn, model_config.heads,
                          model_config.vocab, model_config.max_seq))
    buf.write(struct.pack("<I", len(adapters)))
    for doc_id, adapter in adapters.items():
        raw_id = doc_id.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_id)))
        buf.write(raw_id)
        buf.write(struct.pack("<I", adapter.config.r))
        for layer in adapter.layers:
            for m in MODULES:
                b, a = layer[m]
                _write_array(buf, b.data)
                _write_array(buf, a.data)
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_bank(path, model_config, alpha: float = 32.0) -> dict[str, LoraAdapter]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BANK_MAGIC:
            raise BankFormatError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != BANK_VERSION:
            raise BankFormatError(f"unsupported bank version {version}")
        echo = struct.unpack("<6I", fh.read(24))
        expected = (model_config.layers, model_config.hidden, model_config.ffn,
                    model_config.heads, model_config.vocab, model_config.max_seq)
        if echo != expected:
            raise BankFormatError(f"bank written for config {echo}, loading under {expected}")
        (count,) = struct.unpack("<I", fh.read(4))
        adapters: dict[str, LoraAdapter] = {}
        for _ in range(count):
            (id_len,) = struct.unpack("<I", fh.read(4))
            doc_id = fh.read(id_len).decode("utf-8")
            if doc_id in adapters:
                raise BankFormatError(f"duplicate document id {doc_id!r}")
            (r,) = struct.unpack("<I", fh.read(4))
            cfg = LoraConfig(r=r, alpha=alpha)
            layers = []
            for _ in range(model_config.layers):
                layer = {}
                for m in MODULES:
                    out, inp = module_dims(model_config, m)
                    b = Tensor(_read_array(fh, (out, r)))
                    a = Tensor(_read_array(fh, (r, inp)))
                    layer[m] = (b, a)
                layers.append(layer)
            adapters[doc_id] = LoraAdapter(cfg, layers)
        return adapters

"""Embedding-to-adapter translator: per layer, per FFN module, per target
matrix (B and A), a two-layer ReLU MLP maps the document embedding
concatenated with a layer-index scalar to the flattened low-rank matrix.

Down-projections start Gaussian, up-projections start zero, so a fresh
translator emits the exact zero adapter and the merged model reproduces the
base model. Training aligns translated adapters with per-document trained
targets in three couplings: task loss of the merged model (pred), elementwise
distance in weight space (mse), and the KL from the target-adapter model's
token distribution to the translated one (kl), combined as
pred + lambda1 * mse + lambda2 * kl.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad, recording
from .lora import MODULES, LoraAdapter, LoraConfig, module_dims
from .model import ModelWeights, encode_document, forward_logits, loss_nll
from .optim import Adam
from .prag import AlignmentSet, DocParamPair
from .tokenizer import Tokenizer

TRANSLATOR_MAGIC = b"DYPT"
TRANSLATOR_VERSION = 1

TARGETS = ("B", "A")


@dataclass
class TranslatorConfig:
    p: int = 32
    layer_encoding: str = "normalized"  # or "raw"
    embed_pooling: str = "last"         # or "mean"; recorded in the checkpoint

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("intermediate dimension p must be at least 1")
        if self.layer_encoding not in ("normalized", "raw"):
            raise ValueError("layer_encoding must be 'normalized' or 'raw'")
        if self.embed_pooling not in ("last", "mean"):
            raise ValueError("embed_pooling must be 'last' or 'mean'")


@dataclass
class TranslatorTrainConfig:
    lr: float = 1e-5
    epochs: int = 1
    lambda1: float = 100.0
    lambda2: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def target_shape(model_config, module: str, target: str, r: int) -> tuple[int, int]:
    out, inp = module_dims(model_config, module)
    return (out, r) if target == "B" else (r, inp)


class Translator:
    def __init__(self, config: TranslatorConfig, model_config, r: int, seed: int = 0):
        self.config = config
        self.model_config = model_config
        self.r = r
        rng = np.random.default_rng(seed)
        h = model_config.hidden
        self.mlps: list[dict[tuple[str, str], dict[str, Tensor]]] = []
        for _ in range(model_config.layers):
            layer = {}
            for m in MODULES:
                for t in TARGETS:
                    rows = int(np.prod(target_shape(model_config, m, t, r)))
                    layer[(m, t)] = {
                        "down": Tensor(rng.normal(0.0, 0.02, size=(config.p, h + 1)),
                                       requires_grad=True),
                        "up": Tensor(np.zeros((rows, config.p)), requires_grad=True),
                    }
            self.mlps.append(layer)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.mlps:
            for m in MODULES:
                for t in TARGETS:
                    out.append(layer[(m, t)]["down"])
                    out.append(layer[(m, t)]["up"])
        return out

    def scalar_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def layer_code(self, layer: int) -> float:
        if self.config.layer_encoding == "raw":
            return float(layer)
        denom = max(self.model_config.layers - 1, 1)
        return layer / denom


def translator_param_count(model_config, p: int, r: int) -> int:
    """3L(phr + 2p(h+1) + pkr); matches the serialized scalars exactly."""
    L, h, k = model_config.layers, model_config.hidden, model_config.ffn
    return 3 * L * (p * h * r + 2 * p * (h + 1) + p * k * r)


def translate(translator: Translator, s: np.ndarray, alpha: float = 32.0) -> LoraAdapter:
    """Map a document embedding to an adapter. Differentiable with respect to
    the translator weights; s enters as a constant."""
    s = np.asarray(s, dtype=np.float64)
    h = translator.model_config.hidden
    if s.shape != (h,):
        raise ValueError(f"embedding must have length {h}, got shape {s.shape}")
    cfg = translator.model_config
    layers = []
    for li in range(cfg.layers):
        inp = Tensor(np.concatenate([s, [translator.layer_code(li)]]).reshape(h + 1, 1))
        layer = {}
        for m in MODULES:
            mats = {}
            for t in TARGETS:
                mlp = translator.mlps[li][(m, t)]
                hidden = ad.relu(ad.matmul(mlp["down"], inp))
                flat = ad.matmul(mlp["up"], hidden)
                mats[t] = ad.reshape(flat, target_shape(cfg, m, t, translator.r))
            layer[m] = (mats["B"], mats["A"])
        layers.append(layer)
    return LoraAdapter(LoraConfig(r=translator.r, alpha=alpha), layers)


# ---------------------------------------------------------------------------
# Alignment loss
# ---------------------------------------------------------------------------

@dataclass
class AlignmentLoss:
    total: Tensor
    pred: float
    mse: float
    kl: float

    @property
    def total_value(self) -> float:
        return self.total.item()


def _adapter_mse(translated: LoraAdapter, target: LoraAdapter) -> Tensor:
    total = None
    count = 0
    for lt, lp in zip(translated.layers, target.layers):
        for m in MODULES:
            for ti in (0, 1):
                if lt[m][ti].shape != lp[m][ti].shape:
                    raise ValueError(f"adapter shape mismatch in module {m}")
                diff = ad.sub(lt[m][ti], Tensor(lp[m][ti].data))
                sq = ad.tensor_sum(ad.mul(diff, diff))
                total = sq if total is None else ad.add(total, sq)
                count += lt[m][ti].size
    return ad.scale(total, 1.0 / count)


def teacher_distributions(weights: ModelWeights, pair: DocParamPair,
                          tokenizer: Tokenizer) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Per triple: (tokens, teacher next-token probabilities, sum p*log p).
    The teacher (base plus target adapter) is frozen, so this is computed once
    per pair and reused across training epochs."""
    cache = []
    for text in pair.augmented.triples:
        tokens = np.array(tokenizer.encode(text))
        with no_grad():
            teacher_logits = forward_logits(weights, pair.adapter, tokens).data[:-1]
        shifted = teacher_logits - teacher_logits.max(axis=1, keepdims=True)
        t_logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        t_probs = np.exp(t_logp)
        cache.append((tokens, t_probs, float((t_probs * t_logp).sum())))
    return cache


def loss_align(weights: ModelWeights, pair: DocParamPair, translator: Translator,
               lambda1: float, lambda2: float, tokenizer: Tokenizer,
               embedding: np.ndarray | None = None,
               translated: LoraAdapter | None = None,
               teacher_cache: list | None = None) -> AlignmentLoss:
    """total = pred + lambda1*mse + lambda2*kl over all triples of the pair's
    augmented set. The target-adapter model is the frozen teacher. An explicit
    translated adapter can replace the translator output (identity checks)."""
    if not pair.augmented.triples:
        raise ValueError(f"pair {pair.doc_id} has an empty augmented set")
    if translated is None:
        if embedding is None:
            embedding = encode_document(
                weights, np.array(tokenizer.encode(pair.document.text)),
                pooling=translator.config.embed_pooling)
        translated = translate(translator, embedding, alpha=pair.adapter.config.alpha)
    if teacher_cache is None:
        teacher_cache = teacher_distributions(weights, pair, tokenizer)

    pred_terms = []
    kl_terms = []
    n_positions = 0
    kl_const = 0.0
    for tokens, t_probs, t_entropy_sum in teacher_cache:
        logits = forward_logits(weights, translated, tokens)
        preds = ad.narrow(logits, 0, 0, tokens.size - 1)
        pred_terms.append(ad.cross_entropy(preds, tokens[1:]))
        student_logp = ad.log_softmax(preds)
        kl_terms.append(ad.tensor_sum(ad.mul(Tensor(t_probs), student_logp)))
        kl_const += t_entropy_sum
        n_positions += tokens.size - 1

    pred = ad.scale(_sum(pred_terms), 1.0 / len(pred_terms))
    cross = _sum(kl_terms)
    kl = ad.add(ad.scale(cross, -1.0 / n_positions),
                Tensor(np.asarray(kl_const / n_positions)))
    mse = _adapter_mse(translated, pair.adapter)

    total = ad.add(pred, ad.add(ad.scale(mse, lambda1), ad.scale(kl, lambda2)))
    return AlignmentLoss(total, pred.item(), mse.item(), kl.item())


def _sum(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def train_translator(weights: ModelWeights, aligned: AlignmentSet,
                     translator_config: TranslatorConfig,
                     train_config: TranslatorTrainConfig,
                     tokenizer: Tokenizer) -> tuple[Translator, dict[str, list[float]]]:
    """One document (all its triples) per optimization step; only the
    translator weights move. Base weights and target adapters stay frozen."""
    if not len(aligned):
        raise ValueError("alignment set is empty")
    r = aligned.pairs[0].adapter.config.r
    translator = Translator(translator_config, weights.config, r, seed=train_config.seed)

    was_trainable = weights.embed.requires_grad
    weights.set_trainable(False)
    for pair in aligned:
        pair.adapter.set_trainable(False)

    embeddings = {
        pair.doc_id: encode_document(weights,
                                     np.array(tokenizer.encode(pair.document.text)),
                                     pooling=translator_config.embed_pooling)
        for pair in aligned
    }
    teacher_caches = {pair.doc_id: teacher_distributions(weights, pair, tokenizer)
                      for pair in aligned}
    opt = Adam(translator.parameters(), lr=train_config.lr)
    rng = np.random.default_rng(train_config.seed)
    curves: dict[str, list[float]] = {"total": [], "pred": [], "mse": [], "kl": []}
    try:
        for _ in range(train_config.epochs):
            order = rng.permutation(len(aligned.pairs))
            for i in order:
                pair = aligned.pairs[i]
                with recording():
                    result = loss_align(weights, pair, translator,
                                        train_config.lambda1, train_config.lambda2,
                                        tokenizer, embedding=embeddings[pair.doc_id],
                                        teacher_cache=teacher_caches[pair.doc_id])
                    if not np.isfinite(result.total_value):
                        raise FloatingPointError(
                            f"translator training diverged on {pair.doc_id}")
                    opt.zero_grad()
                    ad.backward(result.total)
                opt.step()
                curves["total"].append(result.total_value)
                curves["pred"].append(result.pred)
                curves["mse"].append(result.mse)
                curves["kl"].append(result.kl)
    finally:
        weights.set_trainable(was_trainable)
    return translator, curves


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

class TranslatorFormatError(IOError):
    pass


def save_translator(translator: Translator, path) -> None:
    cfg = translator.model_config
    with open(path, "wb") as fh:
        fh.write(TRANSLATOR_MAGIC)
        fh.write(struct.pack("<I", TRANSLATOR_VERSION))
        fh.write(struct.pack("<6I", cfg.layers, cfg.hidden, cfg.ffn, cfg.heads,
                             cfg.vocab, cfg.max_seq))
        fh.write(struct.pack("<II", translator.config.p, translator.r))
        fh.write(struct.pack("<B", 1 if translator.config.layer_encoding == "raw" else 0))
        fh.write(struct.pack("<B", 1 if translator.config.embed_pooling == "mean" else 0))
        for layer in translator.mlps:
            for m in MODULES:
                for t in TARGETS:
                    fh.write(layer[(m, t)]["down"].data.astype("<f4").tobytes())
                    fh.write(layer[(m, t)]["up"].data.astype("<f4").tobytes())


def load_translator(path, model_config) -> Translator:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TRANSLATOR_MAGIC:
            raise TranslatorFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != TRANSLATOR_VERSION:
            raise TranslatorFormatError(f"unsupported version {version}")
        echo = struct.unpack("<6I", fh.read(24))
        expected = (model_config.layers, model_config.hidden, model_config.ffn,
                    model_config.heads, model_config.vocab, model_config.max_seq)
        if echo != expected:
            raise TranslatorFormatError(f"checkpoint config {echo} != {expected}")
        p, r = struct.unpack("<II", fh.read(8))
        (raw_enc,) = struct.unpack("<B", fh.read(1))
        (mean_pool,) = struct.unpack("<B", fh.read(1))
        enc = "raw" if raw_enc else "normalized"
        pool = "mean" if mean_pool else "last"
        translator = Translator(TranslatorConfig(p=p, layer_encoding=enc,
                                                 embed_pooling=pool),
                                model_config, r, seed=0)
        for layer in translator.mlps:
            for m in MODULES:
                for t in TARGETS:
                    for key in ("down", "up"):
                        tensor = layer[(m, t)][key]
                        raw = fh.read(4 * tensor.size)
                        if len(raw) != 4 * tensor.size:
                            raise TranslatorFormatError("truncated translator checkpoint")
                        tensor.data = np.frombuffer(raw, dtype="<f4").astype(
                            np.float64).reshape(tensor.shape)
        return translator

"""Offline document parameterization: one low-rank adapter per document,
trained on its augmented samples with the base weights frozen.

Per-document seeds are derived by hashing the document id with the global
seed, so collection is order-independent and embarrassingly parallel.
"""
from __future__ import annotations

import hashlib
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import recording
from .corpus import AugmentedSet, Document, augment
from .lora import LoraAdapter, LoraConfig, init_adapter
from .model import ModelWeights, loss_nll
from .optim import Adam
from .tokenizer import Tokenizer


@dataclass
class PragTrainConfig:
    lr: float = 3e-4
    epochs: int = 1
    seed: int = 0
    n_rewrites: int = 1
    m_qa: int = 3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class DocParamPair:
    doc_id: str
    adapter: LoraAdapter
    augmented: AugmentedSet
    document: Document
    base_loss: float
    final_loss: float
    tokens_processed: int
    wall_seconds: float


@dataclass
class AlignmentSet:
    pairs: list[DocParamPair] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.doc_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate document ids in alignment set")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def doc_seed(global_seed: int, doc_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{doc_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def mean_triple_loss(weights: ModelWeights, adapter: LoraAdapter | None,
                     tokenizer: Tokenizer, triples: list[str]) -> float:
    with ad.no_grad():
        losses = [loss_nll(weights, adapter, np.array(tokenizer.encode(t))).item()
                  for t in triples]
    return float(np.mean(losses))


def train_doc_adapter(weights: ModelWeights, tokenizer: Tokenizer,
                      document: Document, augmented: AugmentedSet,
                      lora_config: LoraConfig, config: PragTrainConfig) -> DocParamPair:
    """Minimize the next-token loss of the augmented triples over the adapter
    matrices only. Base weights stay bitwise untouched; epochs=0 returns the
    zero-delta init unchanged.

    The random A init is shared across documents (global seed), so adapters
    for different documents differ only through content-driven updates; the
    per-document seed controls sample order, keeping collection
    order-independent."""
    if not augmented.triples:
        raise ValueError(f"document {document.id}: empty augmented set")
    start = time.perf_counter()
    seed = doc_seed(config.seed, document.id)
    adapter = init_adapter(lora_config, weights.config, seed=config.seed)
    encoded = [np.array(tokenizer.encode(t)) for t in augmented.triples]
    base_loss = mean_triple_loss(weights, None, tokenizer, augmented.triples)

    was_trainable = weights.embed.requires_grad
    weights.set_trainable(False)
    adapter.set_trainable(True)
    opt = Adam(adapter.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    tokens_processed = 0
    try:
        for _ in range(config.epochs):
            order = rng.permutation(len(encoded))
            for i in order:
                with recording():
                    loss = loss_nll(weights, adapter, encoded[i])
                    if not np.isfinite(loss.item()):
                        raise FloatingPointError(
                            f"adapter training diverged on document {document.id}")
                    opt.zero_grad()
                    ad.backward(loss)
                opt.step()
                tokens_processed += int(encoded[i].size)
    finally:
        weights.set_trainable(was_trainable)
        adapter.set_trainable(False)

    final_loss = mean_triple_loss(weights, adapter, tokenizer, augmented.triples)
    return DocParamPair(document.id, adapter, augmented, document, base_loss,
                        final_loss, tokens_processed, time.perf_counter() - start)


def _collect_one(weights: ModelWeights, tokenizer: Tokenizer, document: Document,
                 lora_config: LoraConfig, config: PragTrainConfig) -> DocParamPair:
    aug = augment(document, config.n_rewrites, config.m_qa,
                  seed=doc_seed(config.seed, document.id))
    return train_doc_adapter(weights, tokenizer, document, aug, lora_config, config)


_worker_state: dict = {}


def _worker_init(weights: ModelWeights, tokenizer: Tokenizer,
                 lora_config: LoraConfig, config: PragTrainConfig) -> None:
    _worker_state["args"] = (weights, tokenizer, lora_config, config)


def _worker_run(document: Document) -> DocParamPair:
    weights, tokenizer, lora_config, config = _worker_state["args"]
    return _collect_one(weights, tokenizer, document, lora_config, config)


def collect_pairs(weights: ModelWeights, tokenizer: Tokenizer,
                  documents: list[Document], lora_config: LoraConfig,
                  config: PragTrainConfig, workers: int = 1) -> AlignmentSet:
    """One pair per document; per-doc seeds make results independent of both
    document order and worker scheduling."""
    if not documents:
        raise ValueError("no documents to parameterize")
    if workers <= 1:
        pairs = [_collect_one(weights, tokenizer, d, lora_config, config)
                 for d in documents]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(weights, tokenizer, lora_config, config)) as pool:
            pairs = list(pool.map(_worker_run, documents))
    failures = [p.doc_id for p in pairs if not np.isfinite(p.final_loss)]
    if failures:
        raise FloatingPointError(f"non-finite final loss for documents: {failures}")
    return AlignmentSet(pairs)


def pair_rows(aligned: AlignmentSet) -> list[dict]:
    """Per-document accounting rows for the collection CSV."""
    return [{
        "doc_id": p.doc_id,
        "base_loss": f"{p.base_loss:.6f}",
        "final_loss": f"{p.final_loss:.6f}",
        "tokens_processed": p.tokens_processed,
        "wall_seconds": f"{p.wall_seconds:.3f}",
    } for p in aligned]

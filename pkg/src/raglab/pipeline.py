"""Unified inference over the five retrieval-augmentation modes.

vanilla          question-only prompt, no adapter
rag              retrieved passages in the prompt, no adapter
prag             per-document adapters from the bank, averaged, merged;
                 question-only prompt
dyprag           retrieved documents encoded and translated to adapters at
                 answer time, averaged, merged; question-only prompt
dyprag-combine   translated adapter AND passages in the prompt

Adapters are merged at forward time against read-only base weights, so
concurrent requests never contend.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as lm
from .bm25 import Bm25Index, retrieve
from .corpus import ANSWER_MARK, Document, qa_prompt_text
from .lora import LoraAdapter, average_adapters
from .tokenizer import EOT_TEXT, Tokenizer
from .translator import Translator, translate

MODES = ("vanilla", "rag", "prag", "dyprag", "dyprag-combine")


@dataclass
class DecodingConfig:
    greedy: bool = True
    max_new: int = 128
    temperature: float = 1.0
    top_p: float = 0.95
    top_k: int = 20
    seed: int = 0


@dataclass
class InferenceRequest:
    question_id: str
    question: str
    mode: str
    c: int = 3
    decoding: DecodingConfig = field(default_factory=DecodingConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class InferenceTrace:
    question_id: str
    mode: str
    retrieved: list[tuple[str, float]]
    adapter_source: str  # none | bank | translated
    context_tokens: int
    response_tokens: int
    answer: str
    wall_ms: float
    uncertainty: dict | None = None

    def to_json(self) -> str:
        rec = {
            "question_id": self.question_id,
            "mode": self.mode,
            "retrieved": [[d, round(s, 6)] for d, s in self.retrieved],
            "adapter_source": self.adapter_source,
            "context_tokens": self.context_tokens,
            "response_tokens": self.response_tokens,
            "answer": self.answer,
            "wall_ms": round(self.wall_ms, 3),
        }
        if self.uncertainty is not None:
            rec["uncertainty"] = {k: round(v, 6) for k, v in self.uncertainty.items()}
        return json.dumps(rec, sort_keys=True)


def build_prompt(tokenizer: Tokenizer, mode: str, passages: list[str],
                 question: str) -> list[int]:
    """Instruction line, one 'Passage i:' line per passage in rank order,
    then the question block ending with the answer marker."""
    if mode in ("vanilla", "prag", "dyprag") and passages:
        raise ValueError(f"mode {mode} takes no passages")
    return tokenizer.encode(qa_prompt_text(question, passages))


def extract_answer(tokenizer: Tokenizer, tokens: list[int]) -> str:
    text = tokenizer.decode(tokens)
    tail = text.rsplit(ANSWER_MARK, 1)[-1]
    return tail.split(EOT_TEXT, 1)[0].strip()


class MissingAdapterError(KeyError):
    pass


def answer(weights: lm.ModelWeights, tokenizer: Tokenizer,
           bank: dict[str, LoraAdapter] | None, translator: Translator | None,
           index: Bm25Index | None, documents: dict[str, Document],
           request: InferenceRequest) -> InferenceTrace:
    start = time.perf_counter()
    mode = request.mode

    retrieved: list[tuple[str, float]] = []
    if mode != "vanilla":
        if index is None:
            raise ValueError(f"mode {mode} requires a retrieval index")
        retrieved = retrieve(index, request.question, request.c)

    passages: list[str] = []
    if mode in ("rag", "dyprag-combine"):
        passages = [documents[doc_id].text for doc_id, _ in retrieved]

    adapter: LoraAdapter | None = None
    adapter_source = "none"
    if mode == "prag":
        if bank is None:
            raise ValueError("prag mode requires an adapter bank")
        missing = [doc_id for doc_id, _ in retrieved if doc_id not in bank]
        if missing:
            raise MissingAdapterError(f"bank has no adapters for {missing}")
        adapter = average_adapters([bank[doc_id] for doc_id, _ in retrieved])
        adapter_source = "bank"
    elif mode in ("dyprag", "dyprag-combine"):
        if translator is None:
            raise ValueError(f"mode {mode} requires a trained translator")
        translated = []
        for doc_id, _ in retrieved:
            emb = lm.encode_document(
                weights, np.array(tokenizer.encode(documents[doc_id].text)),
                pooling=translator.config.embed_pooling)
            translated.append(translate(translator, emb))
        adapter = average_adapters(translated)
        adapter_source = "translated"

    prompt = build_prompt(tokenizer, mode, passages, request.question)
    dec = request.decoding
    if dec.greedy:
        seq = lm.generate_greedy(weights, adapter, prompt, dec.max_new)
    else:
        seq, _ = lm.generate_sample(weights, adapter, prompt, dec.max_new,
                                    temperature=dec.temperature, top_p=dec.top_p,
                                    top_k=dec.top_k, seed=dec.seed)
    return InferenceTrace(
        question_id=request.question_id,
        mode=mode,
        retrieved=retrieved,
        adapter_source=adapter_source,
        context_tokens=len(prompt),
        response_tokens=len(seq) - len(prompt),
        answer=extract_answer(tokenizer, seq),
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )


def write_traces(traces: list[InferenceTrace], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")


def read_traces(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]

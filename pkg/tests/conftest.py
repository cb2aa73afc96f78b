import numpy as np
import pytest

from raglab import corpus as cp
from raglab import model as lm
from raglab import prag
from raglab.lora import LoraConfig
from raglab.tokenizer import Tokenizer


class TrainedLab:
    """Small pretrained world shared by oracle tests that need a base model
    with working QA behavior (fact recall, answer-then-stop)."""

    def __init__(self):
        self.world = cp.gen_world(n_entities=6, n_relations=3, seed=21)
        self.tok = Tokenizer.from_texts(cp.vocabulary_texts(self.world))
        self.config = lm.ModelConfig(layers=4, hidden=64, ffn=128, heads=4,
                                     vocab=self.tok.vocab_size, max_seq=256)
        self.weights = lm.ModelWeights(self.config, seed=2)
        texts = cp.pretraining_texts(self.world, seed=3, copy_samples=300)
        seqs = [np.array(self.tok.encode(t)) for t in texts]
        self.curve = lm.train_base(self.weights, seqs, steps=900, lr=1.5e-3,
                                   seed=0, batch_size=16)
        self.doc_map = self.world.doc_by_id()

    def unseen_docs(self):
        return [d for d in self.world.documents if d.split != "seen"]

    def answer(self, question, passages=(), adapter=None, max_new=10):
        ids = self.tok.encode(cp.qa_prompt_text(question, list(passages)))
        out = lm.generate_greedy(self.weights, adapter, ids, max_new)
        from raglab.pipeline import extract_answer
        return extract_answer(self.tok, out)

    def train_adapter(self, doc, epochs=20, lr=1e-2, seed=5):
        aug = cp.augment(doc, 1, 3, seed=prag.doc_seed(seed, doc.id))
        return prag.train_doc_adapter(self.weights, self.tok, doc, aug,
                                      LoraConfig(),
                                      prag.PragTrainConfig(epochs=epochs, lr=lr, seed=seed))


@pytest.fixture(scope="session")
def trained_lab():
    return TrainedLab()

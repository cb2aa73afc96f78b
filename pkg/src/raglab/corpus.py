"""Deterministic synthetic fact world: entities, relations, documents,
template-based augmentation, and the pretraining curriculum for the base LM.

Facts are (subject, relation, object) with unique objects, so every answer
string occurs in exactly one document. A seeded fraction of facts is held out
of base-LM pretraining ("unseen"); their documents are further partitioned
into an "align" half (translator training) and a "test" half (evaluation), so
test documents are never seen by either the base LM or the translator.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

SCAFFOLD_INSTRUCTION = "Answer the question ."
QUESTION_MARK = "Question:"
ANSWER_MARK = "The answer is"
PASSAGE_MARK = "Passage"
EOT_WORD = "<eot>"

# Each relation: (name, statement frames, question frames). The relation's
# surface form appears verbatim in every frame so documents satisfy the
# fact-visibility invariant and lexical retrieval has a handle on it.
RELATIONS: list[tuple[str, list[str], list[str]]] = [
    ("capital", [
        "The capital of {s} is {o} .",
        "{o} serves as the capital of {s} .",
        "In {s} the capital city is {o} .",
        "{s} declared {o} its capital .",
        "People call {o} the capital of {s} .",
    ], [
        "What is the capital of {s} ?",
        "Which city is the capital of {s} ?",
        "Name the capital of {s} .",
    ]),
    ("currency", [
        "The currency of {s} is the {o} .",
        "{s} pays with the currency called {o} .",
        "Shops in {s} accept the currency named {o} .",
        "The {o} is the official currency of {s} .",
        "Trade in {s} uses the currency {o} .",
    ], [
        "What is the currency of {s} ?",
        "Which currency does {s} use ?",
        "Name the currency of {s} .",
    ]),
    ("language", [
        "The language of {s} is {o} .",
        "Citizens of {s} speak the language {o} .",
        "{o} is the official language of {s} .",
        "In {s} the common language is {o} .",
        "Schools in {s} teach the language {o} .",
    ], [
        "What is the language of {s} ?",
        "Which language is spoken in {s} ?",
        "Name the language of {s} .",
    ]),
    ("founder", [
        "The founder of {s} is {o} .",
        "{o} is remembered as the founder of {s} .",
        "{s} honors its founder {o} .",
        "History names {o} the founder of {s} .",
        "The founder {o} established {s} .",
    ], [
        "Who is the founder of {s} ?",
        "Which person is the founder of {s} ?",
        "Name the founder of {s} .",
    ]),
    ("river", [
        "The river of {s} is the {o} .",
        "The {o} is the longest river of {s} .",
        "Maps of {s} show the river {o} .",
        "{s} is crossed by the river {o} .",
        "Boats in {s} sail the river {o} .",
    ], [
        "What is the river of {s} ?",
        "Which river flows through {s} ?",
        "Name the river of {s} .",
    ]),
    ("anthem", [
        "The anthem of {s} is {o} .",
        "{o} is sung as the anthem of {s} .",
        "Crowds in {s} sing the anthem {o} .",
        "{s} adopted {o} as its anthem .",
        "The official anthem of {s} is {o} .",
    ], [
        "What is the anthem of {s} ?",
        "Which song is the anthem of {s} ?",
        "Name the anthem of {s} .",
    ]),
]

_ENTITY_HEADS = ["Vel", "Mar", "Tor", "Zan", "Kel", "Bro", "Fen", "Gri", "Hul", "Jor",
                 "Lim", "Nor", "Pra", "Quo", "Ril", "Sab", "Tun", "Urv", "Wex", "Yam"]
_ENTITY_TAILS = ["ovia", "land", "stan", "mark", "gard", "onia", "heim", "dor", "wick", "esse"]
_VALUE_HEADS = ["Ba", "Cu", "Do", "Fi", "Ga", "He", "Ji", "Ko", "Lu", "Me",
                "Ni", "Or", "Pe", "Ru", "Si", "Ta", "Ul", "Vo", "Wi", "Ze"]
_VALUE_MIDS = ["ra", "lo", "mi", "ne", "pu", "sa", "te", "vi", "zo", "ke"]
_VALUE_TAILS = ["rin", "bos", "dal", "fex", "gon", "hal", "jus", "ket", "lum", "mor"]


def _unique_names(rng: random.Random, count: int, maker) -> list[str]:
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < count:
        name = maker(rng)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def _entity_name(rng: random.Random) -> str:
    return rng.choice(_ENTITY_HEADS) + rng.choice(_ENTITY_TAILS)


def _value_name(rng: random.Random) -> str:
    return rng.choice(_VALUE_HEADS) + rng.choice(_VALUE_MIDS) + rng.choice(_VALUE_TAILS)


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    obj: str
    unseen: bool = False


@dataclass
class Document:
    id: str
    text: str
    facts: list[Fact]
    split: str  # seen | align | test


@dataclass
class QAItem:
    id: str
    question: str
    answer: str
    gold_doc_id: str
    split: str


@dataclass
class AugmentedSet:
    doc_id: str
    rewrites: list[str]
    qa_pairs: list[tuple[str, str]]
    triples: list[str]


@dataclass
class World:
    seed: int
    relations: list[str]
    entities: list[str]
    facts: list[Fact]
    documents: list[Document]
    eval_qa: list[QAItem]
    nonce_entities: list[str]
    nonce_values: list[str]
    values: list[str] = field(default_factory=list)

    def doc_by_id(self) -> dict[str, Document]:
        return {d.id: d for d in self.documents}


def _relation_bank(relation: str) -> tuple[list[str], list[str]]:
    for name, frames, questions in RELATIONS:
        if name == relation:
            return frames, questions
    raise KeyError(f"unknown relation {relation!r}")


def render_statement(fact: Fact, frame_index: int) -> str:
    frames, _ = _relation_bank(fact.relation)
    return frames[frame_index % len(frames)].format(s=fact.subject, o=fact.obj)


def render_question(fact_or_triple, template_index: int) -> str:
    _, questions = _relation_bank(fact_or_triple.relation)
    return questions[template_index % len(questions)].format(s=fact_or_triple.subject)


def gen_world(n_entities: int, n_relations: int, seed: int,
              unseen_fraction: float = 0.25, n_nonce: int = 40) -> World:
    """Build the fact world, its documents, and the eval QA set."""
    if n_entities <= 0 or n_relations <= 0:
        raise ValueError("n_entities and n_relations must be positive")
    if n_relations > len(RELATIONS):
        raise ValueError(f"at most {len(RELATIONS)} relations available")
    rng = random.Random(seed)
    relations = [r[0] for r in RELATIONS[:n_relations]]
    entities = _unique_names(rng, n_entities, _entity_name)
    n_values = n_entities * n_relations
    values = _unique_names(rng, n_values + 2 * n_nonce, _value_name)
    nonce_values = values[n_values:]
    values = values[:n_values]
    nonce_entities = _unique_names(rng, n_nonce, _entity_name)
    # Nonce entities must stay disjoint from real ones.
    taken = set(entities)
    nonce_entities = [n for n in nonce_entities if n not in taken]

    facts: list[Fact] = []
    vi = 0
    for ent in entities:
        for rel in relations:
            facts.append(Fact(ent, rel, values[vi]))
            vi += 1
    n_unseen = round(unseen_fraction * len(facts))
    unseen_idx = set(rng.sample(range(len(facts)), n_unseen))
    facts = [Fact(f.subject, f.relation, f.obj, unseen=(i in unseen_idx))
             for i, f in enumerate(facts)]

    # Documents: per entity, chunk seen and unseen facts separately so every
    # document is homogeneous in split. Seen documents pack 1-3 facts;
    # held-out documents are atomic (one fact each) so the knowledge a single
    # document carries is a single injectable association.
    documents: list[Document] = []
    unseen_docs: list[Document] = []
    by_entity: dict[str, list[Fact]] = {}
    for f in facts:
        by_entity.setdefault(f.subject, []).append(f)
    for ent in entities:
        for unseen in (False, True):
            group = [f for f in by_entity[ent] if f.unseen == unseen]
            while group:
                take = 1 if unseen else min(len(group), rng.randint(1, 3))
                chunk, group = group[:take], group[take:]
                text = " ".join(render_statement(f, rng.randrange(5)) for f in chunk)
                doc = Document(id=f"doc-{len(documents):04d}", text=text,
                               facts=chunk, split="seen")
                documents.append(doc)
                if unseen:
                    unseen_docs.append(doc)
    order = list(range(len(unseen_docs)))
    rng.shuffle(order)
    for pos, di in enumerate(order):
        unseen_docs[di].split = "align" if pos < len(order) // 2 else "test"

    doc_of_fact: dict[tuple[str, str], Document] = {}
    for d in documents:
        for f in d.facts:
            doc_of_fact[(f.subject, f.relation)] = d
    eval_qa = []
    for i, f in enumerate(facts):
        doc = doc_of_fact[(f.subject, f.relation)]
        eval_qa.append(QAItem(id=f"q{i:04d}", question=render_question(f, 0),
                              answer=f.obj, gold_doc_id=doc.id, split=doc.split))

    return World(seed=seed, relations=relations, entities=entities, facts=facts,
                 documents=documents, eval_qa=eval_qa, nonce_entities=nonce_entities,
                 nonce_values=nonce_values, values=values)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(document: Document, n: int, m: int, seed: int) -> AugmentedSet:
    """n template rewrites and m QA pairs; emits the n*m concatenated
    training samples rewrite + question + answer."""
    if not document.facts:
        raise ValueError(f"document {document.id} has no facts to augment")
    rng = random.Random(seed)
    offset = rng.randrange(5)
    rewrites = []
    for k in range(n):
        rewrites.append(" ".join(render_statement(f, offset + k + 1 + fi)
                                 for fi, f in enumerate(document.facts)))
    qa_pairs = []
    q_offset = rng.randrange(3)
    for j in range(m):
        fact = document.facts[j % len(document.facts)]
        template = (q_offset + j // len(document.facts)) % 3
        qa_pairs.append((render_question(fact, template), fact.obj))
    triples = [
        f"{rw} {QUESTION_MARK} {q} {ANSWER_MARK} {a} {EOT_WORD}"
        for rw in rewrites for (q, a) in qa_pairs
    ]
    return AugmentedSet(document.id, rewrites, qa_pairs, triples)


# ---------------------------------------------------------------------------
# Prompt-formatted text builders shared by pretraining and inference
# ---------------------------------------------------------------------------

def qa_prompt_text(question: str, passages: list[str]) -> str:
    parts = [SCAFFOLD_INSTRUCTION]
    for i, p in enumerate(passages, start=1):
        parts.append(f"{PASSAGE_MARK} {i}: {p}")
    parts.append(f"{QUESTION_MARK} {question} {ANSWER_MARK}")
    return " ".join(parts)


def pretraining_texts(world: World, seed: int, copy_samples: int = 300) -> list[str]:
    """Base-LM curriculum: seen-fact statements, seen-fact QA with and without
    passages, nonce-fact copy QA, and name-exposure lines. Unseen facts never
    appear."""
    rng = random.Random(seed)
    texts: list[str] = []
    seen_facts = [f for f in world.facts if not f.unseen]
    seen_docs = [d for d in world.documents if d.split == "seen"]

    for f in seen_facts:
        for frame in range(3):
            texts.append(render_statement(f, frame))

    doc_of_fact = {}
    for d in seen_docs:
        for f in d.facts:
            doc_of_fact[(f.subject, f.relation)] = d
    for f in seen_facts:
        for t in range(3):
            q = render_question(f, t)
            texts.append(f"{qa_prompt_text(q, [])} {f.obj} {EOT_WORD}")
        gold = doc_of_fact[(f.subject, f.relation)]
        distractors = [d.text for d in rng.sample(seen_docs, k=min(2, len(seen_docs)))]
        passages = [gold.text] + distractors[: rng.randint(0, 2)]
        rng.shuffle(passages)
        q = render_question(f, rng.randrange(3))
        texts.append(f"{qa_prompt_text(q, passages)} {f.obj} {EOT_WORD}")

    # Copy skill: pseudo-facts over nonce names, never colliding with the
    # real world, teach answer-from-passage behavior that generalizes.
    # Passages mimic retrieved documents: 1-3 statement sentences each, and
    # 1-3 passages per prompt, matching what retrieval produces at inference.
    def nonce_fact(subject=None):
        return Fact(subject or world.nonce_entities[rng.randrange(len(world.nonce_entities))],
                    world.relations[rng.randrange(len(world.relations))],
                    world.nonce_values[rng.randrange(len(world.nonce_values))])

    def nonce_passage(anchor: Fact | None) -> str:
        sents = []
        if anchor is not None:
            sents.append(render_statement(anchor, rng.randrange(5)))
        for _ in range(rng.randint(0, 1)):
            sents.append(render_statement(nonce_fact(), rng.randrange(5)))
        rng.shuffle(sents)
        return " ".join(sents)

    for _ in range(copy_samples):
        fact = nonce_fact()
        passages = [nonce_passage(fact)]
        if rng.random() < 0.5:
            passages.append(nonce_passage(None))
        rng.shuffle(passages)
        q = render_question(fact, rng.randrange(3))
        texts.append(f"{qa_prompt_text(q, passages)} {fact.obj} {EOT_WORD}")

    for name in world.entities + world.values + world.nonce_entities + world.nonce_values:
        texts.append(f"{name} is a name .")
    return texts


def vocabulary_texts(world: World) -> list[str]:
    """Every string the lab can ever render, so the tokenizer never sees OOV."""
    texts = [d.text for d in world.documents]
    for f in world.facts:
        for i in range(5):
            texts.append(render_statement(f, i))
        for i in range(3):
            texts.append(render_question(f, i))
    texts.append(qa_prompt_text("x", ["p"] * 5))
    texts.append(f"{EOT_WORD} is a name .")
    texts.extend(world.entities + world.values + world.nonce_entities + world.nonce_values)
    for rel in world.relations:
        for subj in world.nonce_entities[:1]:
            for obj in world.nonce_values[:1]:
                f = Fact(subj, rel, obj)
                for i in range(5):
                    texts.append(render_statement(f, i))
                for i in range(3):
                    texts.append(render_question(f, i))
    return texts


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

def save_corpus(documents: list[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in documents:
            rec = {"id": d.id, "text": d.text, "split": d.split,
                   "facts": [{"subject": f.subject, "relation": f.relation,
                              "object": f.obj, "unseen": f.unseen} for f in d.facts]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            facts = [Fact(f["subject"], f["relation"], f["object"], f["unseen"])
                     for f in rec["facts"]]
            docs.append(Document(rec["id"], rec["text"], facts, rec["split"]))
    return docs


def save_eval(items: list[QAItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in items:
            fh.write(json.dumps({"id": q.id, "question": q.question, "answer": q.answer,
                                 "gold_doc_id": q.gold_doc_id, "split": q.split},
                                sort_keys=True) + "\n")


def load_eval(path) -> list[QAItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            items.append(QAItem(rec["id"], rec["question"], rec["answer"],
                                rec["gold_doc_id"], rec["split"]))
    return items


def save_texts(texts: list[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in texts:
            fh.write(json.dumps({"text": t}, sort_keys=True) + "\n")


def load_texts(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line)["text"] for line in fh]

"""Word-level whitespace tokenizer over the synthetic vocabulary."""
from __future__ import annotations

PAD, UNK, EOT = 0, 1, 2
EOT_TEXT = "<eot>"
_SPECIALS = ["<pad>", "<unk>", EOT_TEXT]


class Tokenizer:
    """Maps whitespace-separated words to ids. encode/decode are inverse on
    whitespace-normalized, in-vocabulary text."""

    def __init__(self, words: list[str]):
        self.id_to_word = list(_SPECIALS)
        seen = set(self.id_to_word)
        for w in sorted(set(words)):
            if w and w not in seen:
                self.id_to_word.append(w)
                seen.add(w)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    @classmethod
    def from_texts(cls, texts: list[str]) -> "Tokenizer":
        words: list[str] = []
        for t in texts:
            words.extend(t.split())
        return cls(words)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_word)

    def encode(self, text: str) -> list[int]:
        return [self.word_to_id.get(w, UNK) for w in text.split()]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.id_to_word[i] for i in ids if i != PAD)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

"""Answer-quality metrics (normalized EM / token-bag F1) and the
multi-generation uncertainty measures: perplexity of the greedy response,
entropy and length-normalized entropy of sampled responses, and mean pairwise
lexical similarity.
"""
from __future__ import annotations

import re
import string
import warnings

import numpy as np

from . import model as lm
from .autodiff import no_grad
from .tokenizer import EOT

ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    s = ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def f1_score(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = 0
    gold_counts: dict[str, int] = {}
    for t in gold_tokens:
        gold_counts[t] = gold_counts.get(t, 0) + 1
    for t in pred_tokens:
        if gold_counts.get(t, 0) > 0:
            gold_counts[t] -= 1
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction: str, gold: str) -> bool:
    return normalize_answer(prediction) == normalize_answer(gold)


def lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def lcs_f1(a: list[str], b: list[str]) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    lcs = lcs_length(a, b)
    return 2.0 * lcs / (len(a) + len(b))


def lexical_similarity(responses: list[list[str]]) -> float:
    """Mean pairwise longest-common-subsequence F1 over the responses."""
    if len(responses) < 2:
        return 1.0
    total = 0.0
    pairs = 0
    for i in range(len(responses)):
        for j in range(i + 1, len(responses)):
            total += lcs_f1(responses[i], responses[j])
            pairs += 1
    return total / pairs


def response_nll(weights, adapter, prompt: list[int], response: list[int]) -> float:
    """Sum of next-token negative log-likelihoods of the response tokens."""
    if not response:
        return 0.0
    full = np.array(list(prompt) + list(response))
    with no_grad():
        logits = lm.forward_logits(weights, adapter, full).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = 0.0
    for i in range(len(prompt), len(full)):
        nll -= logp[i - 1, full[i]]
    return nll


def uncertainty_metrics(weights, tokenizer, adapter, prompt: list[int], k: int = 5,
                        max_new: int = 128, temperature: float = 1.0,
                        top_p: float = 0.95, top_k: int = 20,
                        seed: int = 0) -> dict[str, float]:
    """PPL of the greedy continuation plus EN / LEN / LS over k samples.

    EN is the mean negative total log-probability of the sampled responses,
    LEN its per-token version (zero-length samples are excluded with a
    warning), LS the mean pairwise LCS-F1 of the sampled token lists.
    """
    if k < 2:
        raise ValueError("need at least 2 samples for entropy metrics")
    greedy = lm.generate_greedy(weights, adapter, prompt, max_new)
    response = greedy[len(prompt):]
    if response:
        ppl = float(np.exp(response_nll(weights, adapter, prompt, response) / len(response)))
    else:
        warnings.warn("empty greedy response; perplexity undefined")
        ppl = float("nan")

    logprobs = []
    norm_logprobs = []
    token_lists = []
    for i in range(k):
        seq, lp = lm.generate_sample(weights, adapter, prompt, max_new,
                                     temperature=temperature, top_p=top_p,
                                     top_k=top_k, seed=seed + i)
        resp = seq[len(prompt):]
        token_lists.append([tokenizer.id_to_word[t] for t in resp if t != EOT])
        logprobs.append(lp)
        if resp:
            norm_logprobs.append(lp / len(resp))
        else:
            warnings.warn("zero-length sampled response excluded from LEN")
    en = -float(np.mean(logprobs))
    len_metric = -float(np.mean(norm_logprobs)) if norm_logprobs else float("nan")
    ls = lexical_similarity(token_lists)
    return {"ppl": ppl, "en": en, "len": len_metric, "ls": ls}

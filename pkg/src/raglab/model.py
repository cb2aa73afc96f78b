"""Decoder-only transformer trained from scratch.

Architecture: token embedding, pre-norm blocks of multi-head causal
self-attention with rotary position offsets plus a gated FFN
(down(silu(gate(x)) * up(x))), RMS final norm, tied-nothing output
projection. Rotary offsets keep the weight list free of positional
parameters and make learned QA patterns robust to where a question lands
in the sequence. Low-rank adapter deltas, when present, apply only to the
FFN gate/up/down projections and are added at forward time; base weights
are never mutated by adapter use.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad, recording
from .lora import LoraAdapter, merged_delta
from .optim import Adam
from .tokenizer import EOT

WEIGHTS_MAGIC = b"DYPW"
WEIGHTS_VERSION = 1

ENCODE_MAX_TOKENS = 3000  # translator-side document truncation length


@dataclass
class ModelConfig:
    layers: int
    hidden: int
    ffn: int
    heads: int
    vocab: int
    max_seq: int

    def __post_init__(self):
        if min(self.layers, self.hidden, self.ffn, self.heads, self.vocab, self.max_seq) <= 0:
            raise ValueError("all config fields must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.ffn <= self.hidden:
            raise ValueError("ffn intermediate size must exceed hidden size")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


class ModelWeights:
    """All trainable tensors of the base model, in declared checkpoint order."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        h, k, v = config.hidden, config.ffn, config.vocab

        def mat(rows, cols):
            return Tensor(rng.normal(0.0, 0.02, size=(rows, cols)), requires_grad=True)

        self.embed = mat(v, h)
        self.blocks = []
        for _ in range(config.layers):
            self.blocks.append({
                "attn_gain": Tensor(np.ones(h), requires_grad=True),
                "wq": mat(h, h),
                "wk": mat(h, h),
                "wv": mat(h, h),
                "wo": mat(h, h),
                "ffn_gain": Tensor(np.ones(h), requires_grad=True),
                "w_gate": mat(h, k),
                "w_up": mat(h, k),
                "w_down": mat(k, h),
            })
        self.final_gain = Tensor(np.ones(h), requires_grad=True)
        self.w_out = mat(h, v)

    _BLOCK_ORDER = ("attn_gain", "wq", "wk", "wv", "wo", "ffn_gain", "w_gate", "w_up", "w_down")

    def tensors(self):
        yield "embed", self.embed
        for i, blk in enumerate(self.blocks):
            for name in self._BLOCK_ORDER:
                yield f"block{i}.{name}", blk[name]
        yield "final_gain", self.final_gain
        yield "w_out", self.w_out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.tensors()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def fingerprint(self) -> bytes:
        import hashlib
        hsh = hashlib.sha256()
        for name, t in self.tensors():
            hsh.update(name.encode())
            hsh.update(t.data.tobytes())
        return hsh.digest()


# Cached rotary/mask constants keyed by shape; values are plain arrays.
_rope_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
_mask_cache: dict[tuple[int, int], np.ndarray] = {}


def _rope_tables(seq: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    key = (seq, head_dim)
    if key not in _rope_cache:
        half = head_dim // 2
        inv = 1.0 / (10000.0 ** (np.arange(half) / half))
        ang = np.arange(seq)[:, None] * inv[None, :]
        _rope_cache[key] = (np.cos(ang), np.sin(ang))
    return _rope_cache[key]


def _causal_mask(heads: int, seq: int) -> np.ndarray:
    key = (heads, seq)
    if key not in _mask_cache:
        m = np.full((seq, seq), -1e9)
        m = np.triu(m, k=1)
        _mask_cache[key] = np.broadcast_to(m, (heads, seq, seq)).copy()
    return _mask_cache[key]


def _rotate(x: Tensor, cos_t: Tensor, sin_t: Tensor, half: int) -> Tensor:
    # x: (heads, T, head_dim) split into halves (x1, x2);
    # rotated = (x1*cos - x2*sin) ++ (x1*sin + x2*cos)
    x1 = ad.narrow(x, 2, 0, half)
    x2 = ad.narrow(x, 2, half, half)
    r1 = ad.sub(ad.mul(x1, cos_t), ad.mul(x2, sin_t))
    r2 = ad.add(ad.mul(x1, sin_t), ad.mul(x2, cos_t))
    return ad.concat([r1, r2], axis=2)


def _project(x: Tensor, weight: Tensor, adapter: LoraAdapter | None,
             layer: int, module: str) -> Tensor:
    out = ad.matmul(x, weight)
    if adapter is not None:
        b, a = adapter.layers[layer][module]
        lowrank = ad.matmul(ad.matmul(x, ad.transpose(a)), ad.transpose(b))
        out = ad.add(out, ad.scale(lowrank, adapter.config.alpha / adapter.config.r))
    return out


def _validate_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D array")
    if tokens.size > config.max_seq:
        raise ValueError(f"sequence length {tokens.size} exceeds max_seq {config.max_seq}")
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise ValueError("token id outside vocabulary")
    return tokens


def hidden_states(weights: ModelWeights, adapter: LoraAdapter | None,
                  tokens: np.ndarray) -> Tensor:
    """Per-position hidden states after the final norm, before w_out."""
    cfg = weights.config
    tokens = _validate_tokens(cfg, tokens)
    seq = tokens.size
    heads, dh = cfg.heads, cfg.head_dim
    half = dh // 2

    cos, sin = _rope_tables(seq, dh)
    cos_t = Tensor(np.broadcast_to(cos[None, :, :], (heads, seq, half)).copy())
    sin_t = Tensor(np.broadcast_to(sin[None, :, :], (heads, seq, half)).copy())
    mask_t = Tensor(_causal_mask(heads, seq))

    x = ad.embedding(weights.embed, tokens)
    for li, blk in enumerate(weights.blocks):
        a_in = ad.rms_norm(x, blk["attn_gain"])
        q = ad.matmul(a_in, blk["wq"])
        k = ad.matmul(a_in, blk["wk"])
        v = ad.matmul(a_in, blk["wv"])

        def split_heads(t):
            return ad.permute(ad.reshape(t, (seq, heads, dh)), (1, 0, 2))

        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        q = _rotate(q, cos_t, sin_t, half)
        k = _rotate(k, cos_t, sin_t, half)

        scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        probs = ad.softmax(ad.add(scores, mask_t))
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.permute(ctx, (1, 0, 2)), (seq, cfg.hidden))
        x = ad.add(x, ad.matmul(ctx, blk["wo"]))

        f_in = ad.rms_norm(x, blk["ffn_gain"])
        gate = _project(f_in, blk["w_gate"], adapter, li, "gate")
        up = _project(f_in, blk["w_up"], adapter, li, "up")
        down = _project(ad.mul(ad.silu(gate), up), blk["w_down"], adapter, li, "down")
        x = ad.add(x, down)

    return ad.rms_norm(x, weights.final_gain)


def forward_logits(weights: ModelWeights, adapter: LoraAdapter | None,
                   tokens: np.ndarray) -> Tensor:
    """Causal next-token logits, shape (len(tokens), vocab)."""
    return ad.matmul(hidden_states(weights, adapter, tokens), weights.w_out)


def loss_nll(weights: ModelWeights, adapter: LoraAdapter | None,
             sample: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over the whole sample.

    Position t is scored given tokens < t; the first token has no context
    and contributes no term, so a sample must have at least two tokens.
    """
    sample = np.asarray(sample, dtype=np.int64)
    if sample.size < 2:
        raise ValueError("need at least two tokens to score next-token loss")
    logits = forward_logits(weights, adapter, sample)
    preds = ad.narrow(logits, 0, 0, sample.size - 1)
    return ad.cross_entropy(preds, sample[1:])


def generate_greedy(weights: ModelWeights, adapter: LoraAdapter | None,
                    prompt: list[int], max_new: int) -> list[int]:
    """Iterative argmax continuation; stops at end-of-text or max_new."""
    if not len(prompt):
        raise ValueError("prompt must be non-empty")
    seq = list(prompt)
    with no_grad():
        for _ in range(max_new):
            if len(seq) >= weights.config.max_seq:
                break
            logits = forward_logits(weights, adapter, np.array(seq)).data[-1]
            nxt = int(logits.argmax())
            seq.append(nxt)
            if nxt == EOT:
                break
    return seq


def generate_sample(weights: ModelWeights, adapter: LoraAdapter | None,
                    prompt: list[int], max_new: int, temperature: float,
                    top_p: float, top_k: int, seed: int) -> tuple[list[int], float]:
    """Nucleus + top-k sampling. Returns the full sequence and the summed
    log-probability of the generated tokens under the unfiltered model
    softmax (filtering affects which token is drawn, not how it is scored).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    if not len(prompt):
        raise ValueError("prompt must be non-empty")

    rng = np.random.default_rng(seed)
    seq = list(prompt)
    total_logprob = 0.0
    with no_grad():
        for _ in range(max_new):
            if len(seq) >= weights.config.max_seq:
                break
            logits = forward_logits(weights, adapter, np.array(seq)).data[-1]
            shifted = logits - logits.max()
            model_logp = shifted - np.log(np.exp(shifted).sum())

            scaled = logits / temperature
            order = np.argsort(-scaled, kind="stable")
            keep = order[: min(top_k, order.size)]
            kl = scaled[keep] - scaled[keep].max()
            probs = np.exp(kl) / np.exp(kl).sum()
            cum = np.cumsum(probs)
            cutoff = int(np.searchsorted(cum, top_p)) + 1
            keep = keep[:cutoff]
            probs = probs[:cutoff] / probs[:cutoff].sum()

            nxt = int(rng.choice(keep, p=probs))
            total_logprob += float(model_logp[nxt])
            seq.append(nxt)
            if nxt == EOT:
                break
    return seq, total_logprob


def encode_document(weights: ModelWeights, doc_tokens: np.ndarray,
                    max_tokens: int = ENCODE_MAX_TOKENS,
                    pooling: str = "last") -> np.ndarray:
    """Document embedding from the bare base model (no adapter), after the
    final norm, before the vocabulary projection.

    pooling="last" takes the final token position's hidden state. A toy model
    trained from scratch never faces pressure to summarize a document into
    its final state (attention reads earlier tokens directly), so that vector
    carries almost no transferable content at this scale; pooling="mean"
    averages all positions and is measurably content-bearing, which the
    translator needs to generalize across documents."""
    doc_tokens = np.asarray(doc_tokens, dtype=np.int64)
    if doc_tokens.size == 0:
        raise ValueError("cannot encode an empty document")
    if pooling not in ("last", "mean"):
        raise ValueError("pooling must be 'last' or 'mean'")
    doc_tokens = doc_tokens[: min(max_tokens, weights.config.max_seq)]
    with no_grad():
        hs = hidden_states(weights, None, doc_tokens)
    if pooling == "mean":
        return hs.data.mean(axis=0)
    return hs.data[-1].copy()


def train_base(weights: ModelWeights, sequences: list[np.ndarray], steps: int,
               lr: float, seed: int, batch_size: int = 8) -> list[float]:
    """Next-token training over the corpus. Each optimizer step accumulates
    gradients over batch_size uniformly drawn sequences (additive .grad
    accumulation across backward calls), then applies one update with the
    mean gradient. Returns the per-step mean-loss curve; aborts on
    divergence."""
    if not sequences:
        raise ValueError("empty training corpus")
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    rng = np.random.default_rng(seed)
    params = weights.parameters()
    opt = Adam(params, lr=lr)
    curve: list[float] = []
    for step in range(steps):
        opt.zero_grad()
        batch_loss = 0.0
        for _ in range(batch_size):
            sample = seqs[int(rng.integers(len(seqs)))]
            with recording():
                loss = loss_nll(weights, None, sample)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(
                        f"training diverged at step {step}: loss={loss.item()}")
                ad.backward(loss)
            batch_loss += loss.item()
        if batch_size > 1:
            for p in params:
                if p.grad is not None:
                    p.grad /= batch_size
        opt.step()
        curve.append(batch_loss / batch_size)
    return curve


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

class CheckpointError(IOError):
    pass


def save_weights(weights: ModelWeights, path) -> None:
    cfg = weights.config
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack("<6I", cfg.layers, cfg.hidden, cfg.ffn,
                             cfg.heads, cfg.vocab, cfg.max_seq))
        for _, t in weights.tensors():
            fh.write(t.data.astype("<f4").tobytes())


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WEIGHTS_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        fields = struct.unpack("<6I", fh.read(24))
        cfg = ModelConfig(*fields)
        weights = ModelWeights(cfg, seed=0)
        for name, t in weights.tensors():
            n = t.size
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"truncated checkpoint while reading {name}")
            t.data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(t.shape)
    return weights

"""Word-level text codec: vocabulary, learned base embeddings, and the
projection pair between base width and the backbone token width.

Encoding: words -> frozen base embeddings (default 64-d) -> trainable
up-projection to embed_dim. Decoding: trainable down-projection back to
base width, then exact nearest neighbor over the table (Euclidean),
truncated at the first EOS.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field

import torch

EOS = "<eos>"
PAD = "<pad>"

_PUNCT_RE = re.compile("[" + re.escape(string.punctuation) + "]")


def normalize(caption: str) -> list[str]:
    """Strip punctuation and split on whitespace. Case is preserved."""
    return _PUNCT_RE.sub(" ", caption).split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # ordered, unique; EOS and PAD reserved
    word_dim: int = 64

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if EOS not in self.tokens or PAD not in self.tokens:
            raise ValueError("vocabulary must contain EOS and PAD")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.tokens)}

    @property
    def eos_id(self) -> int:
        return self.tokens.index(EOS)

    @property
    def pad_id(self) -> int:
        return self.tokens.index(PAD)


def build_vocab(corpus: list[str], word_dim: int = 64) -> Vocabulary:
    """Vocabulary over all corpus words, sorted for run-to-run stability."""
    if not corpus:
        raise ValueError("empty corpus")
    words = set()
    for caption in corpus:
        words.update(normalize(caption))
    tokens = tuple(sorted(words)) + (EOS, PAD)
    return Vocabulary(tokens=tokens, word_dim=word_dim)


class EmbeddingTable:
    """Base embedding matrix plus the up/down projection pair.

    Base matrix and both projections are frozen during diffusion training.
    The up-projection is an isometry (orthonormal columns) and the
    down-projection its transpose, so encode/decode round-trips exactly and
    embed-space noise never grows when mapped back to base space. A freely
    trainable up-projection would let the backbone shrink text inputs toward
    zero and trivialize its noise-prediction target, so it stays fixed.
    """

    def __init__(self, vocab: Vocabulary, base: torch.Tensor, embed_dim: int,
                 seed: int = 0, fallback_init: bool = False):
        if base.shape != (len(vocab), vocab.word_dim):
            raise ValueError(f"base table shape {tuple(base.shape)} does not match vocab")
        if embed_dim < vocab.word_dim:
            raise ValueError("embed_dim must be at least word_dim")
        self.vocab = vocab
        self.base = base.detach().clone()
        self.embed_dim = embed_dim
        self.fallback_init = fallback_init
        gen = torch.Generator().manual_seed(seed)
        d, w = embed_dim, vocab.word_dim
        q, _ = torch.linalg.qr(torch.randn(d, w, generator=gen, dtype=torch.float64))
        q = q.to(torch.float32)
        self.up_proj = torch.nn.Linear(w, d, bias=False)
        self.down_proj = torch.nn.Linear(d, w, bias=False)
        with torch.no_grad():
            self.up_proj.weight.copy_(q)
            self.down_proj.weight.copy_(q.T)
        for p in (*self.up_proj.parameters(), *self.down_proj.parameters()):
            p.requires_grad_(False)

    def decode_margin(self) -> float:
        """Minimum pairwise Euclidean distance between base embeddings."""
        d = torch.cdist(self.base, self.base)
        d.fill_diagonal_(float("inf"))
        return float(d.min())

    def to(self, dtype: torch.dtype) -> "EmbeddingTable":
        self.base = self.base.to(dtype)
        self.up_proj = self.up_proj.to(dtype)
        self.down_proj = self.down_proj.to(dtype)
        return self


def encode(vocab: Vocabulary, table: EmbeddingTable, caption: str, text_len: int) -> torch.Tensor:
    """Embed a caption: words + EOS + PAD to text_len, up-projected.

    Returns a (text_len, embed_dim) tensor.
    """
    words = normalize(caption)
    if len(words) > text_len - 1:
        raise ValueError(f"caption has {len(words)} words; max is {text_len - 1}")
    idx = vocab.index
    ids = []
    for w in words:
        if w not in idx:
            raise KeyError(f"out-of-vocabulary word: {w!r}")
        ids.append(idx[w])
    ids.append(vocab.eos_id)
    ids.extend([vocab.pad_id] * (text_len - len(ids)))
    base = table.base[torch.tensor(ids, dtype=torch.int64)]
    with torch.no_grad():
        return table.up_proj(base)


def nn_decode(vocab: Vocabulary, table: EmbeddingTable, embeddings: torch.Tensor) -> str:
    """Nearest-neighbor decode to a caption, truncated at the first EOS."""
    if embeddings.dim() != 2 or embeddings.shape[1] != table.embed_dim:
        raise ValueError(f"expected (L, {table.embed_dim}) embeddings, got {tuple(embeddings.shape)}")
    with torch.no_grad():
        down = table.down_proj(embeddings.to(table.down_proj.weight.dtype))
        dist = torch.cdist(down, table.base)
        ids = dist.argmin(dim=1).tolist()
    words = []
    for i in ids:
        if i == vocab.eos_id:
            break
        if i == vocab.pad_id:
            continue
        words.append(vocab.tokens[i])
    return " ".join(words[: len(embeddings) - 1])


def train_embeddings(vocab: Vocabulary, corpus: list[str],
                     epochs: int = 5, seed: int = 0, embed_dim: int = 128,
                     window: int = 2, n_negative: int = 3, lr: float = 0.05) -> EmbeddingTable:
    """Skip-gram with negative sampling over the caption corpus.

    Falls back to a random init (flagged on the table) when the corpus has
    no context pairs. The returned base matrix is frozen thereafter.
    """
    gen = torch.Generator().manual_seed(seed)
    V, W = len(vocab), vocab.word_dim
    idx = vocab.index

    pairs: list[tuple[int, int]] = []
    for caption in corpus:
        ids = [idx[w] for w in normalize(caption) if w in idx] + [vocab.eos_id]
        for i, c in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    pairs.append((c, ids[j]))

    emb_in = torch.randn(V, W, generator=gen) * 0.1
    if not pairs:
        emb_in = emb_in * (W ** 0.5 / emb_in.norm(dim=1).mean())
        return EmbeddingTable(vocab, emb_in, embed_dim, seed=seed, fallback_init=True)

    emb_out = torch.randn(V, W, generator=gen) * 0.1
    pair_t = torch.tensor(pairs, dtype=torch.int64)
    for _ in range(epochs):
        order = torch.randperm(len(pairs), generator=gen)
        for k in order.tolist():
            c, o = pairs[k]
            negs = torch.randint(0, V, (n_negative,), generator=gen)
            targets = torch.cat([torch.tensor([o]), negs])
            labels = torch.zeros(1 + n_negative)
            labels[0] = 1.0
            v = emb_in[c]
            u = emb_out[targets]
            score = torch.sigmoid(u @ v)
            g = score - labels
            emb_in[c] = v - lr * (g[:, None] * u).sum(0)
            emb_out[targets] = u - lr * g[:, None] * v
    _ = pair_t  # retained for debugging dumps

    # nudge apart any coincident rows so the decode margin is positive
    d = torch.cdist(emb_in, emb_in)
    d.fill_diagonal_(float("inf"))
    if float(d.min()) == 0.0:
        emb_in = emb_in + torch.randn(V, W, generator=gen) * 1e-3

    # rescale so rows average norm sqrt(word_dim): per-coordinate scale near
    # 1, matching the image latent range the backbone sees
    emb_in = emb_in * (W ** 0.5 / emb_in.norm(dim=1).mean())

    return EmbeddingTable(vocab, emb_in, embed_dim, seed=seed)

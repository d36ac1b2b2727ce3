"""Tiny trainable text encoder: one self-attention block and a tanh MLP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import DataError
from .tensorcore import ParamStore, Tensor

PAD, V_TOKEN, O_TOKEN = "PAD", "[V]", "[O]"
MAX_LEN = 8
D_TEXT = 32
MLP_HIDDEN = 64

OBJECTS = ("circle", "square", "triangle", "star", "ring", "cross", "diamond", "gear")
PHYSICS = ("melt", "burn", "expand", "dissolve", "shatter", "deform")
BASE_WORDS = ("a", "photo", "of", "object")


class TokenizeError(DataError):
    code = "E_TOKENIZE"


@dataclass
class Vocabulary:
    tokens: list[str]
    ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != PAD:
            raise ValueError("PAD must be token 0")
        for special in (V_TOKEN, O_TOKEN):
            if self.tokens.count(special) != 1:
                raise ValueError(f"{special} must appear exactly once")
        lowered = [t.lower() for t in self.tokens]
        if len(set(lowered)) != len(lowered):
            raise ValueError("duplicate tokens in vocabulary")
        self.ids = {t: i for i, t in enumerate(lowered)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self.ids[word.lower()]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls([PAD, V_TOKEN, O_TOKEN, *BASE_WORDS, *OBJECTS, *PHYSICS])


def tokenize(prompt: str, vocab: Vocabulary) -> np.ndarray:
    words = prompt.lower().split()
    if len(words) > MAX_LEN:
        raise TokenizeError(f"prompt has {len(words)} words, limit is {MAX_LEN}: {prompt!r}")
    ids = np.zeros(MAX_LEN, dtype=np.int64)
    for i, w in enumerate(words):
        if w not in vocab.ids:
            raise TokenizeError(f"unknown word {w!r} in prompt {prompt!r}")
        ids[i] = vocab.ids[w]
    return ids


def pad_mask(tokens: np.ndarray) -> np.ndarray:
    """True for real tokens. An all-PAD prompt attends to every position."""
    mask = np.asarray(tokens) != 0
    empty = ~mask.any(axis=-1, keepdims=True)
    return mask | empty


def init_params(vocab_size: int, rng: np.random.Generator) -> ParamStore:
    def w(*shape, std):
        return tc.tensor(rng.normal(0.0, std, size=shape))

    return ParamStore({
        "text.tok_emb": w(vocab_size, D_TEXT, std=1.0),
        "text.pos_emb": w(MAX_LEN, D_TEXT, std=0.2),
        "text.attn.q": w(D_TEXT, D_TEXT, std=D_TEXT ** -0.5),
        "text.attn.k": w(D_TEXT, D_TEXT, std=D_TEXT ** -0.5),
        "text.attn.v": w(D_TEXT, D_TEXT, std=D_TEXT ** -0.5),
        "text.attn.o": w(D_TEXT, D_TEXT, std=D_TEXT ** -0.5),
        "text.mlp.fc1.weight": w(D_TEXT, MLP_HIDDEN, std=D_TEXT ** -0.5),
        "text.mlp.fc1.bias": tc.tensor(np.zeros(MLP_HIDDEN)),
        "text.mlp.fc2.weight": w(MLP_HIDDEN, D_TEXT, std=MLP_HIDDEN ** -0.5),
        "text.mlp.fc2.bias": tc.tensor(np.zeros(D_TEXT)),
    })


def encode(tokens: np.ndarray, params: ParamStore) -> Tensor:
    """Embed (B, L) or (L,) token ids to (B, L, D_TEXT)."""
    tokens = np.atleast_2d(np.asarray(tokens))
    h = tc.embedding(params["text.tok_emb"], tokens) + params["text.pos_emb"]
    q = h @ params["text.attn.q"]
    k = h @ params["text.attn.k"]
    v = h @ params["text.attn.v"]
    att = tc.softmax(tc.scale(q @ tc.transpose(k, (0, 2, 1)), D_TEXT ** -0.5))
    h = h + (att @ v) @ params["text.attn.o"]
    hidden = tc.tanh(h @ params["text.mlp.fc1.weight"] + params["text.mlp.fc1.bias"])
    return h + hidden @ params["text.mlp.fc2.weight"] + params["text.mlp.fc2.bias"]


def embedding_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between two embeddings over all flattened values."""
    if a.shape != b.shape:
        raise tc.ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return tc.sqrt(tc.sum(tc.square(a - b)))

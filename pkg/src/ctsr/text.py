"""Prompt generation over known anatomy and a frozen hashed-token text encoder."""

import hashlib
import re
import warnings
from dataclasses import dataclass

import numpy as np

from . import io
from .errors import ConfigError

L_MAX = 32
EMBED_DIM = 64
TABLE_ROWS = 4096
ENCODER_SEED = 20240229

# variant id -> instruction text
INSTRUCTIONS = {
    "none": "",
    "describe": "Describe the anatomical structures in this CT image of the abdomen",
    "list": "List the major anatomic structures in this CT image of the abdomen",
}


@dataclass(frozen=True)
class Instruction:
    variant: str
    text: str

    @classmethod
    def from_variant(cls, variant: str) -> "Instruction":
        if variant not in INSTRUCTIONS:
            raise ConfigError(f"unknown instruction variant {variant!r}; choose from {sorted(INSTRUCTIONS)}")
        return cls(variant, INSTRUCTIONS[variant])


@dataclass(frozen=True)
class PromptText:
    text: str
    warning: str | None = None


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: np.ndarray  # L_MAX x EMBED_DIM float32
    pad_mask: np.ndarray  # L_MAX bool, True at padded positions


def _join_prose(names: list[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


class TemplatePromptProvider:
    """Deterministic captioner over phantom anatomy, standing in for a vision-language model."""

    def __call__(self, meta, instruction: Instruction) -> PromptText:
        return get_prompt(meta, instruction)


def get_prompt(meta, instruction: Instruction) -> PromptText:
    if instruction.variant not in INSTRUCTIONS:
        raise ConfigError(f"unknown instruction variant {instruction.variant!r}")
    if instruction.variant == "none":
        return PromptText("")
    if meta is None or not meta.organs:
        warnings.warn("no anatomy metadata; returning an empty prompt", stacklevel=2)
        return PromptText("", warning="missing-anatomy")
    names = meta.organ_names()
    if instruction.variant == "describe":
        return PromptText(f"CT image of the abdomen showing {_join_prose(names)}.")
    return PromptText(f"abdomen CT: {', '.join(names)}.")


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def _token_row(token: str) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    # row 0 is reserved for padding
    return 1 + int.from_bytes(digest[:4], "little") % (TABLE_ROWS - 1)


class FrozenTextEncoder:
    """Hashed token table + sinusoidal positions + one fixed tanh mixing layer.

    Parameters are plain numpy arrays generated from a fixed seed; they never
    enter an optimizer. Mixing is position-wise, so a token only affects its
    own output row.
    """

    def __init__(self, dim: int = EMBED_DIM, max_len: int = L_MAX, seed: int = ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.max_len = max_len
        self.table = rng.standard_normal((TABLE_ROWS, dim)).astype(np.float32)
        self.mix_weight = (rng.standard_normal((dim, dim)) / np.sqrt(dim)).astype(np.float32)
        self.mix_bias = (0.1 * rng.standard_normal(dim)).astype(np.float32)
        pos = np.arange(max_len)[:, None]
        freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
        pe = np.zeros((max_len, dim))
        pe[:, 0::2] = np.sin(pos * freq)
        pe[:, 1::2] = np.cos(pos * freq)
        self.positions = pe.astype(np.float32)
        self.pad_vector = np.tanh(self.table[0] @ self.mix_weight + self.mix_bias).astype(np.float32)
        self._cache: dict[str, PromptEmbedding] = {}

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "table": self.table,
            "mix_weight": self.mix_weight,
            "mix_bias": self.mix_bias,
            "positions": self.positions,
        }

    def param_hash(self) -> str:
        return io.hash_arrays(self.parameters())

    def encode(self, prompt) -> PromptEmbedding:
        text = prompt.text if isinstance(prompt, PromptText) else str(prompt)
        if text in self._cache:
            return self._cache[text]
        tokens = tokenize(text)[: self.max_len]
        n = len(tokens)
        out = np.tile(self.pad_vector, (self.max_len, 1))
        if n:
            rows = np.array([_token_row(t) for t in tokens])
            h = self.table[rows] + self.positions[:n]
            out[:n] = np.tanh(h @ self.mix_weight + self.mix_bias)
        mask = np.ones(self.max_len, dtype=bool)
        mask[:n] = False
        emb = PromptEmbedding(out.astype(np.float32), mask)
        emb.tokens.setflags(write=False)
        emb.pad_mask.setflags(write=False)
        self._cache[text] = emb
        return emb

    __call__ = encode


_DEFAULT_ENCODER: FrozenTextEncoder | None = None


def default_encoder() -> FrozenTextEncoder:
    global _DEFAULT_ENCODER
    if _DEFAULT_ENCODER is None:
        _DEFAULT_ENCODER = FrozenTextEncoder()
    return _DEFAULT_ENCODER


def encode_text(prompt) -> PromptEmbedding:
    return default_encoder().encode(prompt)

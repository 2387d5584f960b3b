"""Task-specific prompts and textual semantic prototypes.

Every class gets a prompt made of learnable context rows followed by the
frozen embeddings of a FACS-derived description. A frozen text encoder turns
each prompt into one prototype vector. Context rows are shared by all classes
of a task, with one set for expressions and one set for AUs.
"""
import hashlib
import logging
import re
import warnings
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import torch
from torch import nn

from core.errors import ConfigurationError, FacsLookupError, InvalidArgumentError
from core.facs import FacsTable
from core.numerics import DTYPE, check_finite, gaussian, seeded_generator

VOCAB_SIZE = 8192
MAX_TOKENS = 77
CONTEXT_STD = 0.02

EXPRESSION = "expression"
AU = "au"
STYLES = ("compound", "standalone", "words")

_WORD = re.compile(r"[a-z0-9]+")

# generator streams, kept apart from the visual side
_TOKEN_STREAM = 101
_ENCODER_STREAM = 102
_CONTEXT_STREAMS = {EXPRESSION: 103, AU: 104}


@dataclass(frozen=True)
class TokenSequence:
    token_ids: Tuple[int, ...]
    source_text: str
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class PromptSpec:
    label: str
    task: str
    template: TokenSequence
    context_embeddings: torch.Tensor

    @property
    def context_length(self) -> int:
        return int(self.context_embeddings.shape[0])


@dataclass
class PrototypeSet:
    T_exp: torch.Tensor
    T_au: torch.Tensor
    style: str


# ----------------------------------------------------------------------
# Tokenizer
# ----------------------------------------------------------------------
def token_id(word: str, vocab_size: int = VOCAB_SIZE) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def tokenize(text: str, vocab_size: int = VOCAB_SIZE, max_tokens: int = MAX_TOKENS) -> TokenSequence:
    """Lowercase, split on whitespace and punctuation, hash every word to an id."""
    if not text or not text.strip():
        raise InvalidArgumentError("Cannot tokenize empty text")
    words = _WORD.findall(text.lower())
    if not words:
        raise InvalidArgumentError(f"No tokens in text: {text!r}")
    truncated = len(words) > max_tokens
    if truncated:
        message = f"Prompt of {len(words)} tokens truncated to {max_tokens}: {text[:40]!r}"
        warnings.warn(message)
        logging.warning(message)
        words = words[:max_tokens]
    return TokenSequence(tuple(token_id(w, vocab_size) for w in words), text, truncated)


def description_variant(table: FacsTable, label: Union[str, int], style: str = "compound") -> str:
    """Prompt text for a class label.

    Expression names follow ``style``; integer AU ids always use the FACS
    action description.
    """
    if style not in STYLES:
        raise InvalidArgumentError(f"Unknown description style '{style}'")
    if isinstance(label, int):
        return table.au(label).description
    expr = table.expression(label)
    if style == "words":
        return expr.word_description
    if style == "standalone":
        return expr.standalone_description
    return expr.compound_description


# ----------------------------------------------------------------------
# Text encoder providers
# ----------------------------------------------------------------------
class SurrogateTextEncoder(nn.Module):
    """Frozen seeded stand-in for a pretrained text encoder.

    Mean-pools the embedded prompt, applies a fixed random affine map and a
    tanh. All weights are buffers, so only prompt context receives gradients.
    """

    kind = "seeded-surrogate"

    def __init__(self, d_tok: int, d: int, seed: int, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.d_tok = d_tok
        self.d = d
        self.vocab_size = vocab_size
        # regenerated from the seed, so kept out of checkpoints
        self.register_buffer("token_table",
            gaussian((vocab_size, d_tok), 1.0, seeded_generator(seed, _TOKEN_STREAM)), persistent=False)
        gen = seeded_generator(seed, _ENCODER_STREAM)
        self.register_buffer("weight", gaussian((d, d_tok), d_tok ** -0.5, gen), persistent=False)
        self.register_buffer("bias", gaussian((d,), 0.1, gen), persistent=False)

    def embed_template(self, template: TokenSequence) -> torch.Tensor:
        ids = torch.tensor(template.token_ids, dtype=torch.long)
        if bool((ids >= self.vocab_size).any()):
            raise ConfigurationError("Token id outside the encoder vocabulary")
        return self.token_table.index_select(0, ids)

    def compose_prompt(self, spec: PromptSpec) -> torch.Tensor:
        """Context rows first, then the frozen template rows: (c + l) x d_tok."""
        if spec.context_embeddings.shape[-1] != self.d_tok:
            raise ConfigurationError(
                f"Context width {spec.context_embeddings.shape[-1]} does not match encoder d_tok {self.d_tok}")
        return torch.cat([spec.context_embeddings, self.embed_template(spec.template)], dim=0)

    def encode(self, spec: PromptSpec) -> torch.Tensor:
        pooled = self.compose_prompt(spec).mean(dim=0)
        return torch.tanh(torch.mv(self.weight, pooled) + self.bias)


class FileBackedTextEncoder(nn.Module):
    """Per-class embeddings computed offline by a real text encoder."""

    kind = "file-backed"

    def __init__(self, names: Sequence[str], rows: torch.Tensor, d_tok: int):
        super().__init__()
        self.d_tok = d_tok
        self.d = int(rows.shape[1])
        self.names = list(names)
        self._index: Dict[str, int] = {name.lower(): i for i, name in enumerate(self.names)}
        self.register_buffer("rows", rows.to(DTYPE).clone())

    @classmethod
    def from_file(cls, path: str, d_tok: int) -> "FileBackedTextEncoder":
        from core.storage import read_embeddings

        names, rows = read_embeddings(path)
        logging.info(f"Loaded {len(names)} text embeddings of width {rows.shape[1]} from {path}")
        return cls(names, rows, d_tok)

    def compose_prompt(self, spec: PromptSpec) -> torch.Tensor:
        raise ConfigurationError("File-backed text embeddings have no token-level prompt")

    def encode(self, spec: PromptSpec) -> torch.Tensor:
        try:
            return self.rows[self._index[spec.label.lower()]]
        except KeyError:
            raise FacsLookupError(spec.label) from None


def encode_prototypes(specs: Sequence[PromptSpec], provider) -> torch.Tensor:
    """One d-vector per prompt, stacked in prompt order."""
    rows = [provider.encode(spec) for spec in specs]
    T = torch.stack(rows, dim=0)
    return check_finite("prototypes", T)


# ----------------------------------------------------------------------
# Prompt sets
# ----------------------------------------------------------------------
class TaskPrompts(nn.Module):
    """Learnable context shared by all class prompts of one task."""

    def __init__(self, task: str, labels: Sequence[str], texts: Sequence[str], context_length: int,
        d_tok: int, seed: int, vocab_size: int = VOCAB_SIZE, max_tokens: int = MAX_TOKENS):
        super().__init__()
        self.task = task
        self.labels = list(labels)
        self.templates = [tokenize(t, vocab_size, max_tokens) for t in texts]
        gen = seeded_generator(seed, _CONTEXT_STREAMS[task])
        self.context = nn.Parameter(gaussian((context_length, d_tok), CONTEXT_STD, gen))

    def specs(self) -> List[PromptSpec]:
        return [PromptSpec(label, self.task, template, self.context)
                for label, template in zip(self.labels, self.templates)]


class TextPrototypes(nn.Module):

    def __init__(self, expression_prompts: TaskPrompts, au_prompts: TaskPrompts, provider: nn.Module,
        style: str):
        super().__init__()
        self.expression_prompts = expression_prompts
        self.au_prompts = au_prompts
        self.provider = provider
        self.style = style

    def forward(self) -> PrototypeSet:
        T_exp = encode_prototypes(self.expression_prompts.specs(), self.provider)
        T_au = encode_prototypes(self.au_prompts.specs(), self.provider)
        return PrototypeSet(T_exp=T_exp, T_au=T_au, style=self.style)


def au_label(au_id: int) -> str:
    return f"AU{au_id}"


def build_text_prototypes(table: FacsTable, expr_set: Sequence[str], au_set: Sequence[int], style: str,
    context_length: int, d: int, seed: int, encoder_config) -> TextPrototypes:
    """Wire prompts and the configured text encoder for one model."""
    if encoder_config.kind == "file-backed":
        provider = FileBackedTextEncoder.from_file(encoder_config.embeddings_path, encoder_config.d_tok)
    else:
        provider = SurrogateTextEncoder(encoder_config.d_tok, d, seed, encoder_config.vocab_size)
    if provider.d != d:
        raise ConfigurationError(f"Text encoder width {provider.d} does not match model width {d}")

    exp_texts = [description_variant(table, name, style) for name in expr_set]
    au_texts = [description_variant(table, int(au_id)) for au_id in au_set]
    common = dict(context_length=context_length, d_tok=encoder_config.d_tok, seed=seed,
        vocab_size=encoder_config.vocab_size, max_tokens=encoder_config.max_tokens)
    expression_prompts = TaskPrompts(EXPRESSION, list(expr_set), exp_texts, **common)
    au_prompts = TaskPrompts(AU, [au_label(a) for a in au_set], au_texts, **common)
    return TextPrototypes(expression_prompts, au_prompts, provider, style)

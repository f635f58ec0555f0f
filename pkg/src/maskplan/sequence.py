"""Unified token vocabulary and the [vision; instruction; action; reasoning] layout."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .codebook import Codebook, quantize_many
from .errors import FormatError, TokenizationError, ValidationError
from .numerics import Rng
from .trajdata import Sample, from_displacements, to_displacements

VOCAB_VERSION = "maskplan-vocab/1"

# segment tags
VISION, INSTRUCTION, ACTION, REASONING, PAD_SEG = 0, 1, 2, 3, 4
SEGMENT_NAMES = ("vision", "instruction", "action", "reasoning", "pad")

INSTRUCTION_LEN = 6
REASONING_LEN = 16
MASK_EPS = 0.05


@dataclass(frozen=True)
class Vocabulary:
    """ID layout: context symbols | words | BOS EOS PAD | MASK | action tokens."""

    n_context: int
    words: tuple[str, ...]
    n_actions: int

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValidationError("word list contains duplicates")
        if self.n_context < 1 or self.n_actions < 2:
            raise ValidationError("vocabulary needs context symbols and >= 2 action tokens")

    @property
    def word_start(self) -> int:
        return self.n_context

    @property
    def bos(self) -> int:
        return self.n_context + len(self.words)

    @property
    def eos(self) -> int:
        return self.bos + 1

    @property
    def pad(self) -> int:
        return self.bos + 2

    @property
    def mask(self) -> int:
        return self.bos + 3

    @property
    def action_start(self) -> int:
        return self.mask + 1

    @property
    def size(self) -> int:
        return self.action_start + self.n_actions

    def word_id(self, word: str) -> int:
        try:
            return self.word_start + self._index[word]
        except KeyError:
            raise TokenizationError(f"word {word!r} is not in the vocabulary") from None

    def word_of(self, token: int) -> str:
        if self.word_start <= token < self.bos:
            return self.words[token - self.word_start]
        return {self.bos: "<bos>", self.eos: "<eos>", self.pad: "<pad>", self.mask: "<mask>"}.get(
            token, f"<{self.classify(token)}:{token}>"
        )

    def action_id(self, k: int) -> int:
        return self.action_start + int(k)

    def is_action(self, token) -> np.ndarray:
        token = np.asarray(token)
        return (token >= self.action_start) & (token < self.size)

    def classify(self, token: int) -> str:
        """One of ``context``, ``text``, ``mask``, ``action``."""
        if 0 <= token < self.n_context:
            return "context"
        if self.word_start <= token < self.mask:
            return "text"
        if token == self.mask:
            return "mask"
        if self.action_start <= token < self.size:
            return "action"
        raise ValidationError(f"token id {token} outside vocabulary of size {self.size}")

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_word_index")
        if idx is None:
            idx = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_word_index", idx)
        return idx

    def blocks(self) -> dict:
        return {
            "context": [0, self.n_context],
            "words": [self.word_start, self.bos],
            "specials": {"bos": self.bos, "eos": self.eos, "pad": self.pad},
            "mask": self.mask,
            "action": [self.action_start, self.size],
        }


def build_vocab(cb: Codebook | int, words: Sequence[str], n_context: int = 128) -> Vocabulary:
    n = cb if isinstance(cb, int) else cb.n
    return Vocabulary(n_context=n_context, words=tuple(words), n_actions=n)


def save_vocab(vocab: Vocabulary, path) -> None:
    payload = {"version": VOCAB_VERSION, "size": vocab.size, "blocks": vocab.blocks(), "words": list(vocab.words)}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("version") != VOCAB_VERSION:
            raise FormatError("unsupported vocabulary version")
        blocks = payload["blocks"]
        vocab = Vocabulary(
            n_context=blocks["context"][1],
            words=tuple(payload["words"]),
            n_actions=blocks["action"][1] - blocks["action"][0],
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot read vocabulary {path}: {exc}") from None
    if vocab.size != payload["size"]:
        raise FormatError("vocabulary size does not match its blocks")
    return vocab


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-layout token sequence.

    ``targets`` holds the clean IDs; ``ids`` may contain MASK wherever
    ``mask_flags`` is set.
    """

    ids: np.ndarray
    segment: np.ndarray
    mask_flags: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return int(self.ids.shape[0])

    def positions(self, seg: int) -> np.ndarray:
        return np.flatnonzero(self.segment == seg)

    def with_ids(self, ids: np.ndarray, mask_flags: np.ndarray) -> "TokenSequence":
        return TokenSequence(ids=ids, segment=self.segment, mask_flags=mask_flags, targets=self.targets)


def action_tokens(sample: Sample, cb: Codebook, representation: str = "waypoint") -> np.ndarray:
    """Codebook indices for a sample's trajectory (one per waypoint)."""
    wps = sample.trajectory
    if representation == "displacement":
        wps = to_displacements(wps)
    elif representation != "waypoint":
        raise ValidationError(f"unknown action representation {representation!r}")
    return quantize_many(wps, cb)


def encode_text(text: str, vocab: Vocabulary, length: int, wrap: bool) -> list[int]:
    ids = [vocab.word_id(w) for w in text.split()]
    if wrap:
        ids = [vocab.bos, *ids, vocab.eos]
    if len(ids) > length:
        raise TokenizationError(f"text needs {len(ids)} tokens but the segment holds {length}")
    return ids + [vocab.pad] * (length - len(ids))


def assemble_sequence(
    sample: Sample,
    cb: Codebook,
    vocab: Vocabulary,
    include_reasoning: bool = True,
    representation: str = "waypoint",
    reasoning_len: int = REASONING_LEN,
    instruction_len: int = INSTRUCTION_LEN,
) -> TokenSequence:
    ctx = list(sample.scene_context)
    if any(not 0 <= c < vocab.n_context for c in ctx):
        raise TokenizationError("scene-context symbol outside the context block")
    instr = encode_text(sample.instruction, vocab, instruction_len, wrap=False)
    acts = [vocab.action_id(k) for k in action_tokens(sample, cb, representation)]
    ids = ctx + instr + acts
    seg = [VISION] * len(ctx) + [INSTRUCTION] * len(instr) + [ACTION] * len(acts)
    if include_reasoning:
        reason = encode_text(sample.reasoning, vocab, reasoning_len, wrap=True)
        ids += reason
        seg += [PAD_SEG if r == vocab.pad else REASONING for r in reason]
    ids_arr = np.array(ids, dtype=np.int64)
    return TokenSequence(
        ids=ids_arr,
        segment=np.array(seg, dtype=np.int8),
        mask_flags=np.zeros(len(ids), dtype=bool),
        targets=ids_arr.copy(),
    )


def generation_template(sample: Sample, vocab: Vocabulary, horizon: int = 6, reasoning_len: int = REASONING_LEN,
                        include_reasoning: bool = True, instruction_len: int = INSTRUCTION_LEN) -> TokenSequence:
    """Conditioning filled in, every action and reasoning slot masked.

    The reasoning length is unknown at inference, so all ``reasoning_len``
    slots are tagged as reasoning. ``targets`` is MASK on generated slots.
    """
    ctx = list(sample.scene_context)
    instr = encode_text(sample.instruction, vocab, instruction_len, wrap=False)
    n_gen = horizon + (reasoning_len if include_reasoning else 0)
    ids = np.array(ctx + instr + [vocab.mask] * n_gen, dtype=np.int64)
    seg = [VISION] * len(ctx) + [INSTRUCTION] * len(instr) + [ACTION] * horizon
    if include_reasoning:
        seg += [REASONING] * reasoning_len
    flags = np.zeros(len(ids), dtype=bool)
    flags[len(ctx) + len(instr):] = True
    return TokenSequence(ids=ids, segment=np.array(seg, dtype=np.int8), mask_flags=flags, targets=ids.copy())


def extract_action_indices(seq: TokenSequence, vocab: Vocabulary) -> np.ndarray:
    pos = seq.positions(ACTION)
    return seq.ids[pos] - vocab.action_start


def maskable(segment: np.ndarray) -> np.ndarray:
    return (segment == ACTION) | (segment == REASONING)


def sample_mask_ratio(g: np.random.Generator, size=None, eps: float = MASK_EPS):
    """Uniform on (eps, 1]."""
    return eps + (1.0 - eps) * (1.0 - g.random(size))


def apply_forward_masking(seq: TokenSequence, t: float, rng: Rng, vocab: Vocabulary | None = None,
                          mask_id: int | None = None) -> TokenSequence:
    """Replace each action/reasoning token by MASK independently with probability t."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"masking ratio {t} outside [0, 1]")
    if mask_id is None:
        if vocab is None:
            raise ValidationError("need a vocabulary or an explicit mask id")
        mask_id = vocab.mask
    g = rng.generator()
    draw = g.random(len(seq)) < t
    flags = draw & maskable(seq.segment)
    ids = np.where(flags, mask_id, seq.targets)
    return seq.with_ids(ids, flags)


def mask_batch(targets: np.ndarray, segment: np.ndarray, g: np.random.Generator, mask_id: int,
               eps: float = MASK_EPS, allowed: np.ndarray | None = None, hide_pad: bool = True):
    """Vectorized forward masking for a (B, L) batch with a fresh ratio per row.

    With ``hide_pad`` the reasoning padding is shown to the model as MASK but
    never flagged, so it carries no loss. Inference starts with every
    reasoning slot masked, and visible padding would leak the text length.
    Returns ``(ids, flags, t)``.
    """
    b, n = targets.shape
    t = sample_mask_ratio(g, b, eps)
    draw = g.random((b, n)) < t[:, None]
    ok = maskable(segment) if allowed is None else allowed
    flags = draw & ok
    hidden = flags | (segment == PAD_SEG) if hide_pad else flags
    ids = np.where(hidden, mask_id, targets)
    return ids, flags, t


def batch_arrays(seqs: Sequence[TokenSequence]):
    targets = np.stack([s.targets for s in seqs])
    segment = np.stack([s.segment for s in seqs])
    return targets, segment


def reconstruct_waypoints(indices, cb: Codebook, representation: str = "waypoint") -> np.ndarray:
    pts = cb.centroids[np.asarray(indices, dtype=np.int64)]
    if representation == "displacement":
        return from_displacements(pts)
    return pts.copy()

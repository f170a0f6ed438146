"""Closed-vocabulary word tokenizer for the templated questions.

Words are split on whitespace. Numerals become three tokens: a magnitude token
``<e{k}>`` followed by the two significant digits, so every numeric option has
the same length. Anything outside the vocabulary raises ``TokenizerError``.
"""

from __future__ import annotations

import math
import re

from .scenegen.vqa import DEFAULT_TEMPLATES, DIRECTION_VOCAB, FP_VOCAB, ROTATION_VOCAB

SPECIALS = ("<pad>", "<bos>", "<eos>", "<img>", "<ans>")
REGION_TOKENS = tuple(f"<R{i}>" for i in range(1, 10))
OPTION_LETTERS = ("A", "B", "C", "D", "E")
DIGITS = tuple(str(d) for d in range(10))
EXP_RANGE = range(-4, 5)
EXP_TOKENS = tuple(f"<e{k}>" for k in EXP_RANGE)

_NUMERAL = re.compile(r"^\d+(\.\d+)?$")


class TokenizerError(ValueError):
    pass


def _template_words(templates) -> list[str]:
    words = []
    for group in templates.values():
        for t in group:
            for w in t.split():
                if not w.startswith("{"):
                    words.append(w)
    for vocab in (DIRECTION_VOCAB, ROTATION_VOCAB, FP_VOCAB):
        for phrase in vocab:
            words.extend(phrase.split())
    return sorted(set(words))


class Tokenizer:
    def __init__(self, templates=None):
        words = _template_words(templates or DEFAULT_TEMPLATES)
        self.vocab = list(SPECIALS) + list(REGION_TOKENS) + list(OPTION_LETTERS) + list(DIGITS) + list(EXP_TOKENS)
        self.vocab += [w for w in words if w not in self.vocab]
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    def id(self, token: str) -> int:
        return self.index[token]

    @property
    def pad_id(self) -> int:
        return self.index["<pad>"]

    @property
    def eos_id(self) -> int:
        return self.index["<eos>"]

    def numeral_tokens(self, text: str) -> list[str]:
        x = float(text)
        if x == 0:
            return ["<e0>", "0", "0"]
        exp = math.floor(math.log10(x))
        mant = f"{x / 10**exp:.6f}"
        if mant.startswith("10"):
            exp += 1
            mant = f"{x / 10**exp:.6f}"
        d1, d2, rest = mant[0], mant[2], mant[3:]
        if rest.strip("0"):
            raise TokenizerError(f"numeral {text!r} has more than two significant digits")
        if exp not in EXP_RANGE:
            raise TokenizerError(f"numeral {text!r} outside the representable magnitude range")
        return [f"<e{exp}>", d1, d2]

    def tokenize(self, text: str) -> list[str]:
        out = []
        for w in text.split():
            if _NUMERAL.match(w):
                out.extend(self.numeral_tokens(w))
            elif w in self.index:
                out.append(w)
            else:
                raise TokenizerError(f"out-of-vocabulary token {w!r}")
        return out

    def encode(self, text: str) -> list[int]:
        return [self.index[t] for t in self.tokenize(text)]

    def decode(self, ids) -> list[str]:
        return [self.vocab[i] for i in ids]

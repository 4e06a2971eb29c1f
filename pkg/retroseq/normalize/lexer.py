"""A lossless regular-expression lexer for Python-like code snippets.

Every character of the input belongs to exactly one token, so joining the
token texts always reproduces the input.
"""
from __future__ import annotations

import re
from collections import namedtuple
from collections.abc import Iterable, Sequence

from retroseq.util import RetroSeqError

Token = namedtuple("Token", ["kind", "text", "position"])

_STRING_BODY = (
    r"'''[\s\S]*?'''"
    r'|"""[\s\S]*?"""'
    r"|'(?:[^'\\\n]|\\.)*'"
    r'|"(?:[^"\\\n]|\\.)*"'
)

TOKEN_PATTERNS = [
    ("COMMENT", r"#[^\n]*"),
    ("STRING", rf"(?:[rRbBuUfF]{{1,2}})?(?:{_STRING_BODY})"),
    (
        "NUMBER",
        r"0[xX][0-9a-fA-F_]+|0[oO][0-7_]+|0[bB][01_]+"
        r"|(?:\d[\d_]*(?:\.[\d_]*)?|\.\d[\d_]*)(?:[eE][+-]?\d+)?[jJ]?",
    ),
    ("NAME", r"[^\W\d]\w*"),
    (
        "OP",
        r"\*\*=|//=|>>=|<<=|\.\.\.|->|:=|\*\*|//|<<|>>|<=|>=|==|!="
        r"|\+=|-=|\*=|/=|%=|&=|\|=|\^=|@="
        r"|[-+*/%@&|^~<>()\[\]{},:;.=\\]",
    ),
    ("WHITESPACE", r"\s+"),
]

TOKEN_REGEX = re.compile("|".join(f"(?P<{name}>{pattern})" for name, pattern in TOKEN_PATTERNS))

STRING_PREFIX_REGEX = re.compile(r"^([rRbBuUfF]{0,2})('''|\"\"\"|'|\")")

SKIPPED_KINDS = frozenset(["WHITESPACE", "COMMENT"])

OPENING = frozenset("([{")
CLOSING = frozenset(")]}")

_NO_SPACE_BEFORE = frozenset([")", "]", "}", ",", ".", ":", ";"])
_NO_SPACE_AFTER = frozenset(["(", "[", "{", ".", "~"])
_UNARY_CONTEXT = frozenset(["(", "[", "{", ",", "=", ":", "return", "in", "**", "*"])


class LexError(RetroSeqError, ValueError):
    """Raised when a snippet contains characters no token can start with.

    Attributes:
        position: Offset of the offending character in the input.
        line: 1-based line of the offending character.
        column: 1-based column of the offending character.
    """

    def __init__(self, message: str, position: int, line: int, column: int):
        super().__init__(message)
        self.position = position
        self.line = line
        self.column = column


def lex(code: str) -> list[Token]:
    """Splits code into tokens, including whitespace and comments.

    Args:
        code: The code.

    Returns:
        The tokens. Their texts concatenate to ``code``.
    """
    tokens = []
    position = 0
    while position < len(code):
        match = TOKEN_REGEX.match(code, position)
        if match is None:
            line = code.count("\n", 0, position) + 1
            column = position - (code.rfind("\n", 0, position) + 1) + 1
            raise LexError(
                f"cannot lex {code[position]!r} at line {line}, column {column}",
                position,
                line,
                column,
            )
        tokens.append(Token(match.lastgroup, match.group(), position))
        position = match.end()
    return tokens


def significant(tokens: Iterable[Token]) -> list[Token]:
    """Gets the tokens that are not whitespace or comments."""
    return [t for t in tokens if t.kind not in SKIPPED_KINDS]


def code_tokens(code: str) -> list[str]:
    """Tokenizes code for the model, dropping whitespace and comments.

    Args:
        code: The code.

    Returns:
        The token texts.
    """
    return [t.text for t in significant(lex(code))]


def split_string(text: str) -> tuple[str, str, str]:
    """Splits a string literal into its opening, body and closing parts.

    For example ``rb'abc'`` gives ``("rb'", "abc", "'")``.
    """
    match = STRING_PREFIX_REGEX.match(text)
    if match is None:
        raise ValueError(f"not a string literal: {text}")
    opening = match.group(0)
    quote = match.group(2)
    return opening, text[len(opening) : len(text) - len(quote)], quote


def _is_word(text: str) -> bool:
    return bool(text) and (text[0].isalnum() or text[0] in "_'\"" or text[-1] in "'\"")


def detokenize(tokens: Sequence[str]) -> str:
    """Joins model tokens into readable code.

    Whitespace is not part of the model vocabulary, so the spacing produced
    here is a readable approximation rather than the original layout.

    Args:
        tokens: The token texts.

    Returns:
        The code.
    """
    out = []
    for i, token in enumerate(tokens):
        if i > 0 and _needs_space(tokens, i):
            out.append(" ")
        out.append(token)
    return "".join(out)


def _needs_space(tokens: Sequence[str], i: int) -> bool:
    prev, token = tokens[i - 1], tokens[i]
    if prev in _NO_SPACE_AFTER or token in _NO_SPACE_BEFORE:
        return False
    if token in ("(", "[") and (_is_word(prev) or prev in (")", "]")):
        return prev in ("in", "for", "if", "and", "or", "not", "return", "lambda", "else")
    if prev in ("-", "+") and (i < 2 or tokens[i - 2] in _UNARY_CONTEXT):
        return False
    if prev == ":" and token in (":", "-", "]"):
        return False
    return True

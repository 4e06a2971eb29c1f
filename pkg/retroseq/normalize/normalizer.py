"""This module implements the substitution of variable names and literals.

Attributes:
    default_allowlist: Names that are never renamed: Python keywords, builtins
        and the module roots listed in ``allowlist.txt``.
"""
from __future__ import annotations

import builtins
import keyword
import re
import warnings
from collections import namedtuple
from collections.abc import Iterable, Iterator, Sequence
from importlib import resources
from pathlib import Path

from retroseq.normalize.lexer import (
    CLOSING,
    OPENING,
    SKIPPED_KINDS,
    Token,
    lex,
    split_string,
)
from retroseq.util import RetroSeqError

PLACEHOLDER_REGEX = re.compile(r"^(var|str|lst)(\d+)$")

ENTITY_REGEX = re.compile(r"`([^`]+)`|(?<!\w)'([^'\n]+?)'(?!\w)|(?<!\w)\"([^\"\n]+?)\"(?!\w)")

NormalizedSnippet = namedtuple("NormalizedSnippet", ["code", "substitutions"])
NormalizedPair = namedtuple("NormalizedPair", ["intent", "code", "substitutions"])


class UnknownPlaceholderError(RetroSeqError, KeyError):
    """Raised when code contains a placeholder missing from the substitutions."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


def load_allowlist(filename: str | Path | None = None) -> frozenset[str]:
    """Loads an allowlist file and adds the Python keywords and builtins.

    Args:
        filename: A plain text file with one name per line. Lines starting with
            ``#`` are ignored. Defaults to the allowlist shipped with retroseq.

    Returns:
        The allowed names.
    """
    if filename is None:
        text = resources.files("retroseq.normalize").joinpath("allowlist.txt").read_text("utf-8")
    else:
        text = Path(filename).read_text("utf-8")
    names = {line.strip() for line in text.splitlines()}
    names = {name for name in names if name and not name.startswith("#")}
    return frozenset(names | set(keyword.kwlist) | set(dir(builtins)))


default_allowlist: frozenset[str] = load_allowlist()


class SubstitutionMap:
    """Ordered association from placeholder names to original surface forms.

    Placeholders are numbered per category (``var``, ``str``, ``lst``) in the
    order they are added.
    """

    def __init__(self, items: Iterable[tuple[str, str]] = ()):
        self._forward: dict[str, str] = {}
        self._reverse: dict[tuple[str, str], str] = {}
        self._counts: dict[str, int] = {}
        for placeholder, original in items:
            category, number = _parse_placeholder(placeholder)
            if number != self._counts.get(category, 0):
                raise ValueError(f"placeholder {placeholder} is out of order")
            self._add(category, original, placeholder)

    def _add(self, category: str, original: str, placeholder: str):
        self._forward[placeholder] = original
        self._reverse[(category, original)] = placeholder
        self._counts[category] = self._counts.get(category, 0) + 1

    def get_placeholder(self, category: str, original: str) -> str:
        """Gets the placeholder of an original form, adding it if new.

        Args:
            category: ``"var"``, ``"str"`` or ``"lst"``.
            original: The original name or string body.

        Returns:
            The placeholder, for example ``"var0"``.
        """
        placeholder = self._reverse.get((category, original))
        if placeholder is None:
            placeholder = f"{category}{self._counts.get(category, 0)}"
            self._add(category, original, placeholder)
        return placeholder

    def __getitem__(self, placeholder: str) -> str:
        return self._forward[placeholder]

    def __contains__(self, placeholder: str) -> bool:
        return placeholder in self._forward

    def __iter__(self) -> Iterator[str]:
        return iter(self._forward)

    def __len__(self):
        return len(self._forward)

    def __eq__(self, other):
        return isinstance(other, SubstitutionMap) and list(self.items()) == list(other.items())

    def __repr__(self):
        return f"SubstitutionMap({list(self.items())!r})"

    def items(self) -> list[tuple[str, str]]:
        return list(self._forward.items())

    def is_identity(self) -> bool:
        """Whether every placeholder maps to itself."""
        return all(k == v for k, v in self._forward.items())

    def as_dict(self) -> dict[str, str]:
        return dict(self._forward)

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> SubstitutionMap:
        return cls(d.items())


def _parse_placeholder(text: str) -> tuple[str, int]:
    match = PLACEHOLDER_REGEX.match(text)
    if match is None:
        raise ValueError(f"not a placeholder: {text}")
    return match.group(1), int(match.group(2))


def is_placeholder(text: str) -> bool:
    return PLACEHOLDER_REGEX.match(text) is not None


def get_renamable(tokens: Sequence[Token]) -> list[bool]:
    """Finds the name tokens that may be substituted.

    A name is protected if it is a keyword, follows a ``.`` or is a keyword
    argument name. Names bound by ``for ... in`` inside brackets and names
    appearing in an import statement are protected everywhere in the snippet.

    Args:
        tokens: Tokens from :func:`retroseq.normalize.lexer.lex`.

    Returns:
        One flag per token; only ``NAME`` tokens can be flagged.
    """
    indices = [i for i, t in enumerate(tokens) if t.kind not in SKIPPED_KINDS]
    renamable = [False] * len(tokens)
    bound = set()
    imported = set()

    depth = 0
    statement_start = True
    in_import = False
    binding = False
    for n, i in enumerate(indices):
        token = tokens[i]
        prev = tokens[indices[n - 1]].text if n > 0 else None
        following = tokens[indices[n + 1]].text if n + 1 < len(indices) else None

        if token.kind == "NAME" and statement_start:
            in_import = token.text in ("import", "from")
        statement_start = False

        if token.text in OPENING:
            depth += 1
        elif token.text in CLOSING:
            depth = max(0, depth - 1)
        elif token.text == ";" and depth == 0:
            statement_start, in_import = True, False

        if token.kind == "NAME" and depth > 0 and token.text == "for":
            binding = True
        elif binding and token.text == "in":
            binding = False
        elif binding and token.kind == "NAME":
            bound.add(token.text)

        if in_import and token.kind == "NAME":
            imported.add(token.text)

        renamable[i] = (
            token.kind == "NAME"
            and not keyword.iskeyword(token.text)
            and not in_import
            and prev != "."
            and not (depth > 0 and following == "=" and prev in ("(", ","))
        )

        # a newline outside brackets ends the statement
        if depth == 0 and n + 1 < len(indices):
            gap = tokens[i + 1 : indices[n + 1]]
            if any("\n" in t.text for t in gap):
                statement_start, in_import = True, False

    protected = bound | imported
    return [flag and tokens[i].text not in protected for i, flag in enumerate(renamable)]


def normalize_snippet(
    code: str,
    allowlist: frozenset[str] | None = None,
) -> NormalizedSnippet:
    """Renames variables and string literals of a snippet to placeholders.

    Names not on the allowlist and the bodies of non-empty string literals are
    replaced by ``var0``, ``var1``, ... in order of first appearance. Quotes and
    string prefixes are kept.

    Args:
        code: The snippet.
        allowlist: Names that are never renamed. Defaults to
            :obj:`default_allowlist`.

    Returns:
        The normalized code and its substitutions.
    """
    allowlist = default_allowlist if allowlist is None else allowlist
    tokens = lex(code)
    renamable = get_renamable(tokens)
    substitutions = SubstitutionMap()

    out = []
    for token, can_rename in zip(tokens, renamable):
        text = token.text
        if can_rename and text not in allowlist:
            text = substitutions.get_placeholder("var", text)
        elif token.kind == "STRING":
            opening, body, closing = split_string(text)
            if body:
                text = opening + substitutions.get_placeholder("var", body) + closing
        out.append(text)
    return NormalizedSnippet("".join(out), substitutions)


def _bracket_bound_names(tokens: Sequence[Token]) -> set[str]:
    """Gets the names assigned a bracketed literal, as in ``x = [1, 2]``."""
    sig = [t for t in tokens if t.kind not in SKIPPED_KINDS]
    return {
        a.text
        for a, b, c in zip(sig, sig[1:], sig[2:])
        if a.kind == "NAME" and b.text == "=" and c.text in OPENING
    }


def normalize_pair(intent: str, code: str) -> NormalizedPair:
    """Substitutes the quoted entities of an intent in the intent and code.

    Entities are marked in the intent by backticks or quotes. An entity that
    is the body of a string literal in the code becomes ``strN``, a name bound
    to a bracketed literal becomes ``lstN`` and any other name ``varN``.
    Entities are numbered per category in order of first appearance in the
    intent. Entities with no counterpart in the code are left unchanged and
    reported with a warning.

    Args:
        intent: The natural language intent.
        code: The code snippet.

    Returns:
        The normalized intent and code, and the substitutions.
    """
    tokens = lex(code)
    renamable = get_renamable(tokens)
    names = {t.text for t, flag in zip(tokens, renamable) if flag}
    string_bodies = {split_string(t.text)[1] for t in tokens if t.kind == "STRING"}
    list_names = _bracket_bound_names(tokens)

    substitutions = SubstitutionMap()
    categories: dict[str, str] = {}
    unmatched = []

    def replace_entity(match: re.Match) -> str:
        entity = next(group for group in match.groups() if group is not None)
        if entity in string_bodies:
            category = "str"
        elif entity in list_names and entity in names:
            category = "lst"
        elif entity in names:
            category = "var"
        else:
            unmatched.append(entity)
            return match.group(0)
        categories.setdefault(entity, category)
        return substitutions.get_placeholder(categories[entity], entity)

    new_intent = ENTITY_REGEX.sub(replace_entity, intent)
    for entity in dict.fromkeys(unmatched):
        warnings.warn(f"intent entity {entity!r} has no counterpart in the code: {code}")

    originals = {original: placeholder for placeholder, original in substitutions.items()}
    out = []
    for token, can_rename in zip(tokens, renamable):
        text = token.text
        if can_rename and categories.get(text) in ("var", "lst"):
            text = originals[text]
        elif token.kind == "STRING":
            opening, body, closing = split_string(text)
            if categories.get(body) == "str":
                text = opening + originals[body] + closing
        out.append(text)
    return NormalizedPair(new_intent, "".join(out), substitutions)


def normalize_intent(intent: str) -> tuple[str, SubstitutionMap]:
    """Substitutes the quoted entities of an intent with no code at hand.

    Used when generating code, where the categories cannot be read from the
    snippet: backticked entities become ``varN`` and quoted ones ``strN``.

    Args:
        intent: The natural language intent.

    Returns:
        The normalized intent and the substitutions.
    """
    substitutions = SubstitutionMap()

    def replace_entity(match: re.Match) -> str:
        name, single, double = match.groups()
        if name is not None:
            return substitutions.get_placeholder("var", name)
        return substitutions.get_placeholder("str", single if single is not None else double)

    return ENTITY_REGEX.sub(replace_entity, intent), substitutions


def _restore(text: str, substitutions: SubstitutionMap) -> str:
    if text not in substitutions:
        raise UnknownPlaceholderError(f"unknown placeholder {text}")
    return substitutions[text]


def denormalize(code: str, substitutions: SubstitutionMap) -> str:
    """Restores the original names and string bodies of normalized code.

    Args:
        code: Normalized code.
        substitutions: The substitutions used to normalize it.

    Returns:
        The code with every placeholder replaced by its original form.
    """
    tokens = lex(code)
    renamable = get_renamable(tokens)
    out = []
    for token, can_rename in zip(tokens, renamable):
        text = token.text
        if can_rename and is_placeholder(text):
            text = _restore(text, substitutions)
        elif token.kind == "STRING":
            opening, body, closing = split_string(text)
            if is_placeholder(body):
                text = opening + _restore(body, substitutions) + closing
        out.append(text)
    return "".join(out)


def denormalize_tokens(tokens: Sequence[str], substitutions: SubstitutionMap) -> list[str]:
    """Restores placeholders in a sequence of model tokens.

    Unlike :func:`denormalize`, placeholders with no entry in the
    substitutions are left unchanged, since generated code may mention
    placeholders the intent never defined.

    Args:
        tokens: The token texts.
        substitutions: The substitutions.

    Returns:
        The restored tokens.
    """
    out = []
    for i, text in enumerate(tokens):
        if text in substitutions and (i == 0 or tokens[i - 1] != "."):
            out.append(substitutions[text])
        elif text[:1] in "'\"rRbBuUfF" and len(text) > 1:
            try:
                opening, body, closing = split_string(text)
            except ValueError:
                out.append(text)
                continue
            out.append(opening + substitutions[body] + closing if body in substitutions else text)
        else:
            out.append(text)
    return out

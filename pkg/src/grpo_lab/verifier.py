"""Boxed-answer extraction, answer normalization and format checks."""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

BOX_MARKER = "\\boxed{"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

_DROP_TOKENS = ("\\left", "\\right", "\\!", "\\,")
_FRAC_CMDS = ("\\dfrac", "\\frac")
_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)$")
_FRACTION = re.compile(r"^([+-]?\d+)/([+-]?\d+)$")
_WORD = re.compile(r"(?<![\\A-Za-z])[A-Za-z]+")


@dataclass(frozen=True)
class ExtractedAnswer:
    raw: str
    normalized: str
    numeric_value: Fraction | None


@dataclass(frozen=True)
class FormatVerdict:
    has_think_block: bool
    think_span: tuple[int, int] | None
    answer_after_think: bool


def _match_brace(text: str, start: int) -> int | None:
    """Index of the ``}`` closing the group whose body starts at ``start``."""
    depth = 1
    for i in range(start, len(text)):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def extract_boxed(text: str) -> str | None:
    """Content of the last ``\\boxed{...}``, or None when absent or unbalanced."""
    idx = text.rfind(BOX_MARKER)
    if idx < 0:
        return None
    start = idx + len(BOX_MARKER)
    end = _match_brace(text, start)
    if end is None:
        return None
    return text[start:end]


def _rewrite_fracs(s: str) -> str:
    out = []
    i = 0
    while i < len(s):
        cmd = next((c for c in _FRAC_CMDS if s.startswith(c + "{", i)), None)
        if cmd is None:
            out.append(s[i])
            i += 1
            continue
        num_start = i + len(cmd) + 1
        num_end = _match_brace(s, num_start)
        if num_end is None or num_end + 1 >= len(s) or s[num_end + 1] != "{":
            out.append(s[i])
            i += 1
            continue
        den_end = _match_brace(s, num_end + 2)
        if den_end is None:
            out.append(s[i])
            i += 1
            continue
        num = _rewrite_fracs(s[num_start:num_end])
        den = _rewrite_fracs(s[num_end + 2:den_end])
        out.append(f"{num}/{den}")
        i = den_end + 1
    return "".join(out)


def _collapse_whitespace(s: str) -> str:
    s = re.sub(r"\s+", " ", s)
    # A space survives only between two word characters ("x y"), never next to symbols.
    return re.sub(r"(?<!\w) | (?!\w)", "", s)


def normalize_answer(raw: str) -> str:
    s = raw.strip()
    for tok in _DROP_TOKENS:
        s = s.replace(tok, "")
    s = _collapse_whitespace(s.strip())
    s = _rewrite_fracs(s)
    if s.endswith("\\%"):
        s = s[:-2]
    elif s.endswith("%"):
        s = s[:-1]
    s = s.strip("$").strip()
    return _WORD.sub(lambda m: m.group(0).lower(), s)


def numeric_value(normalized: str) -> Fraction | None:
    if _NUMBER.match(normalized):
        return Fraction(normalized)
    m = _FRACTION.match(normalized)
    if m and int(m.group(2)) != 0:
        return Fraction(int(m.group(1)), int(m.group(2)))
    return None


def parse_answer(raw: str) -> ExtractedAnswer:
    norm = normalize_answer(raw)
    return ExtractedAnswer(raw, norm, numeric_value(norm))


def answers_equivalent(a: str, b: str) -> bool:
    pa, pb = parse_answer(a), parse_answer(b)
    if pa.normalized == pb.normalized:
        return True
    return pa.numeric_value is not None and pa.numeric_value == pb.numeric_value


def check_format(text: str) -> FormatVerdict:
    if text.count(THINK_OPEN) != 1 or text.count(THINK_CLOSE) != 1:
        return FormatVerdict(False, None, False)
    start = text.index(THINK_OPEN)
    close = text.index(THINK_CLOSE)
    if close < start + len(THINK_OPEN):
        return FormatVerdict(False, None, False)
    end = close + len(THINK_CLOSE)
    return FormatVerdict(True, (start, end), extract_boxed(text[end:]) is not None)

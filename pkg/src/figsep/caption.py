"""Rule-based association of subfigure letters with caption text."""

from __future__ import annotations

import re

# "(a)", "a)", "(a-c)", "(a–c)"; the marker must start and end at a token boundary
_MARKER = re.compile(
    r"(?<![\w(])\(?([a-z])(?:\s*[-–—]\s*([a-z]))?\)(?=[\s.,;:]|$)",
    re.IGNORECASE,
)


def find_markers(caption):
    """``(start, end, letters)`` for every marker in ``caption``, left to right."""
    out = []
    for m in _MARKER.finditer(caption or ""):
        first = m.group(1).lower()
        last = (m.group(2) or m.group(1)).lower()
        if last < first:
            continue  # "(c-a)" is not a range we can trust
        letters = tuple(chr(c) for c in range(ord(first), ord(last) + 1))
        out.append((m.start(), m.end(), letters))
    return out


def caption_letters(caption):
    """Every letter some marker in ``caption`` refers to."""
    return {l for _, _, letters in find_markers(caption) for l in letters}


def associate_caption(caption, letters):
    """Map each letter in ``letters`` to the caption text its marker introduces.

    A span runs from the end of the marker to the start of the next marker (or
    the end of the caption) and is whitespace-stripped. A range marker hands its
    span to every letter in the range. When a letter has several markers the
    first one wins. Letters without a marker are left out.
    """
    wanted = {str(l).lower() for l in letters}
    markers = find_markers(caption)
    spans = {}
    for i, (_, end, marked) in enumerate(markers):
        stop = markers[i + 1][0] if i + 1 < len(markers) else len(caption)
        text = caption[end:stop].strip()
        for l in marked:
            if l in wanted and l not in spans:
                spans[l] = text
    return dict(sorted(spans.items()))

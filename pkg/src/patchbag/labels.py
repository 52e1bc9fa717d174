"""Class labels shared by every stage and file format.

The numeric codes are fixed across all binary files and CSV exports:
0=Normal, 1=Benign, 2=InSitu, 3=Invasive.
"""

from __future__ import annotations

from enum import IntEnum


class Label(IntEnum):
    NORMAL = 0
    BENIGN = 1
    IN_SITU = 2
    INVASIVE = 3

    @property
    def display(self) -> str:
        return _DISPLAY[self]


_DISPLAY = {
    Label.NORMAL: "Normal",
    Label.BENIGN: "Benign",
    Label.IN_SITU: "InSitu",
    Label.INVASIVE: "Invasive",
}

_ALIASES = {
    "normal": Label.NORMAL,
    "benign": Label.BENIGN,
    "insitu": Label.IN_SITU,
    "in situ": Label.IN_SITU,
    "in-situ": Label.IN_SITU,
    "invasive": Label.INVASIVE,
}

# Annotation documents may only carry tumour labels; Normal regions are
# sampled from unannotated tissue, never annotated.
ANNOTATABLE = (Label.BENIGN, Label.IN_SITU, Label.INVASIVE)


class UnknownLabelError(ValueError):
    """Raised when a label string is not one of the four classes."""


def parse_label(text: str) -> Label:
    try:
        return _ALIASES[text.strip().lower()]
    except KeyError:
        raise UnknownLabelError(f"unknown class label {text!r}") from None

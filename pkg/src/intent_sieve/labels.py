from enum import IntEnum
from typing import Dict, Tuple, Type, TypeVar, Union

from .errors import UnknownLabel


class IntentLabel7(IntEnum):
    """Label alphabet of the text sieve: fragments, five clear-cut cases and IUs."""

    FRAGMENT = 0
    STATEMENT = 1
    QUESTION = 2
    COMMAND = 3
    RHETORICAL_QUESTION = 4
    RHETORICAL_COMMAND = 5
    INTONATION_DEPENDENT = 6

    def __str__(self) -> str:
        return self.name.lower()

    @property
    def abbreviation(self) -> str:
        return _ABBREVIATIONS[self.value]


class IntentLabel6(IntEnum):
    """Label alphabet of the audio-aided disambiguation (IUs resolved)."""

    FRAGMENT = 0
    STATEMENT = 1
    QUESTION = 2
    COMMAND = 3
    RHETORICAL_QUESTION = 4
    RHETORICAL_COMMAND = 5

    def __str__(self) -> str:
        return self.name.lower()

    @property
    def abbreviation(self) -> str:
        return _ABBREVIATIONS[self.value]


_ABBREVIATIONS = ("FR", "S", "Q", "C", "RQ", "RC", "IU")

Label = Union[IntentLabel7, IntentLabel6]
L = TypeVar("L", IntentLabel7, IntentLabel6)


def _aliases(enum: Type[L]) -> Dict[str, L]:
    aliases: Dict[str, L] = {}
    for label in enum:
        name = label.name.lower()
        for key in (name, name.replace("_", "-"), label.abbreviation.lower(), str(label.value)):
            aliases[key] = label
    return aliases


_ALIASES: Dict[type, Dict[str, Label]] = {
    IntentLabel7: _aliases(IntentLabel7),  # type: ignore[dict-item]
    IntentLabel6: _aliases(IntentLabel6),  # type: ignore[dict-item]
}


def parse_label(value: Union[str, int], enum: Type[L]) -> L:
    """
    Parse a label from its name, abbreviation or integer code (case-insensitive).

    Raises:
        UnknownLabel: If the value doesn't denote a label of `enum`
    """
    key = str(value).strip().lower()
    try:
        return _ALIASES[enum][key]  # type: ignore[return-value]
    except KeyError:
        raise UnknownLabel(f"Unknown label '{value}'") from None


def to_six(label: IntentLabel7) -> IntentLabel6:
    """Map a fragment or clear-cut label onto the six-way alphabet."""
    if label is IntentLabel7.INTONATION_DEPENDENT:
        raise ValueError("Intonation-dependent label has no six-way counterpart")
    return IntentLabel6(label.value)


def label_names(enum: Type[Label]) -> Tuple[str, ...]:
    """Short column names as used in confusion matrix tables (FR, S, Q, ...)."""
    return tuple(label.abbreviation for label in enum)

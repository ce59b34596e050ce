import pytest
from intent_sieve.color import AnsiCodes, colored, colored_score, score_color


@pytest.mark.parametrize("force_color", [False, True])
def test_colored(force_color):
    text = colored(
        "TEXT",
        AnsiCodes.BOLD,
        AnsiCodes.FG_RED,
        force_color=force_color,
    )

    if force_color:
        assert text == "\033[1m\033[31mTEXT\033[0m"
    else:
        assert text == "TEXT"


@pytest.mark.parametrize(
    ("score", "expected"),
    [
        (1.0, AnsiCodes.FG_GREEN),
        (0.85, AnsiCodes.FG_GREEN),
        (0.8499, AnsiCodes.FG_CYAN),
        (0.6, AnsiCodes.FG_CYAN),
        (0.3, AnsiCodes.FG_RED),
        (-0.1, AnsiCodes.FG_RED),
    ],
)
def test_score_color(score, expected):
    assert score_color(score) is expected


def test_colored_score():
    assert colored_score(0.73215) == "0.7322"
    assert colored_score(0.9, force_color=True) == "\033[32m0.9000\033[0m"

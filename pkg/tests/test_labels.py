import pytest
from intent_sieve.errors import UnknownLabel
from intent_sieve.labels import IntentLabel6, IntentLabel7, label_names, parse_label, to_six


@pytest.mark.parametrize(
    ("value", "expected"),
    [
        ("question", IntentLabel7.QUESTION),
        ("Question", IntentLabel7.QUESTION),
        ("Q", IntentLabel7.QUESTION),
        ("2", IntentLabel7.QUESTION),
        (2, IntentLabel7.QUESTION),
        ("rhetorical_question", IntentLabel7.RHETORICAL_QUESTION),
        ("rhetorical-question", IntentLabel7.RHETORICAL_QUESTION),
        ("rq", IntentLabel7.RHETORICAL_QUESTION),
        ("iu", IntentLabel7.INTONATION_DEPENDENT),
        (" fr ", IntentLabel7.FRAGMENT),
    ],
)
def test_parse_label(value, expected):
    assert parse_label(value, IntentLabel7) is expected


@pytest.mark.parametrize("value", ["opinion", "7", "", "IU6"])
def test_parse_label_unknown(value):
    with pytest.raises(UnknownLabel, match="Unknown label"):
        parse_label(value, IntentLabel7)


def test_parse_label_six_way_has_no_iu():
    with pytest.raises(UnknownLabel):
        parse_label("iu", IntentLabel6)


def test_label_str_is_lowercase_name():
    assert str(IntentLabel7.RHETORICAL_COMMAND) == "rhetorical_command"
    assert str(IntentLabel6.STATEMENT) == "statement"


def test_to_six():
    for label in IntentLabel6:
        assert to_six(IntentLabel7(label.value)) is label
    with pytest.raises(ValueError, match="no six-way counterpart"):
        to_six(IntentLabel7.INTONATION_DEPENDENT)


def test_label_names():
    assert label_names(IntentLabel7) == ("FR", "S", "Q", "C", "RQ", "RC", "IU")
    assert label_names(IntentLabel6) == ("FR", "S", "Q", "C", "RQ", "RC")

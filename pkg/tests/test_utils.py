# tests/test_utils.py

import numpy as np
import pytest
from src.rationalpg.exceptions import ConfigError
from src.rationalpg.utils import (
    format_probs,
    parse_grid,
    parse_grid_value,
    read_csv,
    stream_rng,
    total_variation,
    write_csv,
)


def test_stream_rng_is_deterministic():
    first = stream_rng(3, 10, "evaluation:victimxadversary").random(4)
    second = stream_rng(3, 10, "evaluation:victimxadversary").random(4)
    assert np.array_equal(first, second)


def test_stream_rng_streams_are_independent_of_draw_order():
    a_then_b = [stream_rng(0, 1, label).random() for label in ("a", "b")]
    b_then_a = [stream_rng(0, 1, label).random() for label in ("b", "a")]
    assert a_then_b == b_then_a[::-1]


def test_stream_rng_keys_differ():
    base = stream_rng(0, 0, "x").random()
    assert stream_rng(1, 0, "x").random() != base
    assert stream_rng(0, 1, "x").random() != base
    assert stream_rng(0, 0, "y").random() != base


def test_total_variation():
    assert total_variation([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert total_variation([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)
    assert total_variation([0.2, 0.3, 0.5], [0.3, 0.3, 0.4]) == pytest.approx(0.1)


def test_write_csv_has_schema_header(tmp_path):
    path = write_csv(str(tmp_path / "runs" / "metrics.csv"), ["step", "loss"], [[1, "0.5"]])
    with open(path) as file:
        assert file.readline() == "# schema_version=1\n"
    header, rows = read_csv(path)
    assert header == ["step", "loss"]
    assert rows == [["1", "0.5"]]


@pytest.mark.parametrize(
    "text, expected",
    [("4", 4), ("0.25", 0.25), ("1e-3", 1e-3), ("True", True), ("false", False), ("adam", "adam")],
)
def test_parse_grid_value(text, expected):
    value = parse_grid_value(text)
    assert value == expected
    assert type(value) is type(expected)


def test_parse_grid():
    grid = parse_grid(["lookahead=1,2,4,8", "optimizer=sgd,adam", "partnerplay=0.0, 0.1"])
    assert grid == {
        "lookahead": [1, 2, 4, 8],
        "optimizer": ["sgd", "adam"],
        "partnerplay": [0.0, 0.1],
    }


def test_parse_grid_rejects_malformed_arguments():
    with pytest.raises(ConfigError, match="name=v1,v2"):
        parse_grid(["lookahead"])
    with pytest.raises(ConfigError, match="lists no values") as excinfo:
        parse_grid(["lookahead="])
    assert excinfo.value.field == "lookahead"


def test_format_probs():
    rendered = format_probs([[0.5, 0.5], [1.0, 0.0, 0.0]])
    assert rendered == "0.500000;0.500000|1.000000;0.000000;0.000000"

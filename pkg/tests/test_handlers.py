# tests/test_handlers.py
import json
from unittest import mock

import pytest
import toml
import yaml
from src.rationalpg.exceptions import ContractViolation
from src.rationalpg.handlers import (
    JsonDocumentHandler,
    TomlDocumentHandler,
    YamlDocumentHandler,
    get_document_handler,
    handler_for_path,
)


def test_yaml_handler_read(monkeypatch):
    handler = YamlDocumentHandler()
    file_content = "agent_id: victim\nstep: 3\n"
    mock_open = mock.mock_open(read_data=file_content)
    monkeypatch.setattr("builtins.open", mock_open)

    document = handler.read("victim.yaml")
    assert document == {"agent_id": "victim", "step": 3}


def test_yaml_handler_read_empty_file(monkeypatch):
    handler = YamlDocumentHandler()
    monkeypatch.setattr("builtins.open", mock.mock_open(read_data=""))
    assert handler.read("empty.yaml") == {}


def test_yaml_handler_write_keeps_key_order(tmp_path):
    handler = YamlDocumentHandler()
    path = handler.write(str(tmp_path / "nested" / "run.yaml"), {"z": 1, "a": [1.0, 2.0]})
    with open(path) as file:
        text = file.read()
    assert text.index("z:") < text.index("a:")
    assert yaml.safe_load(text) == {"z": 1, "a": [1.0, 2.0]}


def test_toml_handler_write_and_read(tmp_path):
    handler = TomlDocumentHandler()
    path = handler.write(str(tmp_path / "game.toml"), {"name": "mp", "payoff1": [[1, -1]]})
    assert toml.load(path)["name"] == "mp"
    assert handler.read(path)["payoff1"] == [[1, -1]]


def test_json_handler_write_and_read(tmp_path):
    handler = JsonDocumentHandler()
    path = handler.write(str(tmp_path / "out" / "game.json"), {"payoff2": "zerosum"})
    with open(path) as file:
        assert json.load(file) == {"payoff2": "zerosum"}
    assert handler.read(path) == {"payoff2": "zerosum"}


def test_yaml_handler_read_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        YamlDocumentHandler().read(str(tmp_path / "missing.yaml"))


def test_get_document_handler():
    assert isinstance(get_document_handler("yaml"), YamlDocumentHandler)
    assert isinstance(get_document_handler("toml"), TomlDocumentHandler)
    assert isinstance(get_document_handler("json"), JsonDocumentHandler)


def test_get_document_handler_unsupported():
    with pytest.raises(ContractViolation, match="Unsupported file type: xml"):
        get_document_handler("xml")


@pytest.mark.parametrize(
    "path, expected",
    [
        ("games/chicken.yaml", YamlDocumentHandler),
        ("games/chicken.YML", YamlDocumentHandler),
        ("games/chicken.toml", TomlDocumentHandler),
        ("games/chicken.json", JsonDocumentHandler),
    ],
)
def test_handler_for_path(path, expected):
    assert isinstance(handler_for_path(path), expected)


def test_handler_for_path_unsupported():
    with pytest.raises(ContractViolation, match=".txt"):
        handler_for_path("games/chicken.txt")
    with pytest.raises(ContractViolation, match="chicken"):
        handler_for_path("games/chicken")

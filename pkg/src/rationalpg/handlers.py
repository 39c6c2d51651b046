"""
Document handlers for rationalpg.

This module reads and writes the structured documents a run consumes and
produces: game definitions, policy checkpoints and run records. Each format has
its own handler behind a common abstract interface.

Classes:
    DocumentHandler: Abstract base class for document handlers.
    YamlDocumentHandler: Handler for YAML files.
    TomlDocumentHandler: Handler for TOML files.
    JsonDocumentHandler: Handler for JSON files.

Functions:
    get_document_handler: Returns the handler for a file type.
    handler_for_path: Returns the handler matching a file extension.

Example:
    To write and read back a checkpoint:
        handler = get_document_handler("yaml")
        handler.write("victim.yaml", {"agent_id": "victim"})
        doc = handler.read("victim.yaml")
"""

import json
import logging
import os
from abc import ABC, abstractmethod
from typing import Any, Dict

import toml
import yaml

from .exceptions import ContractViolation

logger = logging.getLogger(__name__)


class DocumentHandler(ABC):
    """Abstract base class for document handlers.

    Methods:
        read: Parses a file into a dictionary.
        write: Serializes a dictionary to a file.
    """

    @abstractmethod
    def read(self, file_path: str) -> Dict[str, Any]:  # pragma: no cover
        """Reads the document at `file_path`.

        Args:
            file_path (str): The path to the file.

        Returns:
            Dict[str, Any]: The parsed document.

        Raises:
            FileNotFoundError: If the file does not exist.
        """

    @abstractmethod
    def write(self, file_path: str, document: Dict[str, Any]) -> str:  # pragma: no cover
        """Writes `document` to `file_path`, creating parent directories.

        Returns:
            str: The path written.
        """

    @staticmethod
    def _prepare(file_path: str) -> None:
        parent = os.path.dirname(file_path)
        if parent:
            os.makedirs(parent, exist_ok=True)


class YamlDocumentHandler(DocumentHandler):
    """Handler for YAML files (checkpoints, run records, game definitions)."""

    def read(self, file_path: str) -> Dict[str, Any]:
        with open(file_path, "r", encoding="utf-8") as file:
            return yaml.safe_load(file) or {}

    def write(self, file_path: str, document: Dict[str, Any]) -> str:
        self._prepare(file_path)
        with open(file_path, "w", encoding="utf-8") as file:
            yaml.safe_dump(document, file, default_flow_style=None, sort_keys=False)
        logger.debug("wrote %s", file_path)
        return file_path


class TomlDocumentHandler(DocumentHandler):
    """Handler for TOML files."""

    def read(self, file_path: str) -> Dict[str, Any]:
        with open(file_path, "r", encoding="utf-8") as file:
            return toml.load(file)

    def write(self, file_path: str, document: Dict[str, Any]) -> str:
        self._prepare(file_path)
        with open(file_path, "w", encoding="utf-8") as file:
            toml.dump(document, file)
        logger.debug("wrote %s", file_path)
        return file_path


class JsonDocumentHandler(DocumentHandler):
    """Handler for JSON files."""

    def read(self, file_path: str) -> Dict[str, Any]:
        with open(file_path, "r", encoding="utf-8") as file:
            return json.load(file)

    def write(self, file_path: str, document: Dict[str, Any]) -> str:
        self._prepare(file_path)
        with open(file_path, "w", encoding="utf-8") as file:
            json.dump(document, file, indent=2)
        logger.debug("wrote %s", file_path)
        return file_path


_EXTENSIONS = {".yaml": "yaml", ".yml": "yaml", ".toml": "toml", ".json": "json"}


def get_document_handler(file_type: str) -> DocumentHandler:
    """Returns the appropriate document handler for the given file type.

    Args:
        file_type (str): One of "yaml", "toml" or "json".

    Returns:
        DocumentHandler: An instance of the matching handler.

    Raises:
        ContractViolation: If the file type is not supported.
    """
    if file_type == "yaml":
        return YamlDocumentHandler()
    elif file_type == "toml":
        return TomlDocumentHandler()
    elif file_type == "json":
        return JsonDocumentHandler()
    else:
        raise ContractViolation(f"Unsupported file type: {file_type}")


def handler_for_path(file_path: str) -> DocumentHandler:
    """Picks a handler from the file extension of `file_path`."""
    extension = os.path.splitext(file_path)[1].lower()
    if extension not in _EXTENSIONS:
        raise ContractViolation(f"Unsupported file type: {extension or file_path}")
    return get_document_handler(_EXTENSIONS[extension])

"""Unit tests for logger setup and log call style across the fedprompt package."""

import ast
from pathlib import Path

import pytest

import fedprompt
from fedprompt import create_logger

SOURCES = sorted(Path(fedprompt.__file__).parent.glob("*.py"))
LOG_METHODS = {"debug", "info", "warning", "error", "exception", "critical"}


def test_create_logger_single_handler():
    """Test that repeated setup leaves exactly one formatted stream handler."""
    create_logger()
    logger = create_logger()

    assert logger.name == "fedprompt"
    assert len(logger.handlers) == 1
    assert logger.handlers[0].formatter._fmt == "[%(asctime)s] %(levelname)s: %(message)s"
    assert logger.propagate


@pytest.mark.parametrize("path", SOURCES, ids=[p.name for p in SOURCES])
def test_log_calls_use_lazy_arguments(path):
    """Test that log messages are %-templates with arguments, never pre-formatted f-strings."""
    tree = ast.parse(path.read_text(encoding="utf-8"))
    eager = [
        node.lineno
        for node in ast.walk(tree)
        if isinstance(node, ast.Call)
        and isinstance(node.func, ast.Attribute)
        and node.func.attr in LOG_METHODS
        and isinstance(node.func.value, ast.Name)
        and node.func.value.id == "logger"
        and node.args
        and isinstance(node.args[0], ast.JoinedStr)
    ]

    assert eager == [], f"{path.name}: f-string log calls on lines {eager}"

"""Python access to the agentmixer library and CLI commands."""

import json

from ._core import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFY_FAILED,
    ConfigError,
    __version__,
    git_blob_hash,
    normalize_config,
    temperature_degeneration_test,
)
from . import _core


class CommandError(RuntimeError):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _run(result):
    code, out, err = result
    if code != EXIT_OK:
        raise CommandError(code, err.strip() or out.strip())
    return json.loads(out)


def train(config, seed=None, steps=None, output=None):
    """Train the seeds of an INI config; returns the summary dict."""
    return _run(_core.train(str(config), seed, steps, None if output is None else str(output)))


def evaluate(checkpoint, config, episodes=100):
    return _run(_core.evaluate(str(checkpoint), str(config), episodes))


def analyze(checkpoint, config):
    return _run(_core.analyze(str(checkpoint), str(config)))


def verify(suite):
    """Runs a self-check suite; returns its report whether or not it passed."""
    code, out, err = _core.verify(suite)
    if code not in (EXIT_OK, EXIT_VERIFY_FAILED):
        raise CommandError(code, err.strip())
    return json.loads(out)


def analyze_product(payoff, marginals):
    return json.loads(_core.analyze_product(payoff, marginals))

"""Logging setup: console, per-user log file, and one log file per run."""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

from appdirs import user_log_dir

_DEFAULT_LOG = Path(user_log_dir("nrgan")) / "nrgan.log"
_FORMAT = "%(asctime)s  %(levelname)-8s  %(name)s: %(message)s"
_QUIET = ("PIL", "matplotlib")

_run_handler: logging.FileHandler | None = None


def default_level() -> int:
    return logging.DEBUG if os.getenv("NRGAN_VERBOSE", "0") == "1" else logging.INFO


def _file_handler(path: Path) -> logging.FileHandler | None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path, encoding="utf-8")
    except OSError:
        return None
    handler.setFormatter(logging.Formatter(_FORMAT, datefmt="%H:%M:%S"))
    return handler


def setup(level: int | None = None, log_file: str | Path | None = None) -> None:
    """Configure logging for the package.

    Parameters
    ----------
    level:
        Minimum severity level. Defaults to INFO, or DEBUG when
        ``NRGAN_VERBOSE=1``.
    log_file:
        Optional path to the log file. If not provided, ``nrgan.log`` in the
        per-user log directory is used; if it cannot be opened, only the
        console is logged to.
    """
    level = default_level() if level is None else level
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    file_handler = _file_handler(Path(log_file) if log_file is not None else _DEFAULT_LOG)
    if file_handler is not None:
        handlers.append(file_handler)

    logging.basicConfig(level=level, format=_FORMAT, datefmt="%H:%M:%S", handlers=handlers, force=True)
    for name in _QUIET:
        logging.getLogger(name).setLevel(logging.WARNING)

    def _excepthook(exc_type, exc, tb) -> None:
        logging.getLogger(__name__).critical("Unhandled exception", exc_info=(exc_type, exc, tb))

    sys.excepthook = _excepthook


def attach_run_log(path: str | Path) -> logging.FileHandler | None:
    """Mirror package logs into ``path``, replacing the previous run's file."""
    global _run_handler
    detach_run_log()
    handler = _file_handler(Path(path))
    if handler is None:
        logging.getLogger(__name__).warning("cannot open run log %s", path)
        return None
    handler.setLevel(logging.DEBUG)
    pkg = logging.getLogger("nrgan")
    pkg.addHandler(handler)
    if pkg.getEffectiveLevel() > default_level():
        pkg.setLevel(default_level())
    _run_handler = handler
    return handler


def detach_run_log() -> None:
    global _run_handler
    if _run_handler is not None:
        logging.getLogger("nrgan").removeHandler(_run_handler)
        _run_handler.close()
        _run_handler = None

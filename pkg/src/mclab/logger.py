import logging
import sys
from logging import DEBUG, ERROR, INFO, WARNING

import colorama

colorama.init(autoreset=True)

SUMMARY = 100
TASK = 101


class LevelFilter(logging.Filter):
    """
    Only lets records of exactly one level through, so that every level
    can have its own stream and colour.
    """

    def __init__(self, level: int):
        super().__init__()
        self.level = level

    def filter(self, record: logging.LogRecord) -> bool:  # pragma: no cover
        return record.levelno == self.level


class LabLogger(logging.getLoggerClass()):
    """
    Logger with two extra levels: ``task`` announces a study or a phase of
    it, ``summary`` prints the closing line of a command.
    """

    def __init__(self, name, level=logging.NOTSET):
        super().__init__(name, level)
        logging.addLevelName(SUMMARY, "SUMMARY")
        logging.addLevelName(TASK, "TASK")

    def summary(self, msg, *args, **kwargs):
        if self.isEnabledFor(SUMMARY):
            self._log(SUMMARY, msg, args, **kwargs)

    def task(self, msg, *args, **kwargs):
        if self.isEnabledFor(TASK):
            self._log(TASK, msg, args, **kwargs)


class LiveStreamHandler(logging.StreamHandler):
    """
    StreamHandler resolving ``sys.stdout``/``sys.stderr`` at emit time, so
    that output follows stream replacement (test runners, CliRunner).
    """

    def __init__(self, stream):
        super().__init__(stream)
        self._name = "stderr" if stream is sys.stderr else "stdout"

    def emit(self, record):
        self.stream = getattr(sys, self._name)
        super().emit(record)


class CountingStreamHandler(LiveStreamHandler):
    """
    Stream handler keeping a per-level count of emitted records.
    Counters are shared by all instances; not thread-safe.
    """

    counters: dict = {}

    def emit(self, record):
        self.counters[record.levelno] = self.counters.get(record.levelno, 0) + 1
        super().emit(record)


class StrippedFormatter(logging.Formatter):
    """Formatter dropping trailing whitespace and newlines from messages."""

    def format(self, record):
        if isinstance(record.msg, str):
            record.msg = record.msg.rstrip()
        return super().format(record)


class IndentedFormatter(logging.Formatter):
    """Formatter applying the format to every line of a multi-line message."""

    def format(self, record):
        message = str(record.msg)
        lines = []
        for line in message.splitlines() or [""]:
            record.msg = line
            lines.append(super().format(record))
        record.msg = message
        return "\n".join(lines)


def get_warning_counter() -> int:
    return CountingStreamHandler.counters.get(WARNING, 0)


def get_error_counter() -> int:
    return CountingStreamHandler.counters.get(ERROR, 0)


def reset_counters() -> None:
    CountingStreamHandler.counters.clear()


def getLogger(name=None):
    """
    Build a logger with one handler per level and return it.

    :param name: The name for the logger, usually ``__name__``.
    :return: logger object
    """
    logging.setLoggerClass(LabLogger)

    logger = logging.getLogger(name)
    logger.setLevel(logging.NOTSET)
    if not logger.handlers:
        for handler in _handlers():
            logger.addHandler(handler)
    logger.propagate = False

    return logger


def _handlers():
    yield _handler(DEBUG, sys.stdout, IndentedFormatter(dim_text("     %(message)s")))
    yield _handler(INFO, sys.stdout, StrippedFormatter("     %(message)s"))
    yield _handler(
        TASK, sys.stdout, StrippedFormatter(f" --> {cyan_text('%(message)s')}")
    )
    yield _handler(
        WARNING,
        sys.stdout,
        StrippedFormatter(yellow_text("     %(message)s")),
        counted=True,
    )
    yield _handler(
        ERROR,
        sys.stderr,
        StrippedFormatter(red_text("     %(message)s")),
        counted=True,
    )
    yield _handler(
        logging.CRITICAL, sys.stderr, StrippedFormatter(red_text("%(message)s"))
    )
    yield _handler(SUMMARY, sys.stdout, StrippedFormatter(green_text("     %(message)s")))


def _handler(level, stream, formatter, counted=False):
    handler = (CountingStreamHandler if counted else LiveStreamHandler)(stream)
    handler.setLevel(level)
    handler.addFilter(LevelFilter(level))
    handler.setFormatter(formatter)
    return handler


def dim_text(msg):
    return color_text(colorama.Style.DIM, msg)


def red_text(msg):
    return color_text(colorama.Fore.RED, msg)


def yellow_text(msg):
    return color_text(colorama.Fore.YELLOW, msg)


def green_text(msg):
    return color_text(colorama.Fore.GREEN, msg)


def cyan_text(msg):
    return color_text(colorama.Fore.CYAN, msg)


def color_text(color, msg):
    return f"{color}{msg}{colorama.Style.RESET_ALL}"


def enable_debug(debug: bool):
    logging.getLogger().setLevel(DEBUG if debug else INFO)

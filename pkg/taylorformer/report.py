"""
Everything TaylorFormer writes to the terminal goes through here: prefixed
messages, the one-line progress indicator and the colors around them. All of
it is printed to stderr, so that tables on stdout stay clean.
"""

from __future__ import print_function
import os
import re
import sys


def supports_color():
    "True if stderr is a terminal that understands ANSI escapes."
    windows_without_ansi = sys.platform == "win32" and \
        "ANSICON" not in os.environ
    is_a_tty = hasattr(sys.stderr, "isatty") and sys.stderr.isatty()
    return is_a_tty and not windows_without_ansi


COLOR_SUPPORT = supports_color()
RESET = "\033[0m"
STYLES = {"red": "\033[31m",
          "green": "\033[32m",
          "yellow": "\033[33m",
          "underline": "\033[4m"}
ESCAPE_PATTERN = re.compile("\033\\[[0-9;]*m")


def _paint(text, style):
    if not COLOR_SUPPORT:
        return text
    return "{}{}{}".format(STYLES[style], text, RESET)


def colorize(text, color):
    """Returns text in one of the colors 'red', 'green' or 'yellow'; plain
    text on terminals without color."""
    if color not in STYLES:
        raise KeyError("unknown color '{}'".format(color))
    return _paint(text, color)


def underline(text):
    return _paint(text, "underline")


def plain(text):
    "Strip terminal escapes, for text that ends up in a log file."
    return ESCAPE_PATTERN.sub("", text)


def _prefixed(prefix, color, message, display):
    formatted = "{}: {}".format(_paint(prefix, color), message)
    if display:
        print(formatted, file=sys.stderr)
    return formatted


def error(message, display=True):
    """Print message to stderr behind a red 'error:' and return the formatted
    line."""
    return _prefixed("error", "red", message, display)


def warning(message, display=True):
    "Same as error, behind a yellow 'warning:'."
    return _prefixed("warning", "yellow", message, display)


def tip(message, display=True):
    return _prefixed("tip", "green", message, display)


def progress_bar(message, replace=True, display=True):
    """Print message behind a green '>'.

    Parameters
    ----------
    message : str
        What is happening right now, e.g. 'step 10/2000: loss 0.12'.

    replace : bool
        End with a carriage return, so that the next call overwrites this
        line. Pass False for a line that should stay.

    display : bool
        Only format the line, do not print it.

    Returns
    -------
    progress : str
        The formatted line.
    """
    progress = "{} {}".format(_paint(u">", "green"), message)
    if display:
        sys.stderr.flush()
        print(progress, file=sys.stderr, end="\r" if replace else "\n")
    return progress


def print_path(path, display=True):
    if display:
        print(path, file=sys.stderr)
    return path


def yes_or_no(question):
    "Ask until the answer is 'y' or 'n'; True for 'y'."
    answer = input(question + " (y/n): ")
    while answer not in ("y", "n"):
        answer = input("please answer yes or no (y/n): ")
    return answer == "y"


def verdict(passed):
    "'ok' in green or 'FAILED' in red."
    return colorize("ok", "green") if passed else colorize("FAILED", "red")

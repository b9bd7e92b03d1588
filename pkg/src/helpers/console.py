"""
Shared rich console for the harness, the acceptance suites and run.py.

Library modules never print; everything user-facing goes through `console`.
Set UDSLAB_QUIET=1 (or call set_quiet) to silence output and progress bars.
"""

import os

from rich.console import Console

console = Console()


def env_flag(name, default=False):
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


def set_quiet(quiet):
    console.quiet = bool(quiet)


def is_quiet():
    return console.quiet or env_flag("UDSLAB_QUIET")

"""Shared exception base for the package.

Concrete exceptions live next to the code that raises them; they all derive
from :class:`ApneaScreenError` so callers (notably the CLI) can catch the
whole family at once.
"""


class ApneaScreenError(Exception):
    pass

"""Entry point for ``python -m cavityq``."""

import sys

from .cli import main

sys.exit(main())

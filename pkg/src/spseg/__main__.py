"""``python -m spseg``."""

import sys

from .cli import main

sys.exit(main())

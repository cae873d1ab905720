"""Allow ``python -m subjectforge``."""

import sys

from .cli import main

sys.exit(main())

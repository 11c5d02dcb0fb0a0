from __future__ import annotations

import sys

from .cli_io import main

sys.exit(main())

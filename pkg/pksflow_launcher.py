from __future__ import annotations

"""
Entry script for PyInstaller builds.

PyInstaller expects a top-level script without package-relative imports.
This launcher delegates to the argparse entry point defined in app.main.
"""

import sys

from app.main import main


if __name__ == "__main__":
    sys.exit(main())

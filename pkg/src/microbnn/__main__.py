"""Forward `python -m microbnn` to the command line interface."""

import sys

from microbnn.cli import main

if __name__ == "__main__":
    sys.exit(main())

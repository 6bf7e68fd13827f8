import sys

from pair_absa.cli import main

if __name__ == "__main__":
    sys.exit(main())

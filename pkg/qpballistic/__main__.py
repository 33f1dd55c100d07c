import sys

from qpballistic.cli import main

sys.exit(main())

import sys

from diffrect.cli import main

sys.exit(main())

import sys

from tmfront.cli import main

sys.exit(main())

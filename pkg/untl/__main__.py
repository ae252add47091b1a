import sys

from untl.cli import main

sys.exit(main())

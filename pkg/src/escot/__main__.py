import sys

from escot.cli import main

sys.exit(main())

import sys

from cyclet.cli import main

sys.exit(main())

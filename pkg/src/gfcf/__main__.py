import sys

from gfcf.cli import main

sys.exit(main())

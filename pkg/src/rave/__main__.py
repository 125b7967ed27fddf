import sys

from rave.cli import main

sys.exit(main())

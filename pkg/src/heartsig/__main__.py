import sys

from heartsig.cli import main

sys.exit(main())

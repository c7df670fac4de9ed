import sys

from qksttn.expcli.cli import main

sys.exit(main())

import sys

from discussd.cli import main

sys.exit(main())

import sys

from questlab.cli import main

sys.exit(main())

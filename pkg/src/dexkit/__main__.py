import sys

from dexkit.cli import main

sys.exit(main())

import sys

from metachain.cli import main

sys.exit(main())

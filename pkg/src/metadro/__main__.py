import sys

from metadro.cli import main

sys.exit(main())

import sys

from prom.cli import main

sys.exit(main())

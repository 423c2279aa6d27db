import sys

from arbq.cli import main

sys.exit(main())

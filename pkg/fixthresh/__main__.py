import sys

from fixthresh.cli import main

sys.exit(main())

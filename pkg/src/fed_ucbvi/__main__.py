import sys

from fed_ucbvi.cli import main

sys.exit(main())

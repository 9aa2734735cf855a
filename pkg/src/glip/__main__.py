import sys

from glip.cli import main

sys.exit(main())

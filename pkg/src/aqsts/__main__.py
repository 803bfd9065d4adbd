import sys

from aqsts.cli import main

sys.exit(main())

import sys

from trilogy.cli import main

sys.exit(main())

import sys

from rpca.cli import main

sys.exit(main())

import sys

from advcritic.cli import main

sys.exit(main())

import sys

from siamlab.cli import main

sys.exit(main())

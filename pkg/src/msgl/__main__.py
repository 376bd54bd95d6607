import sys

from msgl.cli import main

sys.exit(main())

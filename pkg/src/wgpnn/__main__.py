import sys

from wgpnn.cli import main

sys.exit(main())

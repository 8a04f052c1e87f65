import sys

from honeydoc.cli import main

sys.exit(main())

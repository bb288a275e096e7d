import sys

from treeood.cli import main

sys.exit(main())

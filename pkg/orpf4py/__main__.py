import sys

from orpf4py.cli import main

sys.exit(main())

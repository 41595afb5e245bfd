import sys

from okgrad.cli import main

sys.exit(main())

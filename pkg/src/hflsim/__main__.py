import sys

from hflsim.cli import main

sys.exit(main())

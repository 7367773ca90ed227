import sys

from csqn.main import main

sys.exit(main())

import sys

from kalmannet.harness.cli import main

sys.exit(main())

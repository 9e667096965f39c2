import sys

from fedexperts.harness import main

sys.exit(main())

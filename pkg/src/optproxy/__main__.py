import sys

from optproxy.cli import main

sys.exit(main())

import sys

from intent_sieve.cli import main

sys.exit(main())

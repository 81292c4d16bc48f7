import sys

from lora_subspace.cli import main

sys.exit(main())

import sys

from .reid_forge_system import main

sys.exit(main())

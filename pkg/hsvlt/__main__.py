import sys

from hsvlt.main import main

sys.exit(main())

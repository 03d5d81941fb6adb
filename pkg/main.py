import logging
import sys

from app.cli import LOG_FORMAT, main

# configure logging
logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)

# suppress sqlalchemy engine logs below warning level
logging.getLogger("sqlalchemy.engine.Engine").setLevel(logging.WARNING)

if __name__ == "__main__":
    sys.exit(main())

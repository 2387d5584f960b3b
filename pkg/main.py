import logging
import sys

from core.cli import LOG_FORMAT, run

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format=LOG_FORMAT
)

############################################################
# Entry point: python main.py <subcommand> [flags]
############################################################
if __name__ == '__main__':
    argv = sys.argv[1:]
    if "-v" in argv or "--verbose" in argv:
        logging.getLogger().setLevel(logging.DEBUG)
    elif "-q" in argv or "--quiet" in argv:
        logging.getLogger().setLevel(logging.WARNING)
    sys.exit(run(argv))

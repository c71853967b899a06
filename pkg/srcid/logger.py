import logging
from logging.handlers import RotatingFileHandler

from srcid.config import settings

LOG_DIR = settings.log_dir
LOG_FILE = LOG_DIR / "srcid.log"

FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"

# create logger
logger = logging.getLogger("srcid")
logger.setLevel(logging.DEBUG)  # handlers filter further
logger.propagate = False

# console handler
ch = logging.StreamHandler()
ch.setLevel(getattr(logging, settings.log_level.upper(), logging.INFO))
ch.setFormatter(logging.Formatter(FORMAT))

# rotating file handler; a read-only checkout keeps console logging only
try:
    LOG_DIR.mkdir(parents=True, exist_ok=True)
    fh = RotatingFileHandler(str(LOG_FILE), maxBytes=5_000_000, backupCount=5, encoding="utf-8")
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(logging.Formatter(FORMAT))
except OSError:
    fh = None

# attach handlers if not already attached (avoid duplicates on re-import)
if not logger.handlers:
    logger.addHandler(ch)
    if fh is not None:
        logger.addHandler(fh)


def attach_to_logger_names(names=("srcid.services", "srcid.broker", "py.warnings")):
    """
    Make other loggers use the same handlers/level as the application logger.
    Modules call this with their own logger name to unify output.
    """
    for name in names:
        lg = logging.getLogger(name)
        lg.handlers = logger.handlers[:]  # copy handlers
        lg.setLevel(logger.level)
        lg.propagate = False

import os
import logging
from dotenv import load_dotenv

load_dotenv()

LOG_DIR = os.getenv('SCREENFLOW_LOG_DIR', './logs')


# ----------------------------
# Logger Factory
# ----------------------------
def get_logger(name, filename):
    """Return the named module logger, writing to LOG_DIR/<filename>."""
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)

    # Create file handler if it doesn't exist
    if not logger.handlers:
        os.makedirs(LOG_DIR, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(LOG_DIR, filename))
        file_handler.setLevel(logging.DEBUG)
        formatter = logging.Formatter('%(asctime)s [%(levelname)s]: %(message)s')
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    return logger

import logging
import os
import sys

LOG_FORMAT = '%(asctime)s - %(levelname)s - [%(filename)s:%(funcName)s:%(lineno)d] - %(message)s'


def setup_logging(output_dir, log_level=logging.INFO, log_file=None, disable_file_handler=False):
    """
    Sets up the root logger to log to the console and, when the output directory is
    writable, to a file inside it.

    :param output_dir: Directory where the log file will be saved (created if missing).
    :param log_level: Log level (int or name such as "DEBUG"); default is logging.INFO.
    :param log_file: Log file name. Defaults to the name of the running script.
    :param disable_file_handler: Log to the console only.
    """
    if isinstance(log_level, str):
        log_level = logging.getLevelName(log_level.upper())
        if not isinstance(log_level, int):
            log_level = logging.INFO

    if log_file is None:
        script_name = os.path.splitext(os.path.basename(sys.argv[0]))[0] or "predprey-sim"
        log_file = f"{script_name}.log"

    log_file_path = os.path.join(output_dir, log_file)

    logger = logging.getLogger()
    logger.setLevel(log_level)

    if logger.hasHandlers():
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)

    if not disable_file_handler:
        try:
            os.makedirs(output_dir, exist_ok=True)
            with open(log_file_path, 'a'):
                pass
        except OSError:
            disable_file_handler = True
            logging.error(f"Log file {log_file_path} is not writeable. Disabling file handler.")

    formatter = logging.Formatter(LOG_FORMAT)

    if not disable_file_handler:
        file_handler = logging.FileHandler(log_file_path)
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    log_file_str = f"log_file: {log_file_path}" if not disable_file_handler else "log_file is disabled"
    logging.info(f"Logging initialized at level {logging.getLevelName(log_level)}. {log_file_str}")

# src/utils/logger.py

import logging

# ---- ЛОГИ ----
# Формат тот же, что у воркера фабрики: время, уровень, сообщение.
LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"

_configured = False


def get_logger(name: str = "pixelsoul") -> logging.Logger:
    """
    Единая точка получения логгера.
    basicConfig вызывается один раз, дальше просто отдаём именованный логгер.
    """
    global _configured
    if not _configured:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        _configured = True
    return logging.getLogger(name)

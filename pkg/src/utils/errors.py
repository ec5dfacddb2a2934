# src/utils/errors.py

from typing import Any, Dict, Optional


class PixelSoulError(RuntimeError):
    """Базовая ошибка фабрики. Текст в стиле 'Компонент: что сломалось'."""


class ConfigError(PixelSoulError):
    """Конфиг не прошёл проверку. field — точный путь до поля (например 'ttrl.n_rollouts')."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ProtocolError(PixelSoulError):
    """Нарушение протокола инструментов (например ANSWER отправлен в execute_tool)."""


class GenerationError(PixelSoulError):
    """Запрос нельзя ответить по разметке сцены."""


class TrainingError(PixelSoulError):
    """Обучение разошлось. diagnostics — что было на шаге падения."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(f"{message} | diagnostics={self.diagnostics}")


class DependencyError(PixelSoulError):
    """Стадии не хватает артефакта предыдущей стадии (например TTRL без чекпоинта)."""


class ReplayError(PixelSoulError):
    """Лог повтора не совпадает по версии или повреждён."""

"""
Конфигурация уточнения сегментации с поддержкой файла переопределений
"""
import os
import json
import threading
import shutil
from typing import Dict, Optional, Tuple
from pathlib import Path
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv
import logging

from src.refiner import RefineConfig

logger = logging.getLogger(__name__)

load_dotenv()

# Путь к файлу переопределений параметров
CONFIG_FILE = Path(os.getenv("REFINE_CONFIG_FILE", "refine_config.json"))
_config_lock = threading.Lock()

# Ключ настроек -> путь в RefineConfig
_REFINE_FIELDS = {
    "refine_tau": ("tau",),
    "refine_k": ("k",),
    "refine_dilation_radius": ("dilation_radius",),
    "refine_lambda": ("lambda",),
    "refine_sigma1": ("sigma1",),
    "refine_sigma2": ("sigma2",),
    "refine_edge_seed": ("edge_seed",),
    "refine_apply_lcc": ("apply_lcc_to_input",),
    "refine_replace_policy": ("replace_policy",),
    "refine_epochs": ("train", "epochs"),
    "refine_lr": ("train", "learning_rate"),
    "refine_seed": ("train", "init_seed"),
}


class Settings(BaseSettings):
    """Настройки приложения"""
    model_config = SettingsConfigDict(env_file=".env", case_sensitive=False, extra="ignore")

    # Неопределенность и граф
    refine_tau: float = float(os.getenv("REFINE_TAU", "0.8"))
    refine_k: int = int(os.getenv("REFINE_K", "16"))
    refine_dilation_radius: int = int(os.getenv("REFINE_DILATION_RADIUS", "2"))
    refine_lambda: float = float(os.getenv("REFINE_LAMBDA", "1.0"))
    refine_sigma1: float = float(os.getenv("REFINE_SIGMA1", "0.5"))
    refine_sigma2: float = float(os.getenv("REFINE_SIGMA2", "100.0"))
    refine_edge_seed: int = int(os.getenv("REFINE_EDGE_SEED", "0"))

    # Обучение GCN
    refine_epochs: int = int(os.getenv("REFINE_EPOCHS", "200"))
    refine_lr: float = float(os.getenv("REFINE_LR", "0.01"))
    refine_seed: int = int(os.getenv("REFINE_SEED", "0"))

    # Постобработка
    refine_apply_lcc: bool = os.getenv("REFINE_APPLY_LCC", "true").lower() == "true"
    refine_replace_policy: str = os.getenv("REFINE_REPLACE_POLICY", "full")

    # Логирование (не изменяется через файл переопределений)
    log_level: str = os.getenv("LOG_LEVEL", "INFO")
    log_file: str = os.getenv("LOG_FILE", "segmentation_refine.log")

    def to_dict(self) -> Dict:
        """Изменяемые параметры уточнения"""
        return {name: getattr(self, name) for name in _REFINE_FIELDS}

    def update_from_dict(self, data: Dict) -> bool:
        """
        Обновить настройки из словаря

        Args:
            data: Словарь с новыми значениями

        Returns:
            True если обновление успешно
        """
        try:
            for name, value in data.items():
                if name not in _REFINE_FIELDS:
                    logger.warning(f"Неизвестный параметр конфигурации: {name}")
                    continue
                current = getattr(self, name)
                if isinstance(current, bool):
                    value = value if isinstance(value, bool) else str(value).lower() == "true"
                else:
                    value = type(current)(value)
                setattr(self, name, value)
            return True
        except (ValueError, TypeError) as e:
            logger.error(f"Ошибка при обновлении настроек: {e}")
            return False

    def to_refine_config(self) -> RefineConfig:
        """Собрать типизированную конфигурацию уточнения (с проверкой диапазонов)"""
        return refine_config_from_dict(self.to_dict())


def refine_config_from_dict(values: Dict) -> RefineConfig:
    """Построить RefineConfig из плоского словаря настроек"""
    data: Dict = {"train": {}}
    for name, path in _REFINE_FIELDS.items():
        if name not in values:
            continue
        if len(path) == 2:
            data[path[0]][path[1]] = values[name]
        else:
            data[path[0]] = values[name]
    return RefineConfig(**data)


def load_config_from_file() -> Optional[Dict]:
    """Загрузить переопределения из файла"""
    if not CONFIG_FILE.exists():
        return None

    try:
        with open(CONFIG_FILE, "r", encoding="utf-8") as f:
            return json.load(f)
    except Exception as e:
        logger.error(f"Ошибка при загрузке конфигурации из файла: {e}")
        return None


def save_config_to_file(config_dict: Dict) -> Tuple[bool, str]:
    """Сохранить конфигурацию в файл

    Returns:
        Кортеж (успех, сообщение об ошибке)
    """
    try:
        with _config_lock:
            if CONFIG_FILE.exists() and CONFIG_FILE.is_dir():
                logger.warning(f"{CONFIG_FILE} является директорией, удаляем её")
                shutil.rmtree(CONFIG_FILE)

            CONFIG_FILE.parent.mkdir(parents=True, exist_ok=True)
            with open(CONFIG_FILE, "w", encoding="utf-8") as f:
                json.dump(config_dict, f, indent=2, ensure_ascii=False)
        logger.info(f"Конфигурация сохранена в {CONFIG_FILE}")
        return True, ""
    except PermissionError as e:
        error_msg = f"Нет прав на запись в файл {CONFIG_FILE}: {e}"
        logger.error(error_msg)
        return False, error_msg
    except OSError as e:
        error_msg = f"Ошибка файловой системы при сохранении {CONFIG_FILE}: {e}"
        logger.error(error_msg)
        return False, error_msg


def update_config(config_dict: Dict) -> Tuple[bool, str]:
    """
    Обновить конфигурацию

    Args:
        config_dict: Словарь с новыми значениями

    Returns:
        Кортеж (успех, сообщение)
    """
    unknown = sorted(set(config_dict) - set(_REFINE_FIELDS))
    if unknown:
        return False, f"Неизвестные параметры: {', '.join(unknown)}"

    merged = {**settings.to_dict(), **config_dict}
    try:
        refine_config_from_dict(merged)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        return False, f"Неверное значение {location}: {first['msg']}"

    if not settings.update_from_dict(config_dict):
        return False, "Ошибка при обновлении настроек"

    success, error_msg = save_config_to_file(settings.to_dict())
    if not success:
        return False, f"Ошибка при сохранении конфигурации: {error_msg}"

    return True, "Конфигурация успешно обновлена"


# Загружаем начальную конфигурацию
initial_config = Settings()

saved_config = load_config_from_file()
if saved_config:
    initial_config.update_from_dict(saved_config)
    logger.info(f"Загружена конфигурация из файла {CONFIG_FILE}")

# Глобальный объект настроек
settings = initial_config

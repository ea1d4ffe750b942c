"""
Точка входа: уточнение сегментации органов по неопределенности
"""
import logging
import sys

import config
from src.cli import run_cli

# Настройка логирования; stdout остается для машиночитаемого вывода eval
logging.basicConfig(
    level=getattr(logging, config.settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler(config.settings.log_file),
        logging.StreamHandler(sys.stderr)
    ]
)

logger = logging.getLogger(__name__)


def main() -> int:
    """Главная функция"""
    try:
        return run_cli(sys.argv[1:])
    except KeyboardInterrupt:
        logger.info("Прервано пользователем")
        return 130


if __name__ == "__main__":
    sys.exit(main())

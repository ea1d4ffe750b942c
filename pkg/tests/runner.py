"""
Общий запуск тестов без pytest: ✓/✗ по каждому тесту и итоги
"""
import logging

logger = logging.getLogger(__name__)


def run_tests(title: str, tests) -> bool:
    """
    Выполнить тесты и вывести итоги

    Args:
        title: Название набора
        tests: Список пар (название, функция)

    Returns:
        True если все тесты прошли
    """
    logger.info("=" * 60)
    logger.info(f"Запуск тестов для модуля {title}")
    logger.info("=" * 60)

    results = []
    for test_name, test_func in tests:
        try:
            test_func()
            results.append((test_name, True))
        except Exception as e:
            logger.error(f"✗ Ошибка в тесте '{test_name}': {e}")
            results.append((test_name, False))
        logger.info("")

    logger.info("=" * 60)
    logger.info("Результаты тестов:")
    logger.info("=" * 60)
    passed = 0
    for test_name, result in results:
        status = "✓ ПРОШЕЛ" if result else "✗ ПРОВАЛЕН"
        logger.info(f"{status}: {test_name}")
        if result:
            passed += 1
    logger.info("")
    logger.info(f"Всего тестов: {len(results)}")
    logger.info(f"Пройдено: {passed}")
    logger.info(f"Провалено: {len(results) - passed}")
    logger.info("=" * 60)
    return passed == len(results)

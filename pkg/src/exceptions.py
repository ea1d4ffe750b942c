"""
Исключения библиотеки уточнения сегментации
"""


class RefinementError(Exception):
    """Базовое исключение для всех ошибок уточнения"""


class VolumeError(RefinementError):
    """Ошибка чтения/записи или некорректный объем"""


class GeometryError(RefinementError):
    """Несовпадение геометрии объемов"""


class UncertaintyError(RefinementError):
    """Ошибка анализа неопределенности"""


class GraphError(RefinementError):
    """Ошибка построения графа"""


class TrainingError(RefinementError):
    """Ошибка обучения GCN"""


class ManifestError(RefinementError):
    """Некорректный манифест входных данных"""

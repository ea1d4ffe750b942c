"""
Объемы 3-D: представление, бинарный формат, морфология и метрики
"""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import GeometryError, VolumeError

logger = logging.getLogger(__name__)

PAYLOAD_DTYPE = np.dtype("<f4")
HEADER_DTYPE = "f32"
HEADER_ORDER = "x-fastest"

# 6-связный структурный элемент для дилатации, 26-связный для компонент
FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)
FULL_STRUCTURE = ndimage.generate_binary_structure(3, 3)

PathLike = Union[str, Path]


class VolumeKind(str, Enum):
    """Тип содержимого объема"""
    INTENSITY = "intensity"
    PROBABILITY = "probability"
    ENTROPY = "entropy"
    MASK = "mask"


@dataclass(frozen=True, eq=False)
class Volume3:
    """Плотное скалярное поле 3-D (x меняется быстрее всего)"""
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    data: np.ndarray
    kind: VolumeKind

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise VolumeError(f"Некорректные размеры объема: {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise VolumeError(f"Некорректный шаг вокселя: {self.spacing}")

        source = np.asarray(self.data, dtype=np.float64).reshape(-1)
        # Значения хранятся с точностью файла, чтобы запись и чтение были побитово точными
        with np.errstate(over="ignore"):
            data = source.astype(PAYLOAD_DTYPE).astype(np.float64)
        if (np.isinf(data) & np.isfinite(source)).any():
            raise VolumeError("Значения объема выходят за диапазон float32")
        data.setflags(write=False)
        kind = VolumeKind(self.kind)

        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", kind)
        self._validate()

    def _validate(self):
        nx, ny, nz = self.dims
        if self.data.size != nx * ny * nz:
            raise VolumeError(
                f"Длина данных {self.data.size} не равна {nx}*{ny}*{nz}={nx * ny * nz}"
            )
        if np.isnan(self.data).any():
            raise VolumeError("Объем содержит NaN")
        if self.kind in (VolumeKind.PROBABILITY, VolumeKind.ENTROPY):
            if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
                raise VolumeError(f"Значения объема типа {self.kind.value} вне [0, 1]")
        elif self.kind is VolumeKind.MASK:
            if not np.isin(self.data, (0.0, 1.0)).all():
                raise VolumeError("Маска должна содержать только 0 и 1")

    @classmethod
    def from_array(
        cls,
        array: np.ndarray,
        kind: VolumeKind,
        spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> "Volume3":
        """
        Создать объем из массива формы (nz, ny, nx)

        Args:
            array: Трехмерный массив, индексируемый как [z, y, x]
            kind: Тип содержимого
            spacing: Шаг вокселя в мм (sx, sy, sz)

        Returns:
            Новый Volume3
        """
        array = np.asarray(array)
        if array.ndim != 3:
            raise VolumeError(f"Ожидался трехмерный массив, получено ndim={array.ndim}")
        nz, ny, nx = array.shape
        return cls(dims=(nx, ny, nz), spacing=spacing, data=array.reshape(-1), kind=kind)

    def like(self, data: np.ndarray, kind: VolumeKind) -> "Volume3":
        """Новый объем с той же геометрией"""
        return Volume3(dims=self.dims, spacing=self.spacing, data=np.asarray(data).reshape(-1), kind=kind)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Форма массива (nz, ny, nx)"""
        nx, ny, nz = self.dims
        return nz, ny, nx

    def as_array(self) -> np.ndarray:
        """Представление данных в виде массива [z, y, x] (только чтение)"""
        return self.data.reshape(self.shape)

    def as_bool(self) -> np.ndarray:
        """Маска в виде булевого массива [z, y, x]"""
        return self.as_array() > 0.5

    def count(self) -> int:
        """Количество вокселей переднего плана (для масок)"""
        return int(np.count_nonzero(self.data > 0.5))

    def same_geometry(self, other: "Volume3") -> bool:
        """Проверить совпадение размеров и шага"""
        return self.dims == other.dims and self.spacing == other.spacing

    def header(self) -> Dict:
        """Заголовок нативного формата"""
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "dtype": HEADER_DTYPE,
            "order": HEADER_ORDER,
            "kind": self.kind.value,
        }


def require_same_geometry(*volumes: Volume3):
    """Бросить GeometryError, если геометрия объемов различается"""
    first = volumes[0]
    for other in volumes[1:]:
        if not first.same_geometry(other):
            raise GeometryError(
                f"Несовпадение геометрии: dims {first.dims} / {other.dims}, "
                f"spacing {first.spacing} / {other.spacing}"
            )


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def load_volume(path: PathLike) -> Volume3:
    """
    Загрузить объем из пары <name>.json + <name>.raw

    Args:
        path: Путь к заголовку (.json)

    Returns:
        Volume3 со значениями float32 (little-endian), без переупорядочивания
    """
    header_path = Path(path)
    payload_path = _payload_path(header_path)
    if not header_path.is_file():
        raise VolumeError(f"Файл заголовка не найден: {header_path}")
    if not payload_path.is_file():
        raise VolumeError(f"Файл данных не найден: {payload_path}")

    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeError(f"Не удалось прочитать заголовок {header_path}: {e}") from e

    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        kind = VolumeKind(header["kind"])
    except KeyError as e:
        raise VolumeError(f"В заголовке {header_path} нет поля {e}") from e
    except (TypeError, ValueError) as e:
        raise VolumeError(f"Некорректный заголовок {header_path}: {e}") from e

    if header.get("dtype", HEADER_DTYPE) != HEADER_DTYPE:
        raise VolumeError(f"Неподдерживаемый dtype: {header.get('dtype')}")
    if header.get("order", HEADER_ORDER) != HEADER_ORDER:
        raise VolumeError(f"Неподдерживаемый порядок: {header.get('order')}")

    raw = payload_path.read_bytes()
    expected = int(np.prod(dims)) * PAYLOAD_DTYPE.itemsize
    if len(raw) != expected:
        raise VolumeError(
            f"Размер данных {payload_path} ({len(raw)} байт) не совпадает с заголовком ({expected} байт)"
        )

    data = np.frombuffer(raw, dtype=PAYLOAD_DTYPE)
    volume = Volume3(dims=dims, spacing=spacing, data=data, kind=kind)
    logger.debug(f"Загружен объем {header_path}: dims={dims}, kind={kind.value}")
    return volume


def save_volume(volume: Volume3, path: PathLike):
    """
    Сохранить объем в нативном формате

    Args:
        volume: Объем для сохранения
        path: Путь к заголовку (.json); данные пишутся рядом в .raw
    """
    header_path = Path(path)
    payload_path = _payload_path(header_path)
    try:
        header_path.parent.mkdir(parents=True, exist_ok=True)
        with open(header_path, "w", encoding="utf-8") as f:
            json.dump(volume.header(), f, indent=2)
        payload_path.write_bytes(volume.data.astype(PAYLOAD_DTYPE).tobytes())
    except OSError as e:
        raise VolumeError(f"Не удалось записать объем в {header_path}: {e}") from e
    logger.debug(f"Объем сохранен в {header_path}")


def threshold(volume: Volume3, t: float) -> Volume3:
    """
    Бинаризация: 1 там, где значение строго больше t

    Args:
        volume: Объем вероятностей или энтропии
        t: Порог

    Returns:
        Маска
    """
    if volume.kind not in (VolumeKind.PROBABILITY, VolumeKind.ENTROPY):
        raise VolumeError(f"Порог применяется к probability/entropy, получено {volume.kind.value}")
    return volume.like((volume.data > t).astype(np.float64), VolumeKind.MASK)


def _require_mask(volume: Volume3):
    if volume.kind is not VolumeKind.MASK:
        raise VolumeError(f"Ожидалась маска, получено {volume.kind.value}")


def dilate(mask: Volume3, radius: int) -> Volume3:
    """
    Дилатация 6-связным элементом, примененным radius раз

    Args:
        mask: Бинарная маска
        radius: Число итераций (>= 1)

    Returns:
        Расширенная маска
    """
    _require_mask(mask)
    if radius < 1:
        raise ValueError(f"Радиус дилатации должен быть >= 1, получено {radius}")
    source = mask.as_bool()
    if not source.any():
        return mask
    dilated = ndimage.binary_dilation(source, structure=FACE_STRUCTURE, iterations=int(radius))
    return mask.like(dilated.astype(np.float64), VolumeKind.MASK)


def largest_connected_component(mask: Volume3) -> Volume3:
    """
    Оставить только наибольшую 26-связную компоненту

    При равных размерах побеждает компонента с меньшим плоским индексом
    первого вокселя (метки scipy выдаются в порядке обхода).
    """
    _require_mask(mask)
    labels, n_components = ndimage.label(mask.as_bool(), structure=FULL_STRUCTURE)
    if n_components <= 1:
        return mask
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    keep = int(np.argmax(sizes))
    logger.debug(f"LCC: {n_components} компонент, оставлена {keep} ({sizes[keep]} вокселей)")
    return mask.like((labels == keep).astype(np.float64), VolumeKind.MASK)


def dice(a: Volume3, b: Volume3) -> float:
    """
    Коэффициент Dice 2|A∩B| / (|A|+|B|); 1.0 для двух пустых масок
    """
    _require_mask(a)
    _require_mask(b)
    require_same_geometry(a, b)
    mask_a = a.data > 0.5
    mask_b = b.data > 0.5
    total = int(np.count_nonzero(mask_a)) + int(np.count_nonzero(mask_b))
    if total == 0:
        return 1.0
    overlap = int(np.count_nonzero(mask_a & mask_b))
    return 2.0 * overlap / total

"""
Анализ неопределенности по стохастическим проходам (MC dropout)
"""
import logging
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from .exceptions import GeometryError, UncertaintyError
from .volume import Volume3, VolumeKind, threshold

logger = logging.getLogger(__name__)

PASS_KINDS = (VolumeKind.PROBABILITY, VolumeKind.MASK)


@dataclass(frozen=True, eq=False)
class PassStack:
    """Упорядоченный набор T стохастических проходов одной геометрии"""
    passes: tuple

    def __post_init__(self):
        passes = tuple(self.passes)
        if not passes:
            raise UncertaintyError("Пустой набор проходов")
        first = passes[0]
        for index, volume in enumerate(passes):
            if volume.kind not in PASS_KINDS:
                raise UncertaintyError(
                    f"Проход {index} имеет тип {volume.kind.value}, ожидался probability или mask"
                )
            if not first.same_geometry(volume):
                raise GeometryError(
                    f"Проход {index}: геометрия {volume.dims}/{volume.spacing} "
                    f"не совпадает с {first.dims}/{first.spacing}"
                )
        object.__setattr__(self, "passes", passes)

    @classmethod
    def from_volumes(cls, volumes: Sequence[Volume3]) -> "PassStack":
        """Создать набор из списка объемов"""
        return cls(passes=tuple(volumes))

    @property
    def T(self) -> int:
        return len(self.passes)

    @property
    def reference(self) -> Volume3:
        return self.passes[0]


@dataclass(frozen=True, eq=False)
class UncertaintyMaps:
    """Ожидание, энтропия и маска неопределенности"""
    expectation: Volume3
    entropy: Volume3
    uncertain_mask: Volume3
    tau: float

    def to_dict(self) -> Dict:
        """Сводка для отчета"""
        return {
            "tau": self.tau,
            "uncertain_voxels": self.uncertain_mask.count(),
            "entropy_max": float(self.entropy.data.max()),
            "entropy_mean": float(self.entropy.data.mean()),
        }


def expectation(stack: PassStack) -> Volume3:
    """
    Ожидание модели: среднее T проходов по каждому вокселю

    Args:
        stack: Набор проходов

    Returns:
        Объем вероятностей
    """
    values = np.stack([volume.data for volume in stack.passes], axis=0)
    # Сортировка по оси проходов делает сумму побитово независимой от их порядка
    values.sort(axis=0)
    mean = values.sum(axis=0) / stack.T
    # Единогласные воксели берутся как есть, без ошибки округления суммы
    agreed = values[0] == values[-1]
    mean[agreed] = values[0][agreed]
    np.clip(mean, 0.0, 1.0, out=mean)
    return stack.reference.like(mean, VolumeKind.PROBABILITY)


def _entropy_bits(p: np.ndarray) -> np.ndarray:
    """Двоичная энтропия (основание 2) с 0·log 0 = 0"""
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    inside = (p > 0.0) & (p < 1.0)
    h = np.zeros_like(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = -(p * np.log2(p) + q * np.log2(q))
    h[inside] = terms[inside]
    return np.minimum(h, 1.0)


def binary_entropy(p: float) -> float:
    """
    Энтропия бинарного распределения (p, 1-p) в битах

    Args:
        p: Вероятность переднего плана в [0, 1]

    Returns:
        H(p) в [0, 1]
    """
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Вероятность вне [0, 1]: {p}")
    return float(_entropy_bits(np.array(p)))


def entropy_map(expectation_volume: Volume3) -> Volume3:
    """Поэлементная двоичная энтропия объема ожидания"""
    if expectation_volume.kind is not VolumeKind.PROBABILITY:
        raise UncertaintyError(
            f"Энтропия считается по объему вероятностей, получено {expectation_volume.kind.value}"
        )
    return expectation_volume.like(_entropy_bits(expectation_volume.data), VolumeKind.ENTROPY)


def uncertain_mask(entropy: Volume3, tau: float) -> Volume3:
    """Маска неопределенных вокселей: энтропия строго больше tau"""
    return threshold(entropy, tau)


def compute_uncertainty_maps(stack: PassStack, tau: float) -> UncertaintyMaps:
    """
    Полный анализ неопределенности за один вызов

    Args:
        stack: Набор проходов
        tau: Порог неопределенности

    Returns:
        UncertaintyMaps
    """
    expected = expectation(stack)
    entropy = entropy_map(expected)
    mask = uncertain_mask(entropy, tau)
    logger.info(
        f"Анализ неопределенности: T={stack.T}, tau={tau}, "
        f"неопределенных вокселей {mask.count()} из {mask.data.size}"
    )
    return UncertaintyMaps(expectation=expected, entropy=entropy, uncertain_mask=mask, tau=float(tau))


def with_tau(maps: UncertaintyMaps, tau: float) -> UncertaintyMaps:
    """Пересчитать только маску для другого порога (ожидание и энтропия переиспользуются)"""
    return UncertaintyMaps(
        expectation=maps.expectation,
        entropy=maps.entropy,
        uncertain_mask=uncertain_mask(maps.entropy, tau),
        tau=float(tau),
    )


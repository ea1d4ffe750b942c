"""
Синтетические фантомы для проверки уточнения без клинических данных
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .uncertainty import PassStack
from .volume import FACE_STRUCTURE, Volume3, VolumeKind

logger = logging.getLogger(__name__)

MIN_SIZE = 24
DEFAULT_SIZE = (48, 48, 48)


@dataclass(frozen=True)
class PhantomNoise:
    """Параметры шума фантома и имитируемого предсказателя"""
    passes: int = 20
    organ_intensity: float = 0.7
    background_intensity: float = 0.3
    intensity_noise: float = 0.1
    # Доля проходов, голосующих за истину рядом с ошибками предсказания
    confidence: float = 0.68
    # То же на границе органа, где предсказание верно
    boundary_confidence: float = 0.9
    target_dice: float = 0.85
    max_patches: int = 400


@dataclass(frozen=True, eq=False)
class Phantom:
    """Набор данных фантома: V, GT, Y и стохастические проходы"""
    seed: int
    intensity: Volume3
    ground_truth: Volume3
    prediction: Volume3
    passes: PassStack

    def to_dict(self) -> Dict:
        """Сводка фантома"""
        return {
            "seed": self.seed,
            "dims": list(self.intensity.dims),
            "passes": self.passes.T,
            "organ_voxels": self.ground_truth.count(),
            "prediction_voxels": self.prediction.count(),
        }


def _ellipsoid(grid: Tuple[np.ndarray, ...], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    zz, yy, xx = grid
    return (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _organ(rng: np.random.Generator, shape: Tuple[int, int, int]) -> Tuple[np.ndarray, float]:
    """Орган как объединение эллипсоидов; возвращает маску и средний радиус"""
    extent = np.asarray(shape, dtype=np.float64)
    grid = np.indices(shape, dtype=np.float64)
    center = extent / 2.0 + rng.uniform(-2.0, 2.0, size=3)
    radii = extent * rng.uniform(0.18, 0.24, size=3)
    organ = _ellipsoid(grid, center, radii)
    for _ in range(int(rng.integers(1, 3))):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        lobe_center = center + direction * radii * 0.6
        lobe_radii = radii * rng.uniform(0.5, 0.7, size=3)
        organ |= _ellipsoid(grid, lobe_center, lobe_radii)
    return organ, float(radii.mean())


def _sphere(shape: Tuple[int, int, int], center: np.ndarray, radius: float) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    distance = sum((axis - c) ** 2 for axis, c in zip(grid, center))
    return distance <= radius ** 2


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * int((a & b).sum()) / total


def _random_point(rng: np.random.Generator, region: np.ndarray) -> np.ndarray:
    points = np.argwhere(region)
    return points[int(rng.integers(0, len(points)))].astype(np.float64)


def _corrupt(
    rng: np.random.Generator,
    organ: np.ndarray,
    radius: float,
    noise: PhantomNoise,
) -> np.ndarray:
    """Предсказание с ложноположительным пятном, вырезом и заплатками на границе"""
    shape = organ.shape
    outer_band = ndimage.binary_dilation(organ, FACE_STRUCTURE, iterations=2) & ~organ
    inner_band = organ & ~ndimage.binary_erosion(organ, FACE_STRUCTURE, iterations=2)
    blob_radius = max(2.0, 0.3 * radius)
    patch_radius = max(2.0, 0.25 * radius)

    prediction = organ.copy()
    blob = _sphere(shape, _random_point(rng, outer_band), blob_radius)
    prediction |= blob & ~organ
    notch = _sphere(shape, _random_point(rng, inner_band), blob_radius)
    prediction &= ~(notch & organ)

    for _ in range(noise.max_patches):
        if _dice(prediction, organ) <= noise.target_dice:
            break
        if rng.random() < 0.5:
            patch = _sphere(shape, _random_point(rng, outer_band), patch_radius)
            prediction |= patch & outer_band
        else:
            patch = _sphere(shape, _random_point(rng, inner_band), patch_radius)
            prediction &= ~(patch & inner_band)
    return prediction


def synth_phantom(
    seed: int,
    size: Sequence[int] = DEFAULT_SIZE,
    noise: Optional[PhantomNoise] = None,
) -> Phantom:
    """
    Сгенерировать фантом органа с имитацией стохастического предсказателя

    Предсказание Y портится у границы (заплатки дилатации/эрозии, ложное
    пятно, вырез) до целевого Dice. Проходы согласны с истиной всюду, кроме
    окрестности ошибок и границы органа, поэтому энтропия сосредоточена
    там, где ошибается Y.

    Args:
        seed: Seed генератора
        size: Размеры (nx, ny, nz), каждый не меньше 24
        noise: Параметры шума

    Returns:
        Phantom
    """
    noise = noise or PhantomNoise()
    nx, ny, nz = (int(s) for s in size)
    if min(nx, ny, nz) < MIN_SIZE:
        raise ValueError(f"Размер фантома должен быть не меньше {MIN_SIZE}³, получено {tuple(size)}")
    if noise.passes < 1:
        raise ValueError(f"Число проходов должно быть >= 1, получено {noise.passes}")
    shape = (nz, ny, nx)
    rng = np.random.default_rng(seed)

    organ, radius = _organ(rng, shape)
    clean = np.where(organ, noise.organ_intensity, noise.background_intensity)
    intensity = ndimage.gaussian_filter(clean, sigma=0.7) + rng.normal(0.0, noise.intensity_noise, size=shape)

    prediction = _corrupt(rng, organ, radius, noise)
    errors = prediction != organ

    agreement = np.ones(shape)
    boundary = (
        ndimage.binary_dilation(organ, FACE_STRUCTURE)
        & ~ndimage.binary_erosion(organ, FACE_STRUCTURE)
    )
    agreement[boundary] = noise.boundary_confidence
    agreement[ndimage.binary_dilation(errors, FACE_STRUCTURE)] = noise.confidence

    truth = organ.astype(np.float64)
    passes = []
    for _ in range(noise.passes):
        votes_truth = rng.random(shape) < agreement
        passes.append(Volume3.from_array(np.where(votes_truth, truth, 1.0 - truth), VolumeKind.MASK))

    phantom = Phantom(
        seed=int(seed),
        intensity=Volume3.from_array(intensity, VolumeKind.INTENSITY),
        ground_truth=Volume3.from_array(truth, VolumeKind.MASK),
        prediction=Volume3.from_array(prediction.astype(np.float64), VolumeKind.MASK),
        passes=PassStack.from_volumes(passes),
    )
    logger.info(
        f"Фантом seed={seed}: орган {phantom.ground_truth.count()} вокселей, "
        f"ошибок предсказания {int(errors.sum())}, Dice(Y, GT)={_dice(prediction, organ):.4f}"
    )
    return phantom

"""
Двухслойная GCN: прямой и обратный проход, Adam, полу-контролируемое обучение
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from .exceptions import TrainingError
from .graph_builder import VoxelGraph

logger = logging.getLogger(__name__)

INPUT_FEATURES = 3
HIDDEN_UNITS = 32
PRED_EPS = 1e-7
PARAM_NAMES = ("W1", "b1", "W2", "b2")
CHECKPOINT_DTYPE = np.dtype("<f4")


class TrainConfig(BaseModel):
    """Параметры обучения GCN"""
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(200, ge=1)
    learning_rate: float = Field(1e-2, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    init_seed: int = 0
    hidden_units: int = Field(HIDDEN_UNITS, ge=1)
    log_every: int = Field(50, ge=0)


@dataclass(eq=False)
class GcnParams:
    """Веса и смещения двухслойной GCN"""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = np.array(getattr(self, name), dtype=np.float64)
            if not np.isfinite(value).all():
                raise TrainingError(f"Параметр {name} содержит нечисловые значения")
            setattr(self, name, value)
        if self.W1.shape[1] != self.b1.shape[0] or self.W2.shape != (self.b1.shape[0], 1):
            raise TrainingError(
                f"Несогласованные формы: W1 {self.W1.shape}, b1 {self.b1.shape}, W2 {self.W2.shape}"
            )

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GcnParams":
        return GcnParams(**{name: value.copy() for name, value in self.as_dict().items()})

    def shapes(self) -> Dict[str, List[int]]:
        return {name: list(value.shape) for name, value in self.as_dict().items()}


@dataclass(eq=False)
class ForwardCache:
    """Промежуточные значения прямого прохода для обратного"""
    ax: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    ah: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray


@dataclass(eq=False)
class TrainResult:
    """Результат обучения"""
    params: GcnParams
    loss_curve: List[float] = field(default_factory=list)
    final_loss: float = float("nan")
    steps: int = 0


def init_params(seed: int, in_features: int = INPUT_FEATURES, hidden: int = HIDDEN_UNITS) -> GcnParams:
    """
    Инициализация Glorot-uniform, нулевые смещения

    Args:
        seed: Seed генератора
        in_features: Число входных признаков
        hidden: Ширина скрытого слоя

    Returns:
        GcnParams
    """
    rng = np.random.default_rng(seed)
    bound1 = np.sqrt(6.0 / (in_features + hidden))
    bound2 = np.sqrt(6.0 / (hidden + 1))
    return GcnParams(
        W1=rng.uniform(-bound1, bound1, size=(in_features, hidden)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-bound2, bound2, size=(hidden, 1)),
        b2=np.zeros(1),
    )


def forward_with_cache(graph: VoxelGraph, params: GcnParams, ax: Optional[np.ndarray] = None) -> ForwardCache:
    """Прямой проход с сохранением промежуточных значений"""
    if ax is None:
        features = graph.features
        if not np.isfinite(features).all():
            raise TrainingError("Признаки узлов содержат NaN")
        ax = graph.norm_adj @ features
    z1 = ax @ params.W1 + params.b1
    h1 = np.maximum(z1, 0.0)
    ah = graph.norm_adj @ h1
    logits = (ah @ params.W2).ravel() + params.b2[0]
    return ForwardCache(ax=ax, z1=z1, h1=h1, ah=ah, logits=logits, probabilities=expit(logits))


def forward(graph: VoxelGraph, params: GcnParams) -> np.ndarray:
    """
    Вероятности переднего плана для всех узлов

    H1 = relu(Â X W1 + b1), z = Â H1 W2 + b2, p = sigmoid(z)
    """
    return forward_with_cache(graph, params).probabilities


def masked_bce_loss(pred: np.ndarray, labels: np.ndarray, labeled_mask: np.ndarray) -> float:
    """
    Бинарная кросс-энтропия, усредненная по размеченным узлам

    Args:
        pred: Вероятности узлов
        labels: Метки (значения в неразмеченных узлах игнорируются)
        labeled_mask: Булева маска размеченных узлов

    Returns:
        Значение потерь (натуральный логарифм)
    """
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    if not labeled_mask.any():
        raise TrainingError("Нет размеченных узлов для вычисления потерь")
    p = np.clip(np.asarray(pred, dtype=np.float64)[labeled_mask], PRED_EPS, 1.0 - PRED_EPS)
    y = np.asarray(labels, dtype=np.float64)[labeled_mask]
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def backward(
    graph: VoxelGraph,
    params: GcnParams,
    cache: ForwardCache,
    labels: np.ndarray,
    labeled_mask: np.ndarray,
) -> GcnParams:
    """
    Аналитические градиенты masked_bce_loss по всем параметрам

    Неразмеченные узлы дают нулевой вклад; там, где предсказание
    обрезано ограничением, производная потерь равна нулю.

    Returns:
        Градиенты в виде GcnParams тех же форм
    """
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    count = int(np.count_nonzero(labeled_mask))
    if count == 0:
        raise TrainingError("Нет размеченных узлов для вычисления градиентов")

    p = cache.probabilities
    active = labeled_mask & (p > PRED_EPS) & (p < 1.0 - PRED_EPS)
    targets = np.where(labeled_mask, np.asarray(labels, dtype=np.float64), 0.0)
    d_logits = np.zeros_like(p)
    d_logits[active] = (p[active] - targets[active]) / count

    grad_W2 = cache.ah.T @ d_logits[:, None]
    grad_b2 = np.array([d_logits.sum()])
    d_ah = d_logits[:, None] @ params.W2.T
    d_h1 = graph.norm_adj.T @ d_ah
    d_z1 = d_h1 * (cache.z1 > 0.0)
    grad_W1 = cache.ax.T @ d_z1
    grad_b1 = d_z1.sum(axis=0)
    return GcnParams(W1=grad_W1, b1=grad_b1, W2=grad_W2, b2=grad_b2)


class AdamOptimizer:
    """Оптимизатор Adam с коррекцией смещения моментов"""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        """
        Инициализация оптимизатора

        Args:
            learning_rate: Шаг обучения
            beta1: Коэффициент первого момента
            beta2: Коэффициент второго момента
            eps: Стабилизатор знаменателя
        """
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: GcnParams, grads: GcnParams) -> GcnParams:
        """Один шаг обновления (параметры меняются на месте)"""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name in PARAM_NAMES:
            grad = getattr(grads, name)
            m = self._m.get(name, np.zeros_like(grad))
            v = self._v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self._m[name] = m
            self._v[name] = v
            m_hat = m / correction1
            v_hat = v / correction2
            value = getattr(params, name)
            value -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def train(graph: VoxelGraph, config: TrainConfig) -> TrainResult:
    """
    Полнопакетное обучение Adam на размеченных узлах

    Args:
        graph: Граф с нормированной смежностью
        config: Параметры обучения

    Returns:
        TrainResult с итоговыми параметрами и кривой потерь
    """
    labels = graph.labels
    labeled_mask = graph.labeled_mask
    if not labeled_mask.any():
        raise TrainingError("В графе нет размеченных узлов, обучение невозможно")

    params = init_params(config.init_seed, in_features=graph.features.shape[1], hidden=config.hidden_units)
    optimizer = AdamOptimizer(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    if not np.isfinite(graph.features).all():
        raise TrainingError("Признаки узлов содержат NaN")
    ax = graph.norm_adj @ graph.features

    losses: List[float] = []
    for epoch in range(config.epochs):
        cache = forward_with_cache(graph, params, ax=ax)
        loss = masked_bce_loss(cache.probabilities, labels, labeled_mask)
        if not np.isfinite(loss):
            raise TrainingError(f"Расхождение обучения на эпохе {epoch}: loss={loss}")
        losses.append(loss)
        if config.log_every and epoch % config.log_every == 0:
            logger.debug(f"Эпоха {epoch}: loss={loss:.6f}")
        grads = backward(graph, params, cache, labels, labeled_mask)
        optimizer.step(params, grads)
        if not all(np.isfinite(value).all() for value in params.as_dict().values()):
            raise TrainingError(f"Параметры стали нечисловыми на эпохе {epoch}")

    final_cache = forward_with_cache(graph, params, ax=ax)
    final_loss = masked_bce_loss(final_cache.probabilities, labels, labeled_mask)
    logger.info(
        f"Обучение завершено: эпох {config.epochs}, loss {losses[0]:.4f} -> {final_loss:.4f}"
    )
    return TrainResult(params=params, loss_curve=losses, final_loss=final_loss, steps=optimizer.t)


def predict(graph: VoxelGraph, params: GcnParams, cut: float = 0.5) -> np.ndarray:
    """Бинарные метки узлов: 1 там, где вероятность строго больше cut"""
    return (forward(graph, params) > cut).astype(np.int64)


def save_checkpoint(
    params: GcnParams,
    path: Union[str, Path],
    seed: int,
    epoch: int,
) -> Path:
    """
    Сохранить параметры: заголовок JSON + float32 little-endian в .raw

    Returns:
        Путь к заголовку
    """
    header_path = Path(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shapes": params.shapes(),
        "order": list(PARAM_NAMES),
        "dtype": "f32",
        "seed": int(seed),
        "epoch": int(epoch),
    }
    payload = np.concatenate([value.ravel() for value in params.as_dict().values()])
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
    header_path.with_suffix(".raw").write_bytes(payload.astype(CHECKPOINT_DTYPE).tobytes())
    logger.info(f"Чекпоинт сохранен в {header_path}")
    return header_path


def load_checkpoint(path: Union[str, Path]) -> Tuple[GcnParams, Dict]:
    """
    Загрузить параметры из чекпоинта

    Returns:
        Кортеж (параметры, заголовок)
    """
    header_path = Path(path)
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
        raw = header_path.with_suffix(".raw").read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise TrainingError(f"Не удалось прочитать чекпоинт {header_path}: {e}") from e

    payload = np.frombuffer(raw, dtype=CHECKPOINT_DTYPE).astype(np.float64)
    shapes = header["shapes"]
    expected = sum(int(np.prod(shapes[name])) for name in PARAM_NAMES)
    if payload.size != expected:
        raise TrainingError(f"Размер чекпоинта {payload.size} не совпадает с заголовком ({expected})")

    values = {}
    offset = 0
    for name in PARAM_NAMES:
        size = int(np.prod(shapes[name]))
        values[name] = payload[offset:offset + size].reshape(shapes[name])
        offset += size
    return GcnParams(**values), header


def save_loss_curve(losses: List[float], path: Union[str, Path]) -> Path:
    """Кривая потерь в CSV с колонками epoch,loss"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"epoch": np.arange(len(losses)), "loss": losses}).to_csv(path, index=False)
    return path
